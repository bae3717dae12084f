"""Reference numpy implementations of the hot row kernels.

Used when the compiled ``_ckernels`` module is unavailable, and as the
comparison point in tests and benchmarks.
"""
import numpy as np


def ce_rows(z, y, penalty=False):
    """Fused softmax cross-entropy over rows of ``z``.

    Returns ``(nll, dz, gw, dgw)`` where ``nll[i]`` is the row loss,
    ``dz[i] = softmax(z[i]) - onehot(y[i])``, ``gw[i] = <dz[i], z[i]>`` and
    ``dgw[i]`` is the derivative of ``gw[i]`` with respect to ``z[i]``.
    ``gw`` and ``dgw`` are ``None`` unless ``penalty`` is set.
    """
    n = z.shape[0]
    rows = np.arange(n)
    top = np.argmax(z, axis=1)
    zmax = z[rows, top]
    e = np.exp(z - zmax[:, None])
    # the max entry contributes exactly 1; log1p keeps saturated rows exact
    e_noself = e.copy()
    e_noself[rows, top] = 0.0
    tail = e_noself.sum(axis=1)
    lse = zmax + np.log1p(tail)
    nll = lse - z[rows, y]
    p = e / (1.0 + tail)[:, None]
    dz = p.copy()
    dz[rows, y] -= 1.0
    if not penalty:
        return nll, dz, None, None
    gw = np.einsum("ij,ij->i", dz, z)
    pz = np.einsum("ij,ij->i", p, z)
    dgw = dz + p * (z - pz[:, None])
    return nll, dz, gw, dgw


def causal_softmax(s):
    """Row softmax over the last axis of ``s[..., T, T]`` with a causal mask.

    Entries above the diagonal are exactly zero in the output.
    """
    t = s.shape[-1]
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    s = np.where(mask, -np.inf, s)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def causal_softmax_backward(att, datt):
    """Gradient through :func:`causal_softmax` given its output ``att``."""
    inner = np.sum(att * datt, axis=-1, keepdims=True)
    return att * (datt - inner)


_GELU_K = 0.7978845608028654  # sqrt(2 / pi)


def gelu(u):
    """Tanh-approximate GELU; returns ``(out, tanh_term)`` for the backward pass."""
    t = np.tanh(_GELU_K * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def gelu_backward(dout, u, t):
    dinner = _GELU_K * (1.0 + 0.134145 * (u * u))
    return dout * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner)
