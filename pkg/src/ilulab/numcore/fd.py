"""Central finite differences, the reference oracle for every analytic gradient."""
import numpy as np

from ..errors import ArgumentError, NumericError


def finite_difference_gradient(f, x, h=1e-4):
    """Approximate the gradient of scalar ``f`` at ``x`` coordinate by coordinate.

    Uses ``(f(x + h e_k) - f(x - h e_k)) / 2h``; the error is ``O(h**2)`` for
    smooth ``f``. ``x`` is not modified.
    """
    if not h > 0:
        raise ArgumentError(f"step must be positive, got {h}")
    x = np.array(x, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    probe = x.copy()
    for k in range(x.size):
        probe[k] = x[k] + h
        fp = float(f(probe))
        probe[k] = x[k] - h
        fm = float(f(probe))
        probe[k] = x[k]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value probing coordinate {k}")
        grad[k] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b):
    """``||a - b|| / max(||a||, ||b||)``, zero when both vanish."""
    a = np.ravel(a)
    b = np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
