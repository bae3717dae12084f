"""Forward and reverse passes for the two toy model families.

A :class:`Tape` records one forward pass and can replay it backwards for any
combination of logit gradient and per-layer hidden-state gradients.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import ArgumentError
from ..numcore import kernels
from .config import layout
from .params import ParameterVector

LN_EPS = 1e-5


class _GradBuffer:
    """Writable flat gradient buffer with the same named views as the params."""

    def __init__(self, config):
        specs = layout(config)
        total = sum(int(np.prod(s)) for _, s in specs)
        self.config = config
        self.flat = np.zeros(total, dtype=np.float64)
        self.views = {}
        off = 0
        for name, shape in specs:
            n = int(np.prod(shape))
            self.views[name] = self.flat[off:off + n].reshape(shape)
            off += n

    def __getitem__(self, name):
        return self.views[name]

    def result(self) -> ParameterVector:
        return ParameterVector(self.config, self.flat)


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, g, cache):
    xhat, rstd = cache
    dxhat = dy * g
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _mm_w(x, dy):
    """Weight gradient for ``y = x @ w`` over all leading axes."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


class Tape:
    """A recorded forward pass.

    ``logits`` is ``None`` when the pass was truncated with ``upto``;
    ``trace`` maps traced layer indices to hidden-state arrays.
    """

    def __init__(self, params, batch, want_trace=False, upto=None):
        self.params = params
        self.config = params.config
        self.upto = upto
        self.logits = None
        self.trace = {}
        if self.config.family == "mlp":
            self._forward_mlp(batch, want_trace)
        else:
            self._forward_lm(batch, want_trace)

    # -- mlp ---------------------------------------------------------------
    def _forward_mlp(self, x, want_trace):
        cfg, p = self.config, self.params
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise ArgumentError(
                f"mlp expects inputs of shape (batch, {cfg.input_dim}), got {x.shape}")
        self.inputs = x
        acts = [x]
        h = x
        last = cfg.layers if self.upto is None else self.upto + 1
        for i in range(last):
            h = np.tanh(h @ p[f"fc{i}.w"] + p[f"fc{i}.b"])
            acts.append(h)
            if want_trace or self.upto is not None:
                self.trace[i] = h
        self.acts = acts
        if self.upto is None:
            self.logits = h @ p["out.w"] + p["out.b"]

    def _backward_mlp(self, logit_grad, trace_grad, grads):
        cfg, p = self.config, self.params
        acts = self.acts
        n_hidden = len(acts) - 1
        dh = None
        if logit_grad is not None:
            grads["out.w"][...] += _mm_w(acts[-1], logit_grad)
            grads["out.b"][...] += logit_grad.sum(axis=0)
            if n_hidden:
                dh = logit_grad @ p["out.w"].T
        for i in range(n_hidden - 1, -1, -1):
            if i in trace_grad:
                tg = trace_grad[i]
                dh = tg if dh is None else dh + tg
            if dh is None:
                continue
            du = dh * (1.0 - acts[i + 1] ** 2)
            grads[f"fc{i}.w"][...] += _mm_w(acts[i], du)
            grads[f"fc{i}.b"][...] += du.sum(axis=0)
            dh = du @ p[f"fc{i}.w"].T if i else None

    # -- tinylm ------------------------------------------------------------
    def _forward_lm(self, tokens, want_trace):
        cfg, p = self.config, self.params
        x = np.asarray(tokens)
        if x.ndim != 2 or not np.issubdtype(x.dtype, np.integer):
            raise ArgumentError(f"tinylm expects integer tokens (batch, time), got {x.shape}")
        b, t = x.shape
        if t < 1 or t > cfg.context:
            raise ArgumentError(f"sequence length {t} outside [1, {cfg.context}]")
        if x.size and (x.min() < 0 or x.max() >= cfg.vocab):
            raise ArgumentError(f"token ids must lie in [0, {cfg.vocab})")
        self.tokens = x
        d, nh = cfg.hidden, cfg.heads
        dh = d // nh
        scale = 1.0 / math.sqrt(dh)
        h = p["tok_emb"][x] + p["pos_emb"][:t]
        self.caches = []
        last = cfg.layers if self.upto is None else self.upto + 1
        for i in range(last):
            pre = f"blocks.{i}."
            c = {"h_in": h}
            a, c["ln1"] = _layernorm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
            c["a"] = a
            q = (a @ p[pre + "attn.wq"] + p[pre + "attn.bq"]).reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
            k = (a @ p[pre + "attn.wk"] + p[pre + "attn.bk"]).reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
            v = (a @ p[pre + "attn.wv"] + p[pre + "attn.bv"]).reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
            att = kernels.causal_softmax(q @ k.transpose(0, 1, 3, 2) * scale)
            o = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
            c.update(q=q, k=k, v=v, att=att, o=o)
            h = h + o @ p[pre + "attn.wo"] + p[pre + "attn.bo"]
            c["h_mid"] = h
            m, c["ln2"] = _layernorm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
            c["m"] = m
            u = m @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]
            act, tanh_u = kernels.gelu(u)
            c.update(u=u, tanh_u=tanh_u, act=act)
            h = h + act @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]
            self.caches.append(c)
            if want_trace or self.upto is not None:
                self.trace[i] = h
        self.h_out = h
        if self.upto is None:
            hf, self.lnf = _layernorm(h, p["ln_f.g"], p["ln_f.b"])
            self.hf = hf
            self.logits = hf @ p["unembed.w"] + p["unembed.b"]

    def _backward_lm(self, logit_grad, trace_grad, grads):
        cfg, p = self.config, self.params
        b, t = self.tokens.shape
        d, nh = cfg.hidden, cfg.heads
        dhd = d // nh
        scale = 1.0 / math.sqrt(dhd)
        dh = None
        if logit_grad is not None:
            grads["unembed.w"][...] += _mm_w(self.hf, logit_grad)
            grads["unembed.b"][...] += logit_grad.reshape(-1, cfg.vocab).sum(axis=0)
            dhf = logit_grad @ p["unembed.w"].T
            dh, dg, db = _layernorm_back(dhf, p["ln_f.g"], self.lnf)
            grads["ln_f.g"][...] += dg
            grads["ln_f.b"][...] += db
        for i in range(len(self.caches) - 1, -1, -1):
            if i in trace_grad:
                dh = trace_grad[i] if dh is None else dh + trace_grad[i]
            if dh is None:
                continue
            pre = f"blocks.{i}."
            c = self.caches[i]
            # mlp sublayer
            grads[pre + "mlp.w2"][...] += _mm_w(c["act"], dh)
            grads[pre + "mlp.b2"][...] += dh.reshape(-1, d).sum(axis=0)
            dact = dh @ p[pre + "mlp.w2"].T
            du = kernels.gelu_backward(dact, c["u"], c["tanh_u"])
            grads[pre + "mlp.w1"][...] += _mm_w(c["m"], du)
            grads[pre + "mlp.b1"][...] += du.reshape(-1, du.shape[-1]).sum(axis=0)
            dm = du @ p[pre + "mlp.w1"].T
            dx, dg, db = _layernorm_back(dm, p[pre + "ln2.g"], c["ln2"])
            grads[pre + "ln2.g"][...] += dg
            grads[pre + "ln2.b"][...] += db
            dh = dh + dx
            # attention sublayer
            grads[pre + "attn.wo"][...] += _mm_w(c["o"], dh)
            grads[pre + "attn.bo"][...] += dh.reshape(-1, d).sum(axis=0)
            do = (dh @ p[pre + "attn.wo"].T).reshape(b, t, nh, dhd).transpose(0, 2, 1, 3)
            datt = do @ c["v"].transpose(0, 1, 3, 2)
            dv = c["att"].transpose(0, 1, 3, 2) @ do
            ds = kernels.causal_softmax_backward(c["att"], datt) * scale
            dq = ds @ c["k"]
            dk = ds.transpose(0, 1, 3, 2) @ c["q"]
            da = np.zeros((b, t, d))
            for name, g in (("q", dq), ("k", dk), ("v", dv)):
                g = g.transpose(0, 2, 1, 3).reshape(b, t, d)
                grads[pre + f"attn.w{name}"][...] += _mm_w(c["a"], g)
                grads[pre + f"attn.b{name}"][...] += g.reshape(-1, d).sum(axis=0)
                da += g @ p[pre + f"attn.w{name}"].T
            dx, dg, db = _layernorm_back(da, p[pre + "ln1.g"], c["ln1"])
            grads[pre + "ln1.g"][...] += dg
            grads[pre + "ln1.b"][...] += db
            dh = dh + dx
        if dh is not None:
            np.add.at(grads["tok_emb"], self.tokens, dh)
            grads["pos_emb"][:t] += dh.sum(axis=0)

    # -- public ------------------------------------------------------------
    def backward(self, logit_grad=None, trace_grad=None, into=None) -> ParameterVector:
        """Gradient of ``<logit_grad, logits> + sum_l <trace_grad[l], h_l>``.

        ``into`` optionally names a ``_GradBuffer`` to accumulate into, in
        which case ``None`` is returned.
        """
        trace_grad = dict(trace_grad or {})
        n_traceable = len(self.acts) - 1 if self.config.family == "mlp" else len(self.caches)
        for layer, g in trace_grad.items():
            if not 0 <= layer < n_traceable:
                raise ArgumentError(f"trace layer {layer} not available (0..{n_traceable - 1})")
            ref = self.trace.get(layer)
            if ref is None:
                ref = self.acts[layer + 1] if self.config.family == "mlp" else None
            if ref is not None and np.shape(g) != ref.shape:
                raise ArgumentError(f"trace_grad[{layer}] shape {np.shape(g)} != {ref.shape}")
        if logit_grad is not None:
            if self.logits is None:
                raise ArgumentError("tape was truncated; no logits to differentiate")
            logit_grad = np.asarray(logit_grad, dtype=np.float64)
            if logit_grad.shape != self.logits.shape:
                raise ArgumentError(
                    f"logit_grad shape {logit_grad.shape} != logits shape {self.logits.shape}")
        buf = into if into is not None else _GradBuffer(self.config)
        if self.config.family == "mlp":
            self._backward_mlp(logit_grad, trace_grad, buf)
        else:
            self._backward_lm(logit_grad, trace_grad, buf)
        return None if into is not None else buf.result()
