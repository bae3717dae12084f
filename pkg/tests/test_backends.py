"""The compiled kernels and the numpy fallback must agree to rounding error."""
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from ilulab.numcore import _pykernels, kernels

ck = pytest.importorskip("ilulab.numcore._ckernels")


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(2, 9), st.integers(0, 2**32 - 1),
       st.floats(0.1, 60.0))
def test_ce_rows_agree(n, v, seed, scale):
    gen = np.random.default_rng(seed)
    z = np.ascontiguousarray(gen.normal(size=(n, v)) * scale)
    y = gen.integers(0, v, size=n).astype(np.int64)
    for penalty in (False, True):
        ref, got = _pykernels.ce_rows(z, y, penalty), ck.ce_rows(z, y, penalty)
        for a, b in zip(ref, got):
            if a is None:
                assert b is None
            else:
                assert_allclose(np.asarray(b), a, rtol=1e-12, atol=1e-12)


def test_attention_and_gelu_agree():
    gen = np.random.default_rng(3)
    s = gen.normal(size=(2, 3, 7, 7)) * 4
    att_ref, att = _pykernels.causal_softmax(s), np.asarray(ck.causal_softmax(s))
    assert_allclose(att, att_ref, rtol=1e-12, atol=1e-15)
    assert (att[..., np.triu_indices(7, 1)[0], np.triu_indices(7, 1)[1]] == 0).all()
    d = gen.normal(size=s.shape)
    assert_allclose(np.asarray(ck.causal_softmax_backward(att_ref, d)),
                    _pykernels.causal_softmax_backward(att_ref, d), rtol=1e-12, atol=1e-14)
    u = gen.normal(size=(5, 11)) * 3
    (o1, t1), (o2, t2) = _pykernels.gelu(u), ck.gelu(u)
    assert_allclose(np.asarray(o2), o1, rtol=1e-12, atol=1e-14)
    assert_allclose(np.asarray(t2), t1, rtol=1e-12, atol=1e-14)
    g = gen.normal(size=u.shape)
    assert_allclose(np.asarray(ck.gelu_backward(g, u, t1)), _pykernels.gelu_backward(g, u, t1),
                    rtol=1e-12, atol=1e-14)


def test_default_backend_is_compiled():
    assert kernels.BACKEND == "cython"


def test_python_backend_forced_by_environment():
    code = ("from ilulab.numcore import kernels, RngStream\n"
            "from ilulab.models import ModelConfig, init_model\n"
            "from ilulab.metrics import accuracy\n"
            "import numpy as np, sys\n"
            "from ilulab.batches import Batch\n"
            "cfg = ModelConfig('tinylm', 10, 6, 1, heads=2, context=6)\n"
            "p = init_model(cfg, RngStream(0))\n"
            "g = np.random.default_rng(0)\n"
            "b = Batch(g.integers(0, 10, (50, 6)), g.integers(0, 10, (50, 6)))\n"
            "from ilulab.objectives import retain_loss\n"
            "l = retain_loss(p, b)\n"
            "print(kernels.BACKEND, repr(l.value), repr(float(np.abs(l.grad.flat).sum())))\n")
    outs = {}
    for backend in ("python", "auto"):
        env = dict(os.environ, ILU_KERNELS=backend)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                             text=True, check=True)
        name, value, gsum = res.stdout.split()
        outs[name] = (float(value), float(gsum))
    assert set(outs) == {"python", "cython"}
    assert outs["python"][0] == pytest.approx(outs["cython"][0], rel=1e-12)
    assert outs["python"][1] == pytest.approx(outs["cython"][1], rel=1e-12)
