"""Compare the compiled kernels with the numpy reference implementations.

Run with ``python3 benchmarks/bench_kernels.py``. Each kernel is timed on
inputs shaped like one training step of the default toy model, and the
maximum absolute difference between the two backends is printed next to
the timings.
"""
import argparse
import timeit

import numpy as np

from ilulab.numcore import _pykernels

try:
    from ilulab.numcore import _ckernels
except ImportError:
    _ckernels = None


def cases(rng, batch=32, seq=32, vocab=64, hidden=32, heads=4):
    rows = batch * seq // 2
    z = rng.normal(size=(rows, vocab)) * 3.0
    y = rng.integers(0, vocab, size=rows)
    s = rng.normal(size=(batch, heads, seq, seq))
    att = _pykernels.causal_softmax(s)
    datt = rng.normal(size=att.shape)
    u = rng.normal(size=(batch, seq, 4 * hidden))
    _, t = _pykernels.gelu(u)
    dout = rng.normal(size=u.shape)
    return {
        "ce_rows": lambda k: k.ce_rows(z, y, False),
        "ce_rows+penalty": lambda k: k.ce_rows(z, y, True),
        "causal_softmax": lambda k: k.causal_softmax(s),
        "causal_softmax_backward": lambda k: k.causal_softmax_backward(att, datt),
        "gelu": lambda k: k.gelu(u),
        "gelu_backward": lambda k: k.gelu_backward(dout, u, t),
    }


def max_diff(a, b):
    if isinstance(a, tuple):
        return max((max_diff(x, y) for x, y in zip(a, b) if x is not None), default=0.0)
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26} {'numpy us':>10} {'cython us':>10} {'speedup':>8} {'max |diff|':>11}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=args.repeat, repeat=3))
        t_py = t_py / args.repeat * 1e6
        if _ckernels is None:
            print(f"{name:<26} {t_py:>10.1f} {'n/a':>10} {'':>8} {'':>11}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=args.repeat, repeat=3))
        t_c = t_c / args.repeat * 1e6
        diff = max_diff(fn(_pykernels), fn(_ckernels))
        print(f"{name:<26} {t_py:>10.1f} {t_c:>10.1f} {t_py / t_c:>7.2f}x {diff:>11.2e}")


if __name__ == "__main__":
    main()
