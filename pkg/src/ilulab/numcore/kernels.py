"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
reference kernels are used. Set ``ILU_KERNELS=python`` to force the numpy
path (e.g. to compare backends).
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("ILU_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

ce_rows = _impl.ce_rows
causal_softmax = _impl.causal_softmax
causal_softmax_backward = _impl.causal_softmax_backward
gelu = _impl.gelu
gelu_backward = _impl.gelu_backward
