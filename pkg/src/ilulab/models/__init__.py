"""Toy model families with explicit forward/backward passes and checkpoints."""
import numpy as np

from ..errors import ArgumentError
from ..numcore import RngStream
from .checkpoint import MAGIC, VERSION, load_checkpoint, save_checkpoint
from .config import ModelConfig, layout, tinylm_param_count
from .networks import Tape, _GradBuffer
from .params import ParameterVector, flatten, unflatten

__all__ = [
    "MAGIC", "VERSION", "ModelConfig", "ParameterVector", "Tape", "GradAccumulator",
    "backward", "flatten", "forward", "init_model", "layout", "load_checkpoint",
    "save_checkpoint", "tinylm_param_count", "unflatten",
]

GradAccumulator = _GradBuffer


def init_model(config: ModelConfig, rng: RngStream) -> ParameterVector:
    """Scaled-uniform initialisation, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.

    Embedding tables have fan-in 1 (a one-hot lookup); layer-norm gains start
    at one and layer-norm shifts at zero.
    """
    if not isinstance(config, ModelConfig):
        raise ArgumentError("init_model needs a ModelConfig")
    gen = rng.generator()
    tensors = {}
    fan_in = {}
    for name, shape in layout(config):
        if name.endswith(".w") or name.split(".")[-1] in ("wq", "wk", "wv", "wo", "w1", "w2"):
            fan_in[name] = shape[0]
    for name, shape in layout(config):
        leaf = name.split(".")[-1]
        if name in ("tok_emb", "pos_emb"):
            bound = 1.0
        elif leaf == "g":
            tensors[name] = np.ones(shape)
            continue
        elif name.endswith(("ln1.b", "ln2.b", "ln_f.b")):
            tensors[name] = np.zeros(shape)
            continue
        elif name in fan_in:
            bound = 1.0 / np.sqrt(fan_in[name])
        else:
            # bias: same bound as its weight matrix
            stem = name[:-len(leaf)] + "w" + leaf[1:]
            bound = 1.0 / np.sqrt(fan_in[stem])
        tensors[name] = gen.uniform(-bound, bound, size=shape)
    return ParameterVector.from_tensors(config, tensors)


def forward(params: ParameterVector, batch, want_trace=False):
    """Return ``(logits, trace)``; ``trace`` is ``None`` unless requested."""
    tape = Tape(params, batch, want_trace=want_trace)
    return tape.logits, (tape.trace if want_trace else None)


def backward(params: ParameterVector, batch, logit_grad, trace_grad=None) -> ParameterVector:
    """Exact gradient of ``<logit_grad, logits> + sum_l <trace_grad[l], h_l>``."""
    tape = Tape(params, batch, want_trace=bool(trace_grad))
    return tape.backward(logit_grad, trace_grad)
