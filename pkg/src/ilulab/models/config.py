"""Model configuration and the canonical parameter layout it implies."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from ..errors import ArgumentError

FAMILIES = ("mlp", "tinylm")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of a toy model.

    ``input_dim`` is the vocabulary size for ``tinylm`` and the feature
    dimension for ``mlp``. For ``mlp``, ``layers`` counts hidden layers, so
    ``layers=0`` is a single linear map.
    """

    family: str
    input_dim: int
    hidden: int
    layers: int
    heads: int = 1
    context: int = 0
    classes: int = 0
    mlp_ratio: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.family not in FAMILIES:
            raise ArgumentError(f"unknown model family {self.family!r}")
        if self.input_dim < 1 or self.hidden < 1:
            raise ArgumentError("input_dim and hidden must be >= 1")
        if self.layers < 0 or (self.family == "tinylm" and self.layers < 1):
            raise ArgumentError(f"invalid layer count {self.layers}")
        if self.family == "tinylm":
            if self.heads < 1 or self.hidden % self.heads:
                raise ArgumentError(
                    f"hidden {self.hidden} not divisible by heads {self.heads}")
            if self.context < 1:
                raise ArgumentError("tinylm needs context >= 1")
            if self.input_dim < 2:
                raise ArgumentError("tinylm needs a vocabulary of at least 2")
            if self.mlp_ratio < 1:
                raise ArgumentError("mlp_ratio must be >= 1")
        else:
            if self.classes < 2:
                raise ArgumentError("mlp needs at least 2 classes")

    @property
    def vocab(self) -> int:
        return self.input_dim

    @property
    def output_dim(self) -> int:
        return self.input_dim if self.family == "tinylm" else self.classes

    @property
    def trace_layers(self) -> int:
        """Number of layers whose hidden state can be traced."""
        return self.layers

    def describe(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_descriptor(cls, text: str) -> "ModelConfig":
        fields = json.loads(text)
        return cls(**fields)


def layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered ``(name, shape)`` pairs for every parameter tensor."""
    if config.family == "mlp":
        out = []
        fan_in = config.input_dim
        for i in range(config.layers):
            out.append((f"fc{i}.w", (fan_in, config.hidden)))
            out.append((f"fc{i}.b", (config.hidden,)))
            fan_in = config.hidden
        out.append(("out.w", (fan_in, config.classes)))
        out.append(("out.b", (config.classes,)))
        return out

    d, v, r = config.hidden, config.vocab, config.mlp_ratio * config.hidden
    out = [("tok_emb", (v, d)), ("pos_emb", (config.context, d))]
    for i in range(config.layers):
        p = f"blocks.{i}."
        out += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "attn.wq", (d, d)), (p + "attn.bq", (d,)),
            (p + "attn.wk", (d, d)), (p + "attn.bk", (d,)),
            (p + "attn.wv", (d, d)), (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)), (p + "attn.bo", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "mlp.w1", (d, r)), (p + "mlp.b1", (r,)),
            (p + "mlp.w2", (r, d)), (p + "mlp.b2", (d,)),
        ]
    out += [("ln_f.g", (d,)), ("ln_f.b", (d,)),
            ("unembed.w", (d, v)), ("unembed.b", (v,))]
    return out


def tinylm_param_count(vocab, hidden, layers, context, mlp_ratio=4):
    """Closed-form parameter count of the tinylm architecture."""
    d, r = hidden, mlp_ratio * hidden
    per_block = 4 * d + 4 * (d * d + d) + (d * r + r) + (r * d + d)
    return vocab * d + context * d + layers * per_block + 2 * d + d * vocab + vocab
