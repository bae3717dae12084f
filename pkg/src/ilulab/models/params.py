"""Flat, read-only parameter storage with named views."""
from __future__ import annotations

import numpy as np

from ..errors import ArgumentError
from .config import ModelConfig, layout


class ParameterVector:
    """All parameters of one model in a single float64 buffer.

    Named tensors are views into the buffer, in the canonical order given by
    :func:`~ilulab.models.config.layout`. Instances are values: the buffer is
    read-only and updates build a new instance via :meth:`with_flat`.
    """

    __slots__ = ("config", "_flat", "_views")

    def __init__(self, config: ModelConfig, flat=None):
        specs = layout(config)
        total = sum(int(np.prod(s)) for _, s in specs)
        if flat is None:
            buf = np.zeros(total, dtype=np.float64)
        else:
            buf = np.array(flat, dtype=np.float64).ravel()
            if buf.size != total:
                raise ArgumentError(
                    f"flat vector has {buf.size} entries, config needs {total}")
        buf.flags.writeable = False
        views = {}
        off = 0
        for name, shape in specs:
            n = int(np.prod(shape))
            views[name] = buf[off:off + n].reshape(shape)
            off += n
        self.config = config
        self._flat = buf
        self._views = views

    @classmethod
    def from_tensors(cls, config, tensors: dict) -> "ParameterVector":
        parts = []
        for name, shape in layout(config):
            if name not in tensors:
                raise ArgumentError(f"missing parameter tensor {name!r}")
            t = np.asarray(tensors[name], dtype=np.float64)
            if t.shape != tuple(shape):
                raise ArgumentError(f"{name}: shape {t.shape} != {tuple(shape)}")
            parts.append(t.ravel())
        return cls(config, np.concatenate(parts))

    @property
    def flat(self) -> np.ndarray:
        return self._flat

    @property
    def size(self) -> int:
        return self._flat.size

    def names(self):
        return list(self._views)

    def items(self):
        return self._views.items()

    def __getitem__(self, name):
        return self._views[name]

    def __len__(self):
        return len(self._views)

    def with_flat(self, flat) -> "ParameterVector":
        return ParameterVector(self.config, flat)

    def zeros_like(self) -> "ParameterVector":
        return ParameterVector(self.config)

    def rounded32(self) -> "ParameterVector":
        """The values this vector takes after a float32 checkpoint round trip."""
        return self.with_flat(self._flat.astype(np.float32).astype(np.float64))

    def same_layout(self, other) -> bool:
        return isinstance(other, ParameterVector) and other.config == self.config

    def __add__(self, other):
        return self.with_flat(self._flat + other.flat)

    def __sub__(self, other):
        return self.with_flat(self._flat - other.flat)

    def __mul__(self, scalar):
        return self.with_flat(self._flat * scalar)

    __rmul__ = __mul__

    def __eq__(self, other):
        return (self.same_layout(other)
                and np.array_equal(self._flat, other.flat))

    def __hash__(self):
        return hash((self.config, self._flat.tobytes()))

    def __repr__(self):
        return f"ParameterVector({self.config.family}, {self.size} params)"


def flatten(params: ParameterVector) -> np.ndarray:
    return params.flat.copy()


def unflatten(config: ModelConfig, flat) -> ParameterVector:
    return ParameterVector(config, flat)
