"""Counter-based random streams keyed by ``(seed, stream)``.

Backed by numpy's Philox generator, whose output depends only on the key and
counter, so a stream is reproducible across platforms and runs.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id(name: str) -> int:
    """Stable 64-bit stream id derived from a label such as ``"init"``."""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream: int = 0

    def __post_init__(self):
        if isinstance(self.stream, str):
            object.__setattr__(self, "stream", stream_id(self.stream))
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)
        object.__setattr__(self, "stream", int(self.stream) & _MASK64)

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        return np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def child(self, label) -> "RngStream":
        """Derive an independent stream, e.g. ``rng.child("relearn")``."""
        sub = stream_id(label) if isinstance(label, str) else int(label)
        mixed = stream_id(f"{self.stream}:{sub}")
        return RngStream(self.seed, mixed)
