"""Replayable random streams.

All randomness flows through :class:`RngStream`, a thin wrapper over numpy's
Philox4x64 counter-based generator. A stream is keyed by ``(seed, name)`` so that
independent consumers (weight init, dropout, masking, shuffling) draw from
non-overlapping sequences without sharing a counter.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


class RngStream:
    def __init__(self, seed: int, name: str = ""):
        self.seed = int(seed) & _MASK64
        self.name = name
        key = (zlib.crc32(name.encode("utf-8")) << 64) | self.seed
        self._gen = np.random.Generator(np.random.Philox(key=key))
        self.draw_count = 0

    def child(self, name: str) -> "RngStream":
        """An independent stream with the same seed and a derived name."""
        return RngStream(self.seed, f"{self.name}/{name}")

    def _count(self, size) -> None:
        self.draw_count += int(np.prod(size)) if size is not None else 1

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        self._count(shape)
        return self._gen.standard_normal(shape) * std

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        self._count(shape)
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, size=None):
        self._count(size)
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        self._count(n)
        return self._gen.permutation(n)

    def bernoulli(self, p: float, shape) -> np.ndarray:
        return self.uniform(shape) < p

    def state(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "name": self.name,
            "draw_count": self.draw_count,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.name = state["name"]
        self.draw_count = int(state["draw_count"])
        self._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        rng = cls(state["seed"], state["name"])
        rng.set_state(state)
        return rng
