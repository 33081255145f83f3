"""Counter-based random streams keyed by (root seed, label).

Every consumer of randomness (data order, initialization, per-step noise,
evaluation sampling) asks for its own labelled stream, so changing how many
draws one consumer makes never shifts another consumer's sequence.
"""
from __future__ import annotations

import hashlib

import numpy as np
import torch

_MASK64 = (1 << 64) - 1


def _label_words(label: str) -> list[int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 32, 4)]


class RngStream:
    """A Philox stream derived from ``(root_seed, label)``.

    ``numpy`` is the underlying generator; ``torch_generator()`` hands out a
    CPU ``torch.Generator`` seeded from the next draw of this stream.
    """

    def __init__(self, root_seed: int, label: str):
        self.root_seed = int(root_seed) & _MASK64
        self.label = label
        seq = np.random.SeedSequence([self.root_seed & 0xFFFFFFFF, self.root_seed >> 32, *_label_words(label)])
        self.numpy = np.random.Generator(np.random.Philox(seq))

    def torch_generator(self) -> torch.Generator:
        gen = torch.Generator()
        gen.manual_seed(int(self.numpy.integers(0, 2**63 - 1)))
        return gen

    def random(self, size=None):
        return self.numpy.random(size)

    def integers(self, low, high=None, size=None):
        return self.numpy.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.numpy.permutation(n)

    def get_state(self) -> dict:
        return self.numpy.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.numpy.bit_generator.state = state


def derive_rng(root_seed: int, stream_label: str) -> RngStream:
    """Independent reproducible stream; same arguments give the same sequence."""
    return RngStream(root_seed, stream_label)
