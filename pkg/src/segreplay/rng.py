"""Seed derivation and random-stream construction.

Every stochastic stage of a run pulls from its own stream, derived from the
master seed plus a string label. Streams never share state, so consuming one
(e.g. generator training) cannot shift another (e.g. segmenter batches), and
any round can be re-derived without replaying earlier rounds.
"""

import hashlib

import numpy as np
import torch


def derive_seed(master: int, *labels: object) -> int:
    """Stable 63-bit seed from a master seed and a label path."""
    text = "/".join([str(int(master))] + [str(part) for part in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def numpy_stream(master: int, *labels: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *labels))


def torch_stream(master: int, *labels: object) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(master, *labels))
    return gen
