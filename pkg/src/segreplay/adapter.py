"""Task-oriented prompt handling.

Prompts follow a fixed three-slot template rendered from the task spec. Token
embeddings come from a frozen provider: either deterministic hash-seeded unit
vectors (self-contained default) or a lookup file of externally precomputed
vectors. A lightweight per-task adapter recalibrates the frozen embedding,
w = e + gamma * psi(e), leaving the base embedding untouched.
"""

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError
from .taskgen import TaskSpec


@dataclass
class AdapterConfig:
    dim: int = 64
    ratio: int = 4
    gamma_init: float = 0.1


@dataclass
class PromptEmbedding:
    tokens: torch.Tensor  # (L, d)
    task_id: int


def render_prompt(spec: TaskSpec) -> "list[str]":
    """Fill the template slots; one string per prompt token."""
    for slot, value in (
        ("modality", spec.modality),
        ("region", spec.region),
        ("objective", spec.objective),
    ):
        if not value.strip():
            raise ConfigurationError(f"task {spec.task_id}: empty prompt slot {slot!r}")
    return [f"{spec.modality} images", f"of {spec.region}", f"for {spec.objective}"]


class HashedEmbeddingProvider:
    """Frozen unit-norm embeddings seeded by a stable hash of the token text."""

    def __init__(self, dim: int = 64):
        self.dim = dim
        self._cache: dict = {}

    def embed(self, token: str) -> np.ndarray:
        cached = self._cache.get(token)
        if cached is None:
            seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
            vec = np.random.default_rng(seed).normal(size=self.dim)
            cached = (vec / np.linalg.norm(vec)).astype(np.float32)
            self._cache[token] = cached
        return cached


class FileEmbeddingProvider:
    """Embeddings read from a text file: token, tab, comma-separated decimals."""

    def __init__(self, path):
        self._table = {}
        self.dim = None
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            token, _, values = line.partition("\t")
            vec = np.array([float(v) for v in values.split(",")], dtype=np.float32)
            if self.dim is None:
                self.dim = len(vec)
            elif len(vec) != self.dim:
                raise ConfigurationError(
                    f"embedding file row for {token!r} has {len(vec)} values, expected {self.dim}"
                )
            self._table[token] = vec
        if not self._table:
            raise ConfigurationError(f"embedding file {path} holds no records")

    def embed(self, token: str) -> np.ndarray:
        try:
            return self._table[token]
        except KeyError:
            raise KeyError(f"no embedding for token {token!r}") from None


def embed_prompt(provider, tokens: "list[str]", task_id: int) -> PromptEmbedding:
    if not tokens:
        raise ValueError("prompt needs at least one token")
    rows = np.stack([provider.embed(token) for token in tokens])
    return PromptEmbedding(tokens=torch.from_numpy(rows.copy()), task_id=task_id)


class TaskAdapter(nn.Module):
    """Two-layer tokenwise bottleneck with a learnable recalibration scale."""

    def __init__(self, task_id: int, config: AdapterConfig):
        super().__init__()
        if config.dim % config.ratio != 0:
            raise ConfigurationError(f"dim {config.dim} not divisible by ratio {config.ratio}")
        self.task_id = task_id
        self.down = nn.Linear(config.dim, config.dim // config.ratio, bias=False)
        self.up = nn.Linear(config.dim // config.ratio, config.dim, bias=True)
        self.gamma = nn.Parameter(torch.tensor(float(config.gamma_init)))

    def psi(self, e: torch.Tensor) -> torch.Tensor:
        return self.up(torch.nn.functional.gelu(self.down(e)))

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return e + self.gamma * self.psi(e)


def init_adapter(task_id: int, config: AdapterConfig, rng: torch.Generator) -> TaskAdapter:
    """Deterministic init; the up-projection starts at zero so w == e initially."""
    from .denoiser import _fill_uniform

    adapter = TaskAdapter(task_id, config)
    _fill_uniform(adapter.down.weight, 1.0 / (config.dim**0.5), rng)
    with torch.no_grad():
        adapter.up.weight.zero_()
        adapter.up.bias.zero_()
    return adapter


def recalibrate(adapter: TaskAdapter, e: PromptEmbedding) -> PromptEmbedding:
    if e.tokens.shape[1] != adapter.down.weight.shape[1]:
        raise ValueError(
            f"embedding dim {e.tokens.shape[1]} != adapter dim {adapter.down.weight.shape[1]}"
        )
    return PromptEmbedding(tokens=adapter(e.tokens), task_id=e.task_id)
