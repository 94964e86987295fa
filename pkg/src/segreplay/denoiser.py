"""Modulated denoising network.

A small encoder-decoder over joint image+mask states. Every resolution stage
applies a residual conv block, adds a projected sinusoidal step embedding,
and (when a prompt embedding is supplied) adds the output of a cross-attention
block whose queries come from spatial feature tokens and whose keys/values
come from the prompt tokens. With no prompt the attention blocks are skipped,
which equals the zero-value-projection network exactly.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import JointState, NoisePair
from .errors import ConfigurationError


@dataclass(frozen=True)
class ArchConfig:
    c_max: int = 4
    widths: tuple = (16, 32, 64)
    step_dim: int = 32
    embed_dim: int = 64  # prompt token dimension

    @property
    def state_channels(self) -> int:
        return 1 + self.c_max

    def validate(self) -> None:
        if self.c_max < 1:
            raise ConfigurationError(f"c_max must be >= 1, got {self.c_max}")
        if not self.widths:
            raise ConfigurationError("widths must name at least one stage")
        if any(w < 1 for w in self.widths):
            raise ConfigurationError(f"stage widths must be positive, got {self.widths}")
        if self.step_dim % 2 != 0 or self.step_dim < 2:
            raise ConfigurationError(f"step_dim must be even and >= 2, got {self.step_dim}")
        if self.embed_dim < 1:
            raise ConfigurationError(f"embed_dim must be >= 1, got {self.embed_dim}")


def timestep_embed(k: int, d: int) -> torch.Tensor:
    """Sinusoidal features of one step index: d/2 sines then d/2 cosines."""
    if d % 2 != 0:
        raise ValueError(f"embedding dimension must be even, got {d}")
    if k < 0:
        raise ValueError(f"step must be >= 0, got {k}")
    return _timestep_embed_batch(torch.tensor([k]), d)[0]


def _timestep_embed_batch(ks: torch.Tensor, d: int, dtype=torch.float32) -> torch.Tensor:
    half = d // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half, 1)
    )
    angles = ks.to(dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class CrossAttentionBlock(nn.Module):
    """Single-head cross attention from spatial tokens to prompt tokens."""

    def __init__(self, channels: int, embed_dim: int, attn_dim: "int | None" = None):
        super().__init__()
        self.attn_dim = attn_dim or channels
        self.to_q = nn.Linear(channels, self.attn_dim, bias=False)
        self.to_k = nn.Linear(embed_dim, self.attn_dim, bias=False)
        self.to_v = nn.Linear(embed_dim, channels, bias=False)

    def attention_weights(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        b, c, h, width = x.shape
        tokens = x.flatten(2).transpose(1, 2)  # (B, HW, C)
        scores = self.to_q(tokens) @ self.to_k(w).T / math.sqrt(self.attn_dim)
        return torch.softmax(scores, dim=-1)  # (B, HW, L)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        b, c, h, width = x.shape
        attn = self.attention_weights(x, w)
        out = attn @ self.to_v(w)  # (B, HW, C)
        return out.transpose(1, 2).reshape(b, c, h, width)


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(1, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(1, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class _Stage(nn.Module):
    """Conv block + step-embedding injection + optional cross attention."""

    def __init__(self, channels: int, step_dim: int, embed_dim: int):
        super().__init__()
        self.block = ResBlock(channels)
        self.step_proj = nn.Linear(step_dim, channels)
        self.attn = CrossAttentionBlock(channels, embed_dim)

    def forward(self, x, emb, w):
        x = self.block(x)
        x = x + self.step_proj(emb)[:, :, None, None]
        if w is not None:
            x = x + self.attn(x, w)
        return x


class DenoiserNet(nn.Module):
    """Predicts the stacked noise [eps_x, eps_y] from a noised joint state."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        arch.validate()
        self.arch = arch
        widths = list(arch.widths)
        self.stem = nn.Conv2d(arch.state_channels, widths[0], 3, padding=1)
        self.enc_stages = nn.ModuleList(
            _Stage(w, arch.step_dim, arch.embed_dim) for w in widths[:-1]
        )
        self.downs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)
            for i in range(len(widths) - 1)
        )
        self.mid_stage = _Stage(widths[-1], arch.step_dim, arch.embed_dim)
        self.up_convs = nn.ModuleList(
            nn.Conv2d(widths[i + 1], widths[i], 3, padding=1)
            for i in reversed(range(len(widths) - 1))
        )
        self.fuses = nn.ModuleList(
            nn.Conv2d(2 * widths[i], widths[i], 3, padding=1)
            for i in reversed(range(len(widths) - 1))
        )
        self.dec_stages = nn.ModuleList(
            _Stage(widths[i], arch.step_dim, arch.embed_dim)
            for i in reversed(range(len(widths) - 1))
        )
        self.head = nn.Conv2d(widths[0], arch.state_channels, 3, padding=1)

    def forward(self, channels: torch.Tensor, ks: torch.Tensor, w=None) -> torch.Tensor:
        if channels.shape[1] != self.arch.state_channels:
            raise ValueError(
                f"state has {channels.shape[1]} channels, expected {self.arch.state_channels}"
            )
        emb = _timestep_embed_batch(ks, self.arch.step_dim, dtype=channels.dtype)
        x = self.stem(channels)
        skips = []
        for stage, down in zip(self.enc_stages, self.downs):
            x = stage(x, emb, w)
            skips.append(x)
            x = down(x)
        x = self.mid_stage(x, emb, w)
        for up, fuse, stage, skip in zip(self.up_convs, self.fuses, self.dec_stages, reversed(skips)):
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = fuse(torch.cat([x, skip], dim=1))
            x = stage(x, emb, w)
        return self.head(x)


def _fill_uniform(tensor: torch.Tensor, bound: float, gen: torch.Generator) -> None:
    with torch.no_grad():
        tensor.copy_((torch.rand(tensor.shape, generator=gen) * 2.0 - 1.0) * bound)


def init_params(module: nn.Module, gen: torch.Generator) -> None:
    """Fan-in-scaled uniform init, deterministic in the provided stream."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (
                m.weight.shape[2] * m.weight.shape[3] if m.weight.dim() == 4 else 1
            )
            bound = 1.0 / math.sqrt(fan_in)
            _fill_uniform(m.weight, bound, gen)
            if m.bias is not None:
                _fill_uniform(m.bias, bound, gen)
        elif isinstance(m, nn.GroupNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)


def init_denoiser(arch: ArchConfig, rng: torch.Generator) -> DenoiserNet:
    """Build and deterministically initialize the network; head starts at zero."""
    net = DenoiserNet(arch)
    init_params(net, rng)
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.zero_()
    return net


def denoise(net: DenoiserNet, state: JointState, k: int, w=None) -> NoisePair:
    """Single-state convenience wrapper returning the split noise prediction."""
    pred = net(state.channels[None], torch.tensor([k]), w)[0]
    return NoisePair(eps_x=pred[:1], eps_y=pred[1:])


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
