"""Joint diffusion over image+mask states.

A state stacks one image channel with a signed one-hot mask block, so both
elements share a single forward noising process and a single denoiser. Two
training objectives are provided: the plain joint objective (one denoising
term on the fully noised state) and the correspondence-preserving objective,
which adds two conditional terms that hold one block clean while the other is
denoised. Sampling uses the deterministic DDIM update.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError
from .taskgen import LabeledImage


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise levels: betas over K steps, cumulative alpha_bars over 0..K."""

    K: int
    betas: np.ndarray  # (K,)
    alphas: np.ndarray  # (K,)
    alpha_bars: np.ndarray  # (K+1,), alpha_bars[0] == 1.0

    def sqrt_ab(self, k: int) -> float:
        return math.sqrt(float(self.alpha_bars[k]))

    def sqrt_one_minus_ab(self, k: int) -> float:
        return math.sqrt(1.0 - float(self.alpha_bars[k]))


def make_schedule(K: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if K < 1:
        raise ConfigurationError(f"schedule needs K >= 1, got {K}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigurationError(f"betas must satisfy 0 < min <= max < 1, got ({beta_min}, {beta_max})")
    betas = np.linspace(beta_min, beta_max, K, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(K=K, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


@dataclass
class JointState:
    """Image+mask channel stack at one diffusion step.

    channels[0] is the image; channels[1:] hold the signed one-hot mask block
    (mask-block channel 0 is background). Unused trailing channels sit at -1.
    """

    channels: torch.Tensor  # (1 + C_max, H, W)
    k: int
    task_id: int


@dataclass
class NoisePair:
    eps_x: torch.Tensor  # (1, H, W)
    eps_y: torch.Tensor  # (C_max, H, W)

    def stacked(self) -> torch.Tensor:
        return torch.cat([self.eps_x, self.eps_y], dim=0)


def encode_mask(mask: np.ndarray, c_max: int) -> torch.Tensor:
    """Labels to a signed one-hot block: +1 on the label's channel, -1 elsewhere."""
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() >= c_max:
        raise ValueError(f"mask labels in [{mask.min()}, {mask.max()}] exceed {c_max} channels")
    block = -np.ones((c_max,) + mask.shape, dtype=np.float32)
    for c in np.unique(mask):
        block[int(c)][mask == c] = 1.0
    return torch.from_numpy(block)


def decode_mask(mask_block) -> np.ndarray:
    """Per-pixel argmax over channels; ties resolve to the lowest channel."""
    if isinstance(mask_block, torch.Tensor):
        mask_block = mask_block.detach().cpu().numpy()
    return np.argmax(mask_block, axis=0).astype(np.int16)


def state_from_pair(pair: LabeledImage, c_max: int) -> JointState:
    image = torch.from_numpy(np.asarray(pair.image, dtype=np.float32))[None]
    return JointState(
        channels=torch.cat([image, encode_mask(pair.mask, c_max)], dim=0),
        k=0,
        task_id=pair.task_id,
    )


def state_to_pair(state: JointState, num_classes: int) -> LabeledImage:
    """Clamp the image channel and argmax-decode the task's mask channels."""
    image = state.channels[0].clamp(-1.0, 1.0).numpy().astype(np.float32)
    mask = decode_mask(state.channels[1 : 2 + num_classes])
    return LabeledImage(image=image, mask=mask, task_id=state.task_id)


def q_sample(state0: JointState, k: int, noise: NoisePair, schedule: NoiseSchedule) -> JointState:
    """Closed-form forward noising of all channels to step k."""
    if not 0 <= k <= schedule.K:
        raise ValueError(f"step {k} outside [0, {schedule.K}]")
    eps = noise.stacked()
    if eps.shape != state0.channels.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != state {tuple(state0.channels.shape)}")
    channels = schedule.sqrt_ab(k) * state0.channels + schedule.sqrt_one_minus_ab(k) * eps
    return JointState(channels=channels, k=k, task_id=state0.task_id)


def draw_diffusion_noise(n: int, shape, K: int, rng: torch.Generator):
    """One (step, noise) draw per item; the draw is shared by all loss terms."""
    ks = torch.randint(1, K + 1, (n,), generator=rng)
    eps = torch.randn((n,) + tuple(shape), generator=rng)
    return ks, eps


def _stack_batch(batch: "list[JointState]") -> torch.Tensor:
    if not batch:
        raise ValueError("empty batch")
    for state in batch:
        if state.k != 0:
            raise ValueError(f"loss inputs must be clean states (k=0), got k={state.k}")
    return torch.stack([s.channels for s in batch])


def _q_sample_batch(clean: torch.Tensor, ks: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule):
    ab = torch.as_tensor(schedule.alpha_bars, dtype=clean.dtype)[ks].view(-1, 1, 1, 1)
    return ab.sqrt() * clean + (1.0 - ab).sqrt() * eps


def loss_nj(denoiser, batch, schedule: NoiseSchedule, rng: torch.Generator, draws=None):
    """Joint denoising objective: predict the stacked noise on the noised state."""
    clean = _stack_batch(batch)
    if draws is None:
        draws = draw_diffusion_noise(len(batch), clean.shape[1:], schedule.K, rng)
    ks, eps = draws
    eps = eps.to(clean.dtype)
    noised = _q_sample_batch(clean, ks, eps, schedule)
    pred = denoiser(noised, ks)
    return ((pred - eps) ** 2).mean()


def loss_bj(denoiser, batch, schedule: NoiseSchedule, rng: torch.Generator, draws=None,
            weights=(1.0, 1.0, 1.0)):
    """Correspondence-preserving objective: joint term plus two conditional terms.

    The conditional terms keep one block clean: image denoising against the
    clean mask (target [eps_x, 0]) and mask denoising against the clean image
    (target [0, eps_y]). One (step, noise) draw per item serves all terms.
    """
    clean = _stack_batch(batch)
    if draws is None:
        draws = draw_diffusion_noise(len(batch), clean.shape[1:], schedule.K, rng)
    ks, eps = draws
    eps = eps.to(clean.dtype)
    noised = _q_sample_batch(clean, ks, eps, schedule)
    zeros_x = torch.zeros_like(eps[:, :1])
    zeros_y = torch.zeros_like(eps[:, 1:])

    total = clean.new_zeros(())
    w_joint, w_image, w_mask = weights
    if w_joint:
        total = total + w_joint * ((denoiser(noised, ks) - eps) ** 2).mean()
    if w_image:
        cond_image = torch.cat([noised[:, :1], clean[:, 1:]], dim=1)
        target = torch.cat([eps[:, :1], zeros_y], dim=1)
        total = total + w_image * ((denoiser(cond_image, ks) - target) ** 2).mean()
    if w_mask:
        cond_mask = torch.cat([clean[:, :1], noised[:, 1:]], dim=1)
        target = torch.cat([zeros_x, eps[:, 1:]], dim=1)
        total = total + w_mask * ((denoiser(cond_mask, ks) - target) ** 2).mean()
    return total


def ddim_step_sequence(K: int, num_steps: int) -> "list[tuple[int, int]]":
    """Strided descending (k, k_next) pairs from K down to 0."""
    if not 1 <= num_steps <= K:
        raise ValueError(f"num_steps {num_steps} outside [1, {K}]")
    ks = [int(round(v)) for v in np.linspace(K, 1, num_steps)]
    ks = sorted(set(ks), reverse=True)
    return list(zip(ks, ks[1:] + [0]))


def ddim_sample(model, schedule: NoiseSchedule, num_steps: int, w, rng: torch.Generator,
                n: int, shape, task_id: int = 0) -> "list[JointState]":
    """Deterministic reverse sampling of n states from Gaussian initials.

    Each update predicts the clean state and re-noises it to the next step of
    the strided subsequence; no stochastic term is added. `model` is called as
    model(channels, ks, w). Returned states are raw (unclamped) at k=0.
    """
    if n < 1:
        raise ValueError(f"need n >= 1 samples, got {n}")
    states = torch.randn((n,) + tuple(shape), generator=rng)
    with torch.no_grad():
        for k, k_next in ddim_step_sequence(schedule.K, num_steps):
            ks = torch.full((n,), k, dtype=torch.long)
            eps_hat = model(states, ks, w)
            x0_hat = (states - schedule.sqrt_one_minus_ab(k) * eps_hat) / schedule.sqrt_ab(k)
            states = schedule.sqrt_ab(k_next) * x0_hat + schedule.sqrt_one_minus_ab(k_next) * eps_hat
    return [JointState(channels=states[i], k=0, task_id=task_id) for i in range(n)]


class ModulatedDenoiser:
    """Denoising network bound to one task's prompt embedding."""

    def __init__(self, net, w=None):
        self.net = net
        self.w = w

    def __call__(self, channels: torch.Tensor, ks: torch.Tensor) -> torch.Tensor:
        return self.net(channels, ks, self.w)
