"""Reverse-diffusion sampling of change maps and ensemble inference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .schedule import NoiseSchedule, p_sample, predict_x0


@dataclass
class SamplerConfig:
    steps: int = 100
    ensemble_size: int = 5
    threshold: float = 0.5
    seed: int = 0
    clip_denoised: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be at least 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")


@dataclass
class ChangeMap:
    soft: np.ndarray
    binary: np.ndarray


def member_generator(seed: int, member: int) -> torch.Generator:
    """Independent RNG stream for ensemble member ``member``; does not depend on ensemble size."""
    state = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(member)]).generate_state(2, dtype=np.uint32)
    g = torch.Generator()
    g.manual_seed(int(state[0]) << 32 | int(state[1]))
    return g


def soft_from_x0(x0: torch.Tensor) -> torch.Tensor:
    return ((x0 + 1.0) / 2.0).clamp(0.0, 1.0)


def clipped_eps(x_t, t: int, eps_hat, sched: NoiseSchedule):
    """Noise estimate consistent with the predicted ``x_0`` clipped to the label range [-1, 1]."""
    x0 = predict_x0(x_t, t, eps_hat, sched).clamp(-1.0, 1.0)
    abar = float(sched.alpha_bars[t - 1])
    return (x_t - np.sqrt(abar) * x0) / np.sqrt(1.0 - abar)


@torch.no_grad()
def sample_once(I_a, I_b, model, sched: NoiseSchedule, generator: torch.Generator,
                clip_denoised: bool = True) -> torch.Tensor:
    """Run the full reverse chain from ``x_T ~ N(0, I)`` and return the soft map in [0, 1].

    Images are batched ``(N, C, H, W)``; the result is ``(N, 1, H, W)``.
    ``model`` is any callable with the predictor signature; if it exposes
    ``encode_conditions`` the image pyramids are computed once per chain.
    With ``clip_denoised`` each step's implied ``x_0`` is clipped to [-1, 1]
    before the posterior mean is formed; near ``t = T`` the raw estimate
    divides by ``sqrt(alpha_bar)`` and small noise errors would otherwise
    drag the whole chain off the label range.
    """
    shape = (I_a.shape[0], 1, *I_a.shape[-2:])
    dtype = I_a.dtype
    x = torch.randn(shape, generator=generator, dtype=dtype)
    cond = model.encode_conditions(I_a, I_b) if hasattr(model, "encode_conditions") else None
    for t in range(sched.T, 0, -1):
        model_t = torch.full((shape[0],), int(sched.timesteps[t - 1]), dtype=torch.long)
        if cond is not None:
            eps_hat = model(x, I_a, I_b, model_t, cond=cond)
        else:
            eps_hat = model(x, I_a, I_b, model_t)
        if clip_denoised:
            eps_hat = clipped_eps(x, t, eps_hat, sched)
        z = torch.randn(shape, generator=generator, dtype=dtype) if t > 1 else None
        x = p_sample(x, t, eps_hat, sched, z)
    return soft_from_x0(x)


def ensemble_soft(I_a, I_b, model, sched, cfg: SamplerConfig, members: bool = False):
    outs = [
        sample_once(I_a, I_b, model, sched, member_generator(cfg.seed, i), cfg.clip_denoised)
        for i in range(cfg.ensemble_size)
    ]
    stack = torch.stack(outs)
    return (stack.mean(0), stack) if members else stack.mean(0)


def ensemble_infer(I_a, I_b, model, sched: NoiseSchedule, cfg: SamplerConfig) -> ChangeMap:
    """Mean of ``cfg.ensemble_size`` independent chains, thresholded at ``cfg.threshold``."""
    if cfg.ensemble_size < 1:
        raise ValueError("ensemble_size must be at least 1")
    soft = ensemble_soft(I_a, I_b, model, sched, cfg).squeeze(1).cpu().numpy()
    return ChangeMap(soft=soft, binary=(soft >= cfg.threshold).astype(np.uint8))
