"""Noise schedule, forward process and the DDPM / DDIM reverse samplers.

Timesteps are 1-based: ``t = 1..T`` index the noised states and ``t = 0`` is
clean data (``alpha_bar_0 = 1``). The step functions are written with plain
arithmetic so they accept numpy arrays and torch tensors alike; ``t`` may be
a Python int or an integer array/tensor with one entry per batch element.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .data import POSE_DIM, PoseSequence, unflatten_pose

logger = logging.getLogger(__name__)

X0_CLAMP = 1.5

DenoiserFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


class SamplingDivergedError(RuntimeError):
    def __init__(self, t: int):
        super().__init__(f"non-finite values in the sampling trajectory at t={t}")
        self.t = t


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        betas = np.array(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        alphas = 1.0 - betas
        ab = np.concatenate([[1.0], np.cumprod(alphas)])
        for name, arr in (("alphas", alphas), ("_ab_full", ab)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return self.betas.size

    @property
    def alpha_bars(self) -> np.ndarray:
        """``alpha_bar[t]`` for ``t = 1..T`` (0-based array of length T)."""
        return self._ab_full[1:]

    def alpha_bar(self, t):
        return _gather(self._ab_full, t)

    def validate(self) -> None:
        ab = self.alpha_bars
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ValueError("every beta must lie in (0, 1)")
        if not ((ab > 0) & (ab < 1)).all() or (np.diff(ab) >= 0).any():
            raise ValueError("alpha_bar must be strictly decreasing inside (0, 1)")


def make_schedule(T: int = 1000, kind: str = "linear",
                  beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    sched = NoiseSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))
    sched.validate()
    return sched


def _gather(values: np.ndarray, t, like=None):
    """Look up a per-timestep coefficient, shaped to broadcast against ``like``."""
    if isinstance(t, (int, np.integer)):
        return float(values[int(t)])
    if isinstance(t, torch.Tensor):
        dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
        out = torch.tensor(np.array(values), dtype=dtype, device=t.device)[t.long()]
    else:
        out = np.asarray(values)[np.asarray(t, dtype=np.int64)]
    if like is not None and out.ndim == 1:
        out = out.reshape(-1, *([1] * (like.ndim - 1)))
    return out


def _check_t(t, T: int, lo: int = 1) -> None:
    tt = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
    if tt.size and (tt.min() < lo or tt.max() > T):
        raise ValueError(f"timestep out of range [{lo}, {T}]: {t}")


def _sqrt(x):
    if isinstance(x, float):
        return math.sqrt(x)
    return x.sqrt() if isinstance(x, torch.Tensor) else np.sqrt(x)


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """``sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps``."""
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch {tuple(x0.shape)} vs {tuple(eps.shape)}")
    _check_t(t, sched.T)
    ab = _gather(sched._ab_full, t, x0)
    return _sqrt(ab) * x0 + _sqrt(1.0 - ab) * eps


def predict_x0_from_eps(x_t, t, eps_hat, sched: NoiseSchedule):
    _check_t(t, sched.T)
    ab = _gather(sched._ab_full, t, x_t)
    return (x_t - _sqrt(1.0 - ab) * eps_hat) / _sqrt(ab)


def predict_eps_from_x0(x_t, t, x0_hat, sched: NoiseSchedule):
    _check_t(t, sched.T)
    ab = _gather(sched._ab_full, t, x_t)
    return (x_t - _sqrt(ab) * x0_hat) / _sqrt(1.0 - ab)


def ddpm_step(x_t, t: int, x0_hat, z, sched: NoiseSchedule):
    """One ancestral step with ``sigma_t = sqrt(beta_t)``; ``z`` is ignored at t = 1."""
    if t < 1:
        raise ValueError(f"ddpm_step needs t >= 1, got {t}")
    _check_t(t, sched.T)
    eps_hat = predict_eps_from_x0(x_t, t, x0_hat, sched)
    alpha = float(sched.alphas[t - 1])
    beta = float(sched.betas[t - 1])
    ab = float(sched._ab_full[t])
    mean = (x_t - (1.0 - alpha) / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)
    if t == 1:
        return mean
    return mean + math.sqrt(beta) * z


def ddim_sigma(t: int, t_prev: int, eta: float, sched: NoiseSchedule) -> float:
    ab_t = float(sched._ab_full[t])
    ab_prev = float(sched._ab_full[t_prev])
    return eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_prev)


def ddim_step(x_t, t: int, t_prev: int, x0_hat, eta: float, z, sched: NoiseSchedule):
    """Jump from ``t`` to ``t_prev < t``; returns ``x0_hat`` when ``t_prev == 0``."""
    if t_prev >= t:
        raise ValueError(f"t_prev must be < t, got t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    _check_t(t, sched.T)
    _check_t(t_prev, sched.T, lo=0)
    if t_prev == 0:
        return x0_hat
    eps_hat = predict_eps_from_x0(x_t, t, x0_hat, sched)
    ab_prev = float(sched._ab_full[t_prev])
    sigma = ddim_sigma(t, t_prev, eta, sched)
    out = math.sqrt(ab_prev) * x0_hat + math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_hat
    if sigma > 0.0:
        out = out + sigma * z
    return out


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Uniformly spaced decreasing subsequence of ``1..T`` that always contains T."""
    if not 1 <= steps <= T:
        raise ValueError(f"ddim steps must be in [1, {T}], got {steps}")
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    if steps == 1:
        ts = np.array([T])
    return [int(t) for t in ts[::-1]]


@torch.no_grad()
def sample_flat(
    model: DenoiserFn,
    music_emb: torch.Tensor,
    sched: NoiseSchedule,
    method: str = "ddim",
    ddim_steps: int = 50,
    eta: float = 0.0,
    guidance_scale: float = 1.0,
    rng_seed: int = 0,
    uncond_emb: torch.Tensor | None = None,
    clamp: float | None = X0_CLAMP,
    pose_dim: int = POSE_DIM,
) -> torch.Tensor:
    """Run the reverse process for a batch; returns ``[B, N, pose_dim]``.

    ``model(x_t, t, emb)`` must return the clean-motion prediction. With
    ``guidance_scale != 1`` the unconditional branch is evaluated on
    ``uncond_emb`` (the masked embedding) and the two are mixed.
    """
    if music_emb.ndim != 3:
        raise ValueError("music_emb must be [B, N, d]")
    if guidance_scale != 1.0 and uncond_emb is None:
        raise ValueError("guidance_scale != 1 needs an unconditional embedding")
    if method not in ("ddpm", "ddim"):
        raise ValueError(f"unknown sampling method {method!r}")
    B, N, _ = music_emb.shape
    gen = torch.Generator(device="cpu").manual_seed(int(rng_seed))
    x = torch.randn(B, N, pose_dim, generator=gen, dtype=music_emb.dtype)

    def denoise(x_t: torch.Tensor, t: int) -> torch.Tensor:
        tt = torch.full((B,), t, dtype=torch.long)
        x0 = model(x_t, tt, music_emb)
        if guidance_scale != 1.0:
            x0_u = model(x_t, tt, uncond_emb)
            x0 = x0_u + guidance_scale * (x0 - x0_u)
        if clamp is not None:
            x0 = x0.clamp(-clamp, clamp)
        return x0

    if method == "ddpm":
        for t in range(sched.T, 0, -1):
            x0 = denoise(x, t)
            z = torch.randn(x.shape, generator=gen, dtype=x.dtype) if t > 1 else torch.zeros_like(x)
            x = ddpm_step(x, t, x0, z, sched)
            if not torch.isfinite(x).all():
                raise SamplingDivergedError(t)
        return x

    ts = ddim_timesteps(sched.T, ddim_steps)
    for t, t_prev in zip(ts, ts[1:] + [0]):
        x0 = denoise(x, t)
        z = torch.randn(x.shape, generator=gen, dtype=x.dtype) if eta > 0 else torch.zeros_like(x)
        x = ddim_step(x, t, t_prev, x0, eta, z, sched)
        if not torch.isfinite(x).all():
            raise SamplingDivergedError(t)
    return x


def sample(model: DenoiserFn, music_emb, sched: NoiseSchedule, method: str = "ddim",
           ddim_steps: int = 50, eta: float = 0.0, guidance_scale: float = 1.0,
           rng_seed: int = 0, uncond_emb=None, clamp: float | None = X0_CLAMP):
    """Sample motion for one clip (``[N, d]`` embedding) or a batch (``[B, N, d]``).

    Returns a :class:`PoseSequence`, or a list of them for batched input.
    """
    emb = torch.as_tensor(music_emb)
    single = emb.ndim == 2
    if single:
        emb = emb[None]
        if uncond_emb is not None:
            uncond_emb = torch.as_tensor(uncond_emb)[None]
    out = sample_flat(model, emb, sched, method, ddim_steps, eta, guidance_scale,
                      rng_seed, uncond_emb, clamp).double().numpy()
    poses = [unflatten_pose(x) for x in out]
    return poses[0] if single else poses
