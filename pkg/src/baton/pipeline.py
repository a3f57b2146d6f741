"""Inference: music clips in, conducting motion out, from a trained bundle."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch

from .data import MusicFeatureSequence, PoseSequence, unflatten_pose
from .diffusion import X0_CLAMP, NoiseSchedule, make_schedule, predict_x0_from_eps, sample_flat
from .networks import ModelBundle


def music_encode(bundle: ModelBundle, music: MusicFeatureSequence | np.ndarray) -> np.ndarray:
    """One embedding per motion frame, ``[M/3, out_dim]``."""
    feats = music.features if isinstance(music, MusicFeatureSequence) else np.asarray(music)
    with torch.no_grad():
        out = bundle.music_encoder(torch.from_numpy(np.asarray(feats, dtype=np.float32))[None])
    return out[0].double().numpy()


def motion_encode(bundle: ModelBundle, motion: PoseSequence | np.ndarray) -> np.ndarray:
    frames = motion.frames if isinstance(motion, PoseSequence) else np.asarray(motion)
    if frames.shape[0] < 2:
        raise ValueError("motion encoding needs at least 2 frames")
    with torch.no_grad():
        out = bundle.motion_encoder(torch.from_numpy(np.asarray(frames, dtype=np.float32))[None])
    return out[0].double().numpy()


@dataclass
class SamplerSettings:
    method: str = "ddim"
    steps: int = 50
    eta: float = 0.0
    guidance: float = 1.0
    seed: int = 0
    clamp: float | None = X0_CLAMP

    def __post_init__(self):
        if self.method not in ("ddim", "ddpm"):
            raise ValueError(f"method must be 'ddim' or 'ddpm', got {self.method!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if self.clamp is not None and self.clamp <= 0:
            raise ValueError("clamp must be positive (or none)")


class MotionGenerator:
    """Wraps the music encoder and denoiser as an ``x0`` predictor for the samplers."""

    def __init__(self, bundle: ModelBundle, schedule: NoiseSchedule | None = None):
        if bundle.denoiser is None:
            raise ValueError("bundle has no trained denoiser")
        self.bundle = bundle.eval()
        stage2 = bundle.metadata.get("stage2", {})
        self.schedule = schedule or make_schedule(
            stage2.get("T", 1000), "linear", stage2.get("beta_start", 1e-4), stage2.get("beta_end", 0.02)
        )
        self.predict_target = bundle.metadata.get("predict_target", "x0")

    def x0_model(self, x_t: torch.Tensor, t: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        out = self.bundle.denoiser(x_t, t, emb)
        if self.predict_target == "eps":
            return predict_x0_from_eps(x_t, t, out, self.schedule)
        return out

    __call__ = x0_model

    @torch.no_grad()
    def embed(self, music: Sequence[MusicFeatureSequence | np.ndarray]) -> torch.Tensor:
        feats = [m.features if isinstance(m, MusicFeatureSequence) else np.asarray(m) for m in music]
        return self.bundle.music_encoder(torch.from_numpy(np.stack(feats).astype(np.float32)))

    @torch.no_grad()
    def generate(self, music: Sequence[MusicFeatureSequence | np.ndarray],
                 settings: SamplerSettings = SamplerSettings()) -> list[PoseSequence]:
        """Sample one motion per music clip; all clips in one call share a length.

        The same seed gives the same initial noise for every batch of equal
        shape, whatever the music.
        """
        emb = self.embed(music)
        uncond = self.bundle.denoiser.mask.unconditional(emb) if settings.guidance != 1.0 else None
        steps = self.schedule.T if settings.method == "ddpm" else settings.steps
        x = sample_flat(self, emb, self.schedule, settings.method, steps, settings.eta,
                        settings.guidance, settings.seed, uncond, settings.clamp)
        return [unflatten_pose(a) for a in x.double().numpy()]

    def generate_grouped(self, music: Sequence[MusicFeatureSequence],
                         settings: SamplerSettings = SamplerSettings(),
                         batch_size: int = 64) -> list[PoseSequence]:
        """Like :meth:`generate` for clips of mixed length: groups by length, keeps input order."""
        out: list[PoseSequence | None] = [None] * len(music)
        by_len: dict[int, list[int]] = {}
        for i, m in enumerate(music):
            by_len.setdefault(np.asarray(getattr(m, "features", m)).shape[0], []).append(i)
        for idxs in by_len.values():
            for s in range(0, len(idxs), batch_size):
                chunk = idxs[s:s + batch_size]
                chunk_settings = replace(settings, seed=settings.seed + s)
                for i, pose in zip(chunk, self.generate([music[i] for i in chunk], chunk_settings)):
                    out[i] = pose
        return out  # type: ignore[return-value]
