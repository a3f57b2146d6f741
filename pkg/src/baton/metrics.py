"""Evaluation metrics: MSE, Frechet gesture distance, beat consistency, diversity.

Beat positions are motion-frame indices (30 fps). A motion beat at index ``i``
refers to the frame gap ``i -> i + 1``, the unit in which kinetic velocity is
measured.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import MUSIC_PER_MOTION, MusicFeatureSequence, PoseSequence

logger = logging.getLogger(__name__)

BC_SIGMA = 3.0
VELOCITY_SMOOTHING = 5
ONSET_MIN_SEPARATION = 9


class UndefinedMetricError(ValueError):
    """The metric has no value for the given inputs (e.g. empty beat list)."""


@dataclass(frozen=True)
class BeatList:
    positions: tuple[int, ...]

    def __post_init__(self):
        pos = tuple(int(p) for p in self.positions)
        if any(p < 0 for p in pos):
            raise ValueError("beat positions must be non-negative")
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ValueError("beat positions must be strictly increasing")
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return len(self.positions)

    def __iter__(self):
        return iter(self.positions)


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean size {mean.size}")
        if not np.allclose(cov, cov.T, atol=1e-10):
            raise ValueError("covariance must be symmetric")
        scale = max(1.0, float(np.abs(cov).max(initial=0.0)))
        if cov.size and np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() < -1e-8 * scale:
            raise ValueError("covariance must be positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


def _frames(x: PoseSequence | np.ndarray) -> np.ndarray:
    return np.asarray(x.frames if isinstance(x, PoseSequence) else x, dtype=np.float64)


def mse(gt: PoseSequence | np.ndarray, gen: PoseSequence | np.ndarray) -> float:
    """Mean of squared coordinate differences over all N*13*2 elements."""
    a, b = _frames(gt), _frames(gen)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def kinetic_velocity(motion: PoseSequence | np.ndarray) -> np.ndarray:
    """Per-gap sum over joints of the Euclidean displacement, length N-1."""
    frames = _frames(motion)
    return np.linalg.norm(np.diff(frames, axis=0), axis=-1).sum(axis=-1)


def _moving_average(v: np.ndarray, window: int) -> np.ndarray:
    # centered; the window narrows symmetrically near the edges so a minimum
    # close to the boundary is not dragged onto it
    half = window // 2
    csum = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(v.size)
    h = np.minimum(half, np.minimum(idx, v.size - 1 - idx))
    return (csum[idx + h + 1] - csum[idx - h]) / (2 * h + 1)


def _strict_minima(v: np.ndarray) -> np.ndarray:
    # reflect at the boundaries so the first and last gaps can qualify
    if v.size < 2:
        return np.zeros(0, dtype=int)
    left = np.concatenate([[v[1]], v[:-1]])
    right = np.concatenate([v[1:], [v[-2]]])
    # margin keeps float rounding on a flat curve from counting as a dip
    tol = 1e-9 * max(1.0, float(np.abs(v).max()))
    return np.flatnonzero((v < left - tol) & (v < right - tol))


def extract_motion_beats(motion: PoseSequence | np.ndarray,
                         window: int = VELOCITY_SMOOTHING) -> BeatList:
    """Motion beats: strict local minima of smoothed kinetic velocity below its median."""
    frames = _frames(motion)
    if frames.shape[0] < 3:
        raise ValueError("need at least 3 frames to extract motion beats")
    v = _moving_average(kinetic_velocity(frames), window)
    idx = _strict_minima(v)
    idx = idx[v[idx] < np.median(v)]
    return BeatList(tuple(idx))


def onset_strength(features: np.ndarray) -> np.ndarray:
    """Half-wave rectified spectral flux summed over bands.

    The frame before the clip is taken to be the per-band median level, so a
    burst on the very first frame still registers as an onset.
    """
    feats = np.asarray(features, dtype=np.float64)
    prev = np.vstack([np.median(feats, axis=0, keepdims=True), feats[:-1]])
    return np.maximum(0.0, feats - prev).sum(axis=1)


def extract_music_beats(music: MusicFeatureSequence | np.ndarray,
                        min_separation: int = ONSET_MIN_SEPARATION) -> BeatList:
    """Onset peaks above mean + 1 std, at least ``min_separation`` feature frames apart."""
    feats = np.asarray(music.features if isinstance(music, MusicFeatureSequence) else music)
    if feats.shape[0] < 9:
        raise ValueError("need at least 9 music frames to extract beats")
    onset = onset_strength(feats)
    threshold = onset.mean() + onset.std()
    left = np.concatenate([[-np.inf], onset[:-1]])
    right = np.concatenate([onset[1:], [-np.inf]])
    candidates = np.flatnonzero((onset > threshold) & (onset >= left) & (onset > right))
    # strongest first; earlier frame wins ties
    order = sorted(candidates, key=lambda m: (-onset[m], m))
    picked: list[int] = []
    for m in order:
        if all(abs(m - p) >= min_separation for p in picked):
            picked.append(int(m))
    frames = sorted({int(np.round(m / MUSIC_PER_MOTION)) for m in picked})
    return BeatList(tuple(frames))


def beat_consistency(motion_beats: BeatList | Sequence[int],
                     music_beats: BeatList | Sequence[int],
                     sigma: float = BC_SIGMA) -> float:
    """Mean over music beats of ``exp(-d^2 / (2 sigma^2))``, d = distance to the nearest motion beat."""
    mot = np.asarray(list(motion_beats), dtype=np.float64)
    mus = np.asarray(list(music_beats), dtype=np.float64)
    if mot.size == 0 or mus.size == 0:
        raise UndefinedMetricError("beat consistency needs non-empty motion and music beats")
    d2 = np.min((mus[:, None] - mot[None, :]) ** 2, axis=1)
    return float(np.mean(np.exp(-d2 / (2.0 * sigma**2))))


def clip_beat_consistency(motion: PoseSequence | np.ndarray,
                          music: MusicFeatureSequence | np.ndarray | BeatList,
                          sigma: float = BC_SIGMA) -> float:
    """BC of one generated clip against its music.

    A motion without any detected beat scores 0, the limit of the kernel as
    the nearest-beat distance goes to infinity. Music without beats is still
    an error.
    """
    music_beats = music if isinstance(music, BeatList) else extract_music_beats(music)
    if len(music_beats) == 0:
        raise UndefinedMetricError("no music beats detected")
    motion_beats = extract_motion_beats(motion)
    if len(motion_beats) == 0:
        return 0.0
    return beat_consistency(motion_beats, music_beats, sigma)


def fit_gaussian(features: np.ndarray) -> GaussianStats:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError("need an [n >= 2, d] feature matrix")
    cov = np.atleast_2d(np.cov(feats, rowvar=False, ddof=1))
    return GaussianStats(feats.mean(axis=0), 0.5 * (cov + cov.T))


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    sa = _psd_sqrt(a)
    inner = sa @ b @ sa
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)``, clamped at 0."""
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    try:
        tr_sqrt = _trace_sqrt_product(a.cov, b.cov)
    except np.linalg.LinAlgError:
        jitter = 1e-6 * np.eye(a.cov.shape[0])
        tr_sqrt = _trace_sqrt_product(a.cov + jitter, b.cov + jitter)
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(value, 0.0)


FeatureFn = Callable[[Sequence[PoseSequence]], np.ndarray]


def fgd(gt_clips: Sequence[PoseSequence], gen_clips: Sequence[PoseSequence],
        features: FeatureFn) -> float:
    """Frechet distance between Gaussians fit to latent motion features.

    ``features`` maps a list of pose sequences to an ``[n, d]`` matrix; in
    practice the frozen contrastive motion encoder (see
    :func:`baton.networks.motion_features`).
    """
    if len(gt_clips) < 2 or len(gen_clips) < 2:
        raise UndefinedMetricError("FGD needs at least 2 clips per set")
    return frechet_distance(fit_gaussian(features(gt_clips)), fit_gaussian(features(gen_clips)))


def diversity_from_features(feats: np.ndarray, perm: np.ndarray) -> float:
    feats = np.asarray(feats, dtype=np.float64)
    return float(np.mean(np.abs(feats - feats[np.asarray(perm)])))


def diversity(gen_clips: Sequence[PoseSequence], features: FeatureFn,
              n_samples: int = 500, rng_seed: int = 0) -> float:
    """Mean absolute difference between latent features and a shuffled copy.

    Draws ``n_samples`` clips (with replacement only when the corpus is
    smaller than ``n_samples``), then one seeded uniform permutation.
    """
    n = len(gen_clips)
    if n < 2:
        raise UndefinedMetricError("diversity needs at least 2 clips")
    feats = np.asarray(features(gen_clips), dtype=np.float64)
    rng = np.random.default_rng(rng_seed)
    rows = rng.choice(n, size=n_samples, replace=n_samples > n)
    perm = rng.permutation(n_samples)
    return diversity_from_features(feats[rows], perm)


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    values: dict[str, float]
    n_samples: dict[str, int]
    seeds: dict[str, int] = field(default_factory=dict)
    extractor: str = ""
    clip_ids: list[str] = field(default_factory=list)

    HEADER = ("metric", "value", "n_samples", "seeds", "extractor")

    def rows(self) -> list[tuple[str, ...]]:
        seeds = ",".join(f"{k}={v}" for k, v in sorted(self.seeds.items())) or "-"
        return [
            (name, repr(float(value)), str(self.n_samples.get(name, 0)), seeds, self.extractor or "-")
            for name, value in self.values.items()
        ]

    def write(self, path: str | Path) -> None:
        lines = ["\t".join(self.HEADER)] + ["\t".join(r) for r in self.rows()]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "EvalReport":
        lines = Path(path).read_text().splitlines()
        values, counts, seeds, extractor = {}, {}, {}, ""
        for line in lines[1:]:
            name, value, n, seed_str, extractor = line.split("\t")
            values[name] = float(value)
            counts[name] = int(n)
            if seed_str != "-":
                seeds = {k: int(v) for k, v in (kv.split("=") for kv in seed_str.split(","))}
        return cls(values, counts, seeds, "" if extractor == "-" else extractor)
