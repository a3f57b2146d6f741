"""Domain types, the on-disk dataset format and the synthetic metronome conductor.

Motion is stored as ``[N, 13, 2]`` upper-body keypoints at 30 fps, normalised
to ``[-1, 1]`` per axis. Music is stored as ``[M, F]`` non-negative band
energies at 90 Hz, so a paired clip always has ``M == 3 * N``.

Dataset directory layout::

    manifest.json
    <clip_id>.motion.f32   # little-endian float32, row-major [N, 13, 2]
    <clip_id>.music.f32    # little-endian float32, row-major [M, F]
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MOTION_FPS = 30.0
MUSIC_RATE = 90.0
MUSIC_PER_MOTION = 3
N_JOINTS = 13
JOINT_DIM = 2
POSE_DIM = N_JOINTS * JOINT_DIM
DEFAULT_BANDS = 128
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")

_F32 = np.dtype("<f4")


class DatasetError(Exception):
    """Raised when a dataset directory cannot be used at all (e.g. no manifest)."""


class ClipValidationError(ValueError):
    """A single clip violates the pairing or shape invariants."""

    def __init__(self, clip_id: str, reason: str):
        super().__init__(f"clip {clip_id!r}: {reason}")
        self.clip_id = clip_id
        self.reason = reason


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float32, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class JointLayout:
    """Keypoint names plus the joints singled out by the losses.

    The default is COCO order truncated at the hips.
    """

    names: tuple[str, ...] = (
        "nose", "l_eye", "r_eye", "l_ear", "r_ear",
        "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
        "l_wrist", "r_wrist", "l_hip", "r_hip",
    )
    elbow_indices: tuple[int, int] = (7, 8)
    wrist_indices: tuple[int, int] = (9, 10)
    edges: tuple[tuple[int, int], ...] = (
        (0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 6),
        (5, 6), (5, 7), (6, 8), (7, 9), (8, 10),
        (5, 11), (6, 12), (11, 12),
    )

    def __post_init__(self):
        n = len(self.names)
        if n != N_JOINTS:
            raise ValueError(f"expected {N_JOINTS} joint names, got {n}")
        for idx in (*self.elbow_indices, *self.wrist_indices):
            if not 0 <= idx < n:
                raise ValueError(f"joint index {idx} out of range")
        if set(self.elbow_indices) & set(self.wrist_indices):
            raise ValueError("elbow and wrist indices must be disjoint")
        for a, b in self.edges:
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise ValueError(f"invalid edge ({a}, {b})")

    def adjacency(self) -> np.ndarray:
        """Symmetric 0/1 bone adjacency (no self loops)."""
        adj = np.zeros((N_JOINTS, N_JOINTS))
        for a, b in self.edges:
            adj[a, b] = adj[b, a] = 1.0
        return adj

    def permuted(self, perm: Sequence[int]) -> "JointLayout":
        """Relabel joints so that new joint ``k`` is old joint ``perm[k]``."""
        inv = {old: new for new, old in enumerate(perm)}
        return JointLayout(
            names=tuple(self.names[p] for p in perm),
            elbow_indices=tuple(inv[i] for i in self.elbow_indices),
            wrist_indices=tuple(inv[i] for i in self.wrist_indices),
            edges=tuple((inv[a], inv[b]) for a, b in self.edges),
        )

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "elbow_indices": list(self.elbow_indices),
            "wrist_indices": list(self.wrist_indices),
            "edges": [list(e) for e in self.edges],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "JointLayout":
        return cls(
            names=tuple(d["names"]),
            elbow_indices=tuple(d["elbow_indices"]),
            wrist_indices=tuple(d["wrist_indices"]),
            edges=tuple(tuple(e) for e in d["edges"]),
        )


COCO_UPPER_BODY = JointLayout()


@dataclass(frozen=True)
class PoseSequence:
    frames: np.ndarray
    fps: float = MOTION_FPS

    def __post_init__(self):
        frames = _frozen(self.frames)
        if frames.ndim != 3 or frames.shape[1:] != (N_JOINTS, JOINT_DIM):
            raise ValueError(f"pose frames must be [N, {N_JOINTS}, {JOINT_DIM}], got {frames.shape}")
        if frames.shape[0] < 2:
            raise ValueError("a pose sequence needs at least 2 frames")
        if not np.isfinite(frames).all():
            raise ValueError("pose frames contain non-finite values")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class MusicFeatureSequence:
    features: np.ndarray
    rate: float = MUSIC_RATE

    def __post_init__(self):
        feats = _frozen(self.features)
        if feats.ndim != 2:
            raise ValueError(f"music features must be [M, F], got {feats.shape}")
        if not np.isfinite(feats).all():
            raise ValueError("music features contain non-finite values")
        if (feats < 0).any():
            raise ValueError("music features must be non-negative")
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        object.__setattr__(self, "features", feats)

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def n_bands(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class PairedClip:
    music: MusicFeatureSequence
    motion: PoseSequence
    clip_id: str
    beat_frames: tuple[int, ...] | None = None

    def __post_init__(self):
        n = self.motion.n_frames
        if self.music.n_frames != MUSIC_PER_MOTION * n:
            raise ClipValidationError(
                self.clip_id,
                f"music has {self.music.n_frames} frames, expected {MUSIC_PER_MOTION} x {n}",
            )
        if self.beat_frames is not None:
            beats = tuple(int(b) for b in self.beat_frames)
            if any(b < 0 or b >= n for b in beats):
                raise ClipValidationError(self.clip_id, "beat frame outside the clip")
            if any(b1 <= b0 for b0, b1 in zip(beats, beats[1:])):
                raise ClipValidationError(self.clip_id, "beat frames not strictly increasing")
            object.__setattr__(self, "beat_frames", beats)


def flatten_pose(motion: PoseSequence | np.ndarray) -> np.ndarray:
    """``[N, 13, 2] -> [N, 26]``, joint-major: ``[j0x, j0y, j1x, j1y, ...]``."""
    frames = motion.frames if isinstance(motion, PoseSequence) else np.asarray(motion)
    if frames.shape[-2:] != (N_JOINTS, JOINT_DIM):
        raise ValueError(f"expected trailing shape ({N_JOINTS}, {JOINT_DIM}), got {frames.shape}")
    return frames.reshape(*frames.shape[:-2], POSE_DIM)


def unflatten_pose(arr: np.ndarray, fps: float = MOTION_FPS) -> PoseSequence:
    arr = np.asarray(arr)
    if arr.ndim != 2 or arr.shape[1] != POSE_DIM:
        raise ValueError(f"expected [N, {POSE_DIM}], got {arr.shape}")
    return PoseSequence(arr.reshape(arr.shape[0], N_JOINTS, JOINT_DIM), fps=fps)


# ---------------------------------------------------------------------------
# normalisation of raw keypoints


@dataclass(frozen=True)
class NormalizationBounds:
    """Raw-coordinate bounding box mapped onto ``[-1, 1]^2``."""

    x: tuple[float, float] = (-1.0, 1.0)
    y: tuple[float, float] = (-1.0, 1.0)

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        lo = np.array([self.x[0], self.y[0]])
        hi = np.array([self.x[1], self.y[1]])
        return 2.0 * (np.asarray(raw) - lo) / (hi - lo) - 1.0

    def denormalize(self, norm: np.ndarray) -> np.ndarray:
        lo = np.array([self.x[0], self.y[0]])
        hi = np.array([self.x[1], self.y[1]])
        return (np.asarray(norm) + 1.0) / 2.0 * (hi - lo) + lo

    def to_dict(self) -> dict:
        return {"x": list(self.x), "y": list(self.y)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormalizationBounds":
        return cls(x=tuple(d["x"]), y=tuple(d["y"]))


# ---------------------------------------------------------------------------
# dataset IO


@dataclass(frozen=True)
class ClipEntry:
    clip_id: str
    split: str
    n_frames: int
    n_music_frames: int
    n_bands: int
    beat_frames: tuple[int, ...] | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClipEntry":
        beats = d.get("beat_frames")
        return cls(
            clip_id=str(d["clip_id"]),
            split=str(d.get("split", "train")),
            n_frames=int(d["n_frames"]),
            n_music_frames=int(d["n_music_frames"]),
            n_bands=int(d["n_bands"]),
            beat_frames=None if beats is None else tuple(int(b) for b in beats),
        )

    def to_dict(self) -> dict:
        d = {
            "clip_id": self.clip_id,
            "split": self.split,
            "n_frames": self.n_frames,
            "n_music_frames": self.n_music_frames,
            "n_bands": self.n_bands,
        }
        if self.beat_frames is not None:
            d["beat_frames"] = list(self.beat_frames)
        return d


class Dataset(Sequence[PairedClip]):
    """Lazy view of one split of a dataset directory.

    Binary files are read on access; a clip that fails validation raises
    :class:`ClipValidationError` naming it instead of being dropped.
    """

    def __init__(self, root: Path, entries: Sequence[ClipEntry],
                 bounds: NormalizationBounds, layout: JointLayout):
        self.root = root
        self.entries = list(entries)
        self.bounds = bounds
        self.layout = layout

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self._load(e) for e in self.entries[i]]
        return self._load(self.entries[i])

    def __iter__(self) -> Iterator[PairedClip]:
        for e in self.entries:
            yield self._load(e)

    @property
    def clip_ids(self) -> list[str]:
        return [e.clip_id for e in self.entries]

    def _read(self, e: ClipEntry, suffix: str, shape: tuple[int, ...]) -> np.ndarray:
        path = self.root / f"{e.clip_id}.{suffix}.f32"
        if not path.exists():
            raise ClipValidationError(e.clip_id, f"missing file {path.name}")
        raw = np.fromfile(path, dtype=_F32)
        expected = int(np.prod(shape))
        if raw.size != expected:
            raise ClipValidationError(
                e.clip_id, f"{path.name} holds {raw.size} floats, manifest declares {shape}"
            )
        return raw.reshape(shape).astype(np.float32)

    def _load(self, e: ClipEntry) -> PairedClip:
        if e.n_music_frames != MUSIC_PER_MOTION * e.n_frames:
            raise ClipValidationError(
                e.clip_id, f"manifest declares M={e.n_music_frames}, N={e.n_frames}; need M == 3N"
            )
        motion = self._read(e, "motion", (e.n_frames, N_JOINTS, JOINT_DIM))
        music = self._read(e, "music", (e.n_music_frames, e.n_bands))
        try:
            return PairedClip(
                music=MusicFeatureSequence(music),
                motion=PoseSequence(motion),
                clip_id=e.clip_id,
                beat_frames=e.beat_frames,
            )
        except ClipValidationError:
            raise
        except ValueError as exc:
            raise ClipValidationError(e.clip_id, str(exc)) from exc


def read_manifest(root_path: str | Path) -> dict:
    root = Path(root_path)
    path = root / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"unreadable manifest {path}: {exc}") from exc
    if "clips" not in manifest:
        raise DatasetError(f"manifest {path} has no 'clips' list")
    return manifest


def load_dataset(root_path: str | Path, split: str | None = "train") -> Dataset:
    """Open one split (or every clip with ``split=None``) of a dataset directory."""
    if split is not None and split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    root = Path(root_path)
    manifest = read_manifest(root)
    entries = [ClipEntry.from_dict(d) for d in manifest["clips"]]
    if split is not None:
        entries = [e for e in entries if e.split == split]
    bounds = NormalizationBounds.from_dict(manifest.get("normalization", NormalizationBounds().to_dict()))
    layout = JointLayout.from_dict(manifest["layout"]) if "layout" in manifest else COCO_UPPER_BODY
    return Dataset(root, entries, bounds, layout)


def save_dataset(
    clips: Sequence[PairedClip],
    root_path: str | Path,
    splits: Mapping[str, str] | None = None,
    bounds: NormalizationBounds | None = None,
    layout: JointLayout = COCO_UPPER_BODY,
) -> None:
    """Write clips as a dataset directory; ``splits`` maps clip_id to split name."""
    clips = list(clips)
    splits = dict(splits or {})
    seen = set()
    for c in clips:
        if c.clip_id in seen:
            raise ClipValidationError(c.clip_id, "duplicate clip_id")
        seen.add(c.clip_id)
        # PairedClip already validated on construction; re-check in case arrays were swapped
        if not (np.isfinite(c.motion.frames).all() and np.isfinite(c.music.features).all()):
            raise ClipValidationError(c.clip_id, "non-finite values")
        if splits.get(c.clip_id, "train") not in SPLITS:
            raise ValueError(f"unknown split {splits[c.clip_id]!r}")
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for c in clips:
        c.motion.frames.astype(_F32).tofile(root / f"{c.clip_id}.motion.f32")
        c.music.features.astype(_F32).tofile(root / f"{c.clip_id}.music.f32")
        entries.append(ClipEntry(
            clip_id=c.clip_id,
            split=splits.get(c.clip_id, "train"),
            n_frames=c.motion.n_frames,
            n_music_frames=c.music.n_frames,
            n_bands=c.music.n_bands,
            beat_frames=c.beat_frames,
        ).to_dict())
    manifest = {
        "format_version": FORMAT_VERSION,
        "fps": MOTION_FPS,
        "music_rate": MUSIC_RATE,
        "layout": layout.to_dict(),
        "normalization": (bounds or NormalizationBounds()).to_dict(),
        "clips": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


# ---------------------------------------------------------------------------
# synthetic metronome conductor

# rest pose, x to the performer's left, y up
_REST_POSE = np.array([
    [0.00, 0.55],                  # nose
    [0.05, 0.60], [-0.05, 0.60],   # eyes
    [0.10, 0.57], [-0.10, 0.57],   # ears
    [0.25, 0.30], [-0.25, 0.30],   # shoulders
    [0.42, 0.05], [-0.42, 0.05],   # elbows
    [0.50, 0.30], [-0.50, 0.30],   # wrists
    [0.18, -0.60], [-0.18, -0.60], # hips
])

_BURST_DECAY = np.array([1.0, 0.5, 0.25])


def generate_synthetic_clip(
    seed: int,
    n_frames: int = 60,
    beat_period: int = 15,
    amplitude: float = 1.0,
    n_bands: int = DEFAULT_BANDS,
    clip_id: str | None = None,
    layout: JointLayout = COCO_UPPER_BODY,
) -> PairedClip:
    """Metronome-conductor clip with known beats at ``0, P, 2P, ...``.

    The wrists swing on an arc ``cos(pi * (i - 1/2) / P)``, so each turning
    point sits halfway between frames ``kP`` and ``kP + 1``. The kinetic
    velocity of the frame gap starting at a beat frame is therefore the
    minimum of its neighbourhood. Each beat also starts a three-frame
    decaying energy burst in the music at feature frame ``3 * beat``.
    """
    if beat_period < 4:
        raise ValueError(f"beat_period must be >= 4, got {beat_period}")
    if n_frames < 2 * beat_period:
        raise ValueError(f"n_frames={n_frames} must be >= 2 * beat_period={2 * beat_period}")
    if not 0.0 < amplitude <= 1.0:
        raise ValueError(f"amplitude must be in (0, 1], got {amplitude}")
    rng = np.random.default_rng(seed)
    beats = tuple(range(0, n_frames, beat_period))

    i = np.arange(n_frames, dtype=np.float64)
    swing = np.cos(np.pi * (i - 0.5) / beat_period)
    # vertical stroke with an outward bulge mid-beat; both stop at the turning points
    wrist_dx = amplitude * 0.12 * (1.0 - swing**2)
    wrist_dy = amplitude * 0.25 * swing

    pose = np.repeat(_REST_POSE[None], n_frames, axis=0)
    pose += rng.uniform(-0.05, 0.05, size=2)
    static = [j for j in range(N_JOINTS) if j not in (*layout.elbow_indices, *layout.wrist_indices)]
    pose[:, static] += rng.normal(0.0, 2e-4, size=(n_frames, len(static), 2))
    for side, (elbow, wrist) in enumerate(zip(layout.elbow_indices, layout.wrist_indices)):
        sign = 1.0 if side == 0 else -1.0
        pose[:, wrist, 0] += sign * wrist_dx
        pose[:, wrist, 1] += wrist_dy
        pose[:, elbow, 0] += sign * 0.45 * wrist_dx
        pose[:, elbow, 1] += 0.45 * wrist_dy

    n_music = MUSIC_PER_MOTION * n_frames
    burst = np.zeros(n_music)
    for b in beats:
        m0 = MUSIC_PER_MOTION * b
        seg = burst[m0:m0 + len(_BURST_DECAY)]
        seg[:] = np.maximum(seg, _BURST_DECAY[:len(seg)])
    profile = rng.uniform(0.5, 1.0, size=n_bands)
    noise = rng.uniform(0.0, 0.05, size=(n_music, n_bands))
    music = amplitude * (burst[:, None] * profile[None, :] + noise)

    return PairedClip(
        music=MusicFeatureSequence(music),
        motion=PoseSequence(np.clip(pose, -1.0, 1.0)),
        clip_id=clip_id if clip_id is not None else f"synth_{seed:06d}",
        beat_frames=beats,
    )


def synthetic_corpus(
    n_clips: int,
    seed: int = 0,
    n_frames: int = 60,
    beat_period_range: tuple[int, int] = (8, 20),
    amplitude_range: tuple[float, float] = (0.3, 1.0),
    n_bands: int = DEFAULT_BANDS,
) -> list[PairedClip]:
    """Many synthetic clips with per-clip seeds, periods and amplitudes drawn from ``seed``."""
    lo, hi = beat_period_range
    if lo > hi:
        raise ValueError("empty beat period range")
    rng = np.random.default_rng(seed)
    clip_seeds = rng.integers(0, 2**31 - 1, size=n_clips)
    periods = rng.integers(lo, hi + 1, size=n_clips)
    amps = rng.uniform(*amplitude_range, size=n_clips)
    return [
        generate_synthetic_clip(
            int(s), n_frames, int(p), float(a), n_bands=n_bands, clip_id=f"clip_{k:05d}"
        )
        for k, (s, p, a) in enumerate(zip(clip_seeds, periods, amps))
    ]


def window_clips(clips: Sequence[PairedClip], n_frames: int, hop: int | None = None) -> list[PairedClip]:
    """Cut clips into aligned windows of ``n_frames`` motion frames.

    Windows start every ``hop`` frames (default: non-overlapping); a tail
    shorter than ``n_frames`` is dropped. Beat positions are shifted into each
    window. Window ids are ``<clip_id>@<start>``.
    """
    if n_frames < 2:
        raise ValueError("windows need at least 2 frames")
    hop = hop or n_frames
    if hop < 1:
        raise ValueError("hop must be positive")
    out = []
    for clip in clips:
        for start in range(0, clip.motion.n_frames - n_frames + 1, hop):
            stop = start + n_frames
            beats = None
            if clip.beat_frames is not None:
                beats = tuple(b - start for b in clip.beat_frames if start <= b < stop)
            out.append(PairedClip(
                music=MusicFeatureSequence(clip.music.features[MUSIC_PER_MOTION * start:MUSIC_PER_MOTION * stop],
                                           clip.music.rate),
                motion=PoseSequence(clip.motion.frames[start:stop], clip.motion.fps),
                clip_id=f"{clip.clip_id}@{start}",
                beat_frames=beats,
            ))
    return out
