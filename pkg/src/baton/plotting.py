"""Static figures written straight to image files (no pyplot state, no display)."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from matplotlib.figure import Figure

from .data import COCO_UPPER_BODY, MOTION_FPS, JointLayout, MusicFeatureSequence, PoseSequence
from .metrics import (VELOCITY_SMOOTHING, BeatList, _moving_average, extract_motion_beats,
                      extract_music_beats, kinetic_velocity)

DPI = 100


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    return path


def plot_beat_alignment(motion: PoseSequence, music: MusicFeatureSequence | BeatList,
                        path: str | Path, title: str = "",
                        reference: PoseSequence | None = None) -> Path:
    """Kinetic velocity with detected motion beats, music beats as vertical lines.

    With ``reference`` the ground-truth velocity curve is drawn underneath for
    side-by-side comparison.
    """
    music_beats = music if isinstance(music, BeatList) else extract_music_beats(music)
    fig = Figure(figsize=(8, 3))
    ax = fig.add_subplot()
    curves = [("generated", motion, "tab:blue")]
    if reference is not None:
        curves.insert(0, ("ground truth", reference, "tab:gray"))
    for label, seq, color in curves:
        v = _moving_average(kinetic_velocity(seq), VELOCITY_SMOOTHING)
        t = np.arange(v.size) / MOTION_FPS
        ax.plot(t, v, color=color, label=f"{label} velocity")
        beats = np.asarray(extract_motion_beats(seq).positions, dtype=int)
        ax.plot(t[beats], v[beats], "o", color=color, ms=4)
    for k, b in enumerate(music_beats):
        ax.axvline(b / MOTION_FPS, color="tab:red", ls="--", lw=0.8,
                   label="music beat" if k == 0 else None)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("kinetic velocity")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right", fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def plot_loss_curves(series: Mapping[str, Sequence[float]], path: str | Path,
                     title: str = "", logy: bool = False) -> Path:
    """One line per loss component against epoch."""
    fig = Figure(figsize=(6, 3.5))
    ax = fig.add_subplot()
    for name, values in series.items():
        vals = np.asarray(values, dtype=float)
        ax.plot(np.arange(1, vals.size + 1), vals, label=name)
    if logy:
        ax.set_yscale("symlog", linthresh=1e-4)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend(fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def plot_skeleton_trajectory(motion: PoseSequence, path: str | Path, title: str = "",
                             layout: JointLayout = COCO_UPPER_BODY) -> Path:
    """First-frame skeleton plus the traces of both elbows and wrists.

    Image y points down in keypoint coordinates, so the axis is flipped.
    """
    frames = motion.frames
    fig = Figure(figsize=(4, 4))
    ax = fig.add_subplot()
    for a, b in layout.edges:
        ax.plot(frames[0, [a, b], 0], frames[0, [a, b], 1], color="0.6", lw=1)
    names = layout.names
    for j, color in zip((*layout.elbow_indices, *layout.wrist_indices),
                        ("tab:green", "tab:olive", "tab:blue", "tab:purple")):
        ax.plot(frames[:, j, 0], frames[:, j, 1], color=color, lw=1, label=names[j])
    ax.set_aspect("equal")
    ax.invert_yaxis()
    if title:
        ax.set_title(title)
    ax.legend(fontsize="x-small", loc="lower right")
    fig.tight_layout()
    return _save(fig, path)
