"""Loss suite and the two training stages.

Stage one trains the music encoder, motion encoder and pairing head with an
in-batch binary pairing objective. Stage two trains the denoiser on top of the
(frozen by default) music encoder, using the frozen motion encoder for the
perceptual term.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch.func import functional_call

from .data import COCO_UPPER_BODY, N_JOINTS, POSE_DIM, JointLayout, PairedClip, flatten_pose
from .diffusion import make_schedule, q_sample
from .networks import (Denoiser, ModelBundle, ModelConfig, MotionEncoder, MusicEncoderConfig,
                       load_bundle, save_bundle)

logger = logging.getLogger(__name__)

SCORE_EPS = 1e-7


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite; the message carries the diagnostics."""


class ConfigurationError(ValueError):
    pass


@dataclass
class StageOneConfig:
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0 (0 disables clipping)")
        if self.batch_size < 2:
            raise ValueError("stage one needs batch_size >= 2 for in-batch negatives")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


@dataclass
class StageTwoConfig:
    batch_size: int = 48
    epochs: int = 500
    learning_rate: float = 2e-4
    uncond_rate: float = 0.1
    lambda_ddim: float = 1.0
    lambda_perc: float = 1e-6
    lambda_geo: float = 1.0
    lambda_vel: float = 0.1
    lambda_elbow: float = 0.1
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    finetune_music: bool = False

    def __post_init__(self):
        for name in ("lambda_ddim", "lambda_perc", "lambda_geo", "lambda_vel", "lambda_elbow"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.uncond_rate <= 1.0:
            raise ValueError("uncond_rate must be in [0, 1]")
        if self.batch_size < 1 or self.T < 1:
            raise ValueError("batch_size and T must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


# ---------------------------------------------------------------------------
# losses


def contrastive_loss(scores: torch.Tensor, targets: torch.Tensor | None = None) -> torch.Tensor:
    """Binary cross-entropy (base 2) over all ``B x B`` in-batch pairs, averaged.

    ``targets`` defaults to the identity: music ``i`` belongs with motion ``i``.
    """
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError(f"scores must be square [B, B], got {tuple(scores.shape)}")
    if targets is None:
        targets = torch.eye(scores.shape[0], dtype=scores.dtype)
    s = scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
    ll = targets * torch.log2(s) + (1.0 - targets) * torch.log2(1.0 - s)
    return -ll.mean()


def diffusion_loss(x0: torch.Tensor, x0_hat: torch.Tensor) -> torch.Tensor:
    if x0.shape != x0_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x0.shape)} vs {tuple(x0_hat.shape)}")
    return torch.mean((x0 - x0_hat) ** 2)


def _frozen_call(module: torch.nn.Module, x: torch.Tensor) -> torch.Tensor:
    params = {k: v.detach().to(x.dtype) for k, v in module.named_parameters()}
    buffers = {k: v.to(x.dtype) for k, v in module.named_buffers()}
    return functional_call(module, {**params, **buffers}, (x,))


def perceptual_loss(motion_encoder: MotionEncoder | None, x0: torch.Tensor,
                    x0_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference of pooled motion-encoder features.

    The encoder is called with detached weights, so only ``x0_hat`` receives
    gradient.
    """
    if motion_encoder is None:
        raise ConfigurationError("perceptual loss needs the stage-one motion encoder")
    if x0.shape != x0_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x0.shape)} vs {tuple(x0_hat.shape)}")
    with torch.no_grad():
        target = _frozen_call(motion_encoder, x0)
    return torch.mean(torch.abs(target - _frozen_call(motion_encoder, x0_hat)))


def velocity_loss(x0: torch.Tensor, x0_hat: torch.Tensor) -> torch.Tensor:
    """Mean over frame gaps (and batch) of the squared velocity error summed over coordinates."""
    if x0.shape != x0_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x0.shape)} vs {tuple(x0_hat.shape)}")
    if x0.shape[-2] < 2:
        raise ValueError("velocity loss needs at least 2 frames")
    dv = torch.diff(x0, dim=-2) - torch.diff(x0_hat, dim=-2)
    return (dv**2).sum(dim=-1).mean()


def elbow_loss(x0_hat: torch.Tensor, layout: JointLayout = COCO_UPPER_BODY) -> torch.Tensor:
    """Negative mean squared elbow displacement per frame gap (a reward, always <= 0)."""
    if x0_hat.shape[-1] == POSE_DIM:
        x0_hat = x0_hat.reshape(*x0_hat.shape[:-1], N_JOINTS, 2)
    if x0_hat.shape[-3] < 2:
        raise ValueError("elbow loss needs at least 2 frames")
    elbows = x0_hat[..., list(layout.elbow_indices), :]
    step = torch.diff(elbows, dim=-3)
    return -(step**2).sum(dim=(-1, -2)).mean()


LOSS_COMPONENTS = ("ddim", "perc", "vel", "elbow")


def total_loss(cfg: StageTwoConfig, components: Mapping[str, torch.Tensor | float]):
    """``l_ddim*L_ddim + l_perc*L_perc + l_geo*(l_vel*L_vel + l_elbow*L_elbow)``; missing terms count as 0."""
    for name, value in components.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise TrainingDivergedError(f"non-finite loss component {name!r}: {v}")
    get = lambda k: components.get(k, 0.0)  # noqa: E731
    geo = cfg.lambda_vel * get("vel") + cfg.lambda_elbow * get("elbow")
    return cfg.lambda_ddim * get("ddim") + cfg.lambda_perc * get("perc") + cfg.lambda_geo * geo


# ---------------------------------------------------------------------------
# logging / batching helpers


class TrainingLog:
    """Append-only TSV of per-step records; ``#`` lines are notes."""

    def __init__(self, path: str | Path | None, columns: Sequence[str]):
        self.path = Path(path) if path is not None else None
        self.columns = ["epoch", "step", *columns, "total", "wall_time"]
        self.records: list[dict[str, float]] = []
        self._t0 = time.perf_counter()
        if self.path is not None and not self.path.exists():
            self.path.write_text("\t".join(self.columns) + "\n")

    def note(self, text: str) -> None:
        logger.info(text)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(f"# {text}\n")

    def record(self, epoch: int, step: int, values: Mapping[str, float], total: float) -> None:
        rec = {"epoch": epoch, "step": step, **values, "total": total,
               "wall_time": time.perf_counter() - self._t0}
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write("\t".join(f"{rec.get(c, float('nan')):.6g}" for c in self.columns) + "\n")

    def epoch_means(self, key: str = "total") -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for r in self.records:
            by_epoch.setdefault(int(r["epoch"]), []).append(r[key])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def read_training_log(path: str | Path) -> list[dict[str, float]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    cols = lines[0].split("\t")
    return [dict(zip(cols, map(float, ln.split("\t")))) for ln in lines[1:]]


def _epoch_generator(seed: int, epoch: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) * 1_000_003 + epoch)


def _batches(n: int, batch_size: int, gen: torch.Generator, min_size: int = 1):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        idx = perm[i:i + batch_size]
        if idx.numel() >= min_size:
            yield idx


def _stack(clips: Sequence[PairedClip]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = {c.motion.n_frames for c in clips}
    if len(lengths) != 1:
        raise ValueError(f"training clips must share one length, got {sorted(lengths)}; "
                         "cut them with baton.data.window_clips first")
    music = torch.from_numpy(np.stack([c.music.features for c in clips]).astype(np.float32))
    motion = torch.from_numpy(np.stack([c.motion.frames for c in clips]).astype(np.float32))
    return music, motion


def _param_norms(modules: Mapping[str, torch.nn.Module]) -> str:
    return ", ".join(
        f"{k}={float(torch.sqrt(sum((p.detach() ** 2).sum() for p in m.parameters()))):.4g}"
        for k, m in modules.items()
    )


# ---------------------------------------------------------------------------
# stage one


def pair_scores(bundle: ModelBundle, music: torch.Tensor, motion: torch.Tensor) -> torch.Tensor:
    """``[B, B]`` pairing probabilities, rows indexed by music."""
    music_vec = bundle.music_encoder(music).mean(dim=1)
    motion_vec = bundle.motion_encoder(motion)
    return bundle.pair_head.pairwise(music_vec, motion_vec)


def train_contrastive(
    dataset: Sequence[PairedClip],
    cfg: StageOneConfig,
    rng_seed: int = 0,
    model_config: ModelConfig | None = None,
    log_path: str | Path | None = None,
    bundle: ModelBundle | None = None,
) -> ModelBundle:
    clips = list(dataset)
    if len(clips) < cfg.batch_size:
        raise ValueError(f"dataset has {len(clips)} clips, fewer than batch_size={cfg.batch_size}")
    if bundle is None:
        n_bands = clips[0].music.n_bands
        model_config = model_config or ModelConfig(music=MusicEncoderConfig(n_bands=n_bands))
        bundle = ModelBundle.initialize(model_config, seed=rng_seed)
    music, motion = _stack(clips)
    mods = {k: bundle.modules()[k] for k in ("music_encoder", "motion_encoder", "pair_head")}
    params = [p for m in mods.values() for p in m.parameters()]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    log = TrainingLog(log_path, ["bce"])
    for m in mods.values():
        m.train()
    step = 0
    for epoch in range(cfg.epochs):
        gen = _epoch_generator(rng_seed, epoch)
        for bi, idx in enumerate(_batches(len(clips), cfg.batch_size, gen, min_size=2)):
            loss = contrastive_loss(pair_scores(bundle, music[idx], motion[idx]))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite contrastive loss at epoch {epoch}, batch {bi}; "
                    f"parameter norms: {_param_norms(mods)}"
                )
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            log.record(epoch, step, {"bce": loss.item()}, loss.item())
            step += 1
    bundle.eval()
    bundle.stage = "contrastive"
    bundle.metadata = dict(bundle.metadata, stage1=asdict(cfg), stage1_seed=rng_seed,
                           stage1_epoch_losses=log.epoch_means())
    bundle.training_log = log
    return bundle


# ---------------------------------------------------------------------------
# stage two


def _opt_state_tensors(opt: torch.optim.Optimizer, names: Mapping[torch.nn.Parameter, str]):
    out = {}
    for p, st in opt.state.items():
        name = names[p]
        out[f"optim.{name}.exp_avg"] = st["exp_avg"]
        out[f"optim.{name}.exp_avg_sq"] = st["exp_avg_sq"]
        out[f"optim.{name}.step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(1)
    return out


def _restore_opt_state(opt: torch.optim.Optimizer, named: Mapping[str, torch.nn.Parameter],
                       tensors: Mapping[str, torch.Tensor]) -> None:
    for name, p in named.items():
        key = f"optim.{name}.exp_avg"
        if key not in tensors:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(tensors[f"optim.{name}.step"][0])),
            "exp_avg": tensors[key].to(p.dtype).clone(),
            "exp_avg_sq": tensors[f"optim.{name}.exp_avg_sq"].to(p.dtype).clone(),
        }


def _trainable(bundle: ModelBundle, cfg: StageTwoConfig) -> dict[str, torch.nn.Parameter]:
    named = {f"denoiser.{k}": p for k, p in bundle.denoiser.named_parameters()}
    if cfg.finetune_music:
        named.update({f"music_encoder.{k}": p for k, p in bundle.music_encoder.named_parameters()})
    return named


def save_training_state(bundle: ModelBundle, opt: torch.optim.Optimizer, cfg: StageTwoConfig,
                        path: str | Path) -> None:
    named = _trainable(bundle, cfg)
    names = {p: k for k, p in named.items()}
    save_bundle(bundle, path, extra_tensors=_opt_state_tensors(opt, names))


def train_diffusion(
    dataset: Sequence[PairedClip],
    stage1: ModelBundle | None,
    cfg: StageTwoConfig,
    predict_target: str = "x0",
    rng_seed: int = 0,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    resume_from: str | Path | None = None,
    layout: JointLayout = COCO_UPPER_BODY,
    max_steps: int | None = None,
) -> ModelBundle:
    """Train the denoiser; returns a bundle with ``stage == "diffusion"``.

    With ``predict_target == "eps"`` the network regresses the injected noise
    and only the noise MSE is optimised; the perceptual and geometric terms are
    defined on motion and are switched off.
    """
    if predict_target not in ("x0", "eps"):
        raise ValueError(f"predict_target must be 'x0' or 'eps', got {predict_target!r}")
    if resume_from is None and (stage1 is None or stage1.stage not in ("contrastive", "diffusion")):
        raise ConfigurationError("train_diffusion needs a stage-one (contrastive) bundle")
    clips = list(dataset)
    music, motion = _stack(clips)
    x0_all = motion.reshape(len(clips), motion.shape[1], POSE_DIM)
    sched = make_schedule(cfg.T, "linear", cfg.beta_start, cfg.beta_end)

    start_epoch = 0
    resume_tensors: dict[str, torch.Tensor] = {}
    if resume_from is not None:
        bundle, resume_tensors = load_bundle(resume_from)
        if bundle.denoiser is None:
            raise ConfigurationError(f"{resume_from} has no denoiser to resume")
        start_epoch = int(bundle.metadata.get("epochs_done", 0))
        predict_target = bundle.metadata.get("predict_target", predict_target)
    else:
        bundle = ModelBundle(
            config=stage1.config,
            music_encoder=stage1.music_encoder,
            motion_encoder=stage1.motion_encoder,
            pair_head=stage1.pair_head,
            metadata=dict(stage1.metadata),
        )
        torch.manual_seed(rng_seed)
        bundle.denoiser = Denoiser(stage1.config.denoiser)

    named = _trainable(bundle, cfg)
    opt = torch.optim.Adam(named.values(), lr=cfg.learning_rate, betas=(0.9, 0.999))
    _restore_opt_state(opt, named, resume_tensors)
    for p in bundle.motion_encoder.parameters():
        p.requires_grad_(False)
    for p in bundle.pair_head.parameters():
        p.requires_grad_(False)
    for p in bundle.music_encoder.parameters():
        p.requires_grad_(cfg.finetune_music)
    bundle.motion_encoder.eval()

    if not cfg.finetune_music:
        bundle.music_encoder.eval()
        with torch.no_grad():
            emb_all = torch.cat([bundle.music_encoder(music[i:i + 64]) for i in range(0, len(clips), 64)])

    columns = ["ddim", "perc", "vel", "elbow"] if predict_target == "x0" else ["eps_mse"]
    log = TrainingLog(log_path, columns)
    if predict_target == "eps":
        log.note("predict=eps: loss is the noise MSE only; perceptual and geometric terms disabled")
    log.note(f"stage two: epochs {start_epoch}..{cfg.epochs}, T={cfg.T}, lr={cfg.learning_rate}, "
             f"batch={cfg.batch_size}, uncond_rate={cfg.uncond_rate}")

    den = bundle.denoiser
    den.train()
    step = 0
    epoch = start_epoch
    for epoch in range(start_epoch, cfg.epochs):
        gen = _epoch_generator(rng_seed, epoch)
        for bi, idx in enumerate(_batches(len(clips), cfg.batch_size, gen)):
            x0 = x0_all[idx]
            b = x0.shape[0]
            t = torch.randint(1, cfg.T + 1, (b,), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            x_t = q_sample(x0, t, eps, sched)
            if cfg.finetune_music:
                bundle.music_encoder.train()
                emb = bundle.music_encoder(music[idx])
            else:
                emb = emb_all[idx]
            emb = den.mask(emb, cfg.uncond_rate, gen)
            out = den(x_t, t, emb)
            if predict_target == "x0":
                comps = {
                    "ddim": diffusion_loss(x0, out),
                    "perc": perceptual_loss(bundle.motion_encoder, x0.reshape(b, -1, N_JOINTS, 2),
                                            out.reshape(b, -1, N_JOINTS, 2)),
                    "vel": velocity_loss(x0, out),
                    "elbow": elbow_loss(out, layout),
                }
                loss = total_loss(cfg, comps)
            else:
                comps = {"eps_mse": diffusion_loss(eps, out)}
                if not torch.isfinite(comps["eps_mse"]):
                    raise TrainingDivergedError("non-finite loss component 'eps_mse'")
                loss = comps["eps_mse"]
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {bi}; parameter norms: "
                    f"{_param_norms({'denoiser': den})}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.record(epoch, step, {k: v.item() for k, v in comps.items()}, loss.item())
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        if max_steps is not None and step >= max_steps:
            break

    den.eval()
    bundle.eval()
    bundle.stage = "diffusion"
    bundle.metadata = dict(
        bundle.metadata,
        stage2=asdict(cfg),
        stage2_seed=rng_seed,
        predict_target=predict_target,
        epochs_done=cfg.epochs if max_steps is None else epoch,
        stage2_epoch_losses=bundle.metadata.get("stage2_epoch_losses", []) + log.epoch_means(),
    )
    if checkpoint_path is not None:
        save_training_state(bundle, opt, cfg, checkpoint_path)
    bundle.training_log = log
    return bundle


def first_step_loss(dataset: Sequence[PairedClip], checkpoint: str | Path, cfg: StageTwoConfig,
                    rng_seed: int) -> float:
    """Loss of the first optimisation step taken after resuming from ``checkpoint``."""
    stage1, _ = load_bundle(checkpoint)
    bundle = train_diffusion(dataset, stage1, cfg, rng_seed=rng_seed, resume_from=checkpoint, max_steps=1)
    return bundle.training_log.records[0]["total"]
