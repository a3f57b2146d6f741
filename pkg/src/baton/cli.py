"""Command-line entry point: ``baton <command> ...``.

Every command writes into a fresh ``--out`` directory (refusing to reuse one)
together with the fully resolved ``run_config.txt``. Results are also printed
to stdout as tab-separated ``key value`` lines.

Exit codes: 0 ok, 2 bad arguments or incompatible inputs, 3 IO errors,
4 training divergence, 5 sampling divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import MODEL_SIZES, ConfigError, RunConfig, parse_range
from .data import (MOTION_FPS, MUSIC_PER_MOTION, ClipValidationError, DatasetError,
                   MusicFeatureSequence, PairedClip, load_dataset, save_dataset, synthetic_corpus,
                   window_clips)
from .diffusion import SamplingDivergedError
from .metrics import (EvalReport, UndefinedMetricError, clip_beat_consistency, diversity,
                      extract_music_beats, fgd, mse)
from .networks import CheckpointError, ModelConfig, load_bundle, motion_features, save_bundle
from .pipeline import MotionGenerator
from .plotting import plot_beat_alignment, plot_loss_curves, plot_skeleton_trajectory
from .training import ConfigurationError, TrainingDivergedError, train_contrastive, train_diffusion

logger = logging.getLogger("baton")

EXIT_OK, EXIT_ARGS, EXIT_IO, EXIT_TRAIN, EXIT_SAMPLE = 0, 2, 3, 4, 5


class UsageError(Exception):
    """Bad arguments or incompatible inputs (exit 2)."""


def _emit(**fields) -> None:
    for k, v in fields.items():
        print(f"{k}\t{v}")


def _make_run_dir(path: str) -> Path:
    out = Path(path)
    if out.exists():
        raise UsageError(f"{out} already exists; run directories are never overwritten")
    out.mkdir(parents=True)
    return out


def _resolve_config(args, overrides: dict) -> RunConfig:
    base = RunConfig.load(args.config) if args.config else RunConfig()
    return base.with_overrides({"seed": args.seed, **overrides})


def _model_config(size: str, n_bands: int) -> ModelConfig:
    if size == "desk":
        return ModelConfig.desk(n_bands)
    if size == "tiny":
        return ModelConfig.tiny(n_bands)
    return ModelConfig.full(n_bands)


def _training_clips(data: str, window: int | None) -> list[PairedClip]:
    clips = list(load_dataset(data, "train"))
    if not clips:
        raise UsageError(f"{data} has no clips in the train split")
    if window:
        clips = window_clips(clips, window)
    if len({c.motion.n_frames for c in clips}) != 1:
        raise UsageError("training clips differ in length; pass --window N to cut equal windows")
    return clips


# ---------------------------------------------------------------------------
# commands


def cmd_make_data(args) -> int:
    cfg = _resolve_config(args, {
        "data.clips": args.clips, "data.frames": args.frames,
        "data.beat_period_range": args.beat_period_range,
        "data.amplitude_range": args.amplitude_range,
        "data.n_bands": args.bands, "data.seed": args.seed,
    })
    d = cfg.data
    if d.clips < 1:
        raise UsageError("--clips must be >= 1")
    if d.beat_period_range[0] < 4:
        raise UsageError("beat periods must be >= 4 frames")
    if d.frames < 2 * d.beat_period_range[1]:
        raise UsageError(f"--frames {d.frames} is shorter than two beats of the slowest "
                         f"period {d.beat_period_range[1]}")
    if not 0.0 <= args.test_fraction < 1.0:
        raise UsageError("--test-fraction must be in [0, 1)")
    clips = synthetic_corpus(d.clips, seed=d.seed, n_frames=d.frames,
                             beat_period_range=d.beat_period_range,
                             amplitude_range=d.amplitude_range, n_bands=d.n_bands)
    n_test = int(d.clips * args.test_fraction)
    splits = {c.clip_id: "test" for c in clips[len(clips) - n_test:]} if n_test else {}
    out = _make_run_dir(args.out)
    save_dataset(clips, out, splits)
    cfg.write(out)
    _emit(clips=len(clips), train=len(clips) - n_test, test=n_test,
          duration_s=f"{len(clips) * d.frames / MOTION_FPS:.1f}", out=out)
    return EXIT_OK


def cmd_train_contrastive(args) -> int:
    cfg = _resolve_config(args, {
        "stage1.epochs": args.epochs, "stage1.learning_rate": args.lr,
        "stage1.batch_size": args.batch_size, "model.size": args.model_size,
    })
    clips = _training_clips(args.data, args.window)
    if len(clips) < cfg.stage1.batch_size:
        raise UsageError(f"{len(clips)} training clips, fewer than batch size {cfg.stage1.batch_size}")
    out = _make_run_dir(args.out)
    cfg.write(out)
    model_cfg = _model_config(cfg.model.size, clips[0].music.n_bands)
    bundle = train_contrastive(clips, cfg.stage1, rng_seed=cfg.seed, model_config=model_cfg,
                               log_path=out / "train_log.tsv")
    bundle.metadata["run_config"] = cfg.to_text()
    save_bundle(bundle, out / "stage1.ckpt")
    losses = bundle.metadata["stage1_epoch_losses"]
    if losses:
        plot_loss_curves({"pairing BCE": losses}, out / "loss.png", "contrastive stage")
    _emit(clips=len(clips), epochs=cfg.stage1.epochs,
          final_loss=f"{losses[-1]:.6g}" if losses else "nan", checkpoint=out / "stage1.ckpt")
    return EXIT_OK


def cmd_train_diffusion(args) -> int:
    cfg = _resolve_config(args, {
        "stage2.epochs": args.epochs, "stage2.learning_rate": args.lr,
        "stage2.batch_size": args.batch_size, "stage2.uncond_rate": args.uncond_rate,
        "stage2.lambda_ddim": args.lambda_ddim, "stage2.lambda_perc": args.lambda_perc,
        "stage2.lambda_geo": args.lambda_geo, "stage2.lambda_vel": args.lambda_vel,
        "stage2.lambda_elbow": args.lambda_elbow, "stage2.T": args.T,
        "stage2.finetune_music": True if args.finetune_music else None,
    })
    if args.stage1 is None and args.resume is None:
        raise UsageError("need --stage1 (or --resume)")
    clips = _training_clips(args.data, args.window)
    stage1 = None
    if args.stage1 is not None:
        stage1, _ = load_bundle(args.stage1)
        if stage1.stage != "contrastive":
            raise UsageError(f"{args.stage1} is a {stage1.stage!r} checkpoint, not a stage-one one")
        if stage1.config.music.n_bands != clips[0].music.n_bands:
            raise UsageError(f"stage-one model expects {stage1.config.music.n_bands} bands, "
                             f"data has {clips[0].music.n_bands}")
    out = _make_run_dir(args.out)
    cfg.write(out)
    try:
        bundle = train_diffusion(clips, stage1, cfg.stage2, predict_target=args.predict,
                                 rng_seed=cfg.seed, log_path=out / "train_log.tsv",
                                 checkpoint_path=out / "model.ckpt", resume_from=args.resume)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    log = bundle.training_log
    cols = ["ddim", "perc", "vel", "elbow"] if bundle.metadata["predict_target"] == "x0" else ["eps_mse"]
    series = {c: log.epoch_means(c) for c in cols}
    series["total"] = log.epoch_means()
    if series["total"]:
        plot_loss_curves(series, out / "loss.png", f"diffusion stage (predict {args.predict})", logy=True)
    _emit(clips=len(clips), predict=bundle.metadata["predict_target"],
          epochs_done=bundle.metadata["epochs_done"],
          final_loss=f"{series['total'][-1]:.6g}" if series["total"] else "nan",
          checkpoint=out / "model.ckpt")
    return EXIT_OK


def _music_inputs(path: str, split: str, n_bands: int) -> tuple[list[str], list[MusicFeatureSequence], list, object]:
    p = Path(path)
    if p.is_dir():
        ds = load_dataset(p, None if split == "all" else split)
        clips = list(ds)
        return [c.clip_id for c in clips], [c.music for c in clips], [c.beat_frames for c in clips], ds
    if not p.is_file():
        raise FileNotFoundError(f"no such music clip or dataset: {p}")
    raw = np.fromfile(p, dtype="<f4")
    if raw.size % n_bands:
        raise UsageError(f"{p} holds {raw.size} floats, not a multiple of {n_bands} bands")
    feats = raw.reshape(-1, n_bands)
    if feats.shape[0] % MUSIC_PER_MOTION:
        raise UsageError(f"{p} has {feats.shape[0]} music frames, not a multiple of {MUSIC_PER_MOTION}")
    name = p.name.split(".")[0]
    return [name], [MusicFeatureSequence(feats)], [None], None


def cmd_generate(args) -> int:
    cfg = _resolve_config(args, {
        "sampler.method": args.method, "sampler.steps": args.steps, "sampler.eta": args.eta,
        "sampler.guidance": args.guidance, "sampler.seed": args.seed,
    })
    bundle, _ = load_bundle(args.model)
    if bundle.denoiser is None:
        raise UsageError(f"{args.model} has no trained denoiser")
    ids, music, beats, source = _music_inputs(args.music, args.split, args.bands or bundle.config.music.n_bands)
    if not ids:
        raise UsageError(f"no clips selected from {args.music}")
    if music[0].n_bands != bundle.config.music.n_bands:
        raise UsageError(f"model expects {bundle.config.music.n_bands} bands, music has {music[0].n_bands}")
    out = _make_run_dir(args.out)
    cfg.write(out)
    gen = MotionGenerator(bundle)
    poses = gen.generate_grouped(music, cfg.sampler)
    clips = [PairedClip(music=m, motion=pose, clip_id=cid, beat_frames=b)
             for cid, m, pose, b in zip(ids, music, poses, beats)]
    kwargs = {} if source is None else {"bounds": source.bounds, "layout": source.layout}
    save_dataset(clips, out, **kwargs)
    for c in clips:
        plot_skeleton_trajectory(c.motion, out / f"{c.clip_id}.trajectory.png", c.clip_id)
    _emit(clips=len(clips), method=cfg.sampler.method, steps=cfg.sampler.steps,
          eta=cfg.sampler.eta, guidance=cfg.sampler.guidance, seed=cfg.sampler.seed, out=out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args, {
        "metrics.diversity_samples": args.diversity_samples, "metrics.diversity_seed": args.seed,
    })
    gen = list(load_dataset(args.gen, None))
    gt_ds = load_dataset(args.gt, None)
    gt_by_id = {c.clip_id: c for c in gt_ds}
    if len(gen) < 2:
        raise UsageError("need at least 2 generated clips")
    missing = [c.clip_id for c in gen if c.clip_id not in gt_by_id]
    if missing:
        raise UsageError(f"generated clip ids not in ground truth: {', '.join(missing[:5])}")
    gt = [gt_by_id[c.clip_id] for c in gen]
    for a, b in zip(gt, gen):
        if a.motion.n_frames != b.motion.n_frames:
            raise UsageError(f"clip {a.clip_id}: {a.motion.n_frames} ground-truth frames vs "
                             f"{b.motion.n_frames} generated")
    stage1, _ = load_bundle(args.stage1)
    encoder = stage1.motion_encoder.eval()
    feats = lambda clips: motion_features(encoder, clips)  # noqa: E731

    bcs, skipped = [], 0
    for c in gen:
        try:
            bcs.append(clip_beat_consistency(c.motion, c.music))
        except UndefinedMetricError:
            skipped += 1
    m = cfg.metrics
    values = {
        "MSE": float(np.mean([mse(a.motion, b.motion) for a, b in zip(gt, gen)])),
        "FGD": fgd([c.motion for c in gt], [c.motion for c in gen], feats),
        "BC": float(np.mean(bcs)) if bcs else float("nan"),
        "Diversity": diversity([c.motion for c in gen], feats, m.diversity_samples, m.diversity_seed),
    }
    report = EvalReport(
        values=values,
        n_samples={"MSE": len(gen), "FGD": len(gen), "BC": len(bcs), "Diversity": m.diversity_samples},
        seeds={"diversity": m.diversity_seed},
        extractor=str(Path(args.stage1).resolve()),
        clip_ids=[c.clip_id for c in gen],
    )
    out = _make_run_dir(args.out)
    cfg.write(out)
    report.write(out / "report.tsv")
    first = gen[0]
    plot_beat_alignment(first.motion, extract_music_beats(first.music), out / "beat_alignment.png",
                        f"{first.clip_id}: beats", reference=gt[0].motion)
    if skipped:
        logger.warning("BC skipped %d clips without detectable music beats", skipped)
    for row in report.rows():
        print("\t".join(row))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _range(kind):
    def parse(text):
        try:
            return parse_range(text, kind)
        except ConfigError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="baton", description="Music-driven conducting motion generation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_help="global seed"):
        sp.add_argument("--out", required=True, help="new run directory (must not exist)")
        sp.add_argument("--config", help="config file of 'section.key = value' lines")
        sp.add_argument("--seed", type=int, help=seed_help)
        sp.add_argument("--threads", type=int, default=1,
                        help="torch intra-op threads (1 gives byte-identical reruns)")

    sp = sub.add_parser("make-data", help="write a synthetic metronome-conductor dataset")
    common(sp, "corpus seed; per-clip seeds derive from it")
    sp.add_argument("--clips", type=int)
    sp.add_argument("--frames", type=int)
    sp.add_argument("--beat-period-range", type=_range(int), help="e.g. 8:20 motion frames per beat")
    sp.add_argument("--amplitude-range", type=_range(float), help="e.g. 0.3:1.0")
    sp.add_argument("--bands", type=int)
    sp.add_argument("--test-fraction", type=float, default=0.1,
                    help="trailing fraction of clips assigned to the test split")
    sp.set_defaults(func=cmd_make_data)

    sp = sub.add_parser("train-contrastive", help="stage one: music/motion encoders and pairing head")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--model-size", choices=MODEL_SIZES)
    sp.add_argument("--window", type=int, help="cut training clips into windows of this many frames")
    sp.set_defaults(func=cmd_train_contrastive)

    sp = sub.add_parser("train-diffusion", help="stage two: the denoiser")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--stage1", help="stage-one checkpoint")
    sp.add_argument("--predict", choices=("x0", "eps"), default="x0")
    sp.add_argument("--resume", help="continue from a stage-two checkpoint (epochs is the total)")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--uncond-rate", type=float)
    for name in ("ddim", "perc", "geo", "vel", "elbow"):
        sp.add_argument(f"--lambda-{name}", type=float)
    sp.add_argument("--T", type=int, help="diffusion steps")
    sp.add_argument("--finetune-music", action="store_true", help="also train the music encoder")
    sp.add_argument("--window", type=int)
    sp.set_defaults(func=cmd_train_diffusion)

    sp = sub.add_parser("generate", help="sample motion for music clips")
    common(sp, "sampler seed")
    sp.add_argument("--model", required=True, help="stage-two checkpoint")
    sp.add_argument("--music", required=True, help="dataset directory or a single <id>.music.f32 file")
    sp.add_argument("--split", choices=("train", "val", "test", "all"), default="all")
    sp.add_argument("--bands", type=int, help="band count of a raw .music.f32 file (default: the model's)")
    sp.add_argument("--method", choices=("ddim", "ddpm"))
    sp.add_argument("--steps", type=int)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--guidance", type=float)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("evaluate", help="MSE, FGD, BC and Diversity of a generated set")
    common(sp, "diversity permutation seed")
    sp.add_argument("--gt", required=True, help="ground-truth dataset directory")
    sp.add_argument("--gen", required=True, help="generated dataset directory")
    sp.add_argument("--stage1", required=True, help="checkpoint whose motion encoder extracts features")
    sp.add_argument("--diversity-samples", type=int)
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"baton: error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except TrainingDivergedError as exc:
        print(f"baton: training diverged: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except SamplingDivergedError as exc:
        print(f"baton: sampling diverged: {exc}", file=sys.stderr)
        return EXIT_SAMPLE
    except (OSError, DatasetError, ClipValidationError, CheckpointError) as exc:
        print(f"baton: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"baton: error: {exc}", file=sys.stderr)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
