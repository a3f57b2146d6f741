import subprocess
import sys

import numpy as np
import pytest

from baton.cli import main
from baton.config import RunConfig
from baton.data import load_dataset, read_manifest
from baton.metrics import EvalReport
from baton.networks import load_bundle
from baton.training import read_training_log

DATA = ["--clips", "10", "--frames", "24", "--beat-period-range", "6:12", "--bands", "8",
        "--test-fraction", "0.3"]
TRAIN1 = ["--model-size", "tiny", "--epochs", "2", "--batch-size", "4"]
TRAIN2 = ["--epochs", "2", "--batch-size", "4", "--T", "50"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """make-data -> train-contrastive -> train-diffusion -> generate -> evaluate on a tiny model."""
    root = tmp_path_factory.mktemp("cli")
    for argv in (
        ["make-data", "--out", root / "data", "--seed", 3, *DATA],
        ["train-contrastive", "--data", root / "data", "--out", root / "s1", *TRAIN1],
        ["train-diffusion", "--data", root / "data", "--stage1", root / "s1/stage1.ckpt",
         "--out", root / "s2", *TRAIN2],
        ["generate", "--model", root / "s2/model.ckpt", "--music", root / "data", "--split", "test",
         "--steps", 5, "--seed", 1, "--out", root / "gen"],
        ["evaluate", "--gt", root / "data", "--gen", root / "gen", "--stage1", root / "s1/stage1.ckpt",
         "--diversity-samples", 20, "--out", root / "eval"],
    ):
        assert main([str(a) for a in argv]) == 0, argv
    return root


def test_make_data(pipeline, tmp_path, capsys):
    manifest = read_manifest(pipeline / "data")
    assert len(manifest["clips"]) == 10
    assert len(load_dataset(pipeline / "data", "train")) == 7
    assert len(load_dataset(pipeline / "data", "test")) == 3
    code, out, _ = run(capsys, "make-data", "--out", tmp_path / "again", "--seed", 3, *DATA)
    assert code == 0 and "clips\t10" in out and "duration_s\t8.0" in out
    assert _files(tmp_path / "again") == _files(pipeline / "data")


def test_make_data_argument_errors(tmp_path, capsys):
    code, _, err = run(capsys, "make-data", "--out", tmp_path / "x", "--frames", 4,
                       "--beat-period-range", "15:20")
    assert code == 2 and "two beats" in err and not (tmp_path / "x").exists()
    code, _, _ = run(capsys, "make-data", "--out", tmp_path / "x", "--clips", 0)
    assert code == 2
    with pytest.raises(SystemExit) as info:
        main(["make-data", "--out", str(tmp_path / "x"), "--beat-period-range", "banana"])
    assert info.value.code == 2


def test_existing_out_dir_is_refused(pipeline, capsys):
    code, _, err = run(capsys, "make-data", "--out", pipeline / "data", *DATA)
    assert code == 2 and "already exists" in err


def test_config_file_and_flag_precedence(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("data.clips = 5\ndata.frames = 30\ndata.n_bands = 4\ndata.beat_period_range = 6:12\n")
    code, _, _ = run(capsys, "make-data", "--out", tmp_path / "d", "--config", tmp_path / "c.txt",
                     "--frames", 40, "--test-fraction", 0)
    assert code == 0
    cfg = RunConfig.load(tmp_path / "d/run_config.txt")
    assert (cfg.data.clips, cfg.data.frames, cfg.data.n_bands) == (5, 40, 4)
    clip = load_dataset(tmp_path / "d")[0]
    assert clip.motion.n_frames == 40 and clip.music.n_bands == 4
    (tmp_path / "bad.txt").write_text("stage9.x = 1\n")
    code, _, _ = run(capsys, "make-data", "--out", tmp_path / "e", "--config", tmp_path / "bad.txt")
    assert code == 2


def test_train_contrastive_outputs(pipeline):
    s1 = pipeline / "s1"
    assert {p.name for p in s1.iterdir()} == {"stage1.ckpt", "train_log.tsv", "loss.png", "run_config.txt"}
    bundle, _ = load_bundle(s1 / "stage1.ckpt")
    assert bundle.stage == "contrastive" and bundle.config.music.n_bands == 8
    rows = read_training_log(s1 / "train_log.tsv")
    assert {r["epoch"] for r in rows} == {0, 1}


def test_train_contrastive_zero_epochs_and_errors(pipeline, tmp_path, capsys):
    code, _, _ = run(capsys, "train-contrastive", "--data", pipeline / "data", "--out", tmp_path / "z",
                     "--model-size", "tiny", "--epochs", 0, "--batch-size", 4)
    assert code == 0 and (tmp_path / "z/stage1.ckpt").exists()
    with pytest.raises(SystemExit) as info:
        main(["train-contrastive", "--out", str(tmp_path / "y")])
    assert info.value.code == 2
    code, _, _ = run(capsys, "train-contrastive", "--data", tmp_path / "nowhere", "--out", tmp_path / "w")
    assert code == 3
    code, _, _ = run(capsys, "train-contrastive", "--data", pipeline / "data", "--out", tmp_path / "v",
                     "--batch-size", 64)
    assert code == 2


def test_train_diffusion_outputs_and_defaults(pipeline, capsys, tmp_path):
    s2 = pipeline / "s2"
    assert {"model.ckpt", "train_log.tsv", "loss.png", "run_config.txt"} <= {p.name for p in s2.iterdir()}
    cfg = RunConfig.load(s2 / "run_config.txt")
    assert (cfg.stage2.learning_rate, cfg.stage2.uncond_rate, cfg.stage2.lambda_perc,
            cfg.stage2.lambda_geo, cfg.stage2.lambda_vel, cfg.stage2.lambda_elbow) == \
        (2e-4, 0.1, 1e-6, 1.0, 0.1, 0.1)
    bundle, extra = load_bundle(s2 / "model.ckpt")
    assert bundle.stage == "diffusion" and bundle.denoiser is not None
    assert any(k.startswith("optim.") for k in extra)


def test_train_diffusion_eps_and_errors(pipeline, tmp_path, capsys):
    code, out, _ = run(capsys, "train-diffusion", "--data", pipeline / "data", "--stage1",
                       pipeline / "s1/stage1.ckpt", "--out", tmp_path / "eps", "--predict", "eps", *TRAIN2)
    assert code == 0 and "predict\teps" in out
    assert "perceptual and geometric terms disabled" in (tmp_path / "eps/train_log.tsv").read_text()
    # a stage-two checkpoint is not a valid stage-one input
    code, _, err = run(capsys, "train-diffusion", "--data", pipeline / "data", "--stage1",
                       pipeline / "s2/model.ckpt", "--out", tmp_path / "bad", *TRAIN2)
    assert code == 2 and "stage-one" in err
    code, _, _ = run(capsys, "train-diffusion", "--data", pipeline / "data", "--out", tmp_path / "none")
    assert code == 2
    code, _, _ = run(capsys, "train-diffusion", "--data", pipeline / "data", "--stage1",
                     tmp_path / "missing.ckpt", "--out", tmp_path / "m")
    assert code == 3
    code, _, _ = run(capsys, "train-diffusion", "--data", pipeline / "data", "--stage1",
                     pipeline / "s1/stage1.ckpt", "--out", tmp_path / "div", *TRAIN2, "--lr", 1e30,
                     "--epochs", 30)
    assert code == 4


def test_train_diffusion_resume(pipeline, tmp_path, capsys):
    code, out, _ = run(capsys, "train-diffusion", "--data", pipeline / "data", "--resume",
                       pipeline / "s2/model.ckpt", "--out", tmp_path / "r", *TRAIN2[2:], "--epochs", 3,
                       "--batch-size", 4)
    assert code == 0 and "epochs_done\t3" in out
    rows = read_training_log(tmp_path / "r/train_log.tsv")
    assert {r["epoch"] for r in rows} == {2}


def test_generate_outputs(pipeline, tmp_path, capsys):
    gen = load_dataset(pipeline / "gen", None)
    test = load_dataset(pipeline / "data", "test")
    assert gen.clip_ids == test.clip_ids
    for g, t in zip(gen, test):
        assert g.motion.n_frames == t.music.n_frames // 3
        assert (pipeline / "gen" / f"{g.clip_id}.trajectory.png").exists()
    code, _, _ = run(capsys, "generate", "--model", pipeline / "s2/model.ckpt", "--music",
                     pipeline / "data", "--split", "test", "--steps", 5, "--seed", 1, "--out", tmp_path / "g")
    assert code == 0
    assert _files(tmp_path / "g") == _files(pipeline / "gen")


def test_generate_single_music_file_and_ddpm_path(pipeline, tmp_path, capsys):
    clip_id = load_dataset(pipeline / "data", "test").clip_ids[0]
    music_file = next((pipeline / "data").rglob(f"{clip_id}.music.f32"))
    code, out, _ = run(capsys, "generate", "--model", pipeline / "s2/model.ckpt", "--music", music_file,
                       "--steps", 50, "--eta", 1, "--out", tmp_path / "one")
    assert code == 0 and "clips\t1" in out
    code, _, _ = run(capsys, "generate", "--model", pipeline / "s2/model.ckpt", "--music", music_file,
                     "--method", "ddpm", "--out", tmp_path / "ddpm")
    assert code == 0


def test_generate_errors(pipeline, tmp_path, capsys):
    code, _, _ = run(capsys, "generate", "--model", pipeline / "s1/stage1.ckpt", "--music",
                     pipeline / "data", "--out", tmp_path / "a")
    assert code == 2
    code, _, _ = run(capsys, "generate", "--model", pipeline / "s2/model.ckpt", "--music",
                     tmp_path / "nothing.f32", "--out", tmp_path / "b")
    assert code == 3
    (tmp_path / "odd.music.f32").write_bytes(np.ones(7, dtype="<f4").tobytes())
    code, _, _ = run(capsys, "generate", "--model", pipeline / "s2/model.ckpt", "--music",
                     tmp_path / "odd.music.f32", "--out", tmp_path / "c")
    assert code == 2


def test_evaluate_report(pipeline, tmp_path, capsys):
    report = EvalReport.read(pipeline / "eval/report.tsv")
    assert set(report.values) == {"MSE", "FGD", "BC", "Diversity"}
    assert (pipeline / "eval/beat_alignment.png").exists()
    code, out, _ = run(capsys, "evaluate", "--gt", pipeline / "data", "--gen", pipeline / "gen",
                       "--stage1", pipeline / "s1/stage1.ckpt", "--diversity-samples", 20,
                       "--out", tmp_path / "again")
    assert code == 0 and all(m in out for m in ("MSE", "FGD", "BC", "Diversity"))
    again = EvalReport.read(tmp_path / "again/report.tsv")
    assert again.values["Diversity"] == report.values["Diversity"]


def test_evaluate_ground_truth_against_itself(pipeline, tmp_path, capsys):
    code, _, _ = run(capsys, "evaluate", "--gt", pipeline / "data", "--gen", pipeline / "data",
                     "--stage1", pipeline / "s1/stage1.ckpt", "--diversity-samples", 20,
                     "--out", tmp_path / "self")
    assert code == 0
    rep = EvalReport.read(tmp_path / "self/report.tsv")
    assert rep.values["MSE"] == 0.0 and rep.values["FGD"] < 1e-6 and rep.values["BC"] > 0.5


def test_evaluate_mismatched_ids(pipeline, tmp_path, capsys):
    main(["make-data", "--out", str(tmp_path / "other"), "--seed", "3", "--clips", "4", "--frames", "24",
          "--beat-period-range", "6:12", "--bands", "8"])
    capsys.readouterr()
    # the smaller set lacks most of the larger set's clip ids
    code, _, err = run(capsys, "evaluate", "--gt", tmp_path / "other", "--gen", pipeline / "data",
                       "--stage1", pipeline / "s1/stage1.ckpt", "--out", tmp_path / "mm")
    assert code == 2 and "not in ground truth" in err


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "baton.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("make-data", "train-contrastive", "train-diffusion", "generate", "evaluate"):
        assert cmd in res.stdout


def test_training_artifacts_reproducible(pipeline, tmp_path, capsys):
    code, _, _ = run(capsys, "train-contrastive", "--data", pipeline / "data", "--out", tmp_path / "s1",
                     *TRAIN1)
    assert code == 0
    for name in ("stage1.ckpt", "loss.png", "run_config.txt"):
        assert (tmp_path / "s1" / name).read_bytes() == (pipeline / "s1" / name).read_bytes(), name
    # logs agree on everything except the wall-clock column
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]  # noqa: E731
    assert strip(read_training_log(tmp_path / "s1/train_log.tsv")) == \
        strip(read_training_log(pipeline / "s1/train_log.tsv"))
