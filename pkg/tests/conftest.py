import os

import numpy as np
import pytest
import torch

# single-threaded torch so repeat-run determinism checks are meaningful
torch.set_num_threads(1)
os.environ.setdefault("MPLBACKEND", "Agg")

# desk-scale end-to-end setup shared by the training and acceptance suites
TRAIN_CLIPS, TRAIN_SEED = 200, 0
HELD_OUT_CLIPS, HELD_OUT_SEED = 40, 99
STAGE1_EPOCHS = 30
# the paper's epoch count; the first 100 epochs equal a standalone 100-epoch run
STAGE2_EPOCHS = 500

# filled in by tests/test_acceptance.py, echoed after the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def train_clips():
    from baton.data import synthetic_corpus
    return synthetic_corpus(TRAIN_CLIPS, seed=TRAIN_SEED)


@pytest.fixture(scope="session")
def held_out_clips():
    from baton.data import synthetic_corpus
    return synthetic_corpus(HELD_OUT_CLIPS, seed=HELD_OUT_SEED)


@pytest.fixture(scope="session")
def stage1_bundle(train_clips):
    from baton.networks import ModelConfig
    from baton.training import StageOneConfig, train_contrastive
    return train_contrastive(train_clips, StageOneConfig(epochs=STAGE1_EPOCHS), rng_seed=0,
                             model_config=ModelConfig.desk())


def _stage2(train_clips, stage1, tmp_path_factory, name, predict="x0", **overrides):
    from baton.networks import load_bundle, save_bundle
    from baton.training import StageTwoConfig, train_diffusion
    # reload the stage-one checkpoint so every arm starts from identical weights
    ckpt = tmp_path_factory.mktemp(name) / "stage1.ckpt"
    save_bundle(stage1, ckpt)
    s1, _ = load_bundle(ckpt)
    cfg = StageTwoConfig(epochs=STAGE2_EPOCHS, **overrides)
    return train_diffusion(train_clips, s1, cfg, predict_target=predict, rng_seed=0)


@pytest.fixture(scope="session")
def x0_arm(train_clips, stage1_bundle, tmp_path_factory):
    return _stage2(train_clips, stage1_bundle, tmp_path_factory, "x0")


@pytest.fixture(scope="session")
def eps_arm(train_clips, stage1_bundle, tmp_path_factory):
    return _stage2(train_clips, stage1_bundle, tmp_path_factory, "eps", predict="eps")


@pytest.fixture(scope="session")
def no_geo_arm(train_clips, stage1_bundle, tmp_path_factory):
    return _stage2(train_clips, stage1_bundle, tmp_path_factory, "nogeo", lambda_geo=0.0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
