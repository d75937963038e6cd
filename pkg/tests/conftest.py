"""Shared fixtures and the acceptance-criteria summary hook."""

import numpy as np
import pytest

from lsqnet.data import make_blob_split
from lsqnet.layers import ModelConfig, build_model, save_checkpoint
from lsqnet.trainer import RunConfig, train

# Populated by tests/test_acceptance.py; echoed after the run so the
# one-line verdicts are visible even when every test passes.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def mlp_data():
    """784-feature 10-class blobs, shared train/test split."""
    return make_blob_split(4000, 1000, n_features=784, n_classes=10,
                           noise=0.8, seed=0)


@pytest.fixture(scope="session")
def cnn_data():
    """Image-shaped blobs for the reference CNN."""
    return make_blob_split(2000, 500, n_features=64, n_classes=10,
                           noise=0.8, seed=0, image_shape=(1, 8, 8))


MLP_CONFIG = dict(arch="mlp", input_dim=784, hidden=(256, 128), classes=10)


@pytest.fixture(scope="session")
def fp_baselines(mlp_data, tmp_path_factory):
    """Full-precision MLP baselines for seeds 0..2: (ckpt path, top1)."""
    out = {}
    ckdir = tmp_path_factory.mktemp("fp_baselines")
    tr, te = mlp_data
    for seed in range(3):
        model = build_model(ModelConfig(**MLP_CONFIG, bits=None),
                            np.random.default_rng(seed))
        cfg = RunConfig(epochs=10, lr0=0.1, weight_decay=1e-4, seed=seed)
        model, metrics, _ = train(model, tr, te, cfg)
        path = ckdir / f"fp_seed{seed}.ckpt"
        save_checkpoint(str(path), model, epoch=cfg.epochs - 1)
        out[seed] = (str(path), metrics.records[-1].top1)
    return out
