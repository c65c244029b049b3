from pathlib import Path

import pytest

from apparent_age.datasets import SyntheticSpec, generate_synthetic
from apparent_age.pipeline import StagePlan, TrainSettings, run_stage

REPO = Path(__file__).resolve().parents[1]
DATA = Path(__file__).resolve().parent / "data"

TINY_BACKBONE = {"name": "tiny_cnn", "image_size": 16, "in_channels": 1, "width": 8, "embedding_dim": 16}

_acceptance = []


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """48 synthetic 16x16 images with train/val/test splits."""
    out = tmp_path_factory.mktemp("tiny")
    return generate_synthetic(SyntheticSpec(count=48, image_size=16, seed=11, splits=(0.5, 0.25, 0.25)), out)


@pytest.fixture(scope="session")
def tiny_settings():
    return TrainSettings(backbone=dict(TINY_BACKBONE), seed=5)


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_data, tiny_settings, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    plan = StagePlan("tiny", str(tiny_data.root / "manifest.csv"), epochs=2, learning_rate=0.01,
                     batch_size=8, clip_grad_norm=5.0)
    return run_stage(None, plan, "amrl", tiny_settings, 0, "tiny", out)


def pytest_runtest_makereport(item, call):
    if call.when == "call" and item.module.__name__.endswith("test_acceptance"):
        doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
        _acceptance.append(("PASS" if call.excinfo is None else "FAIL", doc))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for status, doc in _acceptance:
        terminalreporter.write_line(f"{status}  {doc}")
