import numpy as np
import pytest

from anchor.config import precision

# Filled in by test_acceptance.py: criterion -> (passed, detail)
ACCEPTANCE = {}


@pytest.fixture
def f64():
    with precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_cfg(**overrides):
    """A few-second run: small data, small model, short phases."""
    from anchor import settings

    base = {
        "data.n_train": 96, "data.n_test": 48,
        "model.stem_width": 4, "model.widths": [4, 8], "model.embed_dim": 8,
        "model.proj_hidden": 8, "model.proj_dim": 4, "model.cls_hidden": 8,
        "train.batch_size": 32,
        "pretrain.epochs": 2, "apt.epochs": 1, "baseline.epochs": 1,
        "attack.train.steps": 2, "attack.apt.steps": 2, "attack.eval.steps": 2,
        "eval.strong_restarts": 0,
    }
    base.update(overrides)
    return settings.resolve(base)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")
