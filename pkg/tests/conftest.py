import functools
import os
from pathlib import Path

import numpy as np
import pytest

from resinv.config import RunConfig, cached_model
from resinv.denoiser import DenoiserConfig, train
from resinv.glyphs import make_dataset
from resinv.schedule import default_schedule

CACHE = Path(os.environ.get("RESINV_MODEL_CACHE", Path(__file__).resolve().parents[1] / ".model_cache"))

# criterion id -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def run_config():
    return RunConfig()


@pytest.fixture(scope="session")
def schedule():
    return default_schedule()


@pytest.fixture(scope="session")
def base_model(run_config):
    return cached_model(run_config, "base", CACHE)


@pytest.fixture(scope="session")
def pers_model(run_config):
    return cached_model(run_config, "personalized", CACHE)


def _tiny(kind):
    cfg = DenoiserConfig(kind=kind, hidden=48, layers=1, time_dim=8, scene_dim=4,
                         identity_dim=8, control_dim=4)
    data = make_dataset(96, 5, control_prob=0.3 if kind == "base" else 0.0)
    return train(cfg, data, epochs=2, lr=1e-3, seed=3, batch_size=32)


@functools.lru_cache(maxsize=1)
def _overfit_single_image():
    """A personalized model trained on copies of one image, plus that image."""
    from resinv.denoiser import Conditioning

    data = make_dataset(1, 21)
    cfg = DenoiserConfig(hidden=256, layers=1)
    model = train(cfg, data * 64, epochs=300, lr=3e-3, seed=0, batch_size=64).params
    s = data[0]
    return model, s.image, Conditioning(s.scene_code, s.identity)


@pytest.fixture(scope="session")
def tiny_result():
    return _tiny("personalized")


@pytest.fixture(scope="session")
def tiny_model(tiny_result):
    return tiny_result.params


@pytest.fixture(scope="session")
def tiny_base():
    return _tiny("base").params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")
