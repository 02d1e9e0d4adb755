"""
Pytest configuration and shared fixtures for FedCPC tests.

Test environment variables are set before any ``src`` import so the
settings module picks them up; the fixtures below provide seeded random
generators and deliberately tiny model geometries that keep finite
difference checks and end-to-end runs fast.
"""

import os
from collections.abc import Callable, Generator
from pathlib import Path
from typing import Any

import numpy as np
import pytest

# CRITICAL: Set test environment variables IMMEDIATELY before any imports
# This ensures the settings module picks up test values when it's imported
TEST_ENV_VARS = {
    "IS_TEST_ENV": "true",
    "LOG_LEVEL": "WARNING",
    "FEDCPC_WORKERS": "2",
    "FEDCPC_CONNECT_TIMEOUT_S": "20",
    "FEDCPC_ROUND_TIMEOUT_S": "120",
}

for key, value in TEST_ENV_VARS.items():
    os.environ[key] = value
os.environ.pop("FEDCPC_SEED", None)

from src.classifiers import ClassifierConfig  # noqa: E402
from src.cpc import CpcConfig  # noqa: E402
from src.params import ParameterSet  # noqa: E402
from src.synth_corpus import CorpusSpec  # noqa: E402
from src.tensor import DType, Tape, Tensor, backward  # noqa: E402


@pytest.fixture(scope="session", autouse=True)  # type: ignore
def configure_test_environment() -> Generator[None, None, None]:
    """Keep the test environment variables in place for the whole session."""
    original_env = {key: os.environ.get(key) for key in TEST_ENV_VARS}
    os.environ.update(TEST_ENV_VARS)

    yield

    for key, original_value in original_env.items():
        if original_value is None:
            os.environ.pop(key, None)
        else:
            os.environ[key] = original_value


@pytest.fixture  # type: ignore
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture  # type: ignore
def tiny_cpc_config() -> CpcConfig:
    """Default encoder geometry with 4 channels, 3-dim context and K=2, in f64."""
    return CpcConfig(
        conv_channels=4,
        context_dim=3,
        prediction_steps=2,
        crop_length=1600,
        n_negatives=3,
        batch_size=2,
        epochs=2,
        lr=1e-3,
        dtype=DType.F64,
    )


@pytest.fixture  # type: ignore
def tiny_classifier_config() -> ClassifierConfig:
    """8 x 6 input pooled down to 1 x 1 with two filters per layer, in f64."""
    return ClassifierConfig(
        input_time=8,
        input_dim=6,
        conv_filters=[2, 2, 2, 2, 2],
        fc_width=4,
        lstm_layers=0,
        lstm_hidden=3,
        batch_size=2,
        epochs=2,
        lr=1e-3,
        dtype=DType.F64,
    )


@pytest.fixture  # type: ignore
def tiny_corpus_spec() -> CorpusSpec:
    """Five speakers per class, one clip each: enough for 3 clients plus dev and test."""
    return CorpusSpec(n_speakers=15, utterances_per_speaker=1)


@pytest.fixture  # type: ignore
def tiny_run_ini(tmp_path: Path) -> Callable[..., Path]:
    """Write a run config with tiny geometries under tmp_path; extra lines are appended."""

    def write(extra: str = "") -> Path:
        text = f"""
[run]
seed = 7
output_dir = {tmp_path / "run"}
corpus_dir = {tmp_path / "corpus"}

[corpus]
n_speakers = 15
utterances_per_speaker = 1

[mfcc]
n_ceps = 6

[cpc]
conv_channels = 4
context_dim = 3
prediction_steps = 2
crop_length = 1600
n_negatives = 3
batch_size = 2
epochs = 2
dtype = f64

[classifier]
input_time = 8
conv_filters = 2, 2, 2, 2, 2
fc_width = 4
lstm_hidden = 3
batch_size = 2
epochs = 2
dtype = f64

[federation]
n_clients = 3
rounds = 2
local_epochs = 1
{extra}
"""
        path = tmp_path / "run.ini"
        path.write_text(text, encoding="utf-8")
        return path

    return write


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    tensors: list[Tensor],
    h: float = 1e-5,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """
    Largest relative error between tape gradients and central differences.

    ``loss_fn`` must rebuild the graph from the current tensor values. With
    ``samples`` only that many randomly chosen coordinates per tensor are
    perturbed.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]

    worst = 0.0
    for t, grad in zip(tensors, analytic, strict=True):
        flat = t.data.reshape(-1)
        coords: Any = range(flat.size)
        if samples is not None and flat.size > samples:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, samples, replace=False)
        for i in coords:
            original = flat[i]
            flat[i] = original + h
            plus = loss_fn().item()
            flat[i] = original - h
            minus = loss_fn().item()
            flat[i] = original
            numeric = (plus - minus) / (2 * h)
            exact = grad.reshape(-1)[i]
            scale = max(abs(numeric), abs(exact), 1e-3)
            worst = max(worst, abs(numeric - exact) / scale)
    return worst


@pytest.fixture  # type: ignore
def gradcheck() -> Callable[..., float]:
    return finite_difference_check


def f64(array: Any, requires_grad: bool = True) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float64), DType.F64, requires_grad)


@pytest.fixture  # type: ignore
def param_set() -> Callable[..., ParameterSet]:
    """Build a ParameterSet from ``name=array`` keyword arguments."""

    def build(**arrays: Any) -> ParameterSet:
        return ParameterSet((name, f64(a)) for name, a in arrays.items())

    return build


def pytest_collection_modifyitems(config: Any, items: Any) -> None:
    """Mark every test without an explicit category as a unit test."""
    for item in items:
        if not any(mark.name in ["integration", "slow"] for mark in item.iter_markers()):
            item.add_marker(pytest.mark.unit)
