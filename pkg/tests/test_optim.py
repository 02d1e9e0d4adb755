"""
Tests for SGD and Adam updates.
"""

import numpy as np
import pytest

from src.error_handler import ContractViolation
from src.optim import OptimizerKind, OptimizerState, optimizer_step
from src.params import ParameterSet
from src.tensor import DType, Tensor

from .conftest import f64


def with_grads(values: dict[str, list[float]], grads: dict[str, list[float]]) -> ParameterSet:
    params = ParameterSet((name, f64(v)) for name, v in values.items())
    for name, g in grads.items():
        params[name].grad = np.asarray(g, dtype=np.float64)
    return params


class TestSgd:
    """Plain gradient descent."""

    def test_step_moves_against_gradient(self) -> None:
        params = with_grads({"w": [1.0, 2.0]}, {"w": [0.5, -1.0]})
        state = OptimizerState.sgd(lr=0.1)
        optimizer_step(params, state)
        np.testing.assert_allclose(params["w"].data, [0.95, 2.1])
        assert state.step_count == 1
        assert state.kind is OptimizerKind.SGD

    def test_missing_gradient_rejected(self) -> None:
        params = with_grads({"w": [1.0], "b": [0.0]}, {"w": [1.0]})
        with pytest.raises(ContractViolation, match="b"):
            optimizer_step(params, OptimizerState.sgd(lr=0.1))


class TestAdam:
    """Bias-corrected Adam."""

    def test_first_step_is_lr_times_sign(self) -> None:
        params = with_grads({"w": [1.0, 1.0, 1.0]}, {"w": [3.0, -0.01, 200.0]})
        optimizer_step(params, OptimizerState.adam(lr=0.01))
        np.testing.assert_allclose(params["w"].data, [0.99, 1.01, 0.99], rtol=1e-6)

    def test_matches_reference_over_several_steps(self, rng: np.random.Generator) -> None:
        w = rng.normal(size=4)
        params = ParameterSet([("w", f64(w.copy()))])
        state = OptimizerState.adam(lr=1e-3)
        m = np.zeros(4)
        v = np.zeros(4)
        for t in range(1, 6):
            g = rng.normal(size=4)
            params["w"].grad = g.copy()
            optimizer_step(params, state)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(params["w"].data, w, rtol=1e-12)
        assert state.step_count == 5

    def test_moments_survive_weight_replacement(self) -> None:
        state = OptimizerState.adam(lr=0.01)
        for _ in range(2):
            params = with_grads({"w": [0.0]}, {"w": [1.0]})
            optimizer_step(params, state)
        assert state.step_count == 2
        assert state.first_moments["w"][0] == pytest.approx(0.19)

    def test_f32_parameters_stay_f32(self) -> None:
        params = ParameterSet([("w", Tensor(np.ones(3), DType.F32, requires_grad=True))])
        params["w"].grad = np.ones(3, dtype=np.float32)
        optimizer_step(params, OptimizerState.adam())
        assert params["w"].data.dtype == np.float32
        assert params["w"].dtype is DType.F32
