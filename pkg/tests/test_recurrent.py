"""
Tests for the GRU and LSTM layers.
"""

import numpy as np
import pytest
from scipy.special import expit

from src.error_handler import EmptySequenceError, InvalidShapeError
from src.params import ParameterSet
from src.recurrent import gru_forward, init_gru, init_lstm, lstm_forward, lstm_stack
from src.tensor import DType, Tensor

from .conftest import f64


def gru_weights(d_in: int, hidden: int, rng: np.random.Generator, scale: float = 0.5) -> ParameterSet:
    return ParameterSet(
        [
            ("w_ih", f64(rng.normal(scale=scale, size=(3 * hidden, d_in)))),
            ("w_hh", f64(rng.normal(scale=scale, size=(3 * hidden, hidden)))),
            ("b_ih", f64(rng.normal(scale=scale, size=3 * hidden))),
            ("b_hh", f64(rng.normal(scale=scale, size=3 * hidden))),
        ]
    )


def reference_gru_step(x: np.ndarray, h: np.ndarray, w: ParameterSet) -> np.ndarray:
    hidden = h.size
    gi = w["w_ih"].data @ x + w["b_ih"].data
    gh = w["w_hh"].data @ h + w["b_hh"].data
    r = expit(gi[:hidden] + gh[:hidden])
    z = expit(gi[hidden : 2 * hidden] + gh[hidden : 2 * hidden])
    n = np.tanh(gi[2 * hidden :] + r * gh[2 * hidden :])
    return (1 - z) * n + z * h


class TestGru:
    """Single-layer GRU over a (T, D) sequence."""

    def test_zero_weights_halve_the_state(self) -> None:
        weights = ParameterSet(
            [
                ("w_ih", f64(np.zeros((6, 3)))),
                ("w_hh", f64(np.zeros((6, 2)))),
                ("b_ih", f64(np.zeros(6))),
                ("b_hh", f64(np.zeros(6))),
            ]
        )
        h0 = f64([1.0, -2.0], requires_grad=False)
        out = gru_forward(f64(np.ones((1, 3))), h0, weights)
        np.testing.assert_allclose(out.data, [[0.5, -1.0]])

    def test_zero_weights_and_state_stay_zero(self, rng: np.random.Generator) -> None:
        weights = gru_weights(3, 2, rng, scale=0.0)
        out = gru_forward(f64(rng.normal(size=(4, 3))), f64(np.zeros(2)), weights)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_matches_reference_recurrence(self, rng: np.random.Generator) -> None:
        weights = gru_weights(3, 4, rng)
        xs = rng.normal(size=(5, 3))
        h = rng.normal(size=4)
        out = gru_forward(f64(xs), f64(h), weights).data
        for t in range(5):
            h = reference_gru_step(xs[t], h, weights)
            np.testing.assert_allclose(out[t], h, atol=1e-12)

    def test_empty_sequence_rejected(self, rng: np.random.Generator) -> None:
        with pytest.raises(EmptySequenceError):
            gru_forward(f64(np.zeros((0, 3))), f64(np.zeros(4)), gru_weights(3, 4, rng))

    def test_wrong_initial_state(self, rng: np.random.Generator) -> None:
        with pytest.raises(InvalidShapeError):
            gru_forward(f64(np.zeros((2, 3))), f64(np.zeros(5)), gru_weights(3, 4, rng))

    def test_init_bounds(self, rng: np.random.Generator) -> None:
        weights = init_gru(5, 16, rng, DType.F32)
        assert weights["w_ih"].shape == (48, 5)
        assert weights["w_hh"].shape == (48, 16)
        for t in weights.tensors():
            assert t.dtype is DType.F32
            assert np.abs(t.data).max() <= 0.25

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed: int, gradcheck) -> None:
        rng = np.random.default_rng(seed)
        weights = gru_weights(2, 3, rng)
        xs = f64(rng.normal(size=(4, 2)))
        h0 = f64(rng.normal(size=3))
        upstream = rng.normal(size=(4, 3))

        def loss() -> Tensor:
            return (gru_forward(xs, h0, weights) * Tensor(upstream)).sum()

        assert gradcheck(loss, [xs, h0, *weights.tensors()]) < 1e-4


class TestLstm:
    """LSTM cell, sequence and stacked layers."""

    def test_zero_weights(self) -> None:
        weights = ParameterSet(
            [
                ("w_ih", f64(np.zeros((8, 1)))),
                ("w_hh", f64(np.zeros((8, 2)))),
                ("b_ih", f64(np.zeros(8))),
                ("b_hh", f64(np.zeros(8))),
            ]
        )
        h0 = f64(np.zeros(2), requires_grad=False)
        c0 = f64([2.0, -4.0], requires_grad=False)
        out = lstm_forward(f64(np.ones((1, 1))), (h0, c0), weights)
        # i = f = o = 0.5, g = 0
        np.testing.assert_allclose(out.data[0], 0.5 * np.tanh([1.0, -2.0]))

    def test_stack_reads_layer_scopes(self, rng: np.random.Generator) -> None:
        layer0 = init_lstm(4, 3, rng, DType.F64)
        layer1 = init_lstm(3, 3, rng, DType.F64)
        weights = layer0.prefixed("layers.0").merged(layer1.prefixed("layers.1"))
        xs = f64(rng.normal(size=(6, 4)))

        zero = f64(np.zeros(3), requires_grad=False)
        expected = lstm_forward(lstm_forward(xs, (zero, zero), layer0), (zero, zero), layer1)
        np.testing.assert_array_equal(lstm_stack(xs, weights, 2).data, expected.data)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed: int, gradcheck) -> None:
        rng = np.random.default_rng(seed)
        weights = init_lstm(2, 3, rng, DType.F64).prefixed("layers.0")
        weights = weights.merged(init_lstm(3, 3, rng, DType.F64).prefixed("layers.1"))
        xs = f64(rng.normal(size=(3, 2)))
        upstream = rng.normal(size=(3, 3))

        def loss() -> Tensor:
            return (lstm_stack(xs, weights, 2) * Tensor(upstream)).sum()

        assert gradcheck(loss, [xs, *weights.tensors()]) < 1e-4
