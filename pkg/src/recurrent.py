"""
Recurrent layers built from tape ops: GRU and LSTM.

Gate layout follows the common stacked convention. A GRU holds
``w_ih`` (3H x D), ``w_hh`` (3H x H), ``b_ih`` and ``b_hh`` (3H) with the row
blocks ordered reset, update, candidate. An LSTM holds 4H rows ordered
input, forget, cell, output.
"""

from __future__ import annotations

import numpy as np

from .error_handler import EmptySequenceError, InvalidShapeError
from .params import ParameterSet, uniform
from .tensor import DType, Tensor, matmul, sigmoid, stack, tanh, transpose

GRU_PARAMS = ("w_ih", "w_hh", "b_ih", "b_hh")
LSTM_PARAMS = GRU_PARAMS


def _check_weights(
    weights: ParameterSet, gates: int, d_in: int, kind: str
) -> int:
    for name in GRU_PARAMS:
        if name not in weights:
            raise InvalidShapeError(f"{kind} weights missing '{name}'")
    rows, cols = weights["w_ih"].shape
    hidden = rows // gates
    expected = {
        "w_ih": (gates * hidden, d_in),
        "w_hh": (gates * hidden, hidden),
        "b_ih": (gates * hidden,),
        "b_hh": (gates * hidden,),
    }
    for name, shape in expected.items():
        if weights[name].shape != shape:
            raise InvalidShapeError(
                f"{kind} weight '{name}' has shape {weights[name].shape}, expected {shape}",
                weights[name].shape,
                shape,
            )
    return hidden


def _input_projection(inputs: Tensor, weights: ParameterSet) -> Tensor:
    # one matmul for all time steps: (T, gates*H)
    return matmul(inputs, transpose(weights["w_ih"])) + weights["b_ih"]


def gru_cell(gi: Tensor, h: Tensor, weights: ParameterSet, hidden: int) -> Tensor:
    """One GRU step given the precomputed input projection ``gi`` (3H,)."""
    gh = matmul(weights["w_hh"], h) + weights["b_hh"]
    reset = sigmoid(gi[:hidden] + gh[:hidden])
    update = sigmoid(gi[hidden : 2 * hidden] + gh[hidden : 2 * hidden])
    candidate = tanh(gi[2 * hidden :] + reset * gh[2 * hidden :])
    return (1.0 - update) * candidate + update * h


def gru_forward(inputs: Tensor, h0: Tensor, weights: ParameterSet) -> Tensor:
    """Run a single-layer GRU over ``inputs`` (T, D) and return every hidden state (T, H)."""
    if inputs.ndim != 2:
        raise InvalidShapeError("gru_forward expects (T, D_in)", inputs.shape)
    if inputs.shape[0] == 0:
        raise EmptySequenceError()
    hidden = _check_weights(weights, 3, inputs.shape[1], "GRU")
    if h0.shape != (hidden,):
        raise InvalidShapeError(f"h0 must be ({hidden},)", h0.shape)

    gi_all = _input_projection(inputs, weights)
    h = h0
    states = []
    for t in range(inputs.shape[0]):
        h = gru_cell(gi_all[t], h, weights, hidden)
        states.append(h)
    return stack(states, axis=0)


def lstm_cell(
    gi: Tensor, h: Tensor, c: Tensor, weights: ParameterSet, hidden: int
) -> tuple[Tensor, Tensor]:
    gates = gi + matmul(weights["w_hh"], h) + weights["b_hh"]
    i = sigmoid(gates[:hidden])
    f = sigmoid(gates[hidden : 2 * hidden])
    g = tanh(gates[2 * hidden : 3 * hidden])
    o = sigmoid(gates[3 * hidden :])
    c_next = f * c + i * g
    return o * tanh(c_next), c_next


def lstm_forward(
    inputs: Tensor, state0: tuple[Tensor, Tensor], weights: ParameterSet
) -> Tensor:
    """Run a single-layer LSTM over ``inputs`` (T, D) from ``state0 = (h0, c0)``; returns (T, H)."""
    if inputs.ndim != 2:
        raise InvalidShapeError("lstm_forward expects (T, D_in)", inputs.shape)
    if inputs.shape[0] == 0:
        raise EmptySequenceError()
    hidden = _check_weights(weights, 4, inputs.shape[1], "LSTM")
    h, c = state0
    if h.shape != (hidden,) or c.shape != (hidden,):
        raise InvalidShapeError(f"LSTM state must be ({hidden},)", h.shape, c.shape)

    gi_all = _input_projection(inputs, weights)
    states = []
    for t in range(inputs.shape[0]):
        h, c = lstm_cell(gi_all[t], h, c, weights, hidden)
        states.append(h)
    return stack(states, axis=0)


def lstm_stack(inputs: Tensor, weights: ParameterSet, n_layers: int) -> Tensor:
    """Stacked LSTM; layer ``i`` reads its weights from ``layers.{i}.*`` and starts from zeros."""
    out = inputs
    for layer in range(n_layers):
        layer_weights = weights.scoped(f"layers.{layer}")
        hidden = layer_weights["w_hh"].shape[1]
        zero = Tensor(np.zeros(hidden), inputs.dtype)
        out = lstm_forward(out, (zero, zero), layer_weights)
    return out


def init_recurrent(
    gates: int, d_in: int, hidden: int, rng: np.random.Generator, dtype: DType
) -> ParameterSet:
    """U(-1/sqrt(H), 1/sqrt(H)) for every weight and bias."""
    bound = 1.0 / float(np.sqrt(hidden))
    return ParameterSet(
        [
            ("w_ih", uniform((gates * hidden, d_in), bound, rng, dtype)),
            ("w_hh", uniform((gates * hidden, hidden), bound, rng, dtype)),
            ("b_ih", uniform((gates * hidden,), bound, rng, dtype)),
            ("b_hh", uniform((gates * hidden,), bound, rng, dtype)),
        ]
    )


def init_gru(d_in: int, hidden: int, rng: np.random.Generator, dtype: DType) -> ParameterSet:
    return init_recurrent(3, d_in, hidden, rng, dtype)


def init_lstm(d_in: int, hidden: int, rng: np.random.Generator, dtype: DType) -> ParameterSet:
    return init_recurrent(4, d_in, hidden, rng, dtype)
