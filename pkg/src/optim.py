"""
Optimizers: plain SGD and bias-corrected Adam over a ParameterSet.

Moment buffers are keyed by parameter name so an OptimizerState can be kept
by a federated client across rounds while the weights are replaced by the
server's broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .error_handler import ContractViolation
from .params import ParameterSet


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass
class OptimizerState:
    """Hyper-parameters plus per-parameter moments and the step counter."""

    kind: OptimizerKind = OptimizerKind.ADAM
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    first_moments: dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def sgd(cls, lr: float) -> OptimizerState:
        return cls(kind=OptimizerKind.SGD, lr=lr)

    @classmethod
    def adam(
        cls, lr: float = 2e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
    ) -> OptimizerState:
        return cls(kind=OptimizerKind.ADAM, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def optimizer_step(params: ParameterSet, state: OptimizerState) -> ParameterSet:
    """
    Apply one update in place to every tensor of ``params``.

    Every parameter must carry a gradient. Arithmetic runs in each
    parameter's own dtype. Returns ``params`` for chaining.
    """
    missing = [name for name, t in params.items() if t.grad is None]
    if missing:
        raise ContractViolation(f"missing gradient for: {', '.join(missing)}")

    state.step_count += 1
    if state.kind is OptimizerKind.SGD:
        for _, tensor in params.items():
            assert tensor.grad is not None
            tensor.data -= tensor.data.dtype.type(state.lr) * tensor.grad
        return params

    t = state.step_count
    for name, tensor in params.items():
        grad = tensor.grad
        assert grad is not None
        ftype = tensor.data.dtype.type
        m = state.first_moments.get(name)
        v = state.second_moments.get(name)
        if m is None or m.shape != grad.shape or m.dtype != grad.dtype:
            m = np.zeros_like(grad)
            v = np.zeros_like(grad)
        assert v is not None
        m = ftype(state.beta1) * m + ftype(1.0 - state.beta1) * grad
        v = ftype(state.beta2) * v + ftype(1.0 - state.beta2) * grad * grad
        state.first_moments[name] = m
        state.second_moments[name] = v
        m_hat = m / ftype(1.0 - state.beta1**t)
        v_hat = v / ftype(1.0 - state.beta2**t)
        tensor.data -= ftype(state.lr) * m_hat / (np.sqrt(v_hat) + ftype(state.eps))
    return params
