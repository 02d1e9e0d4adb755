"""
Named parameter collections.

A ParameterSet is the unit that optimizers update, FedAvg averages and the
weights format serializes. Names are dotted paths (``encoder.conv.0.weight``)
and their order is part of the set's identity.
"""

from __future__ import annotations

from collections.abc import Iterable, Iterator, Sequence

import numpy as np

from .error_handler import ContractViolation, InvalidShapeError
from .tensor import DType, Tensor

Signature = tuple[tuple[str, tuple[int, ...], DType], ...]


class ParameterSet:
    """Ordered, uniquely-named collection of tensors."""

    def __init__(self, entries: Iterable[tuple[str, Tensor]] = ()) -> None:
        self._entries: dict[str, Tensor] = {}
        for name, tensor in entries:
            self.add(name, tensor)

    def add(self, name: str, tensor: Tensor) -> None:
        if not name:
            raise ContractViolation("parameter names must be non-empty")
        if name in self._entries:
            raise ContractViolation(f"duplicate parameter name: {name}")
        self._entries[name] = tensor

    # -- mapping protocol ------------------------------------------------

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise ContractViolation(f"unknown parameter: {name}") from None

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> list[tuple[str, Tensor]]:
        return list(self._entries.items())

    def tensors(self) -> list[Tensor]:
        return list(self._entries.values())

    def __repr__(self) -> str:
        return f"ParameterSet({len(self)} tensors, {self.num_parameters()} values)"

    # -- views -----------------------------------------------------------

    def scoped(self, prefix: str) -> ParameterSet:
        """Entries under ``prefix.`` with the prefix stripped; tensors are shared."""
        head = prefix if prefix.endswith(".") else prefix + "."
        return ParameterSet(
            (name[len(head) :], t) for name, t in self._entries.items() if name.startswith(head)
        )

    def select(self, prefixes: Sequence[str]) -> ParameterSet:
        """Entries whose full name starts with any of ``prefixes``; tensors are shared."""
        return ParameterSet(
            (name, t)
            for name, t in self._entries.items()
            if any(name.startswith(p) for p in prefixes)
        )

    def prefixed(self, prefix: str) -> ParameterSet:
        return ParameterSet((f"{prefix}.{name}", t) for name, t in self._entries.items())

    def merged(self, other: ParameterSet) -> ParameterSet:
        return ParameterSet([*self.items(), *other.items()])

    # -- structure -------------------------------------------------------

    def signature(self) -> Signature:
        return tuple((name, t.shape, t.dtype) for name, t in self._entries.items())

    def is_compatible(self, other: ParameterSet) -> bool:
        """Identical name/shape/dtype sequences."""
        return self.signature() == other.signature()

    def num_parameters(self) -> int:
        return sum(t.size for t in self._entries.values())

    # -- values ----------------------------------------------------------

    def copy(self) -> ParameterSet:
        """Deep copy with fresh tensors and no gradients."""
        return ParameterSet(
            (name, Tensor(t.data.copy(), t.dtype, t.requires_grad))
            for name, t in self._entries.items()
        )

    def load(self, source: ParameterSet) -> None:
        """
        Copy values from ``source`` into the same-named tensors of this set.

        Every name in ``source`` must exist here with the same shape and dtype;
        names not present in ``source`` keep their values.
        """
        for name, tensor in source.items():
            if name not in self._entries:
                raise ContractViolation(f"unknown parameter in source: {name}")
            target = self._entries[name]
            if target.shape != tensor.shape or target.dtype is not tensor.dtype:
                raise InvalidShapeError(
                    f"cannot load {name}: {tensor.shape}/{tensor.dtype.value} into "
                    f"{target.shape}/{target.dtype.value}",
                    tensor.shape,
                    target.shape,
                )
            target.data[...] = tensor.data

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def requires_grad_(self, flag: bool = True) -> ParameterSet:
        for t in self._entries.values():
            t.requires_grad = flag
        return self

    def bitwise_equal(self, other: ParameterSet) -> bool:
        if not self.is_compatible(other):
            return False
        return all(
            np.array_equal(a.data.view(np.uint8), b.data.view(np.uint8))
            for a, b in zip(self.tensors(), other.tensors(), strict=True)
        )


def kaiming_uniform(
    shape: Sequence[int], fan_in: int, rng: np.random.Generator, dtype: DType
) -> Tensor:
    """Uniform fan-in scaling for ReLU layers: U(-b, b), b = sqrt(6 / fan_in)."""
    bound = float(np.sqrt(6.0 / fan_in))
    values = rng.uniform(-bound, bound, size=tuple(shape))
    return Tensor(values, dtype, requires_grad=True)


def uniform(
    shape: Sequence[int], bound: float, rng: np.random.Generator, dtype: DType
) -> Tensor:
    values = rng.uniform(-bound, bound, size=tuple(shape))
    return Tensor(values, dtype, requires_grad=True)


def zeros_param(shape: Sequence[int], dtype: DType) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), dtype, requires_grad=True)


def ones_param(shape: Sequence[int], dtype: DType) -> Tensor:
    return Tensor(np.ones(tuple(shape)), dtype, requires_grad=True)
