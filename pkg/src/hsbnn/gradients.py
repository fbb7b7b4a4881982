"""Flat parameter vectors, gradient evaluation and a finite-difference checker.

Model losses implement ``value_and_grad(vector) -> (float, ndarray)`` with a
hand-derived chain rule.  Plain Python callables are differentiated with the
small scalar reverse-mode tape in this module, which is enough for toy
losses and for tests; it is not meant for array workloads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Protocol, Sequence, Union

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


def softplus(x):
    # log(1 + exp(x)) without overflow; cheaper than np.logaddexp(0, x)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def softplus_grad_from_value(sp):
    """sigmoid(x) recovered from softplus(x): 1 - exp(-softplus(x))."""
    return -np.expm1(-sp)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-np.logaddexp(0.0, -x))


# -- layout -----------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    start: int
    stop: int


class Layout:
    """Named, disjoint index ranges covering a flat parameter vector."""

    def __init__(self, blocks: Iterable[tuple[str, tuple[int, ...]]]):
        segments = []
        offset = 0
        for name, shape in blocks:
            shape = tuple(int(s) for s in shape)
            size = int(np.prod(shape, dtype=int))
            segments.append(Segment(name, shape, offset, offset + size))
            offset += size
        names = [s.name for s in segments]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate segment names in layout: {names}")
        self.segments: tuple[Segment, ...] = tuple(segments)
        self.size = offset
        self._by_name = {s.name: s for s in segments}

    def __len__(self):
        return self.size

    def __iter__(self):
        return iter(self.segments)

    def __getitem__(self, name: str) -> Segment:
        return self._by_name[name]

    def __eq__(self, other):
        return isinstance(other, Layout) and self.segments == other.segments

    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    def segment_of(self, index: int) -> Segment:
        for seg in self.segments:
            if seg.start <= index < seg.stop:
                return seg
        raise IndexError(index)

    def pack(self, arrays: dict[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self.size)
        for seg in self.segments:
            out[seg.start:seg.stop] = np.ravel(arrays[seg.name])
        return out

    def unpack(self, vector: np.ndarray) -> dict[str, np.ndarray]:
        """Views into ``vector``, reshaped per segment."""
        vector = np.asarray(vector)
        if vector.shape != (self.size,):
            raise ValueError(f"expected vector of length {self.size}, got {vector.shape}")
        return {s.name: vector[s.start:s.stop].reshape(s.shape) for s in self.segments}

    def to_json(self) -> list:
        return [[s.name, list(s.shape)] for s in self.segments]

    @classmethod
    def from_json(cls, blocks) -> "Layout":
        return cls((name, tuple(shape)) for name, shape in blocks)


@dataclass
class ParamVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.layout.size,):
            raise ValueError("values do not match layout size")

    def blocks(self) -> dict[str, np.ndarray]:
        return self.layout.unpack(self.values)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


def flat_layout(n: int, name: str = "phi") -> Layout:
    return Layout([(name, (n,))])


# -- scalar reverse mode ----------------------------------------------------

class Var:
    """Scalar node on a reverse-mode tape."""

    __slots__ = ("value", "parents", "grad")

    def __init__(self, value: float, parents: Sequence[tuple["Var", float]] = ()):
        self.value = float(value)
        self.parents = tuple(parents)
        self.grad = 0.0

    @staticmethod
    def _lift(other) -> "Var":
        return other if isinstance(other, Var) else Var(other)

    def __add__(self, other):
        other = self._lift(other)
        return Var(self.value + other.value, ((self, 1.0), (other, 1.0)))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        return Var(self.value - other.value, ((self, 1.0), (other, -1.0)))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __neg__(self):
        return Var(-self.value, ((self, -1.0),))

    def __mul__(self, other):
        other = self._lift(other)
        return Var(self.value * other.value, ((self, other.value), (other, self.value)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return self._lift(other) * self ** -1.0

    def __pow__(self, p: float):
        if isinstance(p, Var):
            raise TypeError("variable exponents are not supported")
        return Var(self.value ** p, ((self, p * self.value ** (p - 1.0)),))

    def exp(self):
        e = math.exp(self.value)
        return Var(e, ((self, e),))

    def log(self):
        return Var(math.log(self.value), ((self, 1.0 / self.value),))

    def backward(self) -> None:
        order: list[Var] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p, _ in node.parents)
        self.grad = 1.0
        for node in reversed(order):
            for parent, local in node.parents:
                parent.grad += local * node.grad


# -- gradient contract ------------------------------------------------------

class DifferentiableLoss(Protocol):
    def value_and_grad(self, at: np.ndarray) -> tuple[float, np.ndarray]: ...


LossLike = Union[DifferentiableLoss, Callable]


def _as_vector(at, loss=None) -> tuple[np.ndarray, Layout]:
    if isinstance(at, ParamVector):
        return at.values, at.layout
    values = np.asarray(at, dtype=float).ravel()
    layout = getattr(loss, "layout", None)
    if isinstance(layout, Layout) and layout.size == values.size:
        return values, layout
    return values, flat_layout(values.size)


def evaluate(loss: LossLike, at) -> float:
    values, _ = _as_vector(at)
    if hasattr(loss, "value"):
        return float(loss.value(values))
    if hasattr(loss, "value_and_grad"):
        return float(loss.value_and_grad(values)[0])
    return float(loss(values))


def value_and_grad(loss: LossLike, at) -> tuple[float, np.ndarray]:
    values, _ = _as_vector(at)
    if hasattr(loss, "value_and_grad"):
        value, g = loss.value_and_grad(values)
        value, g = float(value), np.asarray(g, dtype=float)
    else:
        nodes = [Var(v) for v in values]
        out = loss(nodes)
        if not isinstance(out, Var):
            # loss does not depend on its input
            return float(out), np.zeros_like(values)
        out.backward()
        value, g = out.value, np.array([n.grad for n in nodes])
    if not math.isfinite(value):
        raise NonFiniteGradientError(f"loss is not finite: {value}")
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise NonFiniteGradientError(f"gradient component {bad} is not finite")
    return value, g


def grad(loss: LossLike, at) -> ParamVector:
    """d loss / d phi at ``at`` (all stochasticity must be frozen inside ``loss``)."""
    values, layout = _as_vector(at, loss)
    return ParamVector(value_and_grad(loss, values)[1], layout)


@dataclass(frozen=True)
class GradReport:
    max_abs_diff: float
    max_rel_diff: float
    worst_index: int
    worst_block: str
    passed: bool


def finite_diff_check(loss: LossLike, at, h: float = 1e-5, tol_rel: float = 1e-4,
                      abs_floor: float = 1e-8) -> GradReport:
    """Compare ``grad`` against central differences, component by component.

    Relative error uses max(|analytic|, |numeric|) as denominator; components
    where both are below ``abs_floor`` are judged on absolute error instead.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    values, layout = _as_vector(at, loss)
    analytic = grad(loss, ParamVector(values, layout)).values
    numeric = np.empty_like(values)
    probe = values.copy()
    for i in range(values.size):
        probe[i] = values[i] + h
        up = evaluate(loss, probe)
        probe[i] = values[i] - h
        down = evaluate(loss, probe)
        probe[i] = values[i]
        numeric[i] = (up - down) / (2.0 * h)
    abs_diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel_diff = np.where(scale > abs_floor, abs_diff / np.maximum(scale, abs_floor), 0.0)
    failing = np.where(scale > abs_floor, rel_diff >= tol_rel, abs_diff >= abs_floor)
    worst = int(np.argmax(np.where(scale > abs_floor, rel_diff, abs_diff / abs_floor)))
    return GradReport(
        max_abs_diff=float(abs_diff.max(initial=0.0)),
        max_rel_diff=float(rel_diff.max(initial=0.0)),
        worst_index=worst,
        worst_block=layout.segment_of(worst).name if values.size else "",
        passed=not bool(failing.any()),
    )
