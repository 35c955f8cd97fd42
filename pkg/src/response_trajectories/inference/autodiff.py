"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiated evaluation owns a private :class:`Tape`. Operations on :class:`Variable`
objects compute their value eagerly with numpy and append a node holding one vector-Jacobian
product per differentiable input. :func:`value_and_grad` then sweeps the tape once in reverse
creation order, which is a valid reverse topological order.

All operations also accept plain numpy inputs, in which case they return plain numpy values and
record nothing. Model code is therefore written once against this module and evaluated either
way.
"""

from __future__ import annotations

from typing import Any, Callable, Union

import numpy as np
from scipy.linalg import solve_triangular as _solve_triangular
from scipy.special import expit

from ..utils.exceptions import CholeskyFailure, DomainError

ArrayLike = Union[np.ndarray, float, "Variable"]


class Tape:
    """The ordered record of all nodes created during one evaluation."""

    def __init__(self) -> None:
        self.nodes: list[Variable] = []

    def variable(self, value: Any) -> Variable:
        """
        Creates an independent (leaf) variable on this tape.

        :param value: The value of the variable.
        :return: The leaf variable.
        """
        return Variable(np.array(value, dtype=float), self)

    def backward(self, output: Variable) -> dict[int, np.ndarray]:
        """
        Propagates adjoints from a scalar output to every node on the tape.

        :param output: The scalar variable to differentiate.
        :return: A mapping from ``id(node)`` to the adjoint of every leaf node reached.
        """
        adjoints: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
        for node in reversed(self.nodes):
            key = id(node)
            if key not in adjoints:
                continue
            if not node.parents:
                continue
            g = adjoints.pop(key)
            for parent, vjp in node.parents:
                contribution = vjp(g)
                pkey = id(parent)
                if pkey in adjoints:
                    adjoints[pkey] = adjoints[pkey] + contribution
                else:
                    adjoints[pkey] = contribution
        return adjoints


class Variable:
    """A value recorded on a tape, with the links needed to differentiate through it."""

    __array_ufunc__ = None
    __slots__ = ("value", "tape", "parents")

    def __init__(
        self,
        value: Any,
        tape: Tape,
        parents: tuple[tuple[Variable, Callable[[np.ndarray], np.ndarray]], ...] = (),
    ) -> None:
        self.value = value
        self.tape = tape
        self.parents = parents
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return np.shape(self.value)

    @property
    def ndim(self) -> int:
        return np.ndim(self.value)

    @property
    def size(self) -> int:
        return int(np.size(self.value))

    @property
    def T(self) -> ArrayLike:
        return transpose(self)

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Variable({self.value!r})"

    def __getitem__(self, index):
        return getitem(self, index)

    def __neg__(self):
        return negative(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis: int | None = None) -> ArrayLike:
        return sum(self, axis=axis)

    def reshape(self, *shape) -> ArrayLike:
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def value_of(x: ArrayLike) -> Any:
    """Returns the numeric value of a variable, or the input itself if it is not recorded."""
    return x.value if isinstance(x, Variable) else x


def is_recorded(x: object) -> bool:
    return isinstance(x, Variable)


def _record(value: Any, *links: tuple[Any, Callable[[np.ndarray], np.ndarray]]) -> ArrayLike:
    parents = tuple((arg, vjp) for arg, vjp in links if isinstance(arg, Variable))
    if not parents:
        return value
    tape = parents[0][0].tape
    for arg, _ in parents[1:]:
        if arg.tape is not tape:
            raise ValueError("Cannot combine variables recorded on different tapes.")
    return Variable(value, tape, parents)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# Elementwise arithmetic


def add(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    va, vb = value_of(a), value_of(b)
    sa, sb = np.shape(va), np.shape(vb)
    return _record(va + vb, (a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb)))


def subtract(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    va, vb = value_of(a), value_of(b)
    sa, sb = np.shape(va), np.shape(vb)
    return _record(
        va - vb, (a, lambda g: _unbroadcast(g, sa)), (b, lambda g: -_unbroadcast(g, sb))
    )


def multiply(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    va, vb = value_of(a), value_of(b)
    sa, sb = np.shape(va), np.shape(vb)
    return _record(
        va * vb,
        (a, lambda g: _unbroadcast(g * vb, sa)),
        (b, lambda g: _unbroadcast(g * va, sb)),
    )


def divide(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    va, vb = value_of(a), value_of(b)
    sa, sb = np.shape(va), np.shape(vb)
    out = va / vb
    return _record(
        out,
        (a, lambda g: _unbroadcast(g / vb, sa)),
        (b, lambda g: _unbroadcast(-g * out / vb, sb)),
    )


def negative(a: ArrayLike) -> ArrayLike:
    return _record(-value_of(a), (a, lambda g: -g))


def power(a: ArrayLike, exponent: float) -> ArrayLike:
    if isinstance(exponent, Variable):
        raise TypeError("Only constant exponents are supported.")
    va = value_of(a)
    return _record(va**exponent, (a, lambda g: g * exponent * va ** (exponent - 1)))


def square(a: ArrayLike) -> ArrayLike:
    va = value_of(a)
    return _record(va * va, (a, lambda g: 2.0 * g * va))


def exp(a: ArrayLike) -> ArrayLike:
    out = np.exp(value_of(a))
    return _record(out, (a, lambda g: g * out))


def log(a: ArrayLike) -> ArrayLike:
    va = value_of(a)
    return _record(np.log(va), (a, lambda g: g / va))


def log1p(a: ArrayLike) -> ArrayLike:
    va = value_of(a)
    return _record(np.log1p(va), (a, lambda g: g / (1.0 + va)))


def sqrt(a: ArrayLike) -> ArrayLike:
    out = np.sqrt(value_of(a))
    return _record(out, (a, lambda g: 0.5 * g / out))


def softplus(a: ArrayLike) -> ArrayLike:
    """Computes ``log(1 + exp(a))`` without overflow."""
    va = value_of(a)
    return _record(np.logaddexp(0.0, va), (a, lambda g: g * expit(va)))


def sigmoid(a: ArrayLike) -> ArrayLike:
    out = expit(value_of(a))
    return _record(out, (a, lambda g: g * out * (1.0 - out)))


# Reductions and shape manipulation


def sum(a: ArrayLike, axis: int | None = None) -> ArrayLike:
    va = value_of(a)
    shape = np.shape(va)

    def vjp(g):
        if axis is None:
            return np.full(shape, g, dtype=float)
        return np.broadcast_to(np.expand_dims(g, axis), shape)

    return _record(np.sum(va, axis=axis), (a, vjp))


def getitem(a: ArrayLike, index) -> ArrayLike:
    va = value_of(a)
    shape = np.shape(va)

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return out

    return _record(va[index], (a, vjp))


def reshape(a: ArrayLike, shape: tuple[int, ...]) -> ArrayLike:
    va = value_of(a)
    original = np.shape(va)
    return _record(np.reshape(va, shape), (a, lambda g: np.reshape(g, original)))


def transpose(a: ArrayLike) -> ArrayLike:
    return _record(np.transpose(value_of(a)), (a, lambda g: np.transpose(g)))


def diagonal(a: ArrayLike) -> ArrayLike:
    va = value_of(a)
    shape = np.shape(va)

    def vjp(g):
        out = np.zeros(shape)
        idx = np.arange(min(shape))
        out[idx, idx] = g
        return out

    return _record(np.diagonal(va).copy(), (a, vjp))


# Linear algebra


def matmul(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    va, vb = np.asarray(value_of(a)), np.asarray(value_of(b))

    def vjp_a(g):
        if vb.ndim == 1:
            return np.outer(g, vb) if va.ndim == 2 else g * vb
        if va.ndim == 1:
            return vb @ g
        return g @ vb.T

    def vjp_b(g):
        if va.ndim == 1:
            return np.outer(va, g) if vb.ndim == 2 else g * va
        return va.T @ g

    return _record(va @ vb, (a, vjp_a), (b, vjp_b))


def cholesky(a: ArrayLike) -> ArrayLike:
    """
    Lower Cholesky factor of a symmetric positive definite matrix.

    :raises numpy.linalg.LinAlgError: If the matrix is not positive definite.
    """
    L = np.linalg.cholesky(value_of(a))

    def vjp(g):
        phi = np.tril(L.T @ g)
        phi[np.diag_indices_from(phi)] *= 0.5
        # L^{-T} phi L^{-1}
        S = _solve_triangular(L, phi.T, lower=True, trans="T")
        S = _solve_triangular(L, S.T, lower=True, trans="T")
        return 0.5 * (S + S.T)

    return _record(L, (a, vjp))


def solve_triangular(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    """Solves ``a x = b`` for lower-triangular ``a``."""
    va, vb = value_of(a), value_of(b)
    x = _solve_triangular(va, vb, lower=True)

    def vjp_b(g):
        return _solve_triangular(va, g, lower=True, trans="T")

    def vjp_a(g):
        gb = vjp_b(g)
        if np.ndim(x) == 1:
            return -np.tril(np.outer(gb, x))
        return -np.tril(gb @ x.T)

    return _record(x, (a, vjp_a), (b, vjp_b))


def value_and_grad(fn: Callable[[ArrayLike], ArrayLike], x: np.ndarray) -> tuple[float, np.ndarray]:
    """
    Evaluates a scalar function and its gradient with one reverse sweep.

    :param fn: The function to differentiate; it must only combine its argument through the
        operations of this module.
    :param x: The point of evaluation.
    :return: The value and the gradient, of the same shape as ``x``.
    """
    tape = Tape()
    leaf = tape.variable(x)
    with np.errstate(all="ignore"):
        out = fn(leaf)
        if not isinstance(out, Variable):
            return float(out), np.zeros(np.shape(x))
        if out.size != 1:
            raise ValueError(f"Expected a scalar output, got shape {out.shape}.")
        adjoints = tape.backward(out)
    grad = adjoints.get(id(leaf), np.zeros(np.shape(x)))
    return float(out.value), np.array(grad, dtype=float)


NUMERICAL_ERRORS = (
    CholeskyFailure,
    DomainError,
    np.linalg.LinAlgError,
    FloatingPointError,
    OverflowError,
)


def guarded(fn: Callable[[ArrayLike], ArrayLike], x: np.ndarray) -> float:
    """Evaluates a scalar function, mapping numerical failures and non-finite values to ``-inf``."""
    try:
        with np.errstate(all="ignore"):
            value = float(value_of(fn(x)))
    except NUMERICAL_ERRORS:
        return -np.inf
    return value if np.isfinite(value) else -np.inf


def guarded_value_and_grad(
    fn: Callable[[ArrayLike], ArrayLike], x: np.ndarray
) -> tuple[float, np.ndarray]:
    """
    Like :func:`value_and_grad`, but returns ``(-inf, 0)`` where the value or the gradient is not
    finite, or where the evaluation fails numerically.
    """
    try:
        value, grad = value_and_grad(fn, x)
    except NUMERICAL_ERRORS:
        return -np.inf, np.zeros(np.shape(x))
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        return -np.inf, np.zeros(np.shape(x))
    return value, grad
