from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..data import PatientData
from ..model import ModelSpec, TrajectoryPosterior
from ..utils.exceptions import StructuralError
from . import autodiff as ad
from .params import ParamVector


class DifferentiableDensity:
    """
    Wraps a log density written against :mod:`.autodiff` as a sampler target.

    :param fn: The log density of an unconstrained vector.
    :param dim: The dimension of the vector.
    """

    def __init__(self, fn: Callable[[ad.ArrayLike], ad.ArrayLike], dim: int) -> None:
        self.fn = fn
        self.dim = dim

    def log_density(self, q: np.ndarray) -> float:
        return ad.guarded(self.fn, np.asarray(q, dtype=float))

    def value_and_grad(self, q: np.ndarray) -> tuple[float, np.ndarray]:
        return ad.guarded_value_and_grad(self.fn, np.asarray(q, dtype=float))


def grad_log_posterior(
    params: ParamVector, data: Sequence[PatientData], spec: ModelSpec
) -> tuple[float, np.ndarray]:
    """
    The log posterior density and its gradient from one reverse sweep.

    :param params: The unconstrained parameters.
    :param data: The patients.
    :param spec: The model.
    :return: The value (transform Jacobians included) and the gradient; ``(-inf, 0)`` where the
        evaluation is not finite.
    """
    posterior = TrajectoryPosterior(data, spec)
    if params.layout.names() != posterior.names():
        raise StructuralError("parameter layout does not match the model and data")
    return posterior.value_and_grad(params.values)


def finite_difference_gradient(
    fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5
) -> np.ndarray:
    """Central finite-difference gradient of a scalar function, one coordinate at a time."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(len(x)):
        shift = np.zeros_like(x)
        shift[i] = step
        grad[i] = (fn(x + shift) - fn(x - shift)) / (2.0 * step)
    return grad
