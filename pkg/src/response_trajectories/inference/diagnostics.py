"""Convergence diagnostics of the draws, computed with :mod:`arviz`.

R-hat is the rank-normalized split statistic (the larger of its bulk and folded-tail values), and
the effective sample sizes are the rank-normalized bulk and tail estimates.
"""

from __future__ import annotations

from dataclasses import dataclass

import arviz as az
import numpy as np
import pandas as pd

from ..utils.exceptions import DomainError
from .nuts import PosteriorDraws

RHAT_WARNING = 1.05


@dataclass
class Diagnostic:
    rhat: float
    ess_bulk: float
    ess_tail: float
    constant: bool = False


def _check(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise DomainError("draws", x.shape, "shape (chains, draws)")
    if x.shape[1] < 4:
        raise DomainError("draws per chain", x.shape[1], ">= 4")
    return x


def rhat(x: np.ndarray) -> float:
    """
    Rank-normalized split R-hat of one parameter.

    :param x: ``(chains, draws)`` values.
    :return: The larger of the bulk and folded-tail values; NaN for a constant sequence.
    """
    x = _check(x)
    if np.ptp(x) == 0:
        return np.nan
    return float(az.rhat(x, method="rank"))


def ess_bulk(x: np.ndarray) -> float:
    x = _check(x)
    if np.ptp(x) == 0:
        return np.nan
    return float(az.ess(x, method="bulk"))


def ess_tail(x: np.ndarray) -> float:
    """The smaller effective sample size of the 5% and 95% quantile indicators."""
    x = _check(x)
    if np.ptp(x) == 0:
        return np.nan
    return float(az.ess(x, method="tail"))


def diagnose(x: np.ndarray) -> Diagnostic:
    x = _check(x)
    if np.ptp(x) == 0:
        return Diagnostic(np.nan, np.nan, np.nan, constant=True)
    return Diagnostic(rhat(x), ess_bulk(x), ess_tail(x))


def diagnostics(draws: PosteriorDraws) -> dict[str, Diagnostic]:
    """Convergence diagnostics of every coordinate, keyed by name."""
    return {name: diagnose(draws.draws[:, :, i]) for i, name in enumerate(draws.names)}


def summarize(draws: PosteriorDraws) -> pd.DataFrame:
    """
    Per-parameter posterior summary.

    :return: A table indexed by parameter name with columns ``mean``, ``sd``, ``q5``, ``q95``,
        ``rhat``, ``ess_bulk``, ``ess_tail`` and ``constant``.
    """
    flat = draws.flat()
    table = pd.DataFrame(
        {
            "mean": flat.mean(axis=0),
            "sd": flat.std(axis=0, ddof=1) if len(flat) > 1 else np.zeros(draws.dim),
            "q5": np.quantile(flat, 0.05, axis=0),
            "q95": np.quantile(flat, 0.95, axis=0),
        },
        index=pd.Index(draws.names, name="parameter"),
    )
    results = diagnostics(draws)
    table["rhat"] = [results[name].rhat for name in draws.names]
    table["ess_bulk"] = [results[name].ess_bulk for name in draws.names]
    table["ess_tail"] = [results[name].ess_tail for name in draws.names]
    table["constant"] = [results[name].constant for name in draws.names]
    return table


def convergence_problems(table: pd.DataFrame, threshold: float = RHAT_WARNING) -> list[str]:
    """Names of the parameters whose R-hat exceeds ``threshold``."""
    return [str(name) for name in table.index[table["rhat"] > threshold]]
