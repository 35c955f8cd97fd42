from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from typing import Sequence

import numpy as np

from response_trajectories.data import PatientData
from response_trajectories.inference.nuts import PosteriorDraws, SamplerConfig, nuts_sample
from response_trajectories.inference.params import ParamLayout, ParamVector, transform
from response_trajectories.model import ModelSpec, TrajectoryPosterior
from response_trajectories.simulate import GroundTruth

logging.getLogger().setLevel(logging.DEBUG)
logging.getLogger("response_trajectories").setLevel(logging.INFO)

SAMPLER = SamplerConfig(chains=2, warmup=200, draws=200, max_tree_depth=6, seed=0)
VARIANTS = ("ind", "hier", "hier_time", "hier_time_cov")


def constant_draws(layout: ParamLayout, theta: np.ndarray, n_draws: int = 4) -> PosteriorDraws:
    """Draws repeating one constrained point, standing in for a fitted posterior."""
    values = np.tile(theta, (1, n_draws, 1))
    return PosteriorDraws(
        draws=values,
        logp=np.zeros((1, n_draws)),
        divergences=np.zeros((1, n_draws), dtype=bool),
        tree_depths=np.ones((1, n_draws), dtype=int),
        step_sizes=np.full(1, 0.1),
        accept_stats=np.ones((1, n_draws)),
        n_leapfrog=np.ones((1, n_draws), dtype=int),
        names=layout.names(),
        layout=layout,
        unconstrained=np.tile(transform(theta, layout), (1, n_draws, 1)),
    )


class RecoveryTestClass(ABC):
    """The base simulation recovery test class.

    A recovery test simulates a dataset with a known truth, fits one or more model variants to
    its training days and compares the estimates with the truth. Subclasses implement the
    simulation; :meth:`fit` runs the sampler the same way the ``fit`` command does, without
    standardization.
    """

    spec = ModelSpec(inducing_count=12)
    sampler = SAMPLER

    @abstractmethod
    def simulate(self, seed: int) -> tuple[list[PatientData], GroundTruth]:
        pass

    def fit(self, data: Sequence[PatientData], variant: str, seed: int = 0) -> PosteriorDraws:
        spec = self.model(variant)
        training = [patient.training() for patient in data]
        posterior = TrajectoryPosterior(training, spec)
        init = ParamVector(posterior.initial_point(), posterior.layout)
        config = SamplerConfig(**(self.sampler.to_dict() | {"seed": seed}))
        return nuts_sample(posterior, config, init)

    def model(self, variant: str) -> ModelSpec:
        return ModelSpec(**(self.spec.to_dict() | {"variant": variant}))
