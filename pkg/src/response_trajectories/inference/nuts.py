"""The No-U-Turn sampler with multinomial trajectory sampling.

Warmup adapts the step size by dual averaging throughout, and a diagonal inverse mass matrix in
a series of doubling windows between an initial and a terminal buffer. The step size search is
restarted after every mass matrix update.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np

from ..utils.exceptions import DomainError, SamplerFailure
from ..utils.logger import LOGGER
from .params import ParamLayout, ParamVector, untransform


class DensityTarget(Protocol):
    """Anything returning a log density and its gradient at an unconstrained point."""

    def value_and_grad(self, q: np.ndarray) -> tuple[float, np.ndarray]: ...


@dataclass
class SamplerConfig:
    """
    Settings of a sampling run.

    :ivar chains: Number of independent chains.
    :ivar warmup: Adaptation iterations per chain.
    :ivar draws: Retained iterations per chain.
    :ivar target_accept: Target mean acceptance statistic of the step size adaptation.
    :ivar max_tree_depth: Maximum number of trajectory doublings.
    :ivar seed: Seed of all random streams.
    :ivar init_jitter: Half-width of the uniform perturbation of the initial point.
    :ivar divergence_threshold: Energy error above which a trajectory is divergent.
    :ivar threads: Number of chains run concurrently.
    :ivar log_every: Iterations between progress messages.
    """

    chains: int = 4
    warmup: int = 1000
    draws: int = 1000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 0
    init_jitter: float = 0.1
    divergence_threshold: float = 1000.0
    threads: int = 1
    log_every: int = 100

    def __post_init__(self) -> None:
        checks = {
            "chains": self.chains >= 1,
            "warmup": self.warmup >= 0,
            "draws": self.draws >= 1,
            "target_accept": 0.0 < self.target_accept < 1.0,
            "max_tree_depth": self.max_tree_depth >= 1,
            "seed": 0 <= self.seed < 2**64,
            "init_jitter": self.init_jitter >= 0.0,
            "divergence_threshold": self.divergence_threshold > 0.0,
            "threads": self.threads >= 1,
            "log_every": self.log_every >= 1,
        }
        for name, valid in checks.items():
            if not valid:
                raise DomainError(name, getattr(self, name), "a valid sampler setting")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Point:
    """A phase-space point with its log density and gradient."""

    q: np.ndarray
    p: np.ndarray
    logp: float
    grad: np.ndarray


@dataclass
class Tree:
    """A trajectory segment: its two edges, its proposal and its accumulated statistics."""

    minus: Point
    plus: Point
    proposal: Point
    log_weight: float
    sum_accept: float
    n_leapfrog: int
    turning: bool = False
    diverging: bool = False

    def edge(self, direction: int) -> Point:
        return self.plus if direction > 0 else self.minus


@dataclass
class DualAveraging:
    """Nesterov dual averaging of the log step size."""

    mu: float
    log_step: float = 0.0
    log_step_bar: float = 0.0
    h_bar: float = 0.0
    t: int = 0
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75

    @classmethod
    def start(cls, step_size: float) -> DualAveraging:
        return cls(mu=math.log(10.0 * step_size), log_step=math.log(step_size))

    def update(self, accept_stat: float, target: float) -> float:
        self.t += 1
        eta = 1.0 / (self.t + self.t0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (target - accept_stat)
        self.log_step = self.mu - (math.sqrt(self.t) / self.gamma) * self.h_bar
        w = self.t ** (-self.kappa)
        self.log_step_bar = w * self.log_step + (1.0 - w) * self.log_step_bar
        return math.exp(self.log_step)

    def final(self) -> float:
        return math.exp(self.log_step_bar)


class RunningVariance:
    """Welford's running mean and variance, per coordinate."""

    def __init__(self, dim: int) -> None:
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.n
        self.m2 = self.m2 + delta * (x - self.mean)

    def regularized(self) -> np.ndarray:
        """The variance shrunk towards ``1e-3`` the way Stan does it."""
        if self.n < 2:
            return np.ones_like(self.mean)
        var = self.m2 / (self.n - 1)
        return (self.n / (self.n + 5.0)) * var + 1e-3 * (5.0 / (self.n + 5.0))


def make_warmup_windows(warmup: int) -> list[tuple[int, int]]:
    """
    The mass matrix adaptation windows ``[start, end)`` of a warmup phase.

    An initial buffer of 75 and a terminal buffer of 50 iterations surround windows that start at
    25 iterations and double, the last one stretched to the terminal buffer. Short warmups use
    15% / 10% buffers; warmups of 20 iterations or fewer adapt the step size only.
    """
    if warmup <= 20:
        return []
    if warmup >= 150:
        init_buffer, term_buffer, window = 75, 50, 25
    else:
        init_buffer = max(1, int(0.15 * warmup))
        term_buffer = max(1, int(0.1 * warmup))
        window = max(1, (warmup - init_buffer - term_buffer) // 3)

    start, end = init_buffer, warmup - term_buffer
    windows: list[tuple[int, int]] = []
    while start < end:
        stop = start + window
        if stop + 2 * window > end:
            stop = end
        windows.append((start, stop))
        start = stop
        window *= 2
    return windows


def hamiltonian(logp: float, p: np.ndarray, inv_mass: np.ndarray) -> float:
    return -logp + 0.5 * float(np.sum(inv_mass * p * p))


def leapfrog(target: DensityTarget, point: Point, step_size: float, inv_mass: np.ndarray) -> Point:
    """One leapfrog step of signed size ``step_size``."""
    p_half = point.p + 0.5 * step_size * point.grad
    q = point.q + step_size * inv_mass * p_half
    logp, grad = target.value_and_grad(q)
    p = p_half + 0.5 * step_size * grad
    return Point(q, p, logp, grad)


def is_uturn(minus: Point, plus: Point, inv_mass: np.ndarray) -> bool:
    dq = plus.q - minus.q
    return bool(dq @ (inv_mass * minus.p) < 0.0) or bool(dq @ (inv_mass * plus.p) < 0.0)


def find_reasonable_step_size(
    target: DensityTarget,
    point: Point,
    inv_mass: np.ndarray,
    rng: np.random.Generator,
    step_size: float = 1.0,
) -> float:
    """
    Doubles or halves the step size until the acceptance of one leapfrog step crosses one half.
    """
    p = rng.standard_normal(len(point.q)) / np.sqrt(inv_mass)
    start = Point(point.q, p, point.logp, point.grad)
    h0 = hamiltonian(start.logp, p, inv_mass)

    def log_accept(eps: float) -> float:
        new = leapfrog(target, start, eps, inv_mass)
        delta = h0 - hamiltonian(new.logp, new.p, inv_mass)
        return delta if np.isfinite(delta) else -np.inf

    direction = 1.0 if log_accept(step_size) > math.log(0.5) else -1.0
    for _ in range(100):
        candidate = step_size * 2.0**direction
        crossed = log_accept(candidate) > math.log(0.5)
        if (direction > 0 and not crossed) or (direction < 0 and crossed):
            return candidate if direction < 0 else step_size
        step_size = candidate
        if not 1e-8 < step_size < 1e3:
            break
    return step_size


def build_tree(
    target: DensityTarget,
    point: Point,
    direction: int,
    depth: int,
    step_size: float,
    inv_mass: np.ndarray,
    h0: float,
    rng: np.random.Generator,
    threshold: float,
) -> Tree:
    """
    Builds a subtree of ``2**depth`` leapfrog steps starting next to ``point``.

    The proposal of each subtree is drawn uniformly from its points in proportion to their
    weights ``exp(-H)``. A subtree that turns or diverges is marked invalid and not extended.
    """
    if depth == 0:
        new = leapfrog(target, point, direction * step_size, inv_mass)
        delta = hamiltonian(new.logp, new.p, inv_mass) - h0
        if not np.isfinite(delta):
            delta = np.inf
        return Tree(
            minus=new,
            plus=new,
            proposal=new,
            log_weight=-delta,
            sum_accept=min(1.0, math.exp(-delta)) if delta > -700 else 1.0,
            n_leapfrog=1,
            diverging=bool(delta > threshold),
        )

    inner = build_tree(
        target, point, direction, depth - 1, step_size, inv_mass, h0, rng, threshold
    )
    if inner.turning or inner.diverging:
        return inner
    outer = build_tree(
        target, inner.edge(direction), direction, depth - 1, step_size, inv_mass, h0, rng, threshold
    )
    n_leapfrog = inner.n_leapfrog + outer.n_leapfrog
    sum_accept = inner.sum_accept + outer.sum_accept
    if outer.turning or outer.diverging:
        return Tree(
            inner.minus,
            inner.plus,
            inner.proposal,
            inner.log_weight,
            sum_accept,
            n_leapfrog,
            turning=outer.turning,
            diverging=outer.diverging,
        )

    log_weight = float(np.logaddexp(inner.log_weight, outer.log_weight))
    take_outer = rng.uniform() < math.exp(outer.log_weight - log_weight)
    proposal = outer.proposal if take_outer else inner.proposal
    if direction > 0:
        minus, plus = inner.minus, outer.plus
    else:
        minus, plus = outer.minus, inner.plus
    return Tree(
        minus,
        plus,
        proposal,
        log_weight,
        sum_accept,
        n_leapfrog,
        turning=is_uturn(minus, plus, inv_mass),
    )


@dataclass
class Transition:
    point: Point
    accept_stat: float
    tree_depth: int
    n_leapfrog: int
    diverging: bool


def transition(
    target: DensityTarget,
    point: Point,
    step_size: float,
    inv_mass: np.ndarray,
    rng: np.random.Generator,
    max_tree_depth: int,
    threshold: float,
) -> Transition:
    """
    One NUTS iteration.

    New subtrees are accepted with probability ``min(1, w_new / w_old)``, which favours points
    far from the start.
    """
    p = rng.standard_normal(len(point.q)) / np.sqrt(inv_mass)
    start = Point(point.q, p, point.logp, point.grad)
    h0 = hamiltonian(start.logp, p, inv_mass)
    tree = Tree(start, start, start, 0.0, 0.0, 0)
    proposal = start
    depth = 0
    diverging = False

    while depth < max_tree_depth:
        direction = 1 if rng.uniform() < 0.5 else -1
        sub = build_tree(
            target, tree.edge(direction), direction, depth, step_size, inv_mass, h0, rng, threshold
        )
        depth += 1
        tree.n_leapfrog += sub.n_leapfrog
        tree.sum_accept += sub.sum_accept
        if sub.diverging or sub.turning:
            diverging = sub.diverging
            break

        if rng.uniform() < math.exp(min(0.0, sub.log_weight - tree.log_weight)):
            proposal = sub.proposal
        tree.log_weight = float(np.logaddexp(tree.log_weight, sub.log_weight))
        if direction > 0:
            tree.plus = sub.plus
        else:
            tree.minus = sub.minus
        if is_uturn(tree.minus, tree.plus, inv_mass):
            break

    accept_stat = tree.sum_accept / max(tree.n_leapfrog, 1)
    return Transition(proposal, accept_stat, depth, tree.n_leapfrog, diverging)


@dataclass
class ChainResult:
    q: np.ndarray
    logp: np.ndarray
    divergences: np.ndarray
    tree_depths: np.ndarray
    accept_stats: np.ndarray
    n_leapfrog: np.ndarray
    step_size: float
    inv_mass: np.ndarray
    warmup_divergences: int = 0


def _initial_point(
    target: DensityTarget, init: np.ndarray, config: SamplerConfig, rng: np.random.Generator
) -> Point:
    for _ in range(100):
        q = init + rng.uniform(-config.init_jitter, config.init_jitter, len(init))
        logp, grad = target.value_and_grad(q)
        if np.isfinite(logp):
            return Point(q, np.zeros_like(q), logp, grad)
    raise SamplerFailure("no finite log density near the initial point")


def run_chain(
    target: DensityTarget,
    init: np.ndarray,
    config: SamplerConfig,
    chain: int,
    rng: np.random.Generator,
) -> ChainResult:
    """
    Runs warmup and sampling of one chain.

    :raises SamplerFailure: If every warmup transition diverged.
    """
    dim = len(init)
    point = _initial_point(target, init, config, rng)
    inv_mass = np.ones(dim)
    step_size = find_reasonable_step_size(target, point, inv_mass, rng)
    adaptation = DualAveraging.start(step_size)
    windows = make_warmup_windows(config.warmup)
    window_ends = {end for _, end in windows}
    estimator = RunningVariance(dim)
    warmup_divergences = 0

    for i in range(config.warmup):
        step = transition(
            target, point, step_size, inv_mass, rng, config.max_tree_depth, config.divergence_threshold
        )
        point = step.point
        warmup_divergences += step.diverging
        step_size = adaptation.update(step.accept_stat, config.target_accept)

        if any(start <= i < end for start, end in windows):
            estimator.update(point.q)
        if i + 1 in window_ends:
            inv_mass = estimator.regularized()
            estimator = RunningVariance(dim)
            step_size = find_reasonable_step_size(target, point, inv_mass, rng, step_size)
            adaptation = DualAveraging.start(step_size)
            LOGGER.debug(f"warmup: mass matrix updated, step size {step_size:.3g}", chain, i + 1)
        if (i + 1) % config.log_every == 0:
            LOGGER.info(f"warmup: step size {step_size:.3g}", chain, i + 1)

    if config.warmup > 0:
        if warmup_divergences == config.warmup:
            raise SamplerFailure(
                "every warmup transition diverged",
                {"chain": chain, "divergences": warmup_divergences, "step_size": step_size},
            )
        step_size = adaptation.final()

    q = np.zeros((config.draws, dim))
    logp = np.zeros(config.draws)
    divergences = np.zeros(config.draws, dtype=bool)
    tree_depths = np.zeros(config.draws, dtype=int)
    accept_stats = np.zeros(config.draws)
    n_leapfrog = np.zeros(config.draws, dtype=int)
    for i in range(config.draws):
        step = transition(
            target, point, step_size, inv_mass, rng, config.max_tree_depth, config.divergence_threshold
        )
        point = step.point
        q[i], logp[i] = point.q, point.logp
        divergences[i] = step.diverging
        tree_depths[i] = step.tree_depth
        accept_stats[i] = step.accept_stat
        n_leapfrog[i] = step.n_leapfrog
        if step.diverging:
            LOGGER.debug("sampling: divergent transition", chain, i + 1)
        if (i + 1) % config.log_every == 0:
            LOGGER.info(f"sampling: {int(divergences[: i + 1].sum())} divergences", chain, i + 1)

    return ChainResult(
        q, logp, divergences, tree_depths, accept_stats, n_leapfrog, step_size, inv_mass,
        warmup_divergences,
    )


@dataclass
class PosteriorDraws:
    """
    Post-warmup draws of all chains.

    :ivar draws: ``(chains, draws, dim)`` draws in the constrained space.
    :ivar logp: Unconstrained log density of every draw.
    :ivar divergences: Whether the transition producing the draw diverged.
    :ivar tree_depths: Number of doublings of every transition.
    :ivar step_sizes: The adapted step size of every chain.
    :ivar accept_stats: Mean acceptance statistic of every transition.
    :ivar n_leapfrog: Leapfrog steps of every transition.
    :ivar names: Column name of every coordinate.
    :ivar layout: The parameter layout, if the target has one.
    :ivar unconstrained: The draws in the unconstrained space.
    """

    draws: np.ndarray
    logp: np.ndarray
    divergences: np.ndarray
    tree_depths: np.ndarray
    step_sizes: np.ndarray
    accept_stats: np.ndarray
    n_leapfrog: np.ndarray
    names: list[str]
    layout: ParamLayout | None = None
    unconstrained: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        chains, draws, dim = self.draws.shape
        for name in ("logp", "divergences", "tree_depths", "accept_stats", "n_leapfrog"):
            if getattr(self, name).shape != (chains, draws):
                raise DomainError(name, getattr(self, name).shape, f"shape ({chains}, {draws})")
        if len(self.names) != dim:
            raise DomainError("names", len(self.names), f"{dim} names")
        if self.unconstrained is None:
            self.unconstrained = self.draws.copy()

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    @property
    def dim(self) -> int:
        return self.draws.shape[2]

    def flat(self, unconstrained: bool = False) -> np.ndarray:
        """All draws stacked chain after chain, ``(chains·draws, dim)``."""
        values = self.unconstrained if unconstrained else self.draws
        return values.reshape(-1, self.dim)

    def column(self, name: str) -> np.ndarray:
        """The ``(chains, draws)`` values of one named coordinate."""
        return self.draws[:, :, self.names.index(name)]

    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=(0, 1))


def nuts_sample(
    target: DensityTarget, config: SamplerConfig, init: ParamVector | np.ndarray
) -> PosteriorDraws:
    """
    Samples a target with the No-U-Turn sampler.

    Each chain owns a random stream spawned from ``config.seed``, so the draws do not depend on
    the number of threads.

    :param target: The log density and its gradient in the unconstrained space.
    :param config: The sampler settings.
    :param init: The initial point; a :class:`ParamVector` also provides names and transforms.
    :return: Exactly ``config.draws`` draws per chain.
    :raises SamplerFailure: If a chain cannot start or diverges throughout warmup.
    """
    if isinstance(init, ParamVector):
        layout: ParamLayout | None = init.layout
        q0 = init.values
        names = layout.names()
    else:
        layout = None
        q0 = np.asarray(init, dtype=float)
        names = [f"q[{i}]" for i in range(len(q0))]

    logp0, _ = target.value_and_grad(q0)
    if not np.isfinite(logp0):
        raise SamplerFailure("the log density is not finite at the initial point")

    LOGGER.configure("nuts", chains=config.chains, iterations=config.warmup + config.draws)
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(config.chains)]

    def run(chain: int) -> ChainResult:
        return run_chain(target, q0, config, chain, streams[chain])

    if config.threads > 1 and config.chains > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(run, range(config.chains)))
    else:
        results = [run(chain) for chain in range(config.chains)]

    unconstrained = np.stack([r.q for r in results])
    draws = untransform(unconstrained, layout) if layout is not None else unconstrained.copy()
    posterior = PosteriorDraws(
        draws=np.asarray(draws),
        logp=np.stack([r.logp for r in results]),
        divergences=np.stack([r.divergences for r in results]),
        tree_depths=np.stack([r.tree_depths for r in results]),
        step_sizes=np.array([r.step_size for r in results]),
        accept_stats=np.stack([r.accept_stats for r in results]),
        n_leapfrog=np.stack([r.n_leapfrog for r in results]),
        names=names,
        layout=layout,
        unconstrained=unconstrained,
    )
    n_div = int(posterior.divergences.sum())
    if n_div:
        LOGGER.warning(f"{n_div} divergent transitions after warmup")
    return posterior
