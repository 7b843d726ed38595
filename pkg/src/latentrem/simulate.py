"""Synthetic panels from logistic latent trajectories."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import DyadIndex, Family, LatentTrajectory, NetworkPanel, Parameters, make_family


@dataclass(frozen=True)
class SimScenario:
    """A simulation scenario.

    Trajectories are ``o + a / (1 + exp(-s (k - c)))`` per node and
    dimension, with ``|a|`` drawn from ``amplitude`` (random sign), ``c``
    from ``midpoint`` (fractions of ``n``), ``s`` from ``slope`` and ``o``
    from ``offset``.  ``static=True`` sets every slope to zero.  When
    ``alpha0`` is ``None`` it is chosen so the mean dyad count over the
    whole panel equals ``mean_count``.
    """

    p: int = 10
    n: int = 100
    d: int = 2
    alpha0: float | None = None
    mean_count: float = 2.0
    family: object = "poisson"
    directed: bool = False
    static: bool = False
    amplitude: tuple = (0.5, 2.0)
    midpoint: tuple = (0.2, 0.8)
    slope: tuple = (0.05, 0.3)
    offset: tuple = (-1.0, 1.0)
    replicates: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", make_family(self.family))
        if self.p < 2 or self.n < 1 or self.d < 1:
            raise ConfigError("scenario needs p >= 2, n >= 1, d >= 1")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if self.mean_count <= 0:
            raise ConfigError("mean_count must be positive")
        for name in ("amplitude", "midpoint", "slope", "offset"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range must be increasing")
            object.__setattr__(self, name, (float(lo), float(hi)))

    def replace(self, **kw) -> "SimScenario":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        out["family"] = self.family.to_dict()
        for name in ("amplitude", "midpoint", "slope", "offset"):
            out[name] = list(out[name])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SimScenario":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class LogisticParams:
    amplitude: np.ndarray
    midpoint: np.ndarray
    slope: np.ndarray
    offset: np.ndarray

    def evaluate(self, k) -> np.ndarray:
        """Locations at intervals ``k`` with shape ``(len(k), p, d)``."""
        k = np.asarray(k, dtype=float)[:, None, None]
        return self.offset + self.amplitude / (1.0 + np.exp(-self.slope * (k - self.midpoint)))


def draw_logistic(scenario: SimScenario, rng: np.random.Generator) -> LogisticParams:
    shape = (scenario.p, scenario.d)
    sign = rng.choice([-1.0, 1.0], size=shape)
    amp = sign * rng.uniform(*scenario.amplitude, size=shape)
    mid = rng.uniform(*scenario.midpoint, size=shape) * scenario.n
    slope = rng.uniform(*scenario.slope, size=shape)
    off = rng.uniform(*scenario.offset, size=shape)
    if scenario.static:
        slope = np.zeros(shape)
    return LogisticParams(amp, mid, slope, off)


def simulate_trajectories(scenario: SimScenario, rng=None) -> LatentTrajectory:
    """True locations for ``k = 0..n`` with zero covariance."""
    rng = np.random.default_rng(scenario.seed if rng is None else rng)
    params = draw_logistic(scenario, rng)
    return LatentTrajectory.from_locations(params.evaluate(np.arange(scenario.n + 1)), kind="truth")


def _log_kernel(traj: LatentTrajectory, dyads: DyadIndex) -> np.ndarray:
    loc = traj.locations()[1:]
    diff = loc[:, dyads.senders] - loc[:, dyads.receivers]
    return -np.sum(diff**2, axis=-1)


def calibrate_intercept(traj: LatentTrajectory, mean_count: float, directed: bool = False) -> float:
    """``alpha0`` giving mean rate ``mean_count`` over all dyads and ``k = 1..n``."""
    lk = _log_kernel(traj, DyadIndex.build(traj.p, directed))
    top = lk.max()
    return float(np.log(mean_count) - top - np.log(np.mean(np.exp(lk - top))))


def true_rates(traj: LatentTrajectory, alpha0: float, directed: bool = False, exposure=None) -> np.ndarray:
    """``mu_ij(k)`` for ``k = 1..n`` as an ``(n, p_y)`` array."""
    dy = DyadIndex.build(traj.p, directed)
    mu = np.exp(alpha0 + _log_kernel(traj, dy))
    if exposure is not None:
        mu = mu * np.asarray(exposure, dtype=float)[:, dy.senders]
    return mu


def simulate_counts(traj: LatentTrajectory, alpha0: float, family: Family = "poisson", seed=None,
                    directed: bool = False, exposure=None) -> NetworkPanel:
    """Independent counts at the true rates; NegBin has variance ``mu + phi mu^2``."""
    rng = np.random.default_rng(seed)
    family = make_family(family)
    mu = true_rates(traj, alpha0, directed, exposure)
    if not np.all(np.isfinite(mu)):
        raise ValueError("simulated rates must be finite")
    counts = family.sample(rng, mu)
    if exposure is None:
        exposure = np.ones((traj.n, traj.p))
    return NetworkPanel(counts, exposure, directed)


@dataclass
class SimulatedData:
    scenario: SimScenario
    truth: LatentTrajectory
    params: Parameters
    panel: NetworkPanel
    seed: int


def simulate_scenario(scenario: SimScenario, seed=None) -> SimulatedData:
    """Trajectory, intercept and one panel, all from a single seed."""
    seed = scenario.seed if seed is None else seed
    traj_rng, count_rng = np.random.default_rng(seed).spawn(2)
    truth = simulate_trajectories(scenario, traj_rng)
    alpha0 = scenario.alpha0
    if alpha0 is None:
        alpha0 = calibrate_intercept(truth, scenario.mean_count, scenario.directed)
    params = Parameters(
        intercept=alpha0,
        sigma=np.zeros((scenario.p * scenario.d,) * 2),
        family_dispersion=getattr(scenario.family, "dispersion", None),
    )
    panel = simulate_counts(truth, alpha0, scenario.family, count_rng, scenario.directed)
    return SimulatedData(scenario, truth, params, panel, int(seed) if np.isscalar(seed) else -1)
