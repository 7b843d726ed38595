"""Core model types, the dyadic rate function and its Jacobian.

Latent states are stored vectorised in node-major order: entries
``i*d .. (i+1)*d - 1`` of a state vector hold the coordinates of node ``i``.
Dyads are ordered lexicographically, ``(0, 1), (0, 2), ..., (p-2, p-1)`` for
undirected panels and every ordered pair ``(i, j), i != j`` for directed
ones.  Every module relies on these two conventions.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import orthogonal_procrustes
from scipy.special import gammaln

from .errors import ConfigError, DimensionError

SIGMA_STRUCTURES = ("full", "diagonal", "spherical", "per-node-spherical")
FILTERS = ("ekf", "ukf")
OFFSET_METHODS = ("taylor2", "unscented", "gaussian")
INIT_STRATEGIES = ("zeros-jitter", "mds", "backward-filter")

RATE_FLOOR = 1e-12


# ----------------------------------------------------------------------------
# observation families
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Poisson:
    name = "poisson"

    def variance(self, mu):
        return np.asarray(mu, dtype=float).copy()

    def logpmf(self, y, mu):
        y = np.asarray(y, dtype=float)
        mu = np.asarray(mu, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            ylogmu = np.where(y > 0, y * np.log(mu), 0.0)
        return ylogmu - mu - gammaln(y + 1.0)

    def sample(self, rng: np.random.Generator, mu):
        return rng.poisson(mu)

    def to_dict(self):
        return {"name": "poisson"}


@dataclass(frozen=True)
class NegativeBinomial:
    """Negative binomial with variance ``mu + dispersion * mu**2``."""

    dispersion: float = 1.0
    name = "negbin"

    def __post_init__(self):
        if not np.isfinite(self.dispersion) or self.dispersion < 0:
            raise ConfigError(f"negative binomial dispersion must be >= 0, got {self.dispersion}")

    def variance(self, mu):
        mu = np.asarray(mu, dtype=float)
        return mu + self.dispersion * mu**2

    def logpmf(self, y, mu):
        y = np.asarray(y, dtype=float)
        mu = np.asarray(mu, dtype=float)
        if self.dispersion == 0:
            return Poisson().logpmf(y, mu)
        r = 1.0 / self.dispersion
        with np.errstate(divide="ignore", invalid="ignore"):
            ylog = np.where(y > 0, y * (np.log(mu) - np.log(r + mu)), 0.0)
        return gammaln(y + r) - gammaln(r) - gammaln(y + 1.0) + r * (np.log(r) - np.log(r + mu)) + ylog

    def sample(self, rng: np.random.Generator, mu):
        mu = np.asarray(mu, dtype=float)
        if self.dispersion == 0:
            return rng.poisson(mu)
        r = 1.0 / self.dispersion
        return rng.negative_binomial(r, r / (r + mu))

    def to_dict(self):
        return {"name": "negbin", "dispersion": float(self.dispersion)}


Family = Poisson | NegativeBinomial


def make_family(spec) -> Family:
    """Build a family from a name, a dict or an existing family."""
    if isinstance(spec, (Poisson, NegativeBinomial)):
        return spec
    if isinstance(spec, str):
        spec = {"name": spec}
    name = str(spec.get("name", "poisson")).lower()
    if name == "poisson":
        return Poisson()
    if name in ("negbin", "negativebinomial", "negative-binomial", "nb"):
        return NegativeBinomial(float(spec.get("dispersion", 1.0)))
    raise ConfigError(f"unknown family {name!r}")


def family_moments(mu, family: Family):
    """Mean and diagonal variance of the counts at rate ``mu``."""
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < 0):
        raise ValueError("rates must be non-negative")
    return mu.copy(), family.variance(mu)


# ----------------------------------------------------------------------------
# panel and dyads
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class DyadIndex:
    """Bijection between dyads ``(i, j)`` and row numbers."""

    p: int
    directed: bool
    senders: np.ndarray
    receivers: np.ndarray

    @classmethod
    def build(cls, p: int, directed: bool) -> "DyadIndex":
        if directed:
            pairs = [(i, j) for i in range(p) for j in range(p) if i != j]
        else:
            pairs = [(i, j) for i in range(p) for j in range(i + 1, p)]
        arr = np.array(pairs, dtype=np.intp).reshape(-1, 2)
        return cls(p, directed, arr[:, 0].copy(), arr[:, 1].copy())

    def __len__(self):
        return len(self.senders)

    def row(self, i: int, j: int) -> int:
        if i == j:
            raise KeyError("self-loops are not dyads")
        if not self.directed and i > j:
            i, j = j, i
        if self.directed:
            return i * (self.p - 1) + (j if j < i else j - 1)
        # rows before sender i: sum_{a<i} (p-1-a)
        return i * (self.p - 1) - i * (i - 1) // 2 + (j - i - 1)

    def matrix(self, values) -> np.ndarray:
        """Scatter a length ``p_y`` vector into a ``p x p`` matrix."""
        out = np.zeros((self.p, self.p))
        out[self.senders, self.receivers] = values
        if not self.directed:
            out[self.receivers, self.senders] = values
        return out


@dataclass(frozen=True, eq=False)
class NetworkPanel:
    """Time-binned dyadic counts with per-sender exposures.

    ``counts[k-1, r]`` is the count of dyad ``r`` in interval ``k`` and
    ``exposure[k-1, i]`` is the exposure of node ``i`` in interval ``k``.
    Optional ``covariates`` have shape ``(n, p_y, q)``.
    """

    counts: np.ndarray
    exposure: np.ndarray
    directed: bool = True
    node_labels: Optional[tuple] = None
    covariates: Optional[np.ndarray] = None
    dyads: DyadIndex = field(init=False, repr=False)

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise DimensionError("counts", "(n, p_y)", counts.shape)
        exposure = np.asarray(self.exposure, dtype=float)
        if exposure.ndim != 2 or exposure.shape[0] != counts.shape[0]:
            raise DimensionError("exposure", f"({counts.shape[0]}, p)", exposure.shape)
        p = exposure.shape[1]
        if p < 2:
            raise ConfigError("a panel needs at least two nodes")
        dyads = DyadIndex.build(p, self.directed)
        if counts.shape[1] != len(dyads):
            raise DimensionError("dyad", len(dyads), counts.shape[1])
        if np.any(counts < 0) or not np.all(np.equal(np.mod(counts, 1), 0)):
            raise ValueError("counts must be non-negative integers")
        if np.any(exposure < 0) or not np.all(np.isfinite(exposure)):
            raise ValueError("exposures must be finite and non-negative")
        zero = exposure[:, dyads.senders] == 0
        if np.any(counts[zero] != 0):
            raise ValueError("a sender with zero exposure cannot have positive counts")
        object.__setattr__(self, "counts", counts.astype(np.int64))
        object.__setattr__(self, "exposure", exposure)
        object.__setattr__(self, "dyads", dyads)
        if self.node_labels is not None:
            labels = tuple(str(s) for s in self.node_labels)
            if len(labels) != p:
                raise DimensionError("node_labels", p, len(labels))
            object.__setattr__(self, "node_labels", labels)
        if self.covariates is not None:
            cov = np.asarray(self.covariates, dtype=float)
            if cov.ndim != 3 or cov.shape[:2] != counts.shape:
                raise DimensionError("covariates", f"({counts.shape[0]}, {counts.shape[1]}, q)", cov.shape)
            object.__setattr__(self, "covariates", cov)

    @classmethod
    def from_counts(cls, counts, exposure=None, directed=True, **kw) -> "NetworkPanel":
        counts = np.asarray(counts)
        if exposure is None:
            n, py = counts.shape
            p = _nodes_from_dyads(py, directed)
            exposure = np.ones((n, p))
        return cls(counts, exposure, directed, **kw)

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    @property
    def p(self) -> int:
        return self.exposure.shape[1]

    @property
    def p_y(self) -> int:
        return self.counts.shape[1]

    @property
    def n_covariates(self) -> int:
        return 0 if self.covariates is None else self.covariates.shape[2]

    def dyad_exposure(self, k: int) -> np.ndarray:
        """Exposure ``C_i(k)`` of the sending node of every dyad (``k`` is 1-based)."""
        return self.exposure[k - 1, self.dyads.senders]

    def active_rows(self, k: int) -> np.ndarray:
        return self.dyad_exposure(k) > 0

    def subset(self, intervals) -> "NetworkPanel":
        idx = np.asarray(intervals, dtype=np.intp)
        cov = None if self.covariates is None else self.covariates[idx]
        return NetworkPanel(self.counts[idx], self.exposure[idx], self.directed, self.node_labels, cov)

    def reversed(self) -> "NetworkPanel":
        return self.subset(np.arange(self.n)[::-1])

    def __eq__(self, other):
        if not isinstance(other, NetworkPanel):
            return NotImplemented
        same_cov = (self.covariates is None and other.covariates is None) or (
            self.covariates is not None
            and other.covariates is not None
            and np.array_equal(self.covariates, other.covariates)
        )
        return (
            self.directed == other.directed
            and self.node_labels == other.node_labels
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.exposure, other.exposure)
            and same_cov
        )


def _nodes_from_dyads(p_y: int, directed: bool) -> int:
    # p_y = p(p-1) or p(p-1)/2
    m = p_y if directed else 2 * p_y
    p = int(round((1 + np.sqrt(1 + 4 * m)) / 2))
    if p * (p - 1) != m:
        raise DimensionError("dyad", "p(p-1) or p(p-1)/2", p_y)
    return p


# ----------------------------------------------------------------------------
# trajectories, configuration, parameters
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LatentTrajectory:
    """Location means and covariances for ``k = 0..n``.

    ``means`` has shape ``(n+1, p*d)``, ``covariances`` ``(n+1, p*d, p*d)``.
    ``backward_gains[k-1]`` holds ``B_k`` for ``k = 1..n`` on smoothed
    trajectories.
    """

    d: int
    means: np.ndarray
    covariances: np.ndarray
    kind: str = "smoothed"
    backward_gains: Optional[np.ndarray] = None

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        if means.ndim != 2:
            raise DimensionError("means", "(n+1, pd)", means.shape)
        if means.shape[1] % self.d:
            raise DimensionError("latent", f"multiple of d={self.d}", means.shape[1])
        cov = np.asarray(self.covariances, dtype=float)
        pd_ = means.shape[1]
        if cov.shape != (means.shape[0], pd_, pd_):
            raise DimensionError("covariances", (means.shape[0], pd_, pd_), cov.shape)
        if self.kind not in ("predicted", "filtered", "smoothed", "truth"):
            raise ConfigError(f"unknown trajectory kind {self.kind!r}")
        scale = np.maximum(np.abs(cov).max(axis=(1, 2)), 1.0) if len(cov) else 1.0
        if np.any(np.abs(cov - cov.swapaxes(1, 2)).max(axis=(1, 2), initial=0.0) > 1e-10 * scale):
            raise ValueError("trajectory covariances must be symmetric")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", cov)
        if self.backward_gains is not None:
            gains = np.asarray(self.backward_gains, dtype=float)
            if gains.shape != (means.shape[0] - 1, pd_, pd_):
                raise DimensionError("backward_gains", (means.shape[0] - 1, pd_, pd_), gains.shape)
            object.__setattr__(self, "backward_gains", gains)

    def min_eigenvalues(self) -> np.ndarray:
        """Smallest covariance eigenvalue at every ``k``."""
        return np.linalg.eigvalsh(self.covariances)[:, 0]

    def is_psd(self, rtol: float = 1e-8) -> bool:
        norms = np.linalg.norm(self.covariances, ord=2, axis=(1, 2))
        return bool(np.all(self.min_eigenvalues() >= -rtol * np.maximum(norms, 1e-300)))

    @classmethod
    def from_locations(cls, locations, kind="truth") -> "LatentTrajectory":
        """Trajectory with zero covariance from an ``(n+1, p, d)`` array."""
        loc = np.asarray(locations, dtype=float)
        n1, p, d = loc.shape
        return cls(d, loc.reshape(n1, p * d), np.zeros((n1, p * d, p * d)), kind)

    @property
    def n(self) -> int:
        return self.means.shape[0] - 1

    @property
    def p(self) -> int:
        return self.means.shape[1] // self.d

    def locations(self) -> np.ndarray:
        return self.means.reshape(self.n + 1, self.p, self.d)

    def variances(self) -> np.ndarray:
        """Per-coordinate variances, shape ``(n+1, p, d)``."""
        return np.diagonal(self.covariances, axis1=1, axis2=2).reshape(self.n + 1, self.p, self.d)

    def bands(self, z: float = 1.96):
        sd = np.sqrt(np.clip(self.variances(), 0.0, None))
        loc = self.locations()
        return loc - z * sd, loc + z * sd

    def with_kind(self, kind: str) -> "LatentTrajectory":
        return dataclasses.replace(self, kind=kind)


@dataclass(frozen=True)
class EffectSpec:
    intercept: bool = True
    sender: bool = False
    receiver: bool = False
    covariates: bool = False

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ModelConfig:
    """Everything that determines a fit apart from the data.

    ``kappa=None`` means the unscented spread is chosen so that
    ``p*d + kappa = 3``.  ``offset_method=None`` picks ``taylor2`` for the
    EKF and ``unscented`` for the UKF.
    """

    d: int = 2
    sigma_structure: str = "spherical"
    filter: str = "ekf"
    kappa: Optional[float] = None
    family: Family = field(default_factory=Poisson)
    effects: EffectSpec = field(default_factory=EffectSpec)
    max_iter: int = 200
    tol: float = 1e-6
    sigma_init_scale: float = 1e-4
    v0_scale: float = 1.0
    update_steps: int = 1
    reuse_previous_r: bool = False
    offset_method: Optional[str] = None
    offset_moments: str = "smoothed"
    init: str = "mds"
    gain: str = "woodbury"
    re_variances: tuple = (1.0, 1.0)
    fix_re_variances: bool = False
    static: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", make_family(self.family))
        if isinstance(self.effects, dict):
            object.__setattr__(self, "effects", EffectSpec(**self.effects))
        object.__setattr__(self, "filter", str(self.filter).lower())
        object.__setattr__(self, "re_variances", tuple(float(v) for v in self.re_variances))
        if int(self.d) != self.d or self.d < 1:
            raise ConfigError(f"latent dimension d must be a positive integer, got {self.d}")
        if self.sigma_structure not in SIGMA_STRUCTURES:
            raise ConfigError(f"sigma_structure must be one of {SIGMA_STRUCTURES}")
        if self.filter not in FILTERS:
            raise ConfigError(f"filter must be one of {FILTERS}")
        if self.offset_method is not None and self.offset_method not in OFFSET_METHODS:
            raise ConfigError(f"offset_method must be one of {OFFSET_METHODS}")
        if self.offset_moments not in ("smoothed", "filtered"):
            raise ConfigError("offset_moments must be 'smoothed' or 'filtered'")
        if self.init not in INIT_STRATEGIES:
            raise ConfigError(f"init must be one of {INIT_STRATEGIES}")
        if self.gain not in ("woodbury", "direct"):
            raise ConfigError("gain must be 'woodbury' or 'direct'")
        if self.tol <= 0 or self.sigma_init_scale < 0 or self.v0_scale <= 0:
            raise ConfigError("tolerances and scales must be positive")
        if not 1 <= self.update_steps <= 5:
            raise ConfigError("update_steps must lie in 1..5")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if len(self.re_variances) != 2 or min(self.re_variances) < 0:
            raise ConfigError("re_variances must be two non-negative reals")

    def resolved_kappa(self, p: int) -> float:
        px = p * self.d
        kappa = 3.0 - px if self.kappa is None else float(self.kappa)
        if px + kappa <= 0:
            raise ConfigError(f"kappa must exceed -p*d = {-px}")
        return kappa

    def resolved_offset_method(self) -> str:
        if self.offset_method is not None:
            return self.offset_method
        return "unscented" if self.filter == "ukf" else "taylor2"

    def check_panel(self, panel: NetworkPanel):
        if not panel.directed and (self.effects.sender or self.effects.receiver):
            raise ConfigError("sender/receiver effects require a directed panel")
        if self.effects.covariates and panel.covariates is None:
            raise ConfigError("covariate effects requested but the panel carries no covariates")
        self.resolved_kappa(panel.p)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        out["family"] = self.family.to_dict()
        out["effects"] = self.effects.to_dict()
        out["re_variances"] = list(self.re_variances)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "effects" in data and isinstance(data["effects"], dict):
            data["effects"] = EffectSpec(**data["effects"])
        return cls(**data)


@dataclass(frozen=True, eq=False)
class Parameters:
    intercept: float = 0.0
    fixed_coeffs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sender_effects: Optional[np.ndarray] = None
    receiver_effects: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None
    re_variances: tuple = (1.0, 1.0)
    family_dispersion: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "fixed_coeffs", np.atleast_1d(np.asarray(self.fixed_coeffs, dtype=float)))
        for name in ("sender_effects", "receiver_effects"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=float))
        if self.sigma is not None:
            s = np.asarray(self.sigma, dtype=float)
            if s.ndim != 2 or s.shape[0] != s.shape[1]:
                raise DimensionError("sigma", "square", s.shape)
            object.__setattr__(self, "sigma", s)
        if min(self.re_variances) < 0:
            raise ValueError("random-effect variances must be non-negative")

    @classmethod
    def initial(cls, p: int, d: int, intercept=0.0, sigma_scale=1e-4, n_covariates=0, re_variances=(1.0, 1.0)):
        return cls(
            intercept=float(intercept),
            fixed_coeffs=np.zeros(n_covariates),
            sender_effects=np.zeros(p),
            receiver_effects=np.zeros(p),
            sigma=sigma_scale * np.eye(p * d),
            re_variances=tuple(re_variances),
        )

    def replace(self, **kw) -> "Parameters":
        return dataclasses.replace(self, **kw)

    def fixed_predictor(self, panel: NetworkPanel, k: int) -> np.ndarray:
        """Everything in the log-rate except the latent distance and exposure."""
        dy = panel.dyads
        eta = np.full(panel.p_y, float(self.intercept))
        if self.sender_effects is not None:
            if len(self.sender_effects) != panel.p:
                raise DimensionError("sender_effects", panel.p, len(self.sender_effects))
            eta = eta + self.sender_effects[dy.senders]
        if self.receiver_effects is not None:
            if len(self.receiver_effects) != panel.p:
                raise DimensionError("receiver_effects", panel.p, len(self.receiver_effects))
            eta = eta + self.receiver_effects[dy.receivers]
        if panel.covariates is not None and self.fixed_coeffs.size:
            if self.fixed_coeffs.size != panel.n_covariates:
                raise DimensionError("fixed_coeffs", panel.n_covariates, self.fixed_coeffs.size)
            eta = eta + panel.covariates[k - 1] @ self.fixed_coeffs
        return eta

    def to_dict(self) -> dict:
        def arr(v):
            return None if v is None else np.asarray(v).tolist()

        return {
            "intercept": float(self.intercept),
            "fixed_coeffs": arr(self.fixed_coeffs),
            "sender_effects": arr(self.sender_effects),
            "receiver_effects": arr(self.receiver_effects),
            "sigma": arr(self.sigma),
            "re_variances": [float(v) for v in self.re_variances],
            "family_dispersion": self.family_dispersion,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Parameters":
        data = dict(data)
        for key in ("sender_effects", "receiver_effects", "sigma"):
            if data.get(key) is not None:
                data[key] = np.asarray(data[key], dtype=float)
        data["fixed_coeffs"] = np.asarray(data.get("fixed_coeffs") or [], dtype=float)
        data["re_variances"] = tuple(data.get("re_variances", (1.0, 1.0)))
        return cls(**data)


# ----------------------------------------------------------------------------
# rate and Jacobian
# ----------------------------------------------------------------------------


def _check_state(x, panel: NetworkPanel):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] % panel.p or x.shape[-1] == 0:
        raise DimensionError("latent", f"multiple of p={panel.p}", x.shape[-1] if x.ndim else 0)
    return x, x.shape[-1] // panel.p


def squared_distances(x: np.ndarray, dyads: DyadIndex, d: int) -> np.ndarray:
    """``||x_i - x_j||^2`` for every dyad; ``x`` is ``(..., p*d)``."""
    loc = x.reshape(x.shape[:-1] + (dyads.p, d))
    diff = loc[..., dyads.receivers, :] - loc[..., dyads.senders, :]
    return np.einsum("...m,...m->...", diff, diff)


def _exp_rate(eta: np.ndarray, exposure: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        mu = exposure * np.exp(eta)
    return np.where(exposure > 0, mu, 0.0)


def rate(x, params: Parameters, panel: NetworkPanel, k: int) -> np.ndarray:
    """Dyadic rates ``mu_ij(k) = C_i(k) exp(eta_ij - ||x_i - x_j||^2)``.

    ``x`` may be one state of length ``p*d`` or a stack ``(m, p*d)``.
    Dyads whose sender has zero exposure get a rate of exactly zero.
    """
    x, d = _check_state(x, panel)
    if not 1 <= k <= panel.n:
        raise DimensionError("interval", f"1..{panel.n}", k)
    eta = params.fixed_predictor(panel, k) - squared_distances(x, panel.dyads, d)
    return _exp_rate(eta, panel.dyad_exposure(k))


def jacobian_blocks(x, params: Parameters, panel: NetworkPanel, k: int):
    """Sparse Jacobian: ``(mu, G)`` with ``G[r] = d mu_r / d x_i`` for dyad ``r = (i, j)``.

    The derivative with respect to ``x_j`` is ``-G[r]``; all other blocks vanish.
    """
    x, d = _check_state(x, panel)
    if x.ndim != 1:
        raise DimensionError("latent", "a single state vector", x.shape)
    dy = panel.dyads
    mu = rate(x, params, panel, k)
    loc = x.reshape(panel.p, d)
    diff = loc[dy.receivers] - loc[dy.senders]
    return mu, 2.0 * diff * mu[:, None]


def jacobian(x, params: Parameters, panel: NetworkPanel, k: int) -> np.ndarray:
    """Dense ``p_y x p*d`` Jacobian of the rate vector at ``x``."""
    _, blocks = jacobian_blocks(x, params, panel, k)
    return dense_jacobian(blocks, panel.dyads, blocks.shape[1])


def dense_jacobian(blocks: np.ndarray, dyads: DyadIndex, d: int) -> np.ndarray:
    py = len(dyads)
    H = np.zeros((py, dyads.p * d))
    rows = np.arange(py)[:, None]
    cols = np.arange(d)[None, :]
    H[rows, dyads.senders[:, None] * d + cols] = blocks
    H[rows, dyads.receivers[:, None] * d + cols] = -blocks
    return H


# ----------------------------------------------------------------------------
# Procrustes alignment (reporting only)
# ----------------------------------------------------------------------------


class DegenerateReferenceWarning(UserWarning):
    pass


def align_procrustes(est: LatentTrajectory, ref) -> LatentTrajectory:
    """Rotate and translate ``est`` onto ``ref`` with one transform for all intervals.

    ``ref`` is another trajectory or a single ``(p, d)`` anchor frame.  The
    likelihood only sees distances, so this is purely a reporting aid.
    """
    X = est.locations()
    if isinstance(ref, LatentTrajectory):
        Y = ref.locations()
    else:
        Y = np.broadcast_to(np.asarray(ref, dtype=float), X.shape)
    if Y.shape != X.shape:
        raise DimensionError("trajectory", X.shape, Y.shape)
    d = est.d
    xs, ys = X.reshape(-1, d), Y.reshape(-1, d)
    xc, yc = xs.mean(axis=0), ys.mean(axis=0)
    A, B = xs - xc, ys - yc
    if np.allclose(B, 0.0, atol=1e-14) or np.allclose(A, 0.0, atol=1e-14):
        warnings.warn("reference configuration is degenerate; translation-only alignment",
                      DegenerateReferenceWarning, stacklevel=2)
        R = np.eye(d)
    else:
        R, _ = orthogonal_procrustes(A, B)
    aligned = (X - xc) @ R + yc
    p = est.p
    T = np.kron(np.eye(p), R.T)
    cov = T @ est.covariances @ T.T
    gains = None if est.backward_gains is None else T @ est.backward_gains @ T.T
    return LatentTrajectory(d, aligned.reshape(X.shape[0], -1), cov, est.kind, gains)


def pairwise_sq_distances(traj: LatentTrajectory) -> np.ndarray:
    """Squared distance matrices, shape ``(n+1, p, p)``."""
    loc = traj.locations()
    diff = loc[:, :, None, :] - loc[:, None, :, :]
    return np.einsum("kijm,kijm->kij", diff, diff)

