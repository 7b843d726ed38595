"""EM fitting: filter/smoother E-step, closed-form Sigma and offset Poisson M-step."""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.sparse.csgraph import connected_components
from scipy.special import gammaln

from .errors import ConvergenceError, DivergenceError, LatentREMError
from .filter import FilterState, filter_pass, jittered_cholesky, run_filter, NetworkObservation, symmetrize
from .model import (
    EffectSpec,
    LatentTrajectory,
    ModelConfig,
    NetworkPanel,
    Parameters,
    DyadIndex,
)
from .smoother import lag_one_cov, smooth_pass

log = logging.getLogger(__name__)

OFFSET_FLOOR = 1e-12


# ----------------------------------------------------------------------------
# Gaussian component
# ----------------------------------------------------------------------------


def expected_increment_moment(smoothed: LatentTrajectory, lag_covs=None) -> np.ndarray:
    """``(1/n) sum_k E[(x_k - x_{k-1})(x_k - x_{k-1})' | y_{1:n}]``, unstructured."""
    if lag_covs is None:
        lag_covs = lag_one_cov(smoothed)
    V = smoothed.covariances
    m = smoothed.means
    n = smoothed.n
    if len(lag_covs) != n:
        raise LatentREMError(f"expected {n} lag-one covariances, got {len(lag_covs)}")
    delta = m[1:] - m[:-1]
    terms = V[1:] + V[:-1] - lag_covs - lag_covs.swapaxes(-1, -2) + delta[:, :, None] * delta[:, None, :]
    return symmetrize(terms.mean(axis=0))


def project_sigma(S: np.ndarray, structure: str, d: int) -> np.ndarray:
    """Clip negative eigenvalues, then impose the covariance structure."""
    S = symmetrize(np.asarray(S, dtype=float))
    w, U = linalg.eigh(S)
    S = symmetrize((U * np.clip(w, 0.0, None)) @ U.T)
    px = S.shape[0]
    if structure == "full":
        out = S
    elif structure == "diagonal":
        out = np.diag(np.diag(S))
    elif structure == "spherical":
        out = np.mean(np.diag(S)) * np.eye(px)
    elif structure == "per-node-spherical":
        per_node = np.diag(S).reshape(-1, d).mean(axis=1)
        out = np.diag(np.repeat(per_node, d))
    else:
        raise ValueError(f"unknown sigma structure {structure!r}")
    if np.linalg.eigvalsh(out).min() < -1e-10:
        raise LatentREMError("projected Sigma is not positive semi-definite")
    return out


def sigma_mle(smoothed: LatentTrajectory, lag_covs, structure: str = "full") -> np.ndarray:
    """Maximiser of the Gaussian component, projected on ``structure``.

    Uses ``E[x_k x_{k-1}'] = V_{k|n} B_k' + x_k x_{k-1}'``, so the two
    cross-covariance terms enter with a minus sign.
    """
    return project_sigma(expected_increment_moment(smoothed, lag_covs), structure, smoothed.d)


def gaussian_component(sigma, smoothed: LatentTrajectory, lag_covs=None) -> Optional[float]:
    """Expected random-walk log density; ``None`` when ``sigma`` is singular."""
    sigma = np.asarray(sigma, dtype=float)
    n = smoothed.n
    px = sigma.shape[0]
    sign, logdet = np.linalg.slogdet(sigma)
    if n == 0 or sign <= 0 or not np.isfinite(logdet):
        return None
    S = expected_increment_moment(smoothed, lag_covs)
    quad = n * np.trace(linalg.solve(sigma, S, assume_a="pos"))
    return float(-0.5 * quad - 0.5 * n * logdet - 0.5 * n * px * np.log(2 * np.pi))


# ----------------------------------------------------------------------------
# offsets: log E[exp(-||x_i - x_j||^2)]
# ----------------------------------------------------------------------------


def _difference_moments(means: np.ndarray, covs: np.ndarray, dyads: DyadIndex, d: int):
    """Mean and covariance of ``x_j - x_i`` per dyad; inputs are stacks over k."""
    K = means.shape[0]
    p = dyads.p
    loc = means.reshape(K, p, d)
    m = loc[:, dyads.receivers] - loc[:, dyads.senders]
    C = covs.reshape(K, p, d, p, d)
    si, rj = dyads.senders, dyads.receivers
    # advanced indices separated by a slice move to the front: (p_y, K, d, d)
    Cii = C[:, si, :, si, :]
    Cjj = C[:, rj, :, rj, :]
    Cij = C[:, si, :, rj, :]
    S = Cii + Cjj - Cij - Cij.swapaxes(-1, -2)
    return m, np.moveaxis(S, 0, 1)


def _marginal_blocks(means, covs, dyads, d):
    K = means.shape[0]
    p = dyads.p
    loc = means.reshape(K, p, d)
    u = np.concatenate([loc[:, dyads.senders], loc[:, dyads.receivers]], axis=-1)
    C = covs.reshape(K, p, d, p, d)
    si, rj = dyads.senders, dyads.receivers
    top = np.concatenate([C[:, si, :, si, :], C[:, si, :, rj, :]], axis=-1)
    bot = np.concatenate([C[:, rj, :, si, :], C[:, rj, :, rj, :]], axis=-1)
    V = np.moveaxis(np.concatenate([top, bot], axis=-2), 0, 1)
    return u, symmetrize(V)


def _psd_sqrt(V):
    w, U = np.linalg.eigh(V)
    return U * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


def offset_moments(means, covs, dyads: DyadIndex, d: int, method: str = "taylor2", kappa=None) -> np.ndarray:
    """``log E[exp(-||x_i - x_j||^2)]`` for stacks of Gaussian moments.

    ``means`` is ``(K, p*d)`` and ``covs`` ``(K, p*d, p*d)``; returns
    ``(K, p_y)``.  ``taylor2`` is the second-order expansion around the
    mean, ``unscented`` averages over sigma points of the ``(i, j)``
    marginal and ``gaussian`` is the closed form for Gaussian locations.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    covs = np.asarray(covs, dtype=float)
    if covs.ndim == 2:
        covs = covs[None]
    if method == "taylor2":
        m, S = _difference_moments(means, covs, dyads, d)
        g = np.exp(-np.einsum("...m,...m->...", m, m))
        # Hessian of exp(-z'z) is g (4 z z' - 2 I)
        corr = 2.0 * np.einsum("...a,...ab,...b->...", m, S, m) - np.trace(S, axis1=-2, axis2=-1)
        return np.log(np.maximum(g * (1.0 + corr), OFFSET_FLOOR))
    if method == "gaussian":
        m, S = _difference_moments(means, covs, dyads, d)
        A = np.eye(d) + 2.0 * S
        _, logdet = np.linalg.slogdet(A)
        quad = np.einsum("...a,...a->...", m, np.linalg.solve(A, m[..., None])[..., 0])
        return -0.5 * logdet - quad
    if method == "unscented":
        u, V = _marginal_blocks(means, covs, dyads, d)
        dim = 2 * d
        kappa = 3.0 - dim if kappa is None else float(kappa)
        A = _psd_sqrt(V) * np.sqrt(dim + kappa)
        w0 = kappa / (dim + kappa)
        wj = 1.0 / (2.0 * (dim + kappa))

        def g(z):
            diff = z[..., d:] - z[..., :d]
            return np.exp(-np.einsum("...m,...m->...", diff, diff))

        total = w0 * g(u)
        cols = np.swapaxes(A, -1, -2)  # (..., column, dim)
        total = total + wj * (g(u[..., None, :] + cols).sum(-1) + g(u[..., None, :] - cols).sum(-1))
        return np.log(np.maximum(total, OFFSET_FLOOR))
    raise ValueError(f"unknown offset method {method!r}")


def offset_expectation(mean, cov, i: int, j: int, d: int, method: str = "taylor2", kappa=None) -> float:
    """Single-dyad version of :func:`offset_moments` at one interval."""
    mean = np.asarray(mean, dtype=float)
    p = mean.shape[0] // d
    dy = DyadIndex(p, True, np.array([i]), np.array([j]))
    return float(offset_moments(mean[None], np.asarray(cov, dtype=float)[None], dy, d, method, kappa)[0, 0])


def expected_sq_distance(means, covs, dyads, d):
    m, S = _difference_moments(np.atleast_2d(means), covs if covs.ndim == 3 else covs[None], dyads, d)
    return np.einsum("...m,...m->...", m, m) + np.trace(S, axis1=-2, axis2=-1)


# ----------------------------------------------------------------------------
# Poisson component: penalised IRLS with sender/receiver random effects
# ----------------------------------------------------------------------------


@dataclass
class MStepResult:
    intercept: float
    fixed_coeffs: np.ndarray
    sender_effects: np.ndarray
    receiver_effects: np.ndarray
    re_variances: tuple
    deviance: float
    penalized_deviance: float
    deviance_trace: list
    iterations: int
    edf: float
    coef: np.ndarray
    inactive_senders: list = field(default_factory=list)
    inactive_receivers: list = field(default_factory=list)


def _sum_zero_basis(a: int) -> np.ndarray:
    if a < 2:
        return np.zeros((a, 0))
    return linalg.null_space(np.ones((1, a)))


class _Design:
    """Dense design for the offset Poisson regression on active rows."""

    def __init__(self, panel: NetworkPanel, offsets, effects: EffectSpec):
        n, py = panel.counts.shape
        dy = panel.dyads
        expo = panel.exposure[:, dy.senders]
        mask = expo > 0
        self.mask = mask
        self.y = panel.counts[mask].astype(float)
        with np.errstate(divide="ignore"):
            self.offset = (np.log(np.where(mask, expo, 1.0)) + np.asarray(offsets, dtype=float))[mask]
        blocks, names = [], []
        nrow = int(mask.sum())
        if effects.intercept:
            blocks.append(np.ones((nrow, 1)))
            names.append(("intercept", 1))
        if effects.covariates and panel.covariates is not None:
            blocks.append(panel.covariates[mask])
            names.append(("covariates", panel.n_covariates))
        senders = np.broadcast_to(dy.senders, (n, py))[mask]
        receivers = np.broadcast_to(dy.receivers, (n, py))[mask]
        self.sender_nodes = self.receiver_nodes = np.zeros(0, dtype=int)
        self.inactive_senders, self.inactive_receivers = [], []
        self.Zs = self.Zr = np.zeros((0, 0))
        if effects.sender:
            sent = np.bincount(senders, weights=self.y, minlength=panel.p)
            self.sender_nodes = np.flatnonzero(sent > 0)
            self.inactive_senders = [int(i) for i in np.flatnonzero(sent == 0)]
            self.Zs = _sum_zero_basis(len(self.sender_nodes))
            blocks.append(self._effect_block(senders, self.sender_nodes, self.Zs, panel.p))
            names.append(("sender", self.Zs.shape[1]))
        if effects.receiver:
            recv = np.bincount(receivers, weights=self.y, minlength=panel.p)
            self.receiver_nodes = np.flatnonzero(recv > 0)
            self.inactive_receivers = [int(i) for i in np.flatnonzero(recv == 0)]
            self.Zr = _sum_zero_basis(len(self.receiver_nodes))
            blocks.append(self._effect_block(receivers, self.receiver_nodes, self.Zr, panel.p))
            names.append(("receiver", self.Zr.shape[1]))
        self.X = np.hstack(blocks) if blocks else np.zeros((nrow, 0))
        self.slices = {}
        start = 0
        for name, width in names:
            self.slices[name] = slice(start, start + width)
            start += width
        self.p = panel.p
        self.n_cov = panel.n_covariates

    @staticmethod
    def _effect_block(nodes, active, Z, p):
        lookup = np.full((p, Z.shape[1]), 0.0)
        lookup[active] = Z
        return lookup[nodes]

    def penalty(self, re_variances) -> np.ndarray:
        P = np.zeros(self.X.shape[1])
        for name, var in zip(("sender", "receiver"), re_variances):
            if name in self.slices:
                P[self.slices[name]] = 1.0 / max(var, 1e-12)
        return P

    def unpack(self, beta):
        get = lambda name: beta[self.slices[name]] if name in self.slices else np.zeros(0)
        intercept = float(get("intercept")[0]) if "intercept" in self.slices else 0.0
        coeffs = get("covariates")
        sender = np.zeros(self.p)
        if "sender" in self.slices and len(self.sender_nodes):
            sender[self.sender_nodes] = self.Zs @ get("sender")
        receiver = np.zeros(self.p)
        if "receiver" in self.slices and len(self.receiver_nodes):
            receiver[self.receiver_nodes] = self.Zr @ get("receiver")
        if "covariates" not in self.slices:
            coeffs = np.zeros(self.n_cov)
        return intercept, coeffs, sender, receiver

    def pack(self, params: Parameters) -> np.ndarray:
        beta = np.zeros(self.X.shape[1])
        if "intercept" in self.slices:
            beta[self.slices["intercept"]] = params.intercept
        if "covariates" in self.slices and params.fixed_coeffs.size == self.n_cov:
            beta[self.slices["covariates"]] = params.fixed_coeffs
        if "sender" in self.slices and params.sender_effects is not None and len(self.sender_nodes):
            beta[self.slices["sender"]] = self.Zs.T @ params.sender_effects[self.sender_nodes]
        if "receiver" in self.slices and params.receiver_effects is not None and len(self.receiver_nodes):
            beta[self.slices["receiver"]] = self.Zr.T @ params.receiver_effects[self.receiver_nodes]
        return beta


def poisson_deviance(y, mu) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(y > 0, y * np.log(y / mu), 0.0)
    return float(2.0 * np.sum(t - (y - mu)))


def mstep_regression(
    panel: NetworkPanel,
    offsets,
    effects: EffectSpec,
    re_variances=(1.0, 1.0),
    fix_re_variances: bool = False,
    init: Parameters | None = None,
    max_iter: int = 100,
    tol: float = 1e-10,
) -> MStepResult:
    """Penalised Poisson regression with offset ``log C_i(k) + offsets``.

    Sender and receiver effects are Gaussian random effects, i.e. ridge
    penalised with weight ``1 / variance``, each block constrained to sum to
    zero.  After convergence the variances get one EM update unless fixed.
    ``offsets`` has shape ``(n, p_y)``.
    """
    offsets = np.asarray(offsets, dtype=float)
    if offsets.shape != panel.counts.shape:
        raise LatentREMError(f"offsets must have shape {panel.counts.shape}, got {offsets.shape}")
    if not np.all(np.isfinite(offsets)):
        raise LatentREMError("offsets must be finite")
    des = _Design(panel, offsets, effects)
    X, y, o = des.X, des.y, des.offset
    P = des.penalty(re_variances)
    ncol = X.shape[1]

    if init is not None:
        beta = des.pack(init)
    else:
        beta = np.zeros(ncol)
        if "intercept" in des.slices and y.sum() > 0:
            beta[des.slices["intercept"]] = np.log(y.sum() / np.exp(o).sum())

    def objective(b):
        mu = np.exp(o + X @ b)
        dev = poisson_deviance(y, mu)
        return dev + float(b @ (P * b)), dev, mu

    pen, dev, mu = objective(beta)
    trace = [pen]
    iterations = 0
    if ncol:
        converged = False
        for iterations in range(1, max_iter + 1):
            grad = X.T @ (y - mu) - P * beta
            hess = (X.T * mu) @ X + np.diag(P)
            try:
                step = linalg.solve(hess, grad, assume_a="pos")
            except (linalg.LinAlgError, ValueError):
                step = linalg.lstsq(hess, grad)[0]
            t = 1.0
            for _ in range(50):
                cand = beta + t * step
                pen_c, dev_c, mu_c = objective(cand)
                if np.isfinite(pen_c) and pen_c <= pen * (1 + 1e-12) + 1e-12:
                    break
                t *= 0.5
            else:
                raise ConvergenceError("IRLS step halving failed", trace)
            change = abs(pen - pen_c) / (abs(pen_c) + 0.1)
            beta, pen, dev, mu = cand, pen_c, dev_c, mu_c
            trace.append(pen)
            if change < tol:
                converged = True
                break
        if not converged:
            raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations", trace)

    hess = (X.T * mu) @ X + np.diag(P)
    edf = 0.0
    new_var = tuple(float(v) for v in re_variances)
    if ncol:
        cov = linalg.pinvh(hess)
        edf = float(np.sum(cov * ((X.T * mu) @ X).T))
        if not fix_re_variances:
            upd = list(new_var)
            for idx, name in enumerate(("sender", "receiver")):
                sl = des.slices.get(name)
                if sl is not None and sl.stop > sl.start:
                    b = beta[sl]
                    upd[idx] = max(float((b @ b + np.trace(cov[sl, sl])) / (sl.stop - sl.start)), 1e-8)
            new_var = tuple(upd)
    intercept, coeffs, sender, receiver = des.unpack(beta)
    return MStepResult(
        intercept=intercept,
        fixed_coeffs=coeffs,
        sender_effects=sender,
        receiver_effects=receiver,
        re_variances=new_var,
        deviance=dev,
        penalized_deviance=pen,
        deviance_trace=trace,
        iterations=iterations,
        edf=edf,
        coef=beta,
        inactive_senders=des.inactive_senders if effects.sender else [],
        inactive_receivers=des.inactive_receivers if effects.receiver else [],
    )


def expected_poisson_loglik(panel: NetworkPanel, params: Parameters, moments: LatentTrajectory, offsets) -> float:
    """``Q^P``: expected complete-data Poisson log-likelihood of the counts.

    ``offsets`` are the log expected kernels used in the M-step; the
    ``y log mu`` term uses the exact ``E[||x_i - x_j||^2]``.
    """
    dy = panel.dyads
    d = moments.d
    Ed = expected_sq_distance(moments.means[1:], moments.covariances[1:], dy, d)
    total = 0.0
    for k in range(1, panel.n + 1):
        act = panel.active_rows(k)
        y = panel.counts[k - 1, act].astype(float)
        eta = params.fixed_predictor(panel, k)[act]
        logC = np.log(panel.dyad_exposure(k)[act])
        Emu = np.exp(logC + eta + offsets[k - 1, act])
        total += float(np.sum(-Emu + y * (logC + eta - Ed[k - 1, act]) - gammaln(y + 1.0)))
    return total


# ----------------------------------------------------------------------------
# initialisation
# ----------------------------------------------------------------------------


def mds_dissimilarity(panel: NetworkPanel):
    """Squared-distance proxies ``alpha0 - log((ybar + 0.5) / Cbar)`` clipped at 0.

    Returns the ``p x p`` matrix and the intercept ``alpha0`` that makes the
    closest pair coincide.
    """
    dy = panel.dyads
    ybar = panel.counts.mean(axis=0)
    cbar = panel.exposure.mean(axis=0)[dy.senders]
    rate = (ybar + 0.5) / np.where(cbar > 0, cbar, 1.0)
    R = dy.matrix(np.log(rate))
    if panel.directed:
        R = 0.5 * (R + R.T)
    off = ~np.eye(panel.p, dtype=bool)
    alpha0 = float(R[off].max())
    delta = np.where(off, np.clip(alpha0 - R, 0.0, None), 0.0)
    return symmetrize(delta), alpha0


def classical_mds(delta_sq: np.ndarray, d: int) -> np.ndarray:
    """Classical scaling of a matrix of squared dissimilarities."""
    p = delta_sq.shape[0]
    J = np.eye(p) - 1.0 / p
    B = -0.5 * J @ delta_sq @ J
    w, U = linalg.eigh(symmetrize(B))
    order = np.argsort(w)[::-1][:d]
    X = U[:, order] * np.sqrt(np.clip(w[order], 0.0, None))
    if X.shape[1] < d:
        X = np.hstack([X, np.zeros((p, d - X.shape[1]))])
    # fix eigenvector signs for determinism
    signs = np.sign(X[np.argmax(np.abs(X), axis=0), np.arange(d)])
    return X * np.where(signs == 0, 1.0, signs)


def init_locations(panel: NetworkPanel, strategy: str = "mds", config: ModelConfig | None = None, seed=None):
    """Starting moments ``(x_{0|0}, V_{0|0})`` for the filter."""
    config = config or ModelConfig()
    d, p = config.d, panel.p
    rng = np.random.default_rng(config.seed if seed is None else seed)
    V0 = config.v0_scale * np.eye(p * d)
    jitter = rng.normal(0.0, 0.1, size=(p, d))
    if strategy == "zeros-jitter":
        return jitter.ravel(), V0
    if strategy == "mds":
        agg = panel.dyads.matrix(panel.counts.sum(axis=0))
        ncomp, _ = connected_components((agg + agg.T) > 0, directed=False)
        if ncomp > 1:
            warnings.warn("aggregate graph is disconnected; falling back to zeros-jitter", stacklevel=2)
            return jitter.ravel(), V0
        delta, _ = mds_dissimilarity(panel)
        X = classical_mds(delta, d)
        dead = np.all(np.abs(X) < 1e-12, axis=0)
        X[:, dead] = jitter[:, dead]
        return X.ravel(), V0
    if strategy == "backward-filter":
        x0, _ = init_locations(panel, "zeros-jitter", config, seed)
        params = initial_parameters(panel, config, x0)
        sigma = max(config.sigma_init_scale, 1e-4) * np.eye(p * d)
        states = run_filter(NetworkObservation(panel.reversed(), params, config.family), sigma, (x0, V0))
        last = states[-1] if not states[-1].diverged else states[-2]
        return last.mean_filt.copy(), V0
    raise ValueError(f"unknown init strategy {strategy!r}")


def initial_parameters(panel: NetworkPanel, config: ModelConfig, x0) -> Parameters:
    """Intercept-only fit with the latent configuration frozen at ``x0``."""
    d = config.d
    p = panel.p
    moments = np.tile(np.asarray(x0, float), (panel.n, 1))
    zero = np.zeros((panel.n, p * d, p * d))
    offsets = offset_moments(moments, zero, panel.dyads, d, "gaussian")
    spec = EffectSpec(intercept=config.effects.intercept)
    reg = mstep_regression(panel, offsets, spec, fix_re_variances=True)
    return Parameters(
        intercept=reg.intercept,
        fixed_coeffs=np.zeros(panel.n_covariates),
        sender_effects=np.zeros(p),
        receiver_effects=np.zeros(p),
        sigma=(0.0 if config.static else config.sigma_init_scale) * np.eye(p * d),
        re_variances=config.re_variances,
        family_dispersion=getattr(config.family, "dispersion", None),
    )


# ----------------------------------------------------------------------------
# EM driver
# ----------------------------------------------------------------------------


@dataclass
class TraceRecord:
    iteration: int
    q_poisson: float
    q_gaussian: Optional[float]
    sigma_summary: float
    intercept: float
    re_variances: tuple
    mstep_iterations: int
    x0_shift: float
    q_before: Optional[float] = None
    elbo: Optional[float] = None
    diverged: bool = False

    @property
    def q_total(self) -> float:
        return self.q_poisson + (self.q_gaussian or 0.0)


@dataclass
class SurrogateTrace:
    records: list = field(default_factory=list)

    def append(self, rec: TraceRecord):
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("trace iterations must increase")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def q_total(self) -> np.ndarray:
        return np.array([r.q_total for r in self.records])


@dataclass
class FitResult:
    config: ModelConfig
    params: Parameters
    smoothed: LatentTrajectory
    filtered: LatentTrajectory
    trace: SurrogateTrace
    iterations: int
    converged: bool
    diverged: bool = False
    divergence_reason: Optional[str] = None
    divergence_iteration: Optional[int] = None
    regression_df: float = 0.0
    latent_df: Optional[float] = None
    n_fixed: int = 0
    flags: dict = field(default_factory=dict)
    seed: Optional[int] = None

    @property
    def sigma(self):
        return self.params.sigma

    def sigma_summary(self) -> float:
        return sigma_summary(self.params.sigma)


def sigma_summary(sigma) -> float:
    """Spherical summary: mean of the diagonal."""
    return float(np.mean(np.diag(np.asarray(sigma)))) if sigma is not None else float("nan")


def latent_effective_df(states: list[FilterState], smoothed: LatentTrajectory) -> float:
    """``sum_k trace(V_{k|n} I_k)`` with ``I_k`` the information added by ``y_k``.

    For a linear-Gaussian model this is the trace of the smoother hat matrix
    ``d yhat / d y``.
    """
    total = 0.0
    for k in range(1, len(states)):
        info = states[k].info
        if info is not None:
            total += float(np.sum(smoothed.covariances[k] * info.T))
    return total


def posterior_entropy(states: list[FilterState], smoothed: LatentTrajectory) -> Optional[float]:
    """Entropy of the Gaussian smoothing distribution of ``x_{0:n}``.

    Factorises as ``H(x_n) + sum_k H(x_{k-1} | x_k)`` with conditional
    covariance ``V_{k-1|k-1} - B_k V_{k|k-1} B_k'``.  ``None`` if any factor is
    degenerate (e.g. a static fit).
    """
    def h(C):
        sign, logdet = np.linalg.slogdet(2 * np.pi * np.e * C)
        return 0.5 * logdet if sign > 0 else None

    total = h(smoothed.covariances[-1])
    for k in range(1, len(states)):
        if total is None:
            return None
        B = smoothed.backward_gains[k - 1]
        cond = symmetrize(states[k - 1].cov_filt - B @ states[k].cov_pred @ B.T)
        hk = h(cond)
        total = None if hk is None else total + hk
    return total


def initial_state_term(smoothed: LatentTrajectory, mean0, cov0) -> float:
    """``E[log N(x_0; mean0, cov0) | y]``."""
    L = jittered_cholesky(np.asarray(cov0, dtype=float))
    dev = smoothed.means[0] - mean0
    a = linalg.solve_triangular(L, dev, lower=True)
    Li = linalg.solve_triangular(L, np.eye(len(dev)), lower=True)
    quad = a @ a + np.sum(Li * (Li @ smoothed.covariances[0]))
    logdet = 2 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * (quad + logdet + len(dev) * np.log(2 * np.pi)))


def _trajectory(states, d, kind):
    means = np.stack([s.mean_filt for s in states])
    covs = np.stack([s.cov_filt for s in states])
    return LatentTrajectory(d, means, covs, kind)


def em_fit(panel: NetworkPanel, config: ModelConfig, init=None, params: Parameters | None = None,
           mstep: bool = True) -> FitResult:
    """Fit by EM from ``init = (x00, V00)`` (computed from ``config.init`` if omitted).

    On a filter divergence after the first iteration the last valid iterate
    is returned with ``diverged=True``.
    """
    config.check_panel(panel)
    d, p = config.d, panel.p
    px = p * d
    if init is None:
        init = init_locations(panel, config.init, config)
    x0, V0 = (np.asarray(a, dtype=float).copy() for a in init)
    if x0.shape != (px,) or V0.shape != (px, px):
        raise LatentREMError(f"initial state must have dimension p*d = {px}")
    if params is None:
        params = initial_parameters(panel, config, x0)
    sigma = np.zeros((px, px)) if config.static else np.asarray(params.sigma, dtype=float)
    params = params.replace(sigma=sigma)
    method = config.resolved_offset_method()
    effects = config.effects
    n_fixed = int(effects.intercept) + (panel.n_covariates if effects.covariates else 0)

    trace = SurrogateTrace()
    result: FitResult | None = None
    q_prev = None
    converged = False
    for it in range(1, config.max_iter + 1):
        states = filter_pass(panel, params, config, (x0, V0))
        if states[-1].diverged:
            bad = states[-1]
            if result is None:
                raise DivergenceError(
                    f"filter diverged at interval {bad.k} in the first EM iteration ({bad.reason}); "
                    "try a smaller sigma_init_scale or v0_scale, init='backward-filter', or update_steps > 1",
                    reason=bad.reason,
                    k=bad.k,
                )
            result.diverged = True
            result.divergence_reason = bad.reason
            result.divergence_iteration = it
            log.info("EM stopped at iteration %d: filter diverged (%s)", it, bad.reason)
            return result
        smoothed = smooth_pass(states, d=d)
        filtered = _trajectory(states, d, "filtered")
        if not mstep:
            result = FitResult(config, params, smoothed, filtered, trace, it, False, n_fixed=n_fixed,
                               seed=config.seed)
            result.latent_df = latent_effective_df(states, smoothed)
            return result

        moments = smoothed if config.offset_moments == "smoothed" else filtered
        offsets = offset_moments(moments.means[1:], moments.covariances[1:], panel.dyads, d, method)
        reg = mstep_regression(panel, offsets, effects, params.re_variances, config.fix_re_variances, init=params)
        lags = lag_one_cov(smoothed)
        new_sigma = sigma if config.static else sigma_mle(smoothed, lags, config.sigma_structure)
        new_params = params.replace(
            intercept=reg.intercept,
            fixed_coeffs=reg.fixed_coeffs,
            sender_effects=reg.sender_effects,
            receiver_effects=reg.receiver_effects,
            re_variances=reg.re_variances,
            sigma=new_sigma,
        )
        q_p = expected_poisson_loglik(panel, new_params, moments, offsets)
        q_g = None if config.static else gaussian_component(new_sigma, smoothed, lags)
        # surrogate at the previous parameters under the same E-step
        q_old_g = None if config.static else gaussian_component(sigma, smoothed, lags)
        q_before = expected_poisson_loglik(panel, params, moments, offsets) + (q_old_g or 0.0)
        elbo = None
        entropy = None if config.static else posterior_entropy(states, smoothed)
        if entropy is not None and q_old_g is not None:
            elbo = q_before + entropy + initial_state_term(smoothed, x0, V0)
        shift = float(np.linalg.norm(smoothed.means[0] - x0))
        trace.append(TraceRecord(it, q_p, q_g, sigma_summary(new_sigma), reg.intercept, reg.re_variances,
                                 reg.iterations, shift, q_before, elbo))
        flags = {}
        if reg.inactive_senders:
            flags["inactive_senders"] = reg.inactive_senders
        if reg.inactive_receivers:
            flags["inactive_receivers"] = reg.inactive_receivers
        result = FitResult(config, new_params, smoothed, filtered, trace, it, False,
                           regression_df=reg.edf, n_fixed=n_fixed, flags=flags, seed=config.seed)
        result.latent_df = latent_effective_df(states, smoothed)

        params = new_params
        sigma = new_sigma
        x0 = smoothed.means[0].copy()
        if not config.static:
            # with Sigma = 0 the reset would re-count the data each sweep and stall the fit
            V0 = smoothed.covariances[0].copy()
        q = trace.records[-1].q_total
        if q_prev is not None and abs(q - q_prev) <= config.tol * abs(q):
            converged = True
            break
        q_prev = q

    result.converged = converged
    _attach_reference_df(result, panel, (x0, V0))
    return result


def _attach_reference_df(result: FitResult, panel: NetworkPanel, init):
    """Latent degrees of freedom from one more E-step at the fitted parameters.

    The initial covariance is reset to the configured prior scale so the
    count does not shrink with the number of EM iterations.
    """
    config = result.config
    px = panel.p * config.d
    x0 = np.asarray(init[0])
    states = filter_pass(panel, result.params, config, (x0, config.v0_scale * np.eye(px)))
    if states[-1].diverged:
        return
    try:
        smoothed = smooth_pass(states, d=config.d)
    except LatentREMError:
        return
    result.latent_df = latent_effective_df(states, smoothed)


def static_fit(panel: NetworkPanel, config: ModelConfig, init=None) -> FitResult:
    """Static baseline: one latent configuration shared by every interval."""
    return em_fit(panel, config.replace(static=True), init=init)
