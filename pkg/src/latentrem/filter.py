"""Forward pass: extended and unscented Kalman filters for the latent walk.

The observation side is abstracted behind a small protocol so the same
recursions run on the network model and on linear-Gaussian surrogates used
for verification.  Divergence is reported on the returned state, never
raised.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import SingularMatrixError
from .model import RATE_FLOOR, Family, ModelConfig, NetworkPanel, Parameters, Poisson, dense_jacobian, rate


# ----------------------------------------------------------------------------
# observation models
# ----------------------------------------------------------------------------


class NetworkObservation:
    """Counts of a panel seen through the latent-distance rate function.

    Rows whose sender has zero exposure are dropped from every update.
    """

    def __init__(self, panel: NetworkPanel, params: Parameters, family: Family | None = None):
        self.panel = panel
        self.params = params
        self.family = family or Poisson()
        self.n = panel.n
        self.p_y = panel.p_y
        self._eta = [params.fixed_predictor(panel, k) for k in range(1, panel.n + 1)]
        self._active = [panel.active_rows(k) for k in range(1, panel.n + 1)]

    def active(self, k: int) -> np.ndarray:
        return self._active[k - 1]

    def observed(self, k: int) -> np.ndarray:
        return self.panel.counts[k - 1, self._active[k - 1]].astype(float)

    def mean(self, k: int, x: np.ndarray) -> np.ndarray:
        return rate(x, self.params, self.panel, k)[..., self._active[k - 1]]

    def linearize(self, k: int, x: np.ndarray):
        panel = self.panel
        dy = panel.dyads
        d = x.shape[-1] // panel.p
        loc = x.reshape(panel.p, d)
        diff = loc[dy.receivers] - loc[dy.senders]
        eta = self._eta[k - 1] - np.einsum("rm,rm->r", diff, diff)
        expo = panel.dyad_exposure(k)
        with np.errstate(over="ignore", invalid="ignore"):
            mu = np.where(expo > 0, expo * np.exp(eta), 0.0)
            H = dense_jacobian(2.0 * diff * mu[:, None], dy, d)
        act = self._active[k - 1]
        return mu[act], H[act]

    def variance(self, k: int, mu: np.ndarray) -> np.ndarray:
        return self.family.variance(mu)


class LinearGaussianObservation:
    """``y_k = H_k x_k + c_k + e_k`` with ``e_k ~ N(0, diag(R_k))``."""

    def __init__(self, ys, H, R_diag, offset=None):
        self.ys = np.atleast_2d(np.asarray(ys, dtype=float))
        self.n, self.p_y = self.ys.shape
        H = np.asarray(H, dtype=float)
        self.H = np.broadcast_to(H, (self.n,) + H.shape[-2:]) if H.ndim == 2 else H
        R = np.asarray(R_diag, dtype=float)
        self.R = np.broadcast_to(R, (self.n, self.p_y))
        c = np.zeros(self.p_y) if offset is None else np.asarray(offset, dtype=float)
        self.c = np.broadcast_to(c, (self.n, self.p_y))

    def active(self, k):
        return np.ones(self.p_y, dtype=bool)

    def observed(self, k):
        return self.ys[k - 1]

    def mean(self, k, x):
        return x @ self.H[k - 1].T + self.c[k - 1]

    def linearize(self, k, x):
        return self.mean(k, x), self.H[k - 1]

    def variance(self, k, mu):
        return np.array(self.R[k - 1])


# ----------------------------------------------------------------------------
# state container and linear-algebra helpers
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FilterState:
    """Moments at interval ``k``; ``k = 0`` holds the initial condition.

    ``info`` is the information contributed by ``y_k``, i.e.
    ``V_{k|k}^{-1} - V_{k|k-1}^{-1}`` (``H' R^{-1} H`` for the EKF).
    """

    k: int
    mean_pred: np.ndarray
    cov_pred: np.ndarray
    mean_filt: np.ndarray
    cov_filt: np.ndarray
    innovation: Optional[np.ndarray] = None
    info: Optional[np.ndarray] = None
    r_diag: Optional[np.ndarray] = None
    diverged: bool = False
    reason: Optional[str] = None

    @classmethod
    def initial(cls, mean, cov) -> "FilterState":
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        return cls(0, mean, cov, mean, cov)


def symmetrize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.swapaxes(-1, -2))


def jittered_cholesky(A: np.ndarray, k: int | None = None) -> np.ndarray:
    """Lower Cholesky factor, retrying once with ``1e-10 * trace / dim`` on the diagonal."""
    try:
        return linalg.cholesky(A, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        pass
    dim = A.shape[0]
    jitter = 1e-10 * max(np.trace(A), 0.0) / dim
    if not np.isfinite(jitter) or jitter == 0.0:
        jitter = 1e-10
    try:
        return linalg.cholesky(A + jitter * np.eye(dim), lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        raise SingularMatrixError("Cholesky factorisation failed after jitter", k=k) from None


def predict(mean_prev, cov_prev, sigma):
    """Random-walk prediction: the mean is carried over and ``Sigma`` is added."""
    mean_prev = np.asarray(mean_prev, dtype=float)
    cov_prev = np.asarray(cov_prev, dtype=float)
    return mean_prev.copy(), cov_prev + np.asarray(sigma, dtype=float)


def gain_direct(V_pred, H, R_diag):
    """``K = V H' (R + H V H')^{-1}`` through the ``p_y x p_y`` innovation covariance."""
    S = H @ V_pred @ H.T + np.diag(R_diag)
    return linalg.solve(S, H @ V_pred, assume_a="sym").T


def _information_update(V_pred, H, R_diag, k=None):
    """Posterior covariance ``(V^{-1} + H' R^{-1} H)^{-1}`` and the gain.

    Evaluated as ``L (I + L' A L)^{-1} L'`` with ``V = L L'`` and
    ``A = H' R^{-1} H``, which only touches ``p*d x p*d`` systems.
    """
    px = V_pred.shape[0]
    HtRinv = H.T / R_diag
    A = HtRinv @ H
    L = jittered_cholesky(V_pred, k)
    M = np.eye(px) + L.T @ A @ L
    Mc = linalg.cho_factor(symmetrize(M), lower=True)
    V_filt = L @ linalg.cho_solve(Mc, L.T)
    V_filt = symmetrize(V_filt)
    return V_filt @ HtRinv, V_filt, A


def gain_woodbury(V_pred, H, R_diag):
    """Kalman gain via the information-filter form, never forming a ``p_y x p_y`` inverse."""
    K, _, _ = _information_update(np.asarray(V_pred, float), np.asarray(H, float), np.asarray(R_diag, float))
    return K


def _diverged(k, pred_mean, pred_cov, reason) -> FilterState:
    return FilterState(k, pred_mean, pred_cov, pred_mean, pred_cov, diverged=True, reason=reason)


def _all_finite(*arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


def ekf_update(pred, y, mu, H, R_diag, k: int = 0, method: str = "woodbury") -> FilterState:
    """One EKF correction given the linearisation ``(mu, H)`` at the predicted mean."""
    mean_pred, cov_pred = pred
    y, mu, H, R_diag = (np.asarray(a, dtype=float) for a in (y, mu, H, R_diag))
    if not _all_finite(mean_pred, cov_pred, y, mu, H, R_diag):
        return _diverged(k, mean_pred, cov_pred, "non-finite")
    innovation = y - mu
    try:
        if method == "direct":
            K = gain_direct(cov_pred, H, R_diag)
            V_filt = symmetrize((np.eye(len(mean_pred)) - K @ H) @ cov_pred)
            info = (H.T / R_diag) @ H
        else:
            K, V_filt, info = _information_update(cov_pred, H, R_diag, k)
    except (SingularMatrixError, linalg.LinAlgError, ValueError):
        return _diverged(k, mean_pred, cov_pred, "singular")
    mean_filt = mean_pred + K @ innovation
    if not _all_finite(mean_filt, V_filt):
        return _diverged(k, mean_pred, cov_pred, "non-finite")
    return FilterState(k, mean_pred, cov_pred, mean_filt, V_filt, innovation, info, R_diag)


# ----------------------------------------------------------------------------
# unscented transform
# ----------------------------------------------------------------------------


def ukf_sigma_points(mean, cov, kappa: float):
    """Symmetric set of ``2n+1`` sigma points and their weights.

    Returns ``points`` with shape ``(2n+1, n)`` and ``weights`` of length
    ``2n+1``; the first point is the mean.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    n = mean.shape[0]
    if n + kappa <= 0:
        raise ValueError(f"n + kappa must be positive (n={n}, kappa={kappa})")
    A = jittered_cholesky(cov)
    scaled = np.sqrt(n + kappa) * A.T  # row j is sqrt(n+kappa) * column j of A
    points = np.vstack([mean[None, :], mean + scaled, mean - scaled])
    weights = np.full(2 * n + 1, 1.0 / (2.0 * (n + kappa)))
    weights[0] = kappa / (n + kappa)
    return points, weights


def ukf_update(pred, y, mean_fn, variance_fn, kappa: float, k: int = 0, method: str = "woodbury") -> FilterState:
    """One UKF correction.

    ``mean_fn(points)`` maps an ``(m, n)`` stack of states to ``(m, p_y)``
    expected counts and ``variance_fn(mu)`` gives the diagonal of ``R``.
    """
    mean_pred, cov_pred = pred
    y = np.asarray(y, dtype=float)
    try:
        points, w = ukf_sigma_points(mean_pred, cov_pred, kappa)
    except (SingularMatrixError, ValueError):
        return _diverged(k, mean_pred, cov_pred, "cholesky")
    with np.errstate(over="ignore", invalid="ignore"):
        M = np.asarray(mean_fn(points), dtype=float)
    if not _all_finite(M):
        return _diverged(k, mean_pred, cov_pred, "non-finite")
    mu_hat = w @ M
    R = np.maximum(np.asarray(variance_fn(mu_hat), dtype=float), RATE_FLOOR)
    D = (M - mu_hat).T
    E = (points - mean_pred).T
    innovation = y - mu_hat
    try:
        if method == "direct":
            S = (D * w) @ D.T + np.diag(R)
            C = (E * w) @ D.T
            K = linalg.solve(S, C.T, assume_a="sym").T
            KSK = K @ S @ K.T
        else:
            # push-through form of (R + D W D')^{-1}; only (2n+1)-square systems
            G = (D.T / R) @ D
            Mm = np.eye(len(w)) + w[:, None] * G
            K = (E * w) @ linalg.solve(Mm.T, D.T / R)
            KSK = (E * w) @ G @ linalg.solve(Mm, (E * w).T)
    except (linalg.LinAlgError, ValueError):
        return _diverged(k, mean_pred, cov_pred, "singular")
    mean_filt = mean_pred + K @ innovation
    V_filt = symmetrize(cov_pred - KSK)
    if not _all_finite(mean_filt, V_filt):
        return _diverged(k, mean_pred, cov_pred, "non-finite")
    try:
        info = symmetrize(_spd_inverse(V_filt) - _spd_inverse(cov_pred))
    except SingularMatrixError:
        return _diverged(k, mean_pred, cov_pred, "singular")
    return FilterState(k, mean_pred, cov_pred, mean_filt, V_filt, innovation, info, R)


def _spd_inverse(A):
    L = jittered_cholesky(A)
    Linv = linalg.solve_triangular(L, np.eye(A.shape[0]), lower=True)
    return Linv.T @ Linv


# ----------------------------------------------------------------------------
# forward pass
# ----------------------------------------------------------------------------


def run_filter(
    obs,
    sigma,
    init,
    filter: str = "ekf",
    kappa: float | None = None,
    update_steps: int = 1,
    reuse_previous_r: bool = False,
    gain: str = "woodbury",
    intervals=None,
    linearize_at=None,
) -> list[FilterState]:
    """Predict/update over ``k = 1..n`` for an arbitrary observation model.

    ``linearize_at`` fixes the EKF linearisation point for every interval
    instead of using the running prediction. Stops at the first diverged
    step; the returned list then ends with the diverged state.
    """
    mean0, cov0 = (np.asarray(a, dtype=float) for a in init)
    sigma = np.asarray(sigma, dtype=float)
    px = mean0.shape[0]
    if kappa is None:
        kappa = 3.0 - px
    states = [FilterState.initial(mean0, cov0)]
    prev_r = None
    ks = range(1, obs.n + 1) if intervals is None else intervals
    for k in ks:
        prev = states[-1]
        pred = predict(prev.mean_filt, prev.cov_filt, sigma)
        y = obs.observed(k)
        act = obs.active(k)
        if filter == "ukf" and linearize_at is None:
            state = ukf_update(
                pred, y, lambda pts, k=k: obs.mean(k, pts), lambda mu, k=k: obs.variance(k, mu), kappa, k, gain
            )
        else:
            state = _ekf_iterated(obs, k, pred, y, act, update_steps, reuse_previous_r, prev_r, gain, linearize_at)
        states.append(state)
        if state.diverged:
            break
        if state.r_diag is not None:
            prev_r = np.full(len(act), np.nan)
            prev_r[act] = state.r_diag
    return states


def _ekf_iterated(obs, k, pred, y, act, steps, reuse_previous_r, prev_r, gain, x_start=None) -> FilterState:
    mean_pred, cov_pred = pred
    x = mean_pred if x_start is None else np.asarray(x_start, dtype=float)
    state = None
    for _ in range(steps):
        mu, H = obs.linearize(k, x)
        R = np.asarray(obs.variance(k, mu), dtype=float)
        if reuse_previous_r and prev_r is not None:
            bad = ~np.isfinite(R)
            if np.any(bad):
                R = np.where(bad, prev_r[act], R)
        R = np.maximum(R, RATE_FLOOR)
        # re-linearised residual; reduces to y - mu on the first sweep
        mu_lin = mu + H @ (mean_pred - x)
        state = ekf_update(pred, y, mu_lin, H, R, k, gain)
        if state.diverged:
            return state
        x = state.mean_filt
    innovation = y - obs.mean(k, mean_pred) if steps > 1 else state.innovation
    if steps > 1:
        state = FilterState(k, mean_pred, cov_pred, state.mean_filt, state.cov_filt, innovation, state.info, state.r_diag)
    return state


def filter_pass(panel: NetworkPanel, params: Parameters, config: ModelConfig, init, sigma=None) -> list[FilterState]:
    """Run the configured filter over a panel from ``init = (x00, V00)``.

    Static fits sweep with ``Sigma = 0`` and linearise every interval at
    ``x00``, so the sweep equals one batch information update whose fixed
    point solves the static score equations.
    """
    obs = NetworkObservation(panel, params, config.family)
    sigma = params.sigma if sigma is None else sigma
    linearize_at = None
    if config.static:
        sigma = np.zeros_like(np.asarray(sigma, dtype=float))
        linearize_at = np.asarray(init[0], dtype=float)
    return run_filter(
        obs,
        sigma,
        init,
        filter=config.filter,
        kappa=config.resolved_kappa(panel.p),
        update_steps=config.update_steps,
        reuse_previous_r=config.reuse_previous_r,
        gain=config.gain,
        linearize_at=linearize_at,
    )


def filtered_moments(states: list[FilterState]):
    means = np.stack([s.mean_filt for s in states])
    covs = np.stack([s.cov_filt for s in states])
    return means, covs
