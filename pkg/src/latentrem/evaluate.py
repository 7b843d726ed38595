"""Out-of-fold KL, conditional AIC and studentized residuals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LatentREMError
from .model import Family, LatentTrajectory, NetworkPanel, Parameters, make_family, rate


def panel_rates(traj: LatentTrajectory, params: Parameters, panel: NetworkPanel) -> np.ndarray:
    """Rates at the trajectory means for ``k = 1..n``, shape ``(n, p_y)``."""
    if traj.n != panel.n or traj.p != panel.p:
        raise LatentREMError(f"trajectory (n={traj.n}, p={traj.p}) does not match panel (n={panel.n}, p={panel.p})")
    return np.stack([rate(traj.means[k], params, panel, k) for k in range(1, panel.n + 1)])


@dataclass(frozen=True)
class KLEstimate:
    value: float
    se: float

    def __float__(self):
        return self.value


def kl_out_of_fold(fit_traj: LatentTrajectory, fit_params: Parameters, truth_traj: LatentTrajectory,
                   truth_params: Parameters, family: Family = "poisson", seed=None, directed: bool = False,
                   exposure=None) -> KLEstimate:
    """Normalised log-likelihood gap between truth and fit on one fresh panel.

    A panel is drawn from the truth and both parameter sets are scored on it
    under ``family``.  The sum of the differences is divided by
    ``n p (p - 1) / 2``.  ``se`` is the Monte-Carlo standard error of that
    ratio.
    """
    if fit_traj.n != truth_traj.n or fit_traj.p != truth_traj.p:
        raise LatentREMError("fit and truth trajectories have different shapes")
    family = make_family(family)
    rng = np.random.default_rng(seed)
    n, p = truth_traj.n, truth_traj.p
    if exposure is None:
        exposure = np.ones((n, p))
    skeleton = NetworkPanel.from_counts(np.zeros((n, p * (p - 1) // (1 if directed else 2)), dtype=int),
                                        exposure, directed)
    mu_true = panel_rates(truth_traj, truth_params, skeleton)
    mu_fit = panel_rates(fit_traj, fit_params, skeleton)
    y = family.sample(rng, mu_true)
    diff = family.logpmf(y, mu_true) - family.logpmf(y, mu_fit)
    norm = n * p * (p - 1) / 2.0
    value = float(diff.sum() / norm)
    se = float(diff.std(ddof=1) * np.sqrt(diff.size) / norm) if diff.size > 1 else float("nan")
    return KLEstimate(value, se)


@dataclass(frozen=True)
class CAIC:
    value: float
    loglik: float
    df_fixed: float
    df_random: float
    df_latent: float

    @property
    def df(self) -> float:
        return self.df_fixed + self.df_random + self.df_latent


def conditional_loglik(fit, panel: NetworkPanel) -> float:
    mu = panel_rates(fit.smoothed, fit.params, panel)
    act = panel.exposure[:, panel.dyads.senders] > 0
    return float(np.sum(fit.config.family.logpmf(panel.counts, mu)[act]))


def caic(fit, panel: NetworkPanel) -> CAIC:
    """``-2 log f(y | beta, x) + 2 df`` at the smoothed means.

    The degrees of freedom add the fixed-effect count, the random-effect
    part of the regression influence trace and the latent smoother trace.
    """
    if fit.latent_df is None or fit.regression_df is None:
        raise LatentREMError("fit lacks the degrees-of-freedom components needed for cAIC")
    ll = conditional_loglik(fit, panel)
    fixed = float(fit.n_fixed)
    random = max(float(fit.regression_df) - fixed, 0.0)
    latent = float(fit.latent_df)
    return CAIC(-2.0 * ll + 2.0 * (fixed + random + latent), ll, fixed, random, latent)


@dataclass(frozen=True)
class Residuals:
    k: np.ndarray
    sender: np.ndarray
    receiver: np.ndarray
    y: np.ndarray
    mu: np.ndarray
    residual: np.ndarray
    distance: np.ndarray
    flagged: np.ndarray

    def __len__(self):
        return len(self.k)


def studentized(y, mu, variance):
    """``(y - mu) / sqrt(v)``; ``+inf`` where ``v = 0`` but ``y > 0``."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    v = np.asarray(variance, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (y - mu) / np.sqrt(v)
    zero = v <= 0
    r = np.where(zero & (y > mu), np.inf, np.where(zero, 0.0, r))
    return r, zero & (y > mu)


def residuals(fit, panel: NetworkPanel) -> Residuals:
    """Studentized residuals for every ``(k, i, j)`` with the fitted distance."""
    mu = panel_rates(fit.smoothed, fit.params, panel)
    r, flag = studentized(panel.counts, mu, fit.config.family.variance(mu))
    dy = panel.dyads
    n, py = panel.counts.shape
    loc = fit.smoothed.locations()[1:]
    dist = np.sqrt(np.sum((loc[:, dy.senders] - loc[:, dy.receivers]) ** 2, axis=-1))
    ks = np.repeat(np.arange(1, n + 1), py)
    return Residuals(
        k=ks,
        sender=np.tile(dy.senders, n),
        receiver=np.tile(dy.receivers, n),
        y=panel.counts.ravel().astype(float),
        mu=mu.ravel(),
        residual=r.ravel(),
        distance=dist.ravel(),
        flagged=flag.ravel(),
    )
