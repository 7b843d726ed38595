"""Rauch-Tung-Striebel backward pass."""

from __future__ import annotations

import numpy as np
from scipy import linalg

from .errors import LatentREMError, SingularMatrixError
from .filter import FilterState, jittered_cholesky, symmetrize
from .model import LatentTrajectory


def backward_gain(V_filt_prev, V_pred, k: int | None = None) -> np.ndarray:
    """``B_k = V_{k-1|k-1} V_{k|k-1}^{-1}`` via a Cholesky solve."""
    V_filt_prev = np.asarray(V_filt_prev, dtype=float)
    V_pred = np.asarray(V_pred, dtype=float)
    try:
        L = jittered_cholesky(V_pred, k)
    except SingularMatrixError:
        raise SingularMatrixError(f"predicted covariance at interval k={k} is singular", k=k) from None
    # B' = V_pred^{-1} V_filt_prev' since V_pred is symmetric
    return linalg.cho_solve((L, True), V_filt_prev.T).T


def smooth_pass(states: list[FilterState], sigma=None, d: int = 1) -> LatentTrajectory:
    """Smoothed moments for ``k = 0..n`` plus the backward gains ``B_1..B_n``.

    ``states`` is the output of a complete forward pass (``states[0]`` the
    initial condition).  ``sigma`` is accepted for symmetry with the filter;
    the predicted covariances already carry it.  ``d`` is the latent
    dimension recorded on the returned trajectory.
    """
    if any(s.diverged for s in states):
        raise LatentREMError("cannot smooth a diverged filter pass")
    n = len(states) - 1
    px = states[0].mean_filt.shape[0]
    means = np.empty((n + 1, px))
    covs = np.empty((n + 1, px, px))
    gains = np.empty((n, px, px))
    means[n] = states[n].mean_filt
    covs[n] = states[n].cov_filt
    for k in range(n, 0, -1):
        cur, prev = states[k], states[k - 1]
        B = backward_gain(prev.cov_filt, cur.cov_pred, k)
        gains[k - 1] = B
        means[k - 1] = prev.mean_filt + B @ (means[k] - cur.mean_pred)
        covs[k - 1] = symmetrize(prev.cov_filt + B @ (covs[k] - cur.cov_pred) @ B.T)
    return LatentTrajectory(d, means, covs, "smoothed", gains)


def lag_one_cov(smoothed: LatentTrajectory) -> np.ndarray:
    """``Cov(x_k, x_{k-1} | y_{1:n}) = V_{k|n} B_k'`` for ``k = 1..n``."""
    if smoothed.backward_gains is None:
        raise LatentREMError("smoothed trajectory carries no backward gains")
    return smoothed.covariances[1:] @ smoothed.backward_gains.swapaxes(-1, -2)
