"""Per-task OLS, pooled OLS and empirical-Bayes GLS shrinkage."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import DemandParams, TaskPanel
from .errors import InsufficientTasks, SingularDesign

RIDGE = 1e-8


@dataclass(frozen=True)
class OlsFit:
    params: DemandParams
    residual_ss: float
    design_rank: int


def _design(prices) -> np.ndarray:
    prices = np.asarray(prices, dtype=float)
    return np.column_stack([np.ones_like(prices), prices])


def _weights(panel: TaskPanel, use_exposures: bool) -> np.ndarray:
    if use_exposures and panel.exposures is not None:
        return panel.exposures.astype(float)
    return np.ones(panel.k)


def _wls(prices, demands, weights) -> tuple[np.ndarray, float]:
    if np.unique(prices).size < 2:
        raise SingularDesign("fewer than two distinct prices")
    X = _design(prices)
    sw = np.sqrt(weights)
    beta, *_ = np.linalg.lstsq(X * sw[:, None], demands * sw, rcond=None)
    resid = demands - X @ beta
    return beta, float(np.sum(weights * resid**2))


def task_ols(panel: TaskPanel, use_exposures: bool = False) -> OlsFit:
    """Least-squares line through one task's price/demand points."""
    beta, rss = _wls(panel.prices, panel.demands, _weights(panel, use_exposures))
    return OlsFit(DemandParams(float(beta[0]), float(beta[1])), rss, 2)


def shared_ols(panels: Sequence[TaskPanel]) -> DemandParams:
    """Single intercept/slope fitted to all observations of all tasks."""
    if not panels:
        raise SingularDesign("no observations")
    prices = np.concatenate([p.prices for p in panels])
    demands = np.concatenate([p.demands for p in panels])
    beta, _ = _wls(prices, demands, np.ones_like(prices))
    return DemandParams(float(beta[0]), float(beta[1]))


@dataclass(frozen=True)
class EbPrior:
    mean: DemandParams
    covariance: np.ndarray
    noise_variance: float

    def __post_init__(self):
        cov = np.array(self.covariance, dtype=float).reshape(2, 2)
        if not np.allclose(cov, cov.T, equal_nan=True):
            raise ValueError("prior covariance must be symmetric")
        if not np.isinf(cov).any() and np.linalg.eigvalsh(cov).min() < -1e-12:
            raise ValueError("prior covariance must be positive semidefinite")
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be > 0")
        object.__setattr__(self, "covariance", cov)

    def precision(self) -> np.ndarray:
        """Inverse covariance; zero for a flat prior, ridge-regularized if singular."""
        cov = self.covariance
        if np.isinf(cov).any():
            return np.zeros((2, 2))
        if np.linalg.eigvalsh(cov).min() <= RIDGE:
            return np.linalg.inv(cov + RIDGE * np.eye(2))
        return np.linalg.inv(cov)


def _psd_truncate(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh((S + S.T) / 2)
    return (V * np.maximum(w, 0.0)) @ V.T


def _moment_variance_components(panels, weights, mu, diagonal):
    """Method-of-moments fit of residual cross-products around ``mu``.

    For every task and pair ``k <= l``:
    ``r_k r_l = P_k' S P_l + sigma2 * [k == l] / w_k``.
    Solving this linear regression over all pairs gives the prior covariance
    ``S`` and the noise variance in one pass.
    """
    rows, ys = [], []
    for panel, w in zip(panels, weights):
        X = _design(panel.prices)
        r = panel.demands - X @ mu
        ku, lu = np.triu_indices(panel.k)
        pk, pl = X[ku], X[lu]
        rows.append(np.column_stack([
            pk[:, 0] * pl[:, 0],
            pk[:, 0] * pl[:, 1] + pk[:, 1] * pl[:, 0],
            pk[:, 1] * pl[:, 1],
            (ku == lu) / w[ku],
        ]))
        ys.append(r[ku] * r[lu])
    A = np.vstack(rows)
    y = np.concatenate(ys)
    if diagonal:
        A = A[:, [0, 2, 3]]
        c, *_ = np.linalg.lstsq(A, y, rcond=None)
        S = np.diag([c[0], c[1]])
        sigma2 = c[2]
    else:
        c, *_ = np.linalg.lstsq(A, y, rcond=None)
        S = np.array([[c[0], c[1]], [c[1], c[2]]])
        sigma2 = c[3]
    on_diag = A[:, -1] > 0
    scale = float(np.mean(y[on_diag])) if on_diag.any() else 0.0
    # noise variance must stay positive even on noiseless data
    return _psd_truncate(S), max(float(sigma2), 1e-12 * scale, 1e-300)


def eb_fit_prior(panels: Sequence[TaskPanel], mean_method: str = "gls",
                 diagonal: bool = False, use_exposures: bool = True) -> EbPrior:
    """Estimate the shared Gaussian prior of the task parameters.

    ``mean_method="gls"`` (default) is the random-effects GLS mean: the
    variance components come from a moment regression on pooled-OLS
    residuals, and the mean is the GLS estimate under
    ``Var(D_i) = X_i S X_i' + sigma2 W_i^-1``. ``"ols_average"`` uses the plain
    average of per-task OLS fits instead; it is unbiased but useless when
    per-task slopes are ratios of small noisy differences.
    """
    usable, weights, fits = [], [], []
    for p in panels:
        w = _weights(p, use_exposures)
        try:
            beta, _ = _wls(p.prices, p.demands, w)
        except SingularDesign:
            continue
        usable.append(p)
        weights.append(w)
        fits.append(beta)
    if len(usable) < 2:
        raise InsufficientTasks("need at least two tasks with rank-2 OLS fits")

    # pooled weighted fit as the centre for residual moments
    X_all = np.vstack([_design(p.prices) for p in usable])
    d_all = np.concatenate([p.demands for p in usable])
    sw = np.sqrt(np.concatenate(weights))
    mu0, *_ = np.linalg.lstsq(X_all * sw[:, None], d_all * sw, rcond=None)
    S, sigma2 = _moment_variance_components(usable, weights, mu0, diagonal)

    if mean_method == "ols_average":
        mean = np.mean(fits, axis=0)
    elif mean_method == "gls":
        lhs = np.zeros((2, 2))
        rhs = np.zeros(2)
        for p, w in zip(usable, weights):
            X = _design(p.prices)
            V = X @ S @ X.T + sigma2 * np.diag(1.0 / w)
            XtVi = np.linalg.solve(V, X).T
            lhs += XtVi @ X
            rhs += XtVi @ p.demands
        mean = np.linalg.solve(lhs, rhs)
    else:
        raise ValueError(f"unknown mean_method {mean_method!r}")
    return EbPrior(DemandParams(float(mean[0]), float(mean[1])), S, sigma2)


def eb_posterior(panel: TaskPanel, prior: EbPrior, use_exposures: bool = True) -> DemandParams:
    """Gaussian posterior mean of one task's parameters under ``prior``."""
    X = _design(panel.prices)
    w = _weights(panel, use_exposures)
    prec0 = prior.precision()
    mu0 = prior.mean.as_array()
    A = prec0 + (X.T * w) @ X / prior.noise_variance
    b = prec0 @ mu0 + (X.T * w) @ panel.demands / prior.noise_variance
    theta = np.linalg.solve(A, b)
    return DemandParams(float(theta[0]), float(theta[1]))


def eb_posterior_many(panels: Sequence[TaskPanel], prior: EbPrior,
                      use_exposures: bool = True) -> np.ndarray:
    return np.array([eb_posterior(p, prior, use_exposures).as_array() for p in panels])


def write_estimates_csv(rows, dest) -> None:
    """Write ``(task_id, method, theta0_hat, theta1_hat)`` rows."""
    own = isinstance(dest, (str, Path))
    fh = open(dest, "w", newline="") if own else dest
    try:
        w = csv.writer(fh)
        w.writerow(["task_id", "method", "theta0_hat", "theta1_hat"])
        for tid, method, t0, t1 in rows:
            w.writerow([tid, method, format(t0, ".17g"), format(t1, ".17g")])
    finally:
        if own:
            fh.close()
