"""Numerical checks of the identification results behind masked-outcome learning."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import GenConfig, TaskPanel, World
from .errors import OracleUnavailable
from .infoset import Design, MaskedInfoSet, build_info_set, find_penultimate_index, query_rng


@dataclass(frozen=True)
class QMatrix:
    """Conditional second moment ``1/2 P_a P_a' + 1/2 P_b P_b'`` of the query regressor."""

    matrix: np.ndarray
    p_bar: float
    delta: float

    @property
    def det(self) -> float:
        # Cauchy-Binet: det(1/2 A A') = det(A)^2 / 4 with A = [P_a P_b]; avoids
        # the cancellation in m00 * m11 - m01^2 when the gap is small.
        return 0.25 * self.delta**2

    @property
    def trace(self) -> float:
        return float(self.matrix[0, 0] + self.matrix[1, 1])


def q_matrix(p_a: float, p_b: float) -> QMatrix:
    p_bar = 0.5 * (p_a + p_b)
    delta = abs(p_a - p_b)
    m = np.array([[1.0, p_bar], [p_bar, p_bar**2 + 0.25 * delta**2]])
    return QMatrix(m, p_bar, delta)


def query_price_variance(p_a: float, p_b: float) -> float:
    """Variance of a fair two-point draw from ``{p_a, p_b}``."""
    return 0.25 * (p_a - p_b) ** 2


def lambda_min_and_bound(q: QMatrix) -> tuple[float, float]:
    """Smallest eigenvalue of ``q`` and the lower bound ``D^2 / (4 (1 + p_bar^2) + D^2)``."""
    m = q.matrix
    trace = m[0, 0] + m[1, 1]
    # lam_max <= trace for a PSD matrix; the clamp removes rounding overshoot
    # when lam_min is below the resolution of the trace
    lam_max = min(0.5 * trace + np.hypot(0.5 * (m[0, 0] - m[1, 1]), m[0, 1]), trace)
    lam_min = q.det / lam_max if lam_max > 0 else 0.0
    # D^2 / (4 (1 + p_bar^2) + D^2), written as det / trace of the
    # element formulas so that both sides round identically
    quarter = 0.25 * q.delta**2
    bound = quarter / (1.0 + (q.p_bar**2 + quarter))
    return float(lam_min), float(bound)


# --------------------------------------------------------------------------
# Bayes oracles

class GaussianOracle:
    """Exact conditional means in the near-optimal pricing world.

    The latent vector ``(theta0, u_1..u_K, e_1..e_K)`` is independent Gaussian;
    ``p_k = theta0 / (-2 theta1) + u_k`` and ``D_k = theta0 + theta1 p_k + e_k``
    with a common slope, so every observable is an affine map of the latents.
    """

    def __init__(self, config: GenConfig):
        if config.world is not World.EXAMPLE1:
            raise OracleUnavailable("closed-form oracle needs the Example1 world")
        K = config.k_obs
        c = config.theta1_mean
        self.k_obs = K
        self.theta1 = float(c)
        sd = np.concatenate([
            [config.param_cv * abs(config.theta0_mean)],
            np.full(K, config.pricing_noise_sd),
            np.full(K, config.demand_noise_sd),
        ])
        mu_z = np.zeros(1 + 2 * K)
        mu_z[0] = config.theta0_mean
        # rows: theta0, p_1..p_K, D_1..D_K
        M = np.zeros((1 + 2 * K, 1 + 2 * K))
        M[0, 0] = 1.0
        for k in range(K):
            M[1 + k, 0] = 1.0 / (-2.0 * c)
            M[1 + k, 1 + k] = 1.0
            # D = theta0 + c (theta0 / (-2c) + u) + e = theta0 / 2 + c u + e
            M[1 + K + k, 0] = 0.5
            M[1 + K + k, 1 + k] = c
            M[1 + K + k, 1 + K + k] = 1.0
        self.mean = M @ mu_z
        self.cov = (M * sd**2) @ M.T

    def _index(self, name: str, k: int) -> int:
        return {"p": 1, "D": 1 + self.k_obs}[name] + k

    def conditional_theta0(self, observed: dict) -> np.ndarray:
        """``E[theta0 | observed]``; keys are ``("p", k)`` or ``("D", k)``, 0-based."""
        idx = [self._index(n, k) for n, k in observed]
        vals = np.column_stack([np.asarray(observed[key], float) for key in observed])
        S_oo = self.cov[np.ix_(idx, idx)]
        S_to = self.cov[0, idx]
        gain = S_to @ np.linalg.pinv(S_oo, rcond=1e-12, hermitian=True)
        return self.mean[0] + (vals - self.mean[idx]) @ gain

    def theta_given_prices(self, prices) -> np.ndarray:
        prices = np.atleast_2d(np.asarray(prices, float))
        t0 = self.conditional_theta0({("p", k): prices[:, k] for k in range(self.k_obs)})
        return np.column_stack([t0, np.full_like(t0, self.theta1)])

    def theta_given_support(self, p1, d1) -> np.ndarray:
        t0 = self.conditional_theta0({("p", 0): np.atleast_1d(p1), ("D", 0): np.atleast_1d(d1)})
        return np.column_stack([t0, np.full_like(t0, self.theta1)])

    def predict_many(self, infos: Sequence[MaskedInfoSet]) -> np.ndarray:
        if any(i.design is not Design.DCMOML for i in infos):
            raise OracleUnavailable("oracle conditions on the DCMOML information set")
        return self.theta_given_prices(np.stack([i.prices for i in infos]))


def gaussian_bayes_oracle(config: GenConfig) -> GaussianOracle:
    return GaussianOracle(config)


class ConstantOracle:
    """Oracle for worlds where every task shares the same parameters."""

    def __init__(self, theta):
        self.theta = np.asarray(theta, float)

    def predict_many(self, infos) -> np.ndarray:
        return np.tile(self.theta, (len(infos), 1))


# --------------------------------------------------------------------------
# excess-risk identity

@dataclass(frozen=True)
class ExcessRiskResult:
    lhs: float
    rhs: float
    lhs_se: float
    rhs_se: float
    n: int

    @property
    def combined_se(self) -> float:
        return float(np.hypot(self.lhs_se, self.rhs_se))


def _se(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0


def excess_risk_check(predictor, oracle, panels: Sequence[TaskPanel],
                      design: Design = Design.DCMOML, loss_mode: str = "sampled",
                      seed: int = 0) -> ExcessRiskResult:
    """Compare ``L(g) - L(g*)`` with ``E[(g - g*)' Q (g - g*)]`` on ``panels``.

    ``loss_mode="sampled"`` draws a fresh query index per task (population
    identity, holds up to Monte Carlo error); ``"averaged"`` averages the two
    candidate indices, which makes the identity exact on noiseless data.
    """
    if oracle is None:
        raise OracleUnavailable("no computable conditional-mean oracle for this world")
    if Design(design) is not Design.DCMOML:
        raise ValueError("the identity is stated for the DCMOML information set")
    infos = [build_info_set(p, Design.DCMOML) for p in panels]
    g = np.asarray(predictor.predict_many(infos), float)
    gs = np.asarray(oracle.predict_many(infos), float)
    delta = g - gs
    lhs = np.empty(len(panels))
    rhs = np.empty(len(panels))
    for i, p in enumerate(panels):
        ks = find_penultimate_index(p.prices)
        kl = p.k - 1
        q = q_matrix(p.prices[ks], p.prices[kl]).matrix
        rhs[i] = delta[i] @ q @ delta[i]
        if loss_mode == "sampled":
            idx = [ks if query_rng(seed, p.task_id).random() < 0.5 else kl]
        else:
            idx = [ks, kl]
        P = np.column_stack([np.ones(len(idx)), p.prices[idx]])
        d = p.demands[idx]
        lhs[i] = np.mean((d - P @ g[i]) ** 2 - (d - P @ gs[i]) ** 2)
    return ExcessRiskResult(float(lhs.mean()), float(rhs.mean()), _se(lhs), _se(rhs), len(panels))


# --------------------------------------------------------------------------
# orthogonal-shift degeneracy

def _shift_dirs(panels, infos, phi):
    last = np.array([p.prices[-1] for p in panels])
    f = np.array([phi(i) for i in infos], float)
    return f[:, None] * np.column_stack([last, -np.ones_like(last)])


def dcml_shift_demo(model, panels: Sequence[TaskPanel],
                    phi: Callable[[MaskedInfoSet], float]) -> tuple[float, float]:
    """Query-point loss of ``model`` and of ``model + phi * (p_K, -1)`` under DCML."""
    infos = [build_info_set(p, Design.DCML) for p in panels]
    theta = np.asarray(model.predict_many(infos), float)
    shifted = theta + _shift_dirs(panels, infos, phi)
    pK = np.array([p.prices[-1] for p in panels])
    dK = np.array([p.demands[-1] for p in panels])

    def loss(th):
        return float(np.mean((dK - th[:, 0] - th[:, 1] * pK) ** 2))

    return loss(theta), loss(shifted)


def dcmoml_shift_demo(model, panels: Sequence[TaskPanel],
                      phi: Callable[[MaskedInfoSet], float]) -> tuple[float, float]:
    """Averaged two-point loss before and after the same ``(p_K, -1)`` shift."""
    infos = [build_info_set(p, Design.DCMOML) for p in panels]
    theta = np.asarray(model.predict_many(infos), float)
    shifted = theta + _shift_dirs(panels, infos, phi)
    ks = np.array([find_penultimate_index(p.prices) for p in panels])
    rows = np.arange(len(panels))
    prices, demands = [], []
    for p, k in zip(panels, ks):
        prices.append([p.prices[k], p.prices[-1]])
        demands.append([p.demands[k], p.demands[-1]])
    prices = np.array(prices)
    demands = np.array(demands)

    def loss(th):
        pred = th[rows, 0][:, None] + th[rows, 1][:, None] * prices
        return float(np.mean(0.5 * np.sum((demands - pred) ** 2, axis=1)))

    return loss(theta), loss(shifted)


# --------------------------------------------------------------------------
# query-shock check for the probe world

@dataclass(frozen=True)
class BinStat:
    label: str
    n: int
    mean: float
    se: float


def query_shock_bins(panels: Sequence[TaskPanel], n_price_bins: int = 5) -> list[BinStat]:
    """Mean demand shock at index ``K-2`` within coarse price-path bins.

    Bins cross quantiles of ``p_{K-2}`` with the sign of the final price step.
    A near-zero mean in every bin is necessary (not sufficient) for the
    query-shock condition.
    """
    pen = np.array([p.prices[-2] for p in panels])
    step = np.sign(np.array([p.prices[-1] - p.prices[-2] for p in panels]))
    eps = np.array([p.demands[-2] - (p.true_params.theta0 + p.true_params.theta1 * p.prices[-2])
                    for p in panels])
    edges = np.quantile(pen, np.linspace(0, 1, n_price_bins + 1))
    which = np.clip(np.searchsorted(edges, pen, side="right") - 1, 0, n_price_bins - 1)
    out = []
    for b in range(n_price_bins):
        for s in (-1.0, 1.0):
            sel = (which == b) & (step == s)
            if sel.sum() < 2:
                continue
            out.append(BinStat(f"p_bin={b},step={'+' if s > 0 else '-'}", int(sel.sum()),
                               float(eps[sel].mean()), _se(eps[sel])))
    return out
