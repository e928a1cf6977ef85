"""Information sets seen by each learner and the targets that supervise it.

Indices are 0-based throughout: for a path of length ``K`` the final index is
``K - 1`` and ``k_star`` is the last index whose price differs from it.

Flattened model input layout (``K`` fixed per experiment)::

    context | prices | exposures (if any) | demand slots | design extras

* DCMOML: prices ``p_0..p_{K-1}``; ``K`` demand slots, each a value and a
  presence flag (hidden slots hold value 0, flag 0).
* DCUOML: as DCMOML, followed by the unassigned demand value (no index).
* DCML:   all ``K`` prices; the first ``K-1`` demands; the query price again.
* META:   the first ``K-1`` prices and their ``K-1`` demands.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import TaskPanel
from .errors import AllPricesEqual

log = logging.getLogger(__name__)


class Design(str, enum.Enum):
    DCMOML = "DCMOML"
    DCUOML = "DCUOML"
    DCML = "DCML"
    META = "META"


@dataclass(frozen=True)
class QueryAssignment:
    k_star: int
    k_query: int
    k_masked_other: int


@dataclass(frozen=True)
class MaskedInfoSet:
    context: np.ndarray
    prices: np.ndarray
    visible_demands: tuple  # ((index, demand), ...)
    design: Design
    query_price: Optional[float] = None
    unassigned_demand: Optional[float] = None
    exposures: Optional[np.ndarray] = None
    k_obs: int = 0


def find_penultimate_index(prices: Sequence[float]) -> int:
    """Largest ``j`` with ``prices[j] != prices[-1]`` (exact comparison)."""
    prices = np.asarray(prices, dtype=float)
    if prices.size < 2:
        raise ValueError("need at least two prices")
    distinct = np.flatnonzero(prices[:-1] != prices[-1])
    if distinct.size == 0:
        raise AllPricesEqual("all prices equal the final price")
    return int(distinct[-1])


def query_rng(seed: int, task_id: int) -> np.random.Generator:
    """Per-task stream for query draws, disjoint from the data-generation stream."""
    return np.random.Generator(np.random.Philox(
        key=[int(seed) & (2**64 - 1), int(task_id) & (2**64 - 1)],
        counter=[0, 0, 0, 1]))


def assign_query(prices: Sequence[float], rng: np.random.Generator) -> QueryAssignment:
    k_star = find_penultimate_index(prices)
    last = len(prices) - 1
    if rng.random() < 0.5:
        return QueryAssignment(k_star, k_star, last)
    return QueryAssignment(k_star, last, k_star)


def build_info_set(panel: TaskPanel, design: Design,
                   assignment: Optional[QueryAssignment] = None) -> MaskedInfoSet:
    design = Design(design)
    K = panel.k
    last = K - 1
    exposures = panel.exposures
    if design is Design.META:
        visible = tuple((j, float(panel.demands[j])) for j in range(last))
        return MaskedInfoSet(panel.context, panel.prices[:last], visible, design,
                             exposures=None if exposures is None else exposures[:last],
                             k_obs=K)
    if design is Design.DCML:
        visible = tuple((j, float(panel.demands[j])) for j in range(last))
        return MaskedInfoSet(panel.context, panel.prices, visible, design,
                             query_price=float(panel.prices[last]),
                             exposures=exposures, k_obs=K)
    k_star = find_penultimate_index(panel.prices)
    hidden = {k_star, last}
    visible = tuple((j, float(panel.demands[j])) for j in range(K) if j not in hidden)
    if design is Design.DCMOML:
        return MaskedInfoSet(panel.context, panel.prices, visible, design,
                             exposures=exposures, k_obs=K)
    if assignment is None:
        raise ValueError("DCUOML needs a query assignment")
    return MaskedInfoSet(panel.context, panel.prices, visible, design,
                         unassigned_demand=float(panel.demands[assignment.k_masked_other]),
                         exposures=exposures, k_obs=K)


def supervision_targets(panel: TaskPanel, design: Design,
                        assignment: Optional[QueryAssignment] = None,
                        mode: str = "averaged") -> list[tuple[np.ndarray, float, float]]:
    """Return ``[(P_k, D_k, weight), ...]`` with ``P_k = (1, p_k)``.

    Weights sum to one within a task. Exposure lengths, when present, set the
    relative weights of the candidate query indices.
    """
    design = Design(design)
    last = panel.k - 1
    if design in (Design.META, Design.DCML):
        idx = [last]
    elif design is Design.DCUOML or mode == "sampled":
        if assignment is None:
            raise ValueError(f"{design.value} ({mode}) needs a query assignment")
        idx = [assignment.k_query]
    elif mode == "averaged":
        idx = [find_penultimate_index(panel.prices), last]
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    if panel.exposures is None:
        w = np.full(len(idx), 1.0 / len(idx))
    else:
        e = panel.exposures[idx].astype(float)
        w = e / e.sum()
    return [(np.array([1.0, panel.prices[k]]), float(panel.demands[k]), float(wk))
            for k, wk in zip(idx, w)]


def feature_dim(design: Design, k_obs: int, context_dim: int = 0,
                has_exposures: bool = False) -> int:
    design = Design(design)
    n_prices = k_obs - 1 if design is Design.META else k_obs
    d = context_dim + n_prices * (2 if has_exposures else 1)
    if design is Design.META:
        return d + (k_obs - 1)
    if design is Design.DCML:
        return d + (k_obs - 1) + 1
    d += 2 * k_obs
    return d + 1 if design is Design.DCUOML else d


def flatten(info: MaskedInfoSet) -> np.ndarray:
    parts = [np.asarray(info.context, float), np.asarray(info.prices, float)]
    if info.exposures is not None:
        parts.append(np.asarray(info.exposures, float))
    if info.design in (Design.META, Design.DCML):
        parts.append(np.array([d for _, d in info.visible_demands], float))
        if info.design is Design.DCML:
            parts.append(np.array([info.query_price]))
        return np.concatenate(parts)
    slots = np.zeros(2 * info.k_obs)
    for j, d in info.visible_demands:
        slots[2 * j] = d
        slots[2 * j + 1] = 1.0
    parts.append(slots)
    if info.design is Design.DCUOML:
        parts.append(np.array([info.unassigned_demand]))
    return np.concatenate(parts)


@dataclass
class TrainingData:
    """Row-aligned arrays for a design: one row per (task, input) pair.

    ``P`` is ``(n, m, 2)``, ``D`` and ``W`` are ``(n, m)``; unused target slots
    carry weight 0. ``groups`` holds the task id of each row so that train and
    validation splits never separate rows of one task.
    """

    X: np.ndarray
    P: np.ndarray
    D: np.ndarray
    W: np.ndarray
    groups: np.ndarray
    infos: list

    def __len__(self):
        return self.X.shape[0]

    def subset(self, rows) -> "TrainingData":
        rows = np.asarray(rows)
        return TrainingData(self.X[rows], self.P[rows], self.D[rows], self.W[rows],
                            self.groups[rows], [self.infos[i] for i in rows])


def assignments_for(panels: Sequence[TaskPanel], seed: int) -> dict[int, QueryAssignment]:
    out = {}
    for p in panels:
        try:
            out[p.task_id] = assign_query(p.prices, query_rng(seed, p.task_id))
        except AllPricesEqual:
            pass
    return out


def build_training_data(panels: Sequence[TaskPanel], design: Design,
                        mode: str = "averaged", seed: int = 0,
                        row_weights: Optional[Sequence[float]] = None) -> TrainingData:
    """Info vectors and supervision arrays for every usable panel.

    Panels whose prices are all equal cannot be masked and are dropped for
    DCMOML/DCUOML (the count is logged). ``row_weights`` scales each panel's
    targets, e.g. to split one product across two symmetrized rows.
    """
    design = Design(design)
    needs_assignment = design is Design.DCUOML or (design is Design.DCMOML and mode == "sampled")
    X, P, D, W, groups, infos = [], [], [], [], [], []
    dropped = 0
    m = 1 if (design in (Design.META, Design.DCML, Design.DCUOML) or mode == "sampled") else 2
    for i, panel in enumerate(panels):
        try:
            a = assign_query(panel.prices, query_rng(seed, panel.task_id)) \
                if needs_assignment else None
            info = build_info_set(panel, design, a)
            targets = supervision_targets(panel, design, a, mode)
        except AllPricesEqual:
            dropped += 1
            continue
        scale = 1.0 if row_weights is None else float(row_weights[i])
        Pi = np.zeros((m, 2))
        Di = np.zeros(m)
        Wi = np.zeros(m)
        for j, (pk, dk, wk) in enumerate(targets):
            Pi[j], Di[j], Wi[j] = pk, dk, wk * scale
        X.append(flatten(info))
        P.append(Pi)
        D.append(Di)
        W.append(Wi)
        groups.append(panel.task_id)
        infos.append(info)
    if dropped:
        log.info("dropped %d task(s) with a single distinct price (%s)", dropped, design.value)
    if not X:
        return TrainingData(np.zeros((0, 0)), np.zeros((0, m, 2)), np.zeros((0, m)),
                            np.zeros((0, m)), np.zeros(0, dtype=int), [])
    return TrainingData(np.stack(X), np.stack(P), np.stack(D), np.stack(W),
                        np.array(groups), infos)
