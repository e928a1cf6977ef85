"""Structural linear demand model, synthetic worlds and panel serialization.

Three worlds are available:

* ``EXAMPLE1``: common slope, Gaussian intercepts, managers price near the
  revenue optimum with additive noise.
* ``APPENDIX_B``: heterogeneous intercept and slope, a manager who sees a noisy
  optimal-price signal (the confounding knob ``confound_sigma``) and
  experiments multiplicatively around it.
* ``TWO_POINT_PROBE``: an adaptive finite-difference revenue climber whose last
  two periods are a symmetric probe pair chosen before the block's demand is
  seen.

Every task draws from its own Philox stream keyed on ``(seed, task_id)`` so a
panel does not depend on how many other tasks are generated or in which order.
"""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, TextIO, Union

import numpy as np

from .errors import NonNegativeSlope

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class DemandParams:
    theta0: float
    theta1: float

    def as_array(self) -> np.ndarray:
        return np.array([self.theta0, self.theta1], dtype=float)


class World(str, enum.Enum):
    EXAMPLE1 = "Example1"
    APPENDIX_B = "AppendixB"
    TWO_POINT_PROBE = "TwoPointProbe"


def _frozen(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(eq=False)
class TaskPanel:
    """One task's observed price/demand path (plus ground truth when synthetic)."""

    task_id: int
    prices: np.ndarray
    demands: np.ndarray
    context: np.ndarray = field(default_factory=lambda: _frozen([]))
    exposures: Optional[np.ndarray] = None
    true_params: Optional[DemandParams] = None

    def __post_init__(self):
        self.prices = _frozen(self.prices)
        self.demands = _frozen(self.demands)
        self.context = _frozen(self.context)
        if self.prices.shape != self.demands.shape:
            raise ValueError("prices and demands must have the same length")
        if self.prices.size < 2:
            raise ValueError("a panel needs at least two observations")
        if self.exposures is not None:
            self.exposures = _frozen(self.exposures, dtype=np.int64)
            if self.exposures.shape != self.prices.shape:
                raise ValueError("exposures must match the price path length")
            if np.any(self.exposures < 1):
                raise ValueError("exposures must be >= 1")

    @property
    def k(self) -> int:
        return int(self.prices.size)

    def __eq__(self, other):
        if not isinstance(other, TaskPanel):
            return NotImplemented
        same_exp = (self.exposures is None and other.exposures is None) or (
            self.exposures is not None
            and other.exposures is not None
            and np.array_equal(self.exposures, other.exposures)
        )
        return (
            self.task_id == other.task_id
            and np.array_equal(self.prices, other.prices)
            and np.array_equal(self.demands, other.demands)
            and np.array_equal(self.context, other.context)
            and same_exp
            and self.true_params == other.true_params
        )


@dataclass(frozen=True)
class GenConfig:
    n_tasks: int = 2000
    k_obs: int = 2
    theta0_mean: float = 1.0
    theta1_mean: float = -1.0
    param_cv: float = 0.1
    demand_noise_cv: float = 0.1
    confound_sigma: float = 0.0
    experiment_cv: float = 0.1
    world: World = World.APPENDIX_B
    seed: int = 0
    # additive noise scales, used by EXAMPLE1 only
    pricing_noise_sd: float = 0.25
    demand_noise_sd: float = 1.0
    # TWO_POINT_PROBE policy constants
    probe_step: float = 0.1
    probe_delta: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "world", World(self.world))
        if self.n_tasks < 1:
            raise ValueError("n_tasks must be >= 1")
        if self.k_obs < 2:
            raise ValueError("k_obs must be >= 2")
        for name in ("param_cv", "demand_noise_cv", "experiment_cv",
                     "confound_sigma", "pricing_noise_sd", "demand_noise_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def example1(cls, n_tasks=2000, k_obs=2, seed=0, **kw) -> "GenConfig":
        base = dict(theta0_mean=10.0, theta1_mean=-1.0, param_cv=0.1,
                    pricing_noise_sd=0.25, demand_noise_sd=1.0)
        base.update(kw)
        return cls(n_tasks=n_tasks, k_obs=k_obs, seed=seed,
                   world=World.EXAMPLE1, **base)

    @classmethod
    def appendix_b(cls, confound_sigma=0.0, n_tasks=5000, k_obs=2, seed=0,
                   **kw) -> "GenConfig":
        return cls(n_tasks=n_tasks, k_obs=k_obs, seed=seed,
                   confound_sigma=confound_sigma, world=World.APPENDIX_B, **kw)

    @classmethod
    def two_point_probe(cls, n_tasks=5000, k_obs=6, seed=0, **kw) -> "GenConfig":
        return cls(n_tasks=n_tasks, k_obs=k_obs, seed=seed,
                   world=World.TWO_POINT_PROBE, **kw)

    def with_(self, **kw) -> "GenConfig":
        return replace(self, **kw)


def optimal_price(params: DemandParams) -> float:
    """Revenue-maximizing price ``-theta0 / (2 theta1)``."""
    if not params.theta1 < 0:
        raise NonNegativeSlope(f"theta1={params.theta1} >= 0: revenue is unbounded")
    return -params.theta0 / (2.0 * params.theta1)


def mean_demand(params: DemandParams, price):
    """Mean demand ``theta0 + theta1 * price``; ``price`` may be an array."""
    return params.theta0 + params.theta1 * price


def task_rng(seed: int, task_id: int) -> np.random.Generator:
    """Counter-based stream for one task, independent of all other tasks."""
    return np.random.Generator(
        np.random.Philox(key=[int(seed) & _MASK64, int(task_id) & _MASK64]))


def _draw_params(config: GenConfig, rng: np.random.Generator) -> DemandParams:
    sd0 = config.param_cv * abs(config.theta0_mean)
    sd1 = config.param_cv * abs(config.theta1_mean)
    theta0 = config.theta0_mean + sd0 * rng.standard_normal()
    theta1 = config.theta1_mean + sd1 * rng.standard_normal()
    # positive slopes have probability ~1e-23 at CV 0.1; redraw so p* exists
    while theta1 >= 0:
        theta1 = config.theta1_mean + sd1 * rng.standard_normal()
    return DemandParams(float(theta0), float(theta1))


def _mult_noise(mean: np.ndarray, cv: float, rng: np.random.Generator) -> np.ndarray:
    return mean + cv * np.abs(mean) * rng.standard_normal(mean.shape)


def _example1_task(config: GenConfig, task_id: int) -> TaskPanel:
    rng = task_rng(config.seed, task_id)
    theta0 = config.theta0_mean + config.param_cv * abs(config.theta0_mean) * rng.standard_normal()
    params = DemandParams(float(theta0), float(config.theta1_mean))
    p_star = optimal_price(params)
    prices = p_star + config.pricing_noise_sd * rng.standard_normal(config.k_obs)
    demands = params.theta0 + params.theta1 * prices \
        + config.demand_noise_sd * rng.standard_normal(config.k_obs)
    return TaskPanel(task_id, prices, demands, true_params=params)


def _appendix_b_task(config: GenConfig, task_id: int) -> TaskPanel:
    rng = task_rng(config.seed, task_id)
    params = _draw_params(config, rng)
    p_star = optimal_price(params)
    signal = p_star + config.confound_sigma * abs(p_star) * rng.standard_normal()
    prices = _mult_noise(np.full(config.k_obs, signal), config.experiment_cv, rng)
    demands = _mult_noise(params.theta0 + params.theta1 * prices,
                          config.demand_noise_cv, rng)
    return TaskPanel(task_id, prices, demands, true_params=params)


def _probe_task(config: GenConfig, task_id: int) -> TaskPanel:
    rng = task_rng(config.seed, task_id)
    params = _draw_params(config, rng)
    p_star = optimal_price(params)
    incumbent = p_star + config.confound_sigma * abs(p_star) * rng.standard_normal()
    delta, step = config.probe_delta, config.probe_step
    k = config.k_obs
    prices: list[float] = []
    demands: list[float] = []

    def observe(p):
        m = np.array([params.theta0 + params.theta1 * p])
        d = float(_mult_noise(m, config.demand_noise_cv, rng)[0])
        prices.append(p)
        demands.append(d)
        return d

    if k % 2:
        observe(incumbent)
    n_blocks = (k - len(prices)) // 2
    for block in range(n_blocks):
        sign = 1.0 if rng.random() < 0.5 else -1.0
        hi, lo = incumbent + sign * delta, incumbent - sign * delta
        d_hi = observe(hi)
        d_lo = observe(lo)
        if block < n_blocks - 1:
            # the final block's demands never feed back into its own prices
            grad = (hi * d_hi - lo * d_lo) / (hi - lo)
            incumbent = incumbent + step * grad
    return TaskPanel(task_id, prices, demands, true_params=params)


def generate_example1(config: GenConfig, rng=None) -> list[TaskPanel]:
    """Near-optimal pricing world with a common negative slope.

    ``rng`` is accepted for interface symmetry; randomness always comes from
    the per-task streams seeded by ``config.seed``.
    """
    if config.world is not World.EXAMPLE1:
        raise ValueError("config.world must be Example1")
    return [_example1_task(config, i) for i in range(config.n_tasks)]


def generate_appendix_b(config: GenConfig, rng=None) -> list[TaskPanel]:
    if config.world is not World.APPENDIX_B:
        raise ValueError("config.world must be AppendixB")
    return [_appendix_b_task(config, i) for i in range(config.n_tasks)]


def generate_two_point_probe(config: GenConfig, rng=None) -> list[TaskPanel]:
    if config.world is not World.TWO_POINT_PROBE:
        raise ValueError("config.world must be TwoPointProbe")
    return [_probe_task(config, i) for i in range(config.n_tasks)]


_GENERATORS = {
    World.EXAMPLE1: generate_example1,
    World.APPENDIX_B: generate_appendix_b,
    World.TWO_POINT_PROBE: generate_two_point_probe,
}


def generate(config: GenConfig) -> list[TaskPanel]:
    return _GENERATORS[config.world](config)


def stack_panels(panels: list[TaskPanel]):
    """Return ``(prices, demands, theta)`` arrays for equal-length panels.

    ``theta`` is ``None`` unless every panel carries ``true_params``.
    """
    prices = np.stack([p.prices for p in panels])
    demands = np.stack([p.demands for p in panels])
    theta = None
    if all(p.true_params is not None for p in panels):
        theta = np.array([[p.true_params.theta0, p.true_params.theta1] for p in panels])
    return prices, demands, theta


# --------------------------------------------------------------------------
# serialization

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _csv_header(width: int) -> list[str]:
    return ["task_id", "k", "price", "demand", "exposure", "true_theta0",
            "true_theta1"] + [f"z_{j}" for j in range(width)]


def write_panels_csv(panels: Iterable[TaskPanel], dest: Union[str, Path, TextIO]) -> None:
    panels = list(panels)
    width = max((p.context.size for p in panels), default=0)
    own = isinstance(dest, (str, Path))
    fh = open(dest, "w", newline="") if own else dest
    try:
        w = csv.writer(fh)
        w.writerow(_csv_header(width))
        for p in panels:
            t0 = _fmt(p.true_params.theta0) if p.true_params else ""
            t1 = _fmt(p.true_params.theta1) if p.true_params else ""
            z = [_fmt(v) for v in p.context] + [""] * (width - p.context.size)
            for k in range(p.k):
                e = "" if p.exposures is None else str(int(p.exposures[k]))
                w.writerow([p.task_id, k, _fmt(p.prices[k]), _fmt(p.demands[k]),
                            e, t0, t1, *z])
    finally:
        if own:
            fh.close()


def read_panels_csv(src: Union[str, Path, TextIO]) -> list[TaskPanel]:
    own = isinstance(src, (str, Path))
    fh = open(src, newline="") if own else src
    try:
        rows = list(csv.DictReader(fh))
    finally:
        if own:
            fh.close()
    grouped: dict[int, list[dict]] = {}
    for row in rows:
        grouped.setdefault(int(row["task_id"]), []).append(row)
    panels = []
    for tid, group in grouped.items():
        group.sort(key=lambda r: int(r["k"]))
        first = group[0]
        zkeys = sorted((c for c in first if c.startswith("z_")), key=lambda c: int(c[2:]))
        context = [float(first[c]) for c in zkeys if first[c] != ""]
        exposures = None
        if first["exposure"] != "":
            exposures = [int(r["exposure"]) for r in group]
        params = None
        if first["true_theta0"] != "":
            params = DemandParams(float(first["true_theta0"]), float(first["true_theta1"]))
        panels.append(TaskPanel(
            tid,
            [float(r["price"]) for r in group],
            [float(r["demand"]) for r in group],
            context=context, exposures=exposures, true_params=params))
    return panels


def panel_to_dict(p: TaskPanel) -> dict:
    return {
        "task_id": p.task_id,
        "prices": [float(x) for x in p.prices],
        "demands": [float(x) for x in p.demands],
        "context": [float(x) for x in p.context],
        "exposures": None if p.exposures is None else [int(x) for x in p.exposures],
        "true_params": None if p.true_params is None
        else [p.true_params.theta0, p.true_params.theta1],
    }


def panel_from_dict(d: dict) -> TaskPanel:
    tp = d.get("true_params")
    return TaskPanel(
        int(d["task_id"]), d["prices"], d["demands"], context=d.get("context") or [],
        exposures=d.get("exposures"),
        true_params=None if tp is None else DemandParams(float(tp[0]), float(tp[1])))


def write_panels_jsonl(panels: Iterable[TaskPanel], dest: Union[str, Path, TextIO]) -> None:
    # json emits repr() floats, which round-trip exactly
    lines = "".join(json.dumps(panel_to_dict(p)) + "\n" for p in panels)
    if isinstance(dest, (str, Path)):
        Path(dest).write_text(lines)
    else:
        dest.write(lines)


def read_panels_jsonl(src: Union[str, Path, TextIO]) -> list[TaskPanel]:
    text = Path(src).read_text() if isinstance(src, (str, Path)) else src.read()
    return [panel_from_dict(json.loads(line)) for line in io.StringIO(text) if line.strip()]
