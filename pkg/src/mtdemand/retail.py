"""Retail transaction ingestion, product task construction and the retail benchmark.

Two task definitions are built from cleaned transaction lines:

* Static-Top3: the three price levels seen on the most days; the top two
  (price, average daily demand, day count) triples train, the third is held out.
* Exposure-Sequence: the daily posted-price series is run-length encoded into
  exposures (price, consecutive days, average daily demand); the first ``K``
  runs train and run ``K+1`` is held out.

Prices are kept as exact ``Decimal`` values so equal prices compare equal
without float ties.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Optional, Sequence, TextIO, Union

import numpy as np

from .core import TaskPanel, read_panels_csv, write_panels_csv
from .errors import EmptyInput, MalformedRow, MissingColumn
from .infoset import TrainingData
from .learners import RETAIL_HIDDEN, TrainConfig, train_on_data

log = logging.getLogger(__name__)

COLUMNS = ("InvoiceNo", "StockCode", "Description", "Quantity", "InvoiceDate",
           "UnitPrice", "CustomerID", "Country")
HASH_DIM = 256
DEFAULT_MAX_GAP_DAYS = 7

_DATE_FORMATS = ("%m/%d/%Y %H:%M", "%m/%d/%Y %H:%M:%S", "%Y-%m-%d %H:%M:%S",
                 "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M:%S")


@dataclass(frozen=True)
class TransactionRecord:
    invoice_id: str
    stock_code: str
    description: str
    quantity: int
    invoice_timestamp: datetime
    unit_price: Decimal
    customer_id: Optional[str]
    country: str

    @property
    def day(self) -> date:
        return self.invoice_timestamp.date()


@dataclass
class ParseReport:
    kept: int = 0
    cancelled: int = 0
    nonpositive_quantity: int = 0
    nonpositive_price: int = 0
    malformed: int = 0

    @property
    def dropped(self) -> int:
        return self.cancelled + self.nonpositive_quantity + self.nonpositive_price + self.malformed


def _parse_timestamp(text: str) -> datetime:
    text = text.strip()
    for fmt in _DATE_FORMATS:
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise MalformedRow(f"unrecognised timestamp {text!r}")


def _parse_row(row: dict) -> TransactionRecord:
    try:
        qty = int(row["Quantity"].strip())
        price = Decimal(row["UnitPrice"].strip())
    except (ValueError, InvalidOperation, AttributeError) as exc:
        raise MalformedRow(str(exc)) from exc
    if not price.is_finite():
        raise MalformedRow(f"non-finite price {row['UnitPrice']!r}")
    cust = (row.get("CustomerID") or "").strip() or None
    return TransactionRecord(
        invoice_id=(row["InvoiceNo"] or "").strip(),
        stock_code=(row["StockCode"] or "").strip(),
        description=(row["Description"] or "").strip(),
        quantity=qty,
        invoice_timestamp=_parse_timestamp(row["InvoiceDate"] or ""),
        unit_price=price,
        customer_id=cust,
        country=(row["Country"] or "").strip(),
    )


def read_transactions(stream: TextIO) -> tuple[list[TransactionRecord], ParseReport]:
    """Parse and clean a transaction CSV; returns the kept records and drop counts.

    Cancellations (invoice starting with ``C``), non-positive quantities and
    non-positive prices are dropped. Rows that fail to parse are skipped and
    counted as malformed. A header missing any standard column is fatal.
    """
    reader = csv.DictReader(stream)
    header = reader.fieldnames or []
    missing = [c for c in COLUMNS if c not in header]
    if missing:
        raise MissingColumn(f"missing column(s): {', '.join(missing)}")
    report = ParseReport()
    records = []
    for row in reader:
        if None in row or any(row.get(c) is None for c in COLUMNS):
            report.malformed += 1
            continue
        try:
            rec = _parse_row(row)
        except MalformedRow:
            report.malformed += 1
            continue
        if rec.invoice_id.upper().startswith("C"):
            report.cancelled += 1
        elif rec.quantity <= 0:
            report.nonpositive_quantity += 1
        elif rec.unit_price <= 0:
            report.nonpositive_price += 1
        else:
            records.append(rec)
    report.kept = len(records)
    log.info("kept %d rows; dropped %d cancelled, %d qty<=0, %d price<=0, %d malformed",
             report.kept, report.cancelled, report.nonpositive_quantity,
             report.nonpositive_price, report.malformed)
    return records, report


def parse_transactions(stream: TextIO) -> list[TransactionRecord]:
    return read_transactions(stream)[0]


def write_transactions_csv(records: Iterable[TransactionRecord], dest) -> None:
    own = isinstance(dest, (str, Path))
    fh = open(dest, "w", newline="") if own else dest
    try:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in records:
            w.writerow([r.invoice_id, r.stock_code, r.description, r.quantity,
                        r.invoice_timestamp.strftime("%m/%d/%Y %H:%M"), str(r.unit_price),
                        r.customer_id or "", r.country])
    finally:
        if own:
            fh.close()


# --------------------------------------------------------------------------
# daily aggregation

def daily_quantities(records: Iterable[TransactionRecord]) -> dict:
    """``{stock_code: {(day, price): summed quantity}}``."""
    out: dict = defaultdict(Counter)
    for r in records:
        out[r.stock_code][(r.day, r.unit_price)] += r.quantity
    return out


def _descriptions(records: Iterable[TransactionRecord]) -> dict:
    """Most frequent non-empty description per product (ties: lexicographic)."""
    seen: dict = defaultdict(Counter)
    for r in records:
        if r.description:
            seen[r.stock_code][r.description] += 1
    return {code: min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0] for code, c in seen.items()}


@dataclass(frozen=True)
class PriceLevel:
    price: Decimal
    days: int
    total_quantity: int

    @property
    def avg_daily_demand(self) -> float:
        return self.total_quantity / self.days


def price_levels(day_price_qty: dict) -> list[PriceLevel]:
    """Price levels ranked by observed days, then total quantity, then lower price."""
    days: Counter = Counter()
    qty: Counter = Counter()
    for (_, price), q in day_price_qty.items():
        days[price] += 1
        qty[price] += q
    levels = [PriceLevel(p, days[p], qty[p]) for p in days]
    return sorted(levels, key=lambda l: (-l.days, -l.total_quantity, l.price))


@dataclass(frozen=True)
class ExposureRun:
    price: Decimal
    exposure_days: int
    avg_daily_demand: float


def posted_price_series(day_price_qty: dict) -> list[tuple[date, Decimal, int]]:
    """One ``(day, price, quantity)`` per transaction day.

    When a day has sales at several prices the posted price is the one with
    the largest quantity (ties: lower price); the day's demand is the total.
    """
    by_day: dict = defaultdict(list)
    for (day, price), q in day_price_qty.items():
        by_day[day].append((price, q))
    series = []
    for day in sorted(by_day):
        entries = by_day[day]
        price = min(entries, key=lambda e: (-e[1], e[0]))[0]
        series.append((day, price, sum(q for _, q in entries)))
    return series


def run_length_encode(series: Sequence[tuple[date, Decimal, int]],
                      max_gap_days: int = DEFAULT_MAX_GAP_DAYS) -> list[ExposureRun]:
    """Compress a daily posted-price series into alternating price exposures.

    Missing days inside a run count as zero-demand days at the run's price
    when the gap between observed days is at most ``max_gap_days``; longer
    gaps are not counted toward the exposure. A price change always starts
    a new run, so consecutive runs never share a price.
    """
    runs = []
    price = last_day = None
    exposure = total = 0
    for day, p, q in series:
        if p == price:
            gap = (day - last_day).days
            exposure += gap if gap <= max_gap_days else 1
            total += q
        else:
            if price is not None:
                runs.append(ExposureRun(price, exposure, total / exposure))
            price, exposure, total = p, 1, q
        last_day = day
    if price is not None:
        runs.append(ExposureRun(price, exposure, total / exposure))
    return runs


# --------------------------------------------------------------------------
# features

_TOKEN = re.compile(r"[a-z0-9]+")


def hashed_features(text: str, dim: int = HASH_DIM) -> np.ndarray:
    """Signed token hashing of a product title, L2-normalised.

    Uses blake2b so the mapping is stable across processes (``hash()`` is salted).
    """
    v = np.zeros(dim)
    for tok in _TOKEN.findall(text.lower()):
        h = int.from_bytes(hashlib.blake2b(tok.encode(), digest_size=8).digest(), "little")
        v[h % dim] += 1.0 if (h >> 63) & 1 else -1.0
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def load_embeddings(path) -> dict[str, np.ndarray]:
    """Read ``product_id, f_0, ..., f_{d-1}`` rows into a lookup table."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "product_id":
            raise MissingColumn("embedding file must start with a product_id column")
        for row in reader:
            out[row[0]] = np.array([float(x) for x in row[1:]])
    return out


# --------------------------------------------------------------------------
# tasks

class TaskKind(str, enum.Enum):
    STATIC_TOP3 = "StaticTop3"
    EXPOSURE_SEQUENCE = "ExposureSequence"


Point = tuple  # (price, demand, exposure weight)


@dataclass(frozen=True)
class RetailTask:
    product_id: str
    features: np.ndarray
    train_points: tuple
    holdout_point: Point
    task_kind: TaskKind
    # non-holdout price levels, used by the per-product baseline
    all_points: tuple = ()

    @property
    def prices(self) -> np.ndarray:
        return np.array([float(p) for p, _, _ in self.train_points])

    @property
    def demands(self) -> np.ndarray:
        return np.array([d for _, d, _ in self.train_points], float)

    @property
    def exposures(self) -> np.ndarray:
        return np.array([e for _, _, e in self.train_points], float)


def _features_for(code: str, descriptions: dict, embeddings: Optional[dict],
                  dim: int) -> np.ndarray:
    if embeddings is not None and code in embeddings:
        return embeddings[code]
    return hashed_features(descriptions.get(code, ""), dim)


def build_static_top3(records: Sequence[TransactionRecord], embeddings: Optional[dict] = None,
                      dim: int = HASH_DIM) -> list[RetailTask]:
    """Top-2 price levels train, the third most frequent is held out."""
    daily = daily_quantities(records)
    descriptions = _descriptions(records)
    tasks, dropped = [], 0
    for code in sorted(daily):
        levels = price_levels(daily[code])
        if len(levels) < 3:
            dropped += 1
            continue
        pts = [(l.price, l.avg_daily_demand, l.days) for l in levels]
        tasks.append(RetailTask(code, _features_for(code, descriptions, embeddings, dim),
                                tuple(pts[:2]), pts[2], TaskKind.STATIC_TOP3,
                                tuple(pts[:2] + pts[3:])))
    log.info("static-top3: %d products kept, %d with < 3 prices dropped", len(tasks), dropped)
    return tasks


def build_exposure_sequence(records: Sequence[TransactionRecord], k: int = 2,
                            max_gap_days: int = DEFAULT_MAX_GAP_DAYS,
                            embeddings: Optional[dict] = None,
                            dim: int = HASH_DIM) -> list[RetailTask]:
    """First ``k`` exposures train, exposure ``k+1`` is held out."""
    daily = daily_quantities(records)
    descriptions = _descriptions(records)
    tasks, dropped = [], 0
    for code in sorted(daily):
        runs = run_length_encode(posted_price_series(daily[code]), max_gap_days)
        if len(runs) < k + 1:
            dropped += 1
            continue
        pts = [(r.price, r.avg_daily_demand, r.exposure_days) for r in runs[:k + 1]]
        tasks.append(RetailTask(code, _features_for(code, descriptions, embeddings, dim),
                                tuple(pts[:k]), pts[k], TaskKind.EXPOSURE_SEQUENCE,
                                tuple(pts[:k])))
    log.info("exposure-sequence: %d products kept, %d with < %d runs dropped",
             len(tasks), dropped, k + 1)
    return tasks


@dataclass(frozen=True)
class DatasetSummary:
    n_products: int
    n_products_3plus: int
    mean_distinct_prices: float
    modal_day_share: float
    top2_day_share: float


def dataset_summary(records: Sequence[TransactionRecord]) -> DatasetSummary:
    """Price-concentration statistics over all products (days = transaction days)."""
    daily = daily_quantities(records)
    n_prices, modal, top2 = [], [], []
    for code in daily:
        levels = price_levels(daily[code])
        total = sum(l.days for l in levels)
        n_prices.append(len(levels))
        modal.append(levels[0].days / total)
        top2.append(sum(l.days for l in levels[:2]) / total)
    if not n_prices:
        raise EmptyInput("no products")
    return DatasetSummary(len(n_prices), int(np.sum(np.array(n_prices) >= 3)),
                          float(np.mean(n_prices)), float(np.mean(modal)), float(np.mean(top2)))


def tasks_to_panels(tasks: Sequence[RetailTask], include_holdout: bool = True) -> list[TaskPanel]:
    """Panels in product order; with ``include_holdout`` the holdout is the last row."""
    out = []
    for i, t in enumerate(tasks):
        pts = list(t.train_points) + ([t.holdout_point] if include_holdout else [])
        out.append(TaskPanel(i, [float(p) for p, _, _ in pts], [d for _, d, _ in pts],
                             exposures=[int(e) for _, _, e in pts]))
    return out


def write_task_files(tasks: Sequence[RetailTask], panel_path, features_path) -> None:
    """Panel CSV (holdout as the final row of each task) plus a features sidecar."""
    write_panels_csv(tasks_to_panels(tasks), panel_path)
    with open(features_path, "w", newline="") as fh:
        w = csv.writer(fh)
        dim = max((t.features.size for t in tasks), default=0)
        w.writerow(["product_id"] + [f"f_{j}" for j in range(dim)])
        for t in tasks:
            w.writerow([t.product_id] + [format(float(x), ".17g") for x in t.features])


def read_task_files(panel_path, features_path, kind: TaskKind) -> list[RetailTask]:
    panels = read_panels_csv(panel_path)
    with open(features_path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        feats = [(row[0], np.array([float(x) for x in row[1:]])) for row in reader]
    if len(feats) != len(panels):
        raise ValueError("panel and feature files describe different product counts")
    tasks = []
    for p, (code, z) in zip(panels, feats):
        pts = [(Decimal(repr(float(pr))), float(d), int(e))
               for pr, d, e in zip(p.prices, p.demands, p.exposures)]
        tasks.append(RetailTask(code, z, tuple(pts[:-1]), pts[-1], TaskKind(kind),
                                tuple(pts[:-1])))
    return tasks


# --------------------------------------------------------------------------
# evaluation

def exposure_weighted_rmse(predictions, holdouts) -> float:
    """``sqrt(sum e (y - y_hat)^2 / sum e)`` over ``(y, e)`` holdout pairs."""
    predictions = np.asarray(predictions, float)
    holdouts = list(holdouts)
    if predictions.size == 0 or not holdouts:
        raise EmptyInput("no holdout points")
    y = np.array([h[0] for h in holdouts], float)
    e = np.array([h[1] for h in holdouts], float)
    if y.shape != predictions.shape:
        raise ValueError("predictions and holdouts are not aligned")
    return float(np.sqrt(np.sum(e * (y - predictions) ** 2) / np.sum(e)))


class RetailMethod(str, enum.Enum):
    DCMOML = "DCMOML"
    META = "META"
    META_NA = "META-NA"
    SHARED = "SHARED"
    PER_TASK = "PER-TASK"


def _norm_weights(e: np.ndarray) -> np.ndarray:
    return e / e.sum()


def _method_rows(tasks: Sequence[RetailTask], method: RetailMethod, use_exposure_inputs: bool):
    """Training rows ``(X, P, D, W, group)`` and per-task test inputs.

    Test inputs are a list per task of input vectors; their predicted
    parameters are averaged (only the symmetrized META has two).
    """
    X, P, D, W, G, test = [], [], [], [], [], []
    for i, t in enumerate(tasks):
        z = np.asarray(t.features, float)
        p, d, e = t.prices, t.demands, t.exposures
        w = _norm_weights(e)
        Pk = np.column_stack([np.ones(2), p])
        extra = e if use_exposure_inputs else np.zeros(0)
        if method is RetailMethod.DCMOML:
            x = np.concatenate([z, p, extra])
            X.append(x); P.append(Pk); D.append(d); W.append(w); G.append(i)
            test.append([x])
        elif method is RetailMethod.SHARED:
            X.append(z); P.append(Pk); D.append(d); W.append(w); G.append(i)
            test.append([z])
        elif method is RetailMethod.META:
            xs = []
            for s, q in ((0, 1), (1, 0)):
                xe = e[[s]] if use_exposure_inputs else np.zeros(0)
                x = np.concatenate([z, p[[s]], xe, d[[s]]])
                X.append(x); P.append(Pk[[q]]); D.append(d[[q]]); W.append(w[[q]]); G.append(i)
                xs.append(x)
            test.append(xs)
        elif method is RetailMethod.META_NA:
            xe = lambda k: e[[k]] if use_exposure_inputs else np.zeros(0)
            X.append(np.concatenate([z, p[[0]], xe(0), d[[0]]]))
            P.append(Pk[[1]]); D.append(d[[1]]); W.append(np.ones(1)); G.append(i)
            # forward in time: the most recent exposure is the support at test
            test.append([np.concatenate([z, p[[1]], xe(1), d[[1]]])])
        else:
            raise ValueError(f"{method.value} is not a learned method")
    return (np.stack(X), np.stack(P), np.stack(D), np.stack(W), np.array(G)), test


def per_task_predictions(tasks: Sequence[RetailTask]) -> np.ndarray:
    """Exposure-weighted line through each product's non-holdout price levels."""
    out = np.empty(len(tasks))
    for i, t in enumerate(tasks):
        pts = t.all_points or t.train_points
        p = np.array([float(x) for x, _, _ in pts])
        d = np.array([y for _, y, _ in pts], float)
        e = np.array([w for _, _, w in pts], float)
        A = np.column_stack([np.ones_like(p), p]) * np.sqrt(e)[:, None]
        beta, *_ = np.linalg.lstsq(A, d * np.sqrt(e), rcond=None)
        out[i] = beta[0] + beta[1] * float(t.holdout_point[0])
    return out


def learned_predictions(tasks: Sequence[RetailTask], method: RetailMethod,
                        config: TrainConfig) -> np.ndarray:
    kind = tasks[0].task_kind
    use_e = kind is TaskKind.EXPOSURE_SEQUENCE
    (X, P, D, W, G), test = _method_rows(tasks, method, use_e)
    data = TrainingData(X, P, D, W, G, [None] * len(G))
    model, _ = train_on_data(data, config)
    preds = np.empty(len(tasks))
    for i, (t, xs) in enumerate(zip(tasks, test)):
        theta = model.predict_vectors(np.stack(xs)).mean(axis=0)
        preds[i] = theta[0] + theta[1] * float(t.holdout_point[0])
    return preds


@dataclass
class RetailBenchResult:
    task_kind: TaskKind
    rmse: dict = field(default_factory=dict)  # method -> list of per-seed RMSE

    def summary(self) -> dict:
        out = {}
        for m, vals in self.rmse.items():
            v = np.asarray(vals, float)
            se = v.std(ddof=1) / np.sqrt(v.size) if v.size > 1 else 0.0
            out[m] = (float(v.mean()), float(1.96 * se), int(v.size))
        return out


def run_retail_bench(tasks: Sequence[RetailTask], methods: Sequence[str],
                     seeds: Sequence[int], config: Optional[TrainConfig] = None) -> RetailBenchResult:
    """Held-out exposure-weighted RMSE per method and seed."""
    if not tasks:
        raise EmptyInput("no retail tasks")
    base = config or TrainConfig(hidden=RETAIL_HIDDEN)
    kind = tasks[0].task_kind
    holdouts = [(t.holdout_point[1], t.holdout_point[2]) for t in tasks]
    result = RetailBenchResult(kind)
    for name in methods:
        method = RetailMethod(name)
        if method is RetailMethod.META_NA and kind is not TaskKind.EXPOSURE_SEQUENCE:
            continue
        if method is RetailMethod.PER_TASK:
            result.rmse[method.value] = [exposure_weighted_rmse(per_task_predictions(tasks), holdouts)]
            continue
        vals = []
        for s in seeds:
            cfg = TrainConfig(**{**base.__dict__, "seed": int(s)})
            vals.append(exposure_weighted_rmse(learned_predictions(tasks, method, cfg), holdouts))
        result.rmse[method.value] = vals
    return result


# --------------------------------------------------------------------------
# synthetic confounded transactions

_CATEGORY_WORDS = [
    ("mug", "ceramic"), ("candle", "holder"), ("bag", "jumbo"), ("card", "greeting"),
    ("lantern", "metal"), ("cushion", "cover"), ("clock", "alarm"), ("tin", "cake"),
]
_FILLER = ["red", "blue", "pink", "heart", "vintage", "retro", "set", "of", "small",
           "large", "white", "star", "christmas", "garden", "paisley", "spotty"]


@dataclass(frozen=True)
class SyntheticRetailConfig:
    n_products: int = 1000
    n_days: int = 300
    mean_run_days: float = 12.0
    modal_run_share: float = 0.55
    latent_sd: float = 0.35
    # gamma shape of the daily demand multiplier; smaller is lumpier
    dispersion: float = 0.5
    seed: int = 0


def synthetic_transactions(config: SyntheticRetailConfig) -> list[TransactionRecord]:
    """Transaction lines from products whose prices track a latent demand level.

    Titles reveal only a product category; a latent factor moves both the
    demand intercept and the optimal price, and the manager posts prices
    around that optimum, so prices are confounded with unobserved demand.
    """
    rng = np.random.default_rng(config.seed)
    start = datetime(2010, 12, 1, 9, 0)
    records = []
    invoice = 500000
    for i in range(config.n_products):
        c = int(rng.integers(len(_CATEGORY_WORDS)))
        words = list(_CATEGORY_WORDS[c]) + list(rng.choice(_FILLER, size=2, replace=False))
        desc = " ".join(words).upper()
        u = rng.normal(0.0, config.latent_sd)
        base = 4.0 + 2.0 * c
        theta0 = base * np.exp(u)
        p_star = (1.0 + 0.6 * c) * np.exp(0.8 * u + 0.1 * rng.normal())
        theta1 = -theta0 / (2.0 * p_star)
        n_levels = int(rng.integers(3, 6))
        offsets = rng.choice([0.8, 0.9, 1.1, 1.2, 1.3], size=n_levels - 1, replace=False)
        levels = [Decimal(f"{p_star * m:.2f}") for m in (1.0, *offsets)]
        levels = sorted(set(l for l in levels if l > 0), key=lambda l: abs(float(l) - p_star))
        day = 0
        current = None
        while day < config.n_days:
            if current is None or rng.random() < config.modal_run_share:
                nxt = levels[0]
            else:
                nxt = levels[1 + int(rng.integers(len(levels) - 1))]
            if nxt == current:
                nxt = levels[1 + int(rng.integers(len(levels) - 1))] if nxt == levels[0] else levels[0]
            current = nxt
            length = 1 + int(rng.geometric(1.0 / config.mean_run_days))
            for d in range(day, min(day + length, config.n_days)):
                lam = max(theta0 + theta1 * float(current), 0.05)
                q = int(rng.poisson(lam * rng.gamma(config.dispersion, 1.0 / config.dispersion)))
                if q > 0:
                    invoice += 1
                    ts = start + timedelta(days=d)
                    records.append(TransactionRecord(str(invoice), f"P{i:05d}", desc, q, ts,
                                                     current, None, "United Kingdom"))
            day += length
    return records
