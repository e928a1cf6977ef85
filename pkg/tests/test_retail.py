import io
from datetime import date, datetime, timedelta
from decimal import Decimal
from pathlib import Path

import numpy as np
import pytest

from mtdemand.errors import EmptyInput, MissingColumn
from mtdemand.retail import (COLUMNS, HASH_DIM, RetailMethod, SyntheticRetailConfig, TaskKind,
                             TransactionRecord, _method_rows, build_exposure_sequence,
                             build_static_top3, daily_quantities, dataset_summary,
                             exposure_weighted_rmse, hashed_features, load_embeddings,
                             parse_transactions, posted_price_series, price_levels,
                             read_task_files, read_transactions, run_length_encode,
                             synthetic_transactions, write_task_files, write_transactions_csv)

FIXTURE = Path(__file__).parent / "fixtures" / "transactions_small.csv"
HEADER = ",".join(COLUMNS)
DAY0 = datetime(2011, 3, 1, 10, 0)


def _rec(code, day, price, qty=1, desc="CERAMIC MUG"):
    return TransactionRecord(f"5{day:05d}", code, desc, qty, DAY0 + timedelta(days=day),
                             Decimal(price), "1", "United Kingdom")


def _from_days(code, prices_by_day, qty=None):
    return [_rec(code, d, p, (qty or {}).get(d, 1)) for d, p in enumerate(prices_by_day) if p]


def test_fixture_parses_with_one_cancellation():
    with open(FIXTURE, newline="") as fh:
        records, report = read_transactions(fh)
    assert len(records) == 2 and report.cancelled == 1 and report.dropped == 1
    assert records[0].unit_price == Decimal("2.55")
    assert records[0].invoice_timestamp == datetime(2010, 12, 1, 8, 26)


def test_empty_file_with_header():
    assert parse_transactions(io.StringIO(HEADER + "\n")) == []


def test_missing_column_is_fatal():
    with pytest.raises(MissingColumn):
        parse_transactions(io.StringIO("InvoiceNo,StockCode\n1,A\n"))


def test_malformed_and_nonpositive_rows_are_counted():
    text = "\n".join([
        HEADER,
        "1,A,x,two,12/1/2010 8:26,2.55,1,UK",
        "2,A,x,1,not a date,2.55,1,UK",
        "3,A,x,1,12/1/2010 8:26,2.55",
        "4,A,x,0,12/1/2010 8:26,2.55,1,UK",
        "5,A,x,1,12/1/2010 8:26,0,1,UK",
        "6,A,x,1,2010-12-02 09:00:00,1.25,,UK",
    ])
    records, report = read_transactions(io.StringIO(text))
    assert report.malformed == 3 and report.nonpositive_quantity == 1
    assert report.nonpositive_price == 1 and len(records) == 1
    assert records[0].customer_id is None


def test_transactions_round_trip():
    records = _from_days("A", ["1.25", "1.25", "0.85"])
    buf = io.StringIO()
    write_transactions_csv(records, buf)
    buf.seek(0)
    assert parse_transactions(buf) == records


def test_price_level_ranking_by_days():
    days = ["1"] * 5 + ["2"] * 3 + ["3"] * 2 + ["4"]
    tasks = build_static_top3(_from_days("A", days))
    (t,) = tasks
    assert [p for p, _, _ in t.train_points] == [Decimal("1"), Decimal("2")]
    assert t.holdout_point[0] == Decimal("3") and t.holdout_point[2] == 2
    assert [e for _, _, e in t.train_points] == [5, 3]


def test_price_level_tie_breaks():
    # B and C both have two days; C sells more, so C ranks second
    days = ["1.00"] * 4 + ["2.00", "2.00", "3.00", "3.00"]
    qty = {6: 5, 7: 5}
    levels = price_levels(daily_quantities(_from_days("A", days, qty))["A"])
    assert [l.price for l in levels] == [Decimal("1.00"), Decimal("3.00"), Decimal("2.00")]
    # equal days and quantity: lower price first
    levels = price_levels(daily_quantities(_from_days("A", ["2", "3", "2", "3"]))["A"])
    assert [l.price for l in levels] == [Decimal("2"), Decimal("3")]


def test_products_with_fewer_than_three_prices_are_dropped():
    records = _from_days("A", ["1", "2", "1"]) + _from_days("B", ["1", "2", "3"])
    assert [t.product_id for t in build_static_top3(records)] == ["B"]


def test_static_holdout_price_not_in_train():
    tasks = build_static_top3(synthetic_transactions(SyntheticRetailConfig(n_products=80)))
    assert tasks
    for t in tasks:
        assert t.holdout_point[0] not in {p for p, _, _ in t.train_points}


def _series(prices, quantities=None):
    quantities = quantities or [1] * len(prices)
    return [(date(2011, 1, 1) + timedelta(days=i), Decimal(str(p)), q)
            for i, (p, q) in enumerate(zip(prices, quantities))]


def test_run_length_encoding_examples():
    runs = run_length_encode(_series([2, 2, 3, 3, 3, 2]))
    assert [(float(r.price), r.exposure_days) for r in runs] == [(2, 2), (3, 3), (2, 1)]
    (run,) = run_length_encode(_series([2, 2], [4, 6]))
    assert run.avg_daily_demand == 5.0 and run.exposure_days == 2


def test_run_gap_rule():
    base = date(2011, 1, 1)
    short = [(base, Decimal(2), 4), (base + timedelta(days=3), Decimal(2), 2)]
    (run,) = run_length_encode(short, max_gap_days=7)
    assert run.exposure_days == 4 and run.avg_daily_demand == 1.5  # two silent days count as 0
    long = [(base, Decimal(2), 4), (base + timedelta(days=30), Decimal(2), 2)]
    (run,) = run_length_encode(long, max_gap_days=7)
    assert run.exposure_days == 2 and run.avg_daily_demand == 3.0


def test_posted_price_is_the_best_selling_price_of_the_day():
    recs = [_rec("A", 0, "2.00", 3), _rec("A", 0, "1.50", 5), _rec("A", 1, "2.00", 1),
            _rec("A", 1, "1.50", 1)]
    series = posted_price_series(daily_quantities(recs)["A"])
    assert [(p, q) for _, p, q in series] == [(Decimal("1.50"), 8), (Decimal("1.50"), 2)]


def test_single_price_product_is_dropped_from_exposure_sequence():
    records = _from_days("A", ["1"] * 6) + _from_days("B", ["1", "2", "2", "1"])
    tasks = build_exposure_sequence(records)
    assert [t.product_id for t in tasks] == ["B"]
    assert [e for _, _, e in tasks[0].train_points] == [1, 2]
    assert tasks[0].holdout_point[2] == 1


@pytest.fixture(scope="module")
def synthetic_records():
    return synthetic_transactions(SyntheticRetailConfig(n_products=150, seed=3))


def test_exposure_runs_alternate(synthetic_records):
    tasks = build_exposure_sequence(synthetic_records)
    assert tasks
    for t in tasks:
        seq = [p for p, _, _ in t.train_points] + [t.holdout_point[0]]
        assert all(a != b for a, b in zip(seq[:-1], seq[1:]))
        assert all(e >= 1 for _, _, e in t.train_points)


@pytest.mark.parametrize("method", [RetailMethod.DCMOML, RetailMethod.SHARED,
                                    RetailMethod.META, RetailMethod.META_NA])
def test_training_weights_are_normalized(synthetic_records, method):
    tasks = build_exposure_sequence(synthetic_records)
    (X, P, D, W, G), test = _method_rows(tasks, method, True)
    totals = np.bincount(G, weights=W.sum(axis=1))
    np.testing.assert_allclose(totals, 1.0, rtol=1e-12)
    assert len(test) == len(tasks)


def test_exposure_weighted_rmse_examples():
    assert exposure_weighted_rmse([1.0, 2.0], [(1.0, 1), (2.0, 4)]) == 0.0
    assert exposure_weighted_rmse([0.0, 0.0], [(1.0, 1), (2.0, 1)]) == pytest.approx(1.5811, abs=1e-4)
    assert exposure_weighted_rmse([0.0, 0.0], [(1.0, 3), (2.0, 1)]) == pytest.approx(1.3229, abs=1e-4)
    with pytest.raises(EmptyInput):
        exposure_weighted_rmse([], [])


def test_pipeline_is_deterministic(synthetic_records):
    buf = io.StringIO()
    write_transactions_csv(synthetic_records, buf)
    text = buf.getvalue()
    a = build_exposure_sequence(parse_transactions(io.StringIO(text)))
    b = build_exposure_sequence(parse_transactions(io.StringIO(text)))
    assert [(t.product_id, t.train_points, t.holdout_point) for t in a] == \
           [(t.product_id, t.train_points, t.holdout_point) for t in b]
    assert all(np.array_equal(x.features, y.features) for x, y in zip(a, b))
    assert [t.product_id for t in a] == sorted(t.product_id for t in a)


def test_hashed_features():
    z = hashed_features("WHITE HANGING HEART T-LIGHT HOLDER")
    assert z.shape == (HASH_DIM,) and np.linalg.norm(z) == pytest.approx(1.0)
    np.testing.assert_array_equal(z, hashed_features("white hanging heart t-light holder"))
    assert not np.any(hashed_features(""))


def test_embeddings_override_hashing(tmp_path):
    path = tmp_path / "emb.csv"
    path.write_text("product_id,f_0,f_1\nB,0.5,-0.25\n")
    emb = load_embeddings(path)
    records = _from_days("B", ["1", "2", "3"])
    (t,) = build_static_top3(records, embeddings=emb)
    np.testing.assert_array_equal(t.features, [0.5, -0.25])


def test_task_files_round_trip(tmp_path, synthetic_records):
    tasks = build_static_top3(synthetic_records)
    write_task_files(tasks, tmp_path / "t.csv", tmp_path / "f.csv")
    back = read_task_files(tmp_path / "t.csv", tmp_path / "f.csv", TaskKind.STATIC_TOP3)
    assert len(back) == len(tasks)
    for a, b in zip(tasks, back):
        assert a.product_id == b.product_id
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_allclose(a.prices, b.prices, rtol=1e-15)
        np.testing.assert_array_equal(a.demands, b.demands)
        assert a.holdout_point[1:] == b.holdout_point[1:]


def test_dataset_summary_on_small_input():
    records = _from_days("A", ["1", "1", "1", "2"]) + _from_days("B", ["1", "2", "3", "3"])
    s = dataset_summary(records)
    assert s.n_products == 2 and s.n_products_3plus == 1
    assert s.mean_distinct_prices == 2.5
    assert s.modal_day_share == pytest.approx((0.75 + 0.5) / 2)
    with pytest.raises(EmptyInput):
        dataset_summary([])
