"""Command-line entry point: ``mtdemand {generate,bench,theory-check,retail}``."""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .bench import ExperimentConfig, emit_outputs, format_table, run_benchmark, run_theory_suite
from .core import GenConfig, World, generate, write_panels_csv, write_panels_jsonl

log = logging.getLogger("mtdemand")

_WORLD_KEYS = {"n_tasks": int, "k_obs": int, "theta0_mean": float, "theta1_mean": float,
               "param_cv": float, "demand_noise_cv": float, "confound_sigma": float,
               "experiment_cv": float, "pricing_noise_sd": float, "demand_noise_sd": float,
               "probe_step": float, "probe_delta": float}
_TRAIN_KEYS = {"learning_rate": float, "batch_size": int, "max_epochs": int, "patience": int,
               "validation_fraction": float, "loss_mode": str}


def _list(text: str, conv=str) -> list:
    """Comma list; integer ranges ``a-b`` are expanded (inclusive)."""
    out = []
    for part in (p.strip() for p in text.split(",")):
        if not part:
            continue
        if conv is int and "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(conv(part))
    return out


def world_config(name: str, seed: int = 0, **overrides) -> GenConfig:
    world = World(name)
    if world is World.EXAMPLE1:
        base = GenConfig.example1(seed=seed)
    elif world is World.APPENDIX_B:
        base = GenConfig.appendix_b(seed=seed)
    else:
        base = GenConfig.two_point_probe(seed=seed)
    return base.with_(**overrides) if overrides else base


def load_experiment(path: Optional[str], args: argparse.Namespace) -> ExperimentConfig:
    """Build the experiment from an INI file (optional) plus flag overrides."""
    cp = configparser.ConfigParser()
    if path:
        if not cp.read(path):
            raise FileNotFoundError(path)
    world = dict(cp["world"]) if cp.has_section("world") else {}
    bench = dict(cp["bench"]) if cp.has_section("bench") else {}
    trn = dict(cp["train"]) if cp.has_section("train") else {}

    name = world.pop("name", "AppendixB")
    gen = {k: _WORLD_KEYS[k](v) for k, v in world.items() if k in _WORLD_KEYS}
    unknown = set(world) - set(_WORLD_KEYS)
    if unknown:
        raise ValueError(f"unknown [world] key(s): {sorted(unknown)}")
    if args.n_tasks is not None:
        gen["n_tasks"] = args.n_tasks

    kw = {}
    if "methods" in bench:
        kw["methods"] = _list(bench["methods"])
    if "sigma_c" in bench:
        kw["sigma_c"] = _list(bench["sigma_c"], float)
    if "seeds" in bench:
        kw["seeds"] = _list(bench["seeds"], int)
    if "histogram_bins" in bench:
        kw["histogram_bins"] = int(bench["histogram_bins"])
    if "prediction_seeds" in bench:
        v = bench["prediction_seeds"].strip()
        kw["prediction_seeds"] = None if v == "all" else tuple(_list(v, int))
    if args.methods:
        kw["methods"] = _list(args.methods)
    if args.sigma_c:
        kw["sigma_c"] = _list(args.sigma_c, float)
    if args.seeds:
        kw["seeds"] = _list(args.seeds, int)
    elif args.seed is not None:
        kw["seeds"] = [args.seed]

    overrides = {}
    for k, v in trn.items():
        if k == "hidden":
            overrides["hidden"] = tuple(_list(v, int))
        elif k in _TRAIN_KEYS:
            overrides[k] = _TRAIN_KEYS[k](v)
        else:
            raise ValueError(f"unknown [train] key {k!r}")
    return ExperimentConfig(world=world_config(name, **gen), train_overrides=overrides,
                            out_dir=args.out, **kw)


# --------------------------------------------------------------------------
# commands

def cmd_generate(args) -> int:
    overrides = {"n_tasks": args.n_tasks} if args.n_tasks else {}
    if args.k is not None:
        overrides["k_obs"] = args.k
    if args.sigma_c is not None:
        overrides["confound_sigma"] = args.sigma_c
    cfg = world_config(args.world, seed=args.seed or 0, **overrides)
    panels = generate(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".jsonl":
        write_panels_jsonl(panels, out)
    else:
        write_panels_csv(panels, out)
    print(f"wrote {len(panels)} tasks to {out}")
    return 0


def cmd_bench(args) -> int:
    config = load_experiment(args.config, args)
    report = run_benchmark(config, jobs=args.jobs)
    print(format_table(report))
    if args.out:
        paths = emit_outputs(report, args.out, bins=config.histogram_bins)
        for k, p in paths.items():
            print(f"{k}: {p}")
    for c in report.failures:
        print(f"failed cell {c.method} sigma_c={c.sigma_c:g} seed={c.seed}: {c.error}",
              file=sys.stderr)
    return 0


def cmd_theory(args) -> int:
    report = run_theory_suite(seed=args.seed or 0, n_mc=args.n_mc)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    for c in report["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']:<34} lhs={c['lhs']:.6g} "
              f"rhs={c['rhs']:.6g} tol={c['tolerance']:.3g}")
    return 0 if report["passed"] else 1


def _load_records(args):
    from .retail import SyntheticRetailConfig, read_transactions, synthetic_transactions
    if args.input:
        with open(args.input, newline="", encoding=args.encoding) as fh:
            records, report = read_transactions(fh)
        print(f"parsed {report.kept} rows, dropped {report.dropped} "
              f"({report.cancelled} cancelled, {report.malformed} malformed)")
        return records
    return synthetic_transactions(SyntheticRetailConfig(seed=args.seed or 0))


def _build_tasks(args, records):
    from .retail import build_exposure_sequence, build_static_top3, load_embeddings
    emb = load_embeddings(args.embeddings) if args.embeddings else None
    if args.kind == "static-top3":
        return build_static_top3(records, embeddings=emb)
    return build_exposure_sequence(records, k=2, max_gap_days=args.max_gap_days, embeddings=emb)


def cmd_retail_build(args) -> int:
    from .retail import dataset_summary, write_task_files
    records = _load_records(args)
    tasks = _build_tasks(args, records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = args.kind.replace("-", "_")
    write_task_files(tasks, out / f"{stem}_tasks.csv", out / f"{stem}_features.csv")
    summary = dataset_summary(records)
    (out / "dataset_summary.json").write_text(json.dumps(summary.__dict__, indent=2))
    print(f"{len(tasks)} {args.kind} tasks written to {out}")
    print(json.dumps(summary.__dict__, indent=2))
    return 0


def cmd_retail_bench(args) -> int:
    import csv
    from .learners import RETAIL_HIDDEN, TrainConfig
    from .retail import run_retail_bench
    records = _load_records(args)
    tasks = _build_tasks(args, records)
    seeds = _list(args.seeds, int) if args.seeds else list(range(5))
    result = run_retail_bench(tasks, _list(args.methods), seeds,
                              TrainConfig(hidden=RETAIL_HIDDEN, max_epochs=args.max_epochs))
    rows = sorted(result.summary().items())
    for m, (mean, hw, n) in rows:
        print(f"{m:<10} RMSE {mean:.4f} +/- {hw:.4f} ({n} seed{'s' if n > 1 else ''})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "retail_results.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task_kind", "method", "rmse", "rmse_hw", "n_seeds"])
            for m, (mean, hw, n) in rows:
                w.writerow([result.task_kind.value, m, format(mean, ".17g"),
                            format(hw, ".17g"), n])
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="mtdemand", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write synthetic task panels")
    g.add_argument("--world", default="AppendixB", choices=[w.value for w in World])
    g.add_argument("--n-tasks", type=int, default=None)
    g.add_argument("--k", type=int, default=None)
    g.add_argument("--sigma-c", type=float, default=None)
    g.set_defaults(func=cmd_generate, out="panels.csv")

    b = sub.add_parser("bench", parents=[common], help="seed-grid benchmark")
    b.add_argument("--config", default=None, help="INI file with [world] [bench] [train]")
    b.add_argument("--methods", default=None, help="comma list")
    b.add_argument("--sigma-c", default=None, help="comma list")
    b.add_argument("--seeds", default=None, help="comma list or range, e.g. 0-9")
    b.add_argument("--n-tasks", type=int, default=None)
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("theory-check", parents=[common], help="run identification checks")
    t.add_argument("--n-mc", type=int, default=100_000)
    t.set_defaults(func=cmd_theory)

    r = sub.add_parser("retail", help="retail transaction pipeline")
    rsub = r.add_subparsers(dest="retail_command", required=True)
    for name, func, help_ in (("build-tasks", cmd_retail_build, "build product tasks"),
                              ("bench", cmd_retail_bench, "held-out RMSE benchmark")):
        p = rsub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--input", default=None,
                       help="transaction CSV (synthetic confounded data when omitted)")
        p.add_argument("--encoding", default="utf-8")
        p.add_argument("--kind", default="static-top3",
                       choices=["static-top3", "exposure-sequence"])
        p.add_argument("--embeddings", default=None, help="product_id,f_0,... CSV")
        p.add_argument("--max-gap-days", type=int, default=7)
        if name == "bench":
            p.add_argument("--methods", default="DCMOML,META,META-NA,SHARED,PER-TASK")
            p.add_argument("--seeds", default=None)
            p.add_argument("--max-epochs", type=int, default=500)
        p.set_defaults(func=func)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
