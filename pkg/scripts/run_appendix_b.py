"""Full confounding-strength grid: N=5000 tasks, sigma_c in {0, 0.1, 0.2}, 10 seeds.

Writes results.csv, predictions.csv and plot_data.csv under the output
directory and prints the slope-MSE table.

    python3 scripts/run_appendix_b.py --out results/appendix_b [--jobs 4]
"""

import argparse
import time

from mtdemand.bench import ExperimentConfig, emit_outputs, format_table, run_benchmark
from mtdemand.core import GenConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results/appendix_b")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--n-tasks", type=int, default=5000)
    ap.add_argument("--seeds", type=int, default=10)
    args = ap.parse_args()

    config = ExperimentConfig(world=GenConfig.appendix_b(n_tasks=args.n_tasks),
                              seeds=tuple(range(args.seeds)), out_dir=args.out)
    start = time.perf_counter()
    report = run_benchmark(config, jobs=args.jobs)
    print(format_table(report))
    print(f"wall time {time.perf_counter() - start:.0f} s")
    for name, path in emit_outputs(report, args.out).items():
        print(f"{name}: {path}")


if __name__ == "__main__":
    main()
