"""Near-optimal pricing world: pooled-slope sign flip and the estimated-slope histograms.

Writes ``example1_histograms.csv`` (series, param, bin_left, bin_right, count)
for the true parameters, the linear meta-estimator on (p_1, D_1), and the
symmetric-linear DCMOML fit, plus a one-line summary per estimator.

    python3 scripts/example1_figures.py --out results/example1
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from mtdemand.classic import shared_ols
from mtdemand.core import GenConfig, generate
from mtdemand.infoset import Design, build_info_set
from mtdemand.learners import linear_info_fit, symmetric_linear_fit
from mtdemand.theory import gaussian_bayes_oracle


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results/example1")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--bins", type=int, default=40)
    args = ap.parse_args()

    config = GenConfig.example1(seed=args.seed)
    panels = generate(config)
    truth = np.array([p.true_params.as_array() for p in panels])
    meta = linear_info_fit(panels, Design.META)
    dcmoml = symmetric_linear_fit(panels)
    oracle = gaussian_bayes_oracle(config)
    infos = [build_info_set(p, Design.DCMOML) for p in panels]
    series = {
        "TRUE": truth,
        "META": meta.predict_many([build_info_set(p, Design.META) for p in panels]),
        "DCMOML": dcmoml.predict_many(infos),
        "ORACLE": oracle.predict_many(infos),
    }
    print(f"pooled OLS slope: {shared_ols(panels).theta1:+.4f}")
    for name, est in series.items():
        print(f"{name:<7} mean theta0 {est[:, 0].mean():8.4f}  mean theta1 {est[:, 1].mean():+.4f}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "example1_histograms.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "param", "bin_left", "bin_right", "count"])
        for j, param in enumerate(("theta0", "theta1")):
            pooled = np.concatenate([v[:, j] for v in series.values()])
            edges = np.linspace(pooled.min(), pooled.max() + 1e-9, args.bins + 1)
            for name, est in series.items():
                counts, _ = np.histogram(est[:, j], edges)
                for b in range(args.bins):
                    w.writerow([name, param, repr(edges[b]), repr(edges[b + 1]), int(counts[b])])
    print(f"histograms: {out / 'example1_histograms.csv'}")


if __name__ == "__main__":
    main()
