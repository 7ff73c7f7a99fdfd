"""Dump (probability, std) pairs per class for plotting uncertainty against probability.

Reads a report written by ``delta-uq uncertainty`` and writes a long-format
CSV with one row per (input, class): id, class, probability, std, eps and
whether the input was classified correctly.  Plotting std against probability
gives the banana-shaped cloud: the softmax Jacobian carries a factor
p (1 - p), so the uncertainty vanishes at both ends.  The script also prints
binned means so the shape is visible without a plot.

    python3 demos/banana_data.py --report runs/blobs/report_opg_test.csv --out banana_opg.csv
"""
import argparse
import csv

import numpy as np

from delta_uq import io


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--report", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--bins", type=int, default=10)
    args = ap.parse_args()
    reports, probs, labels, preds = io.read_reports(args.report)
    prob_all, std_all = [], []
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "class", "prob", "std", "eps", "correct"])
        for r, p, y, yhat in zip(reports, probs, labels, preds):
            for m in range(p.size):
                w.writerow([r.input_id, m, repr(float(p[m])), repr(float(r.std[m])), repr(float(r.eps[m])), int(y == yhat)])
                prob_all.append(p[m])
                std_all.append(r.std[m])
    prob_all, std_all = np.array(prob_all), np.array(std_all)
    edges = np.linspace(0, 1, args.bins + 1)
    which = np.clip(np.digitize(prob_all, edges) - 1, 0, args.bins - 1)
    print(f"wrote {prob_all.size} rows to {args.out}")
    print(f"{'prob bin':>13s} {'count':>6s} {'mean std':>10s}")
    for b in range(args.bins):
        sel = which == b
        if sel.any():
            print(f"[{edges[b]:.1f}, {edges[b + 1]:.1f}) {sel.sum():6d} {std_all[sel].mean():10.4g}")


if __name__ == "__main__":
    main()
