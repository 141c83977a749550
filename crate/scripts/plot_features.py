#!/usr/bin/env python3
"""Scatter plot of a 2-D feature dump (metrics/features.csv of a lenet-2d run).

usage: plot_features.py features.csv [more.csv ...] -o plot.png
"""
import argparse
import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def load(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows or "f1" not in rows[0] or "f2" in rows[0]:
        raise SystemExit(f"{path}: expected exactly two feature columns")
    return [(float(r["f0"]), float(r["f1"]), int(r["label"])) for r in rows]


def main():
    p = argparse.ArgumentParser()
    p.add_argument("csv", nargs="+")
    p.add_argument("-o", "--output", default="features.png")
    args = p.parse_args()

    fig, axes = plt.subplots(1, len(args.csv), figsize=(5 * len(args.csv), 5), squeeze=False)
    cmap = plt.get_cmap("tab10")
    for ax, path in zip(axes[0], args.csv):
        pts = load(path)
        for k in range(10):
            xs = [x for x, _, y in pts if y == k]
            ys = [v for _, v, y in pts if y == k]
            ax.scatter(xs, ys, s=2, color=cmap(k), label=str(k))
        ax.set_title(path, fontsize=8)
        ax.set_aspect("equal", adjustable="datalim")
    axes[0][-1].legend(markerscale=5, fontsize=7, loc="best")
    fig.tight_layout()
    fig.savefig(args.output, dpi=150)


if __name__ == "__main__":
    main()
