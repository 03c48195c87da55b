#!/usr/bin/env python3
"""
Plot matched distance and inner loss per epoch for one or more training runs.
"""

import argparse
import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def parse_args(argv=None):
    parser = argparse.ArgumentParser(
        description="Create line plots of training logs"
    )
    parser.add_argument(
        "--input", "-i",
        required=True,
        nargs="+",
        help="training_log.csv files (or run directories containing one)"
    )
    parser.add_argument(
        "--output", "-o",
        default="training_curves.png",
        help="Path to output image file (default: training_curves.png)"
    )
    parser.add_argument(
        "--dpi",
        type=int,
        default=150,
        help="DPI for output image (default: 150)"
    )
    parser.add_argument(
        "--log-scale",
        action="store_true",
        help="Use a logarithmic y axis"
    )
    return parser.parse_args(argv)


def read_log(path):
    path = Path(path)
    if path.is_dir():
        path = path / "training_log.csv"
    return path.parent.name or str(path), pd.read_csv(path)


def plot_logs(logs, output, dpi=150, log_scale=False):
    fig, axes = plt.subplots(1, 2, figsize=(12, 5))
    colors = plt.cm.tab10.colors

    for index, (label, df) in enumerate(logs):
        color = colors[index % len(colors)]
        axes[0].plot(df["epoch"], df["mean_matched_distance"], color=color, label=label)
        axes[1].plot(df["epoch"], df["mean_inner_loss"], color=color, label=label)

    axes[0].set_title("Mean Matched Distance per Epoch", fontsize=14, fontweight="bold")
    axes[1].set_title("Mean Inner-Step Loss per Epoch", fontsize=14, fontweight="bold")
    for ax in axes:
        ax.set_xlabel("Epoch", fontsize=12)
        if log_scale:
            ax.set_yscale("log")
        ax.legend(fontsize=9)

    plt.tight_layout()
    plt.savefig(output, dpi=dpi, bbox_inches="tight")
    plt.close(fig)


def main(argv=None):
    args = parse_args(argv)

    try:
        logs = [read_log(path) for path in args.input]
    except FileNotFoundError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return 2

    plot_logs(logs, args.output, args.dpi, args.log_scale)
    print(f"Plot saved to: {args.output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
