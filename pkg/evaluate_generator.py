#!/usr/bin/env python3
"""
Evaluate a trained generator against a synthetic dataset.

Protocols:
  diversity  For each of --inputs distinct layouts, generate 2*--pairs
             samples and average the held-out feature distance over
             the pairs. -> diversity.csv
             columns: input_index, pairs, mean_pairwise_distance
  coverage   For each condition of a gmm dataset, draw --samples outputs
             and count the ground-truth modes hit within --epsilon.
             -> coverage.csv
             columns: condition, num_modes, samples, epsilon, coverage

Both CSVs end with a MEAN row.

Usage:
    python evaluate_generator.py --checkpoint runs/gmm/final.ckpt \
        --dataset data/gmm --protocol coverage --out eval/gmm
"""

import argparse
import sys
from pathlib import Path

import pandas as pd

from cimle_core import EXIT_OK, CimleError, Rng, configure_logging, exit_code_for
from datasynth import load_dataset
from distance import held_out_metric
from evaluation import (
    DEFAULT_NUM_INPUTS,
    DEFAULT_PAIRS_PER_INPUT,
    coverage_report,
    diversity_score,
)
from generator import load_checkpoint


def parse_args(argv=None):
    parser = argparse.ArgumentParser(
        description="Diversity and mode-coverage evaluation of a generator"
    )
    parser.add_argument("--checkpoint", required=True, help="Generator checkpoint (.ckpt)")
    parser.add_argument("--dataset", "-d", required=True, help="Dataset directory")
    parser.add_argument(
        "--protocol",
        choices=["diversity", "coverage", "all"],
        default="all",
        help="Which report(s) to produce (default: all)"
    )
    parser.add_argument(
        "--pairs",
        type=int,
        default=DEFAULT_PAIRS_PER_INPUT,
        help=f"Sample pairs per input (default: {DEFAULT_PAIRS_PER_INPUT})"
    )
    parser.add_argument(
        "--inputs",
        type=int,
        default=DEFAULT_NUM_INPUTS,
        help=f"Maximum number of distinct input layouts (default: {DEFAULT_NUM_INPUTS})"
    )
    parser.add_argument(
        "--samples",
        type=int,
        default=100,
        help="Samples per condition for coverage (default: 100)"
    )
    parser.add_argument(
        "--epsilon",
        type=float,
        default=None,
        help="Coverage radius (default: 3 * mode_std of the dataset)"
    )
    parser.add_argument("--seed", type=int, default=0, help="Evaluation latent seed (default: 0)")
    parser.add_argument(
        "--metric-seed",
        type=int,
        default=2,
        help="Seed of the held-out feature metric (default: 2)"
    )
    parser.add_argument("--out", "-o", default="eval", help="Output directory (default: eval)")
    return parser.parse_args(argv)


def with_mean_row(frame, label_column, value_columns):
    mean = {column: "" for column in frame.columns}
    mean[label_column] = "MEAN"
    for column in value_columns:
        mean[column] = frame[column].mean()
    return pd.concat([frame.astype({label_column: object}), pd.DataFrame([mean])], ignore_index=True)


def run_diversity(state, dataset, args, out_dir):
    indices = dataset.distinct_layout_indices()[:args.inputs]
    layouts = dataset.onehot(indices)
    metric = held_out_metric(args.metric_seed, dataset.height, dataset.width, dataset.channels)
    report = diversity_score(state, layouts, args.pairs, metric, Rng(args.seed))
    frame = with_mean_row(report.to_frame(), "input_index", ["mean_pairwise_distance"])
    path = out_dir / "diversity.csv"
    frame.to_csv(path, index=False, float_format="%.10g")
    print(f"  Diversity over {report.num_inputs} inputs x {args.pairs} pairs: {report.global_mean:.6g}")
    return path


def run_coverage(state, dataset, args, out_dir):
    if dataset.task != "gmm":
        raise ValueError("coverage needs a gmm dataset with a mode table")
    eps = args.epsilon
    if eps is None:
        eps = 3.0 * float(dataset.info["mode_std"])
    frame = coverage_report(state, dataset, eps, args.samples, Rng(args.seed))
    frame = with_mean_row(frame, "condition", ["coverage"])
    path = out_dir / "coverage.csv"
    frame.to_csv(path, index=False, float_format="%.10g")
    print(f"  Mean coverage (eps={eps:.4g}, N={args.samples}): {frame['coverage'].iloc[-1]:.4f}")
    return path


def main(argv=None):
    args = parse_args(argv)
    configure_logging()

    try:
        if not Path(args.dataset).is_dir():
            raise FileNotFoundError(f"dataset directory not found: {args.dataset}")
        dataset = load_dataset(args.dataset)
        state, _ = load_checkpoint(args.checkpoint)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)

        print("Evaluating generator")
        print(f"  Checkpoint: {args.checkpoint}")
        print(f"  Dataset: {args.dataset} ({dataset.task}, {len(dataset):,} pairs)")
        print(f"  Protocol: {args.protocol}")
        print()

        written = []
        if args.protocol in ("diversity", "all"):
            written.append(run_diversity(state, dataset, args, out_dir))
        if args.protocol in ("coverage", "all") and (args.protocol == "coverage" or dataset.task == "gmm"):
            written.append(run_coverage(state, dataset, args, out_dir))
    except (CimleError, FileNotFoundError, ValueError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return exit_code_for(e)

    print()
    print("Summary:")
    for path in written:
        print(f"  {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
