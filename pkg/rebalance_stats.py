#!/usr/bin/env python3
"""
Compute per-category rarity statistics for a dataset.

Output CSV columns:
- category: class id p
- image_index: k
- avg_r, avg_g, avg_b: average colour c_k(p)
- density: KDE density D_p(c_k(p))
- rarity: R_p(k) = 1 / density

Only (category, image) pairs where the category occurs are written.

Usage:
    python rebalance_stats.py --dataset data/layout --output rarity.csv
"""

import argparse
import sys
from pathlib import Path

from cimle_core import EXIT_OK, CimleError, configure_logging, exit_code_for
from datasynth import load_dataset
from rebalance import portion_sizes, rarity_scores


def parse_args(argv=None):
    parser = argparse.ArgumentParser(
        description="Per-category colour rarity statistics"
    )
    parser.add_argument(
        "--dataset", "-d",
        required=True,
        help="Dataset directory (labels.ciml, images.ciml, ...)"
    )
    parser.add_argument(
        "--output", "-o",
        default="rarity_stats.csv",
        help="Output CSV file (default: rarity_stats.csv)"
    )
    parser.add_argument(
        "--batch-size",
        type=int,
        default=None,
        help="Also print the batch portion sizes for this |S|"
    )
    return parser.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    configure_logging()

    try:
        if not Path(args.dataset).is_dir():
            raise FileNotFoundError(f"dataset directory not found: {args.dataset}")
        dataset = load_dataset(args.dataset)
        if len(dataset) == 0:
            raise ValueError("dataset is empty")

        print("Computing rarity statistics...")
        print(f"  Dataset: {args.dataset}")
        print(f"  Images: {len(dataset):,}, classes: {dataset.num_classes}")

        table = rarity_scores(dataset)
        frame = table.to_frame()
        frame.to_csv(args.output, index=False, float_format="%.17g")
        sizes = portion_sizes(args.batch_size, len(table.top_categories)) if args.batch_size else None
    except (CimleError, FileNotFoundError, ValueError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return exit_code_for(e)

    print()
    print("Summary:")
    print(f"  Rows written: {len(frame):,}")
    print(f"  Top categories by area: {table.top_categories}")
    for p in table.top_categories:
        column = table.scores[table.present[:, p], p]
        print(f"    class {p}: {len(column):,} images, bandwidth {table.bandwidths[p]:.4g}, "
              f"rarity min {column.min():.4g} max {column.max():.4g}")
    if sizes:
        print(f"  Portion sizes for |S|={args.batch_size}: {sizes}")
    print(f"  Output: {args.output}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
