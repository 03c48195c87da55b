#!/usr/bin/env python3
"""
Generate a synthetic dataset from an experiment config and save it.

The dataset is built from the config's task keys and dataset_seed, the
same way train_imle.py builds it when no dataset path is configured.
Also writes example_layout.ciml (the first label map) for sampling.

Usage:
    python generate_dataset.py --config configs/layout.cfg --out data/layout
"""

import argparse
import sys
from pathlib import Path

from cimle_core import EXIT_OK, CimleError, configure_logging, exit_code_for, write_labels
from datasynth import save_dataset
from experiment_config import load_config


def parse_args(argv=None):
    parser = argparse.ArgumentParser(
        description="Generate a synthetic gmm or layout dataset"
    )
    parser.add_argument("--config", "-c", required=True, help="Experiment config file")
    parser.add_argument("--out", "-o", required=True, help="Output dataset directory")
    parser.add_argument(
        "--seed",
        type=int,
        default=None,
        help="Override dataset_seed from the config"
    )
    return parser.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    configure_logging()

    try:
        config = load_config(args.config, dataset_seed=args.seed).replace(dataset="")
        print(f"Generating {config.task} dataset (seed {config.dataset_seed})...")
        dataset = config.build_dataset()
        out_dir = save_dataset(dataset, args.out)
        write_labels(Path(out_dir) / "example_layout.ciml", dataset.labels[0])
    except (CimleError, FileNotFoundError, ValueError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return exit_code_for(e)

    print()
    print("Summary:")
    print(f"  Pairs: {len(dataset):,}")
    print(f"  Resolution: {dataset.height}x{dataset.width}, channels: {dataset.channels}")
    print(f"  Classes: {dataset.num_classes}")
    counts = dataset.metadata.groupby(["class", "mode_id"]).size()
    print("  Images per (class, mode):")
    for (class_id, mode_id), count in counts.items():
        print(f"    class {class_id} mode {mode_id}: {count:,}")
    print(f"  Output: {out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
