#!/usr/bin/env python3
"""
Draw samples from a trained generator for one semantic layout.

Sample t uses the t-th latent of --seed, so reruns with the same seed
produce identical files. Writes sample_000.<fmt> ... and mosaic.<fmt>
(row-major by sample index).

Usage:
    python sample_images.py --checkpoint runs/layout/final.ckpt \
        --layout layout.ciml --samples 9 --seed 7 --out samples/
    python sample_images.py --checkpoint runs/gmm/final.ckpt --condition 2 --samples 16
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from cimle_core import (
    EXIT_OK,
    CimleError,
    SemanticLayout,
    configure_logging,
    exit_code_for,
    one_hot_encode,
    read_container,
)
from evaluation import condition_layout, mosaic, save_image
from generator import generate, load_checkpoint, noise_for_seed


def parse_args(argv=None):
    parser = argparse.ArgumentParser(
        description="Sample images from a conditional IMLE checkpoint"
    )
    parser.add_argument(
        "--checkpoint",
        required=True,
        help="Generator checkpoint (.ckpt)"
    )
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument(
        "--layout", "-l",
        help="CIML1 label map (H x W, or the first map of a stack)"
    )
    group.add_argument(
        "--condition",
        type=int,
        help="Fill the whole layout with this class id instead"
    )
    parser.add_argument(
        "--samples", "-n",
        type=int,
        default=9,
        help="Number of samples (default: 9)"
    )
    parser.add_argument(
        "--seed",
        type=int,
        default=0,
        help="Latent seed (default: 0)"
    )
    parser.add_argument(
        "--out", "-o",
        default="samples",
        help="Output directory (default: samples)"
    )
    parser.add_argument(
        "--format",
        choices=["ppm", "png"],
        default="ppm",
        help="Image format (default: ppm)"
    )
    return parser.parse_args(argv)


def read_layout(path, spec):
    labels = read_container(path)
    if labels.ndim == 3:
        labels = labels[0]
    return one_hot_encode(labels, spec.input_classes)


def resolve_layout(args, spec):
    if args.layout is not None:
        return read_layout(args.layout, spec)
    return SemanticLayout(condition_layout(spec, args.condition))


def main(argv=None):
    args = parse_args(argv)
    configure_logging()

    if args.samples < 0:
        print("ERROR: --samples must be >= 0", file=sys.stderr)
        return exit_code_for(ValueError("negative sample count"))

    try:
        state, metadata = load_checkpoint(args.checkpoint)
        layout = resolve_layout(args, state.spec)
    except (CimleError, FileNotFoundError, ValueError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return exit_code_for(e)

    print("Sampling")
    print(f"  Checkpoint: {args.checkpoint} (epoch {metadata.get('epoch', '?')})")
    print(f"  Samples: {args.samples}, seed: {args.seed}")
    print(f"  Output: {args.out}")

    if args.samples == 0:
        print("Nothing to sample.")
        return EXIT_OK

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = []
    for t in range(args.samples):
        image = generate(state, layout, noise_for_seed(state.spec, args.seed, t))
        save_image(out_dir / f"sample_{t:03d}.{args.format}", image)
        images.append(image)
    save_image(out_dir / f"mosaic.{args.format}", mosaic(images))

    print()
    print("Summary:")
    print(f"  Wrote {len(images)} samples and mosaic.{args.format} to {out_dir}")
    spread = np.std(np.stack([img.data for img in images]), axis=0).mean()
    print(f"  Mean per-pixel std across samples: {spread:.4f}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
