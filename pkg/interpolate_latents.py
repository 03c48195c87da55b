#!/usr/bin/env python3
"""
Render a straight-line walk between two latents for one layout.

The endpoints are the first latents of --seed-a and --seed-b, the same
draws sample_images.py uses for sample_000, so frame 0 matches that file
byte for byte. Frames are written as frame_000.<fmt>, frame_001.<fmt>, ...
plus a one-row strip.png / strip.ppm.

Usage:
    python interpolate_latents.py --checkpoint runs/layout/final.ckpt \
        --layout layout.ciml --seed-a 1 --seed-b 2 --steps 16 --out interp/
"""

import argparse
import sys
from pathlib import Path

from cimle_core import EXIT_OK, CimleError, configure_logging, exit_code_for
from evaluation import interpolate, mosaic, save_image
from generator import load_checkpoint, noise_for_seed
from sample_images import resolve_layout


def parse_args(argv=None):
    parser = argparse.ArgumentParser(
        description="Interpolate between two latent vectors"
    )
    parser.add_argument("--checkpoint", required=True, help="Generator checkpoint (.ckpt)")
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--layout", "-l", help="CIML1 label map")
    group.add_argument("--condition", type=int, help="Fill the layout with this class id")
    parser.add_argument("--seed-a", type=int, required=True, help="Seed of the first endpoint")
    parser.add_argument("--seed-b", type=int, required=True, help="Seed of the last endpoint")
    parser.add_argument(
        "--steps",
        type=int,
        default=8,
        help="Number of frames including both endpoints (default: 8)"
    )
    parser.add_argument("--out", "-o", default="interpolation", help="Output directory")
    parser.add_argument("--format", choices=["ppm", "png"], default="ppm")
    return parser.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    configure_logging()

    try:
        state, _ = load_checkpoint(args.checkpoint)
        layout = resolve_layout(args, state.spec)
        z_a = noise_for_seed(state.spec, args.seed_a)
        z_b = noise_for_seed(state.spec, args.seed_b)
        frames = interpolate(state, layout, z_a, z_b, args.steps)
    except (CimleError, FileNotFoundError, ValueError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return exit_code_for(e)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    print(f"Interpolating seed {args.seed_a} -> {args.seed_b} in {args.steps} frames")
    for i, frame in enumerate(frames):
        save_image(out_dir / f"frame_{i:03d}.{args.format}", frame)
    save_image(out_dir / f"strip.{args.format}", mosaic(frames, cols=len(frames)))

    print()
    print("Summary:")
    print(f"  Wrote {len(frames)} frames to {out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
