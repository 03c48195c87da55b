#!/usr/bin/env python3
"""
Train a conditional IMLE generator from an experiment config.

Writes to the output directory:
  resolved_config.txt          every key, sorted; reproduces the run on its own
  training_log.csv             epoch, mean_matched_distance, mean_inner_loss
  timings.csv                  epoch, wallclock_ms
  checkpoint_epochNNNN.ckpt    every checkpoint_every epochs (if > 0)
  final.ckpt                   parameters after the last epoch
  diverged.ckpt                last finite parameters if training diverged

Exit codes: 0 ok, 2 bad config or missing dataset, 3 divergence, 4 corrupt input.

Usage:
    python train_imle.py --config configs/layout.cfg --out runs/layout --workers 4
"""

import argparse
import os
import sys
from pathlib import Path

from cimle_core import (
    EXIT_OK,
    CimleError,
    DivergenceError,
    configure_logging,
    exit_code_for,
)
from experiment_config import load_config, write_snapshot
from generator import save_checkpoint
from imle import ConditionalImleTrainer, run_metadata


def parse_args(argv=None):
    parser = argparse.ArgumentParser(
        description="Train a conditional IMLE generator"
    )
    parser.add_argument(
        "--config", "-c",
        required=True,
        help="Experiment config file (key = value lines)"
    )
    parser.add_argument(
        "--seed",
        type=int,
        default=None,
        help="Override the training seed from the config"
    )
    parser.add_argument(
        "--out", "-o",
        default=None,
        help="Override output_dir from the config"
    )
    parser.add_argument(
        "--workers", "-w",
        type=int,
        default=os.cpu_count() or 1,
        help="Threads for the matching phase (default: available cores)"
    )
    return parser.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    configure_logging()

    try:
        config = load_config(args.config, seed=args.seed, output_dir=args.out)
        out_dir = Path(config.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_snapshot(config, out_dir / "resolved_config.txt")

        print("Conditional IMLE training")
        print(f"  Config: {args.config}")
        print(f"  Task: {config.task}")
        print(f"  Output: {out_dir}")
        print(f"  Epochs: {config.epochs}, |S|={config.batch_size}, m={config.samples_per_example}, "
              f"K={config.inner_steps}, |S~|={config.inner_batch_size}, eta={config.learning_rate}")
        print(f"  Distance: {config.distance}, rebalance: {config.rebalance}")
        print(f"  Workers: {args.workers}")
        print()

        print("Building dataset...")
        dataset = config.build_dataset()
        print(f"  {len(dataset):,} pairs at {dataset.height}x{dataset.width}, "
              f"{dataset.num_classes} classes")

        trainer = ConditionalImleTrainer(
            dataset, config.generator_spec(), config.train_config(workers=max(1, args.workers))
        )
        print(f"  Generator parameters: {trainer.state.num_params:,}")
        print()

        def on_checkpoint(epoch, state):
            path = out_dir / f"checkpoint_epoch{epoch:04d}.ckpt"
            save_checkpoint(path, state, run_metadata(trainer.distance, epoch))
            print(f"  Checkpoint: {path}")

        print("Training...")
        try:
            result = trainer.run(on_checkpoint)
        except DivergenceError as e:
            path = out_dir / "diverged.ckpt"
            if e.state is not None:
                save_checkpoint(path, e.state, run_metadata(trainer.distance, e.epoch))
            print(f"ERROR: training diverged: {e}", file=sys.stderr)
            print(f"  Last finite parameters: {path}", file=sys.stderr)
            return exit_code_for(e)

        result.log.to_csv(out_dir / "training_log.csv", index=False, float_format="%.17g")
        result.timings.to_csv(out_dir / "timings.csv", index=False, float_format="%.3f")
        final = out_dir / "final.ckpt"
        save_checkpoint(final, result.state, run_metadata(result.distance, config.epochs))
    except (CimleError, FileNotFoundError, ValueError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return exit_code_for(e)

    print()
    print("Summary:")
    print(f"  Epochs run: {len(result.log)}")
    if len(result.log):
        last = result.log.iloc[-1]
        print(f"  Final mean matched distance: {last['mean_matched_distance']:.6g}")
        print(f"  Final mean inner loss: {last['mean_inner_loss']:.6g}")
        print(f"  Total time: {result.timings['wallclock_ms'].sum() / 1000.0:.1f} s")
    print(f"  Training log: {out_dir / 'training_log.csv'}")
    print(f"  Checkpoint: {final}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
