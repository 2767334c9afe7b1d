#!/usr/bin/env python3
"""Desk-scale end-to-end run: third-width network, 10 noisy copies.

Uses real MNIST IDX files when --data-dir points at them, otherwise writes
the bundled synthetic digit set there first.  Takes roughly half an hour on
a 2-core box; expect validation accuracy well above 95%.
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from sffc import cli, dataio, synth


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data-dir", default="runs/digits-data")
    ap.add_argument("--output-dir", default="runs/desk")
    ap.add_argument("--train-subset", type=int, default=10000)
    ap.add_argument("--val-subset", type=int, default=2000)
    args = ap.parse_args()

    if dataio.validate_dataset_dir(args.data_dir, "mnist", strict_sizes=False):
        print(f"no usable IDX files in {args.data_dir}; writing synthetic digits")
        synth.write_digit_dataset(args.data_dir, max(args.train_subset, 10000), 10000, seed=0)

    overrides = [
        f"data.dir={args.data_dir}",
        f"data.train_subset={args.train_subset}",
        f"data.val_subset={args.val_subset}",
        "channel_scale=" + repr(1 / 3),
        "goodness.n_copies=10",
        "phase1_epochs=2",
        "phase2_epochs=20",
    ]
    return cli.main(["train", "--output-dir", args.output_dir, "--overrides", *overrides])


if __name__ == "__main__":
    sys.exit(main())
