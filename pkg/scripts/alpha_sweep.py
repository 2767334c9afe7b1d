#!/usr/bin/env python3
"""Trade-off sweep: train block 1 at each alpha, record kernel orthogonality.

The cosine orthogonality score stays near 1 up to alpha = 0.5 and collapses
beyond it as channel kernels degenerate onto a shared pattern.
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from sffc import cli, dataio, synth


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data-dir", default="runs/digits-data")
    ap.add_argument("--output-dir", default="runs/alpha-sweep")
    ap.add_argument("--grid", default="0:1:0.1")
    ap.add_argument("--epochs", type=int, default=3)
    args = ap.parse_args()

    if dataio.validate_dataset_dir(args.data_dir, "mnist", strict_sizes=False):
        synth.write_digit_dataset(args.data_dir, 10000, 2000, seed=0)

    overrides = [
        f"data.dir={args.data_dir}",
        "data.train_subset=10000",
        "channel_scale=" + repr(1 / 3),
        "goodness.n_copies=10",
        f"phase1_epochs={args.epochs}",
    ]
    return cli.main(["sweep-alpha", "--grid", args.grid, "--block", "1",
                     "--output-dir", args.output_dir, "--overrides", *overrides])


if __name__ == "__main__":
    sys.exit(main())
