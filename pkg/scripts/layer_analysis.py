#!/usr/bin/env python3
"""Representation analysis of a trained checkpoint.

Writes ed_profile.csv (per-block consistency/diversity EDs and compression
ratio), probe.csv (per-block linear separability) and info.csv (Gaussian
mixture information breakdown of the classifier scores).
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from sffc import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", default="runs/desk/checkpoint.sffc")
    ap.add_argument("--output-dir", default="runs/analysis")
    ap.add_argument("--probe-blocks", type=int, nargs="*", default=[1, 2])
    ap.add_argument("--mc-samples", type=int, default=100000)
    args = ap.parse_args()

    status = cli.main(["analyze-ed", "--checkpoint", args.checkpoint,
                       "--output-dir", args.output_dir])
    if status:
        return status
    if args.probe_blocks:
        status = cli.main(["probe", "--checkpoint", args.checkpoint,
                           "--output-dir", args.output_dir,
                           "--blocks", *[str(b) for b in args.probe_blocks]])
        if status:
            return status
    return cli.main(["analyze-info", "--checkpoint", args.checkpoint,
                     "--output-dir", args.output_dir, "--blocks", "3",
                     "--mc-samples", str(args.mc_samples)])


if __name__ == "__main__":
    sys.exit(main())
