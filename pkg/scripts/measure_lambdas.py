"""Report the weighted loss-term magnitudes from a training loss trace.

The shipped loss weights are all 1.0. This script checks that, after the
type-weight warm-up, every weighted term stays within a factor of 5 of the
others. Run it on the loss CSV written by ``canonlift train`` or by
scripts/desk_experiment.py.

Usage: python3 scripts/measure_lambdas.py LOSS_CSV [--after STEP] [--config run_config.json]
"""
import argparse
import csv
import json

import numpy as np

from canonlift.trainer import LOSS_NAMES, TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("trace")
    ap.add_argument("--after", type=int, default=None, help="first step to include (default: warm-up end)")
    ap.add_argument("--config", help="run_config.json holding the train section")
    args = ap.parse_args()
    cfg = TrainConfig()
    if args.config:
        with open(args.config) as fh:
            cfg = TrainConfig(**json.load(fh)["train"])
    start = cfg.type_warmup_steps if args.after is None else args.after
    with open(args.trace) as fh:
        rows = [r for r in csv.DictReader(fh) if int(r["step"]) >= start]
    if not rows:
        raise SystemExit(f"no trace rows at or after step {start}")
    lam = cfg.lambdas
    mags = {k: lam[k] * float(np.mean([float(r[k]) for r in rows])) for k in LOSS_NAMES}
    for k, v in mags.items():
        print(f"{k:<9} lambda {lam[k]:.2f}  weighted mean {v:.4f}")
    ratio = max(mags.values()) / min(mags.values())
    print(f"steps {start}..{rows[-1]['step']}: largest/smallest = {ratio:.2f} "
          f"({'within' if ratio <= 5 else 'outside'} a factor of 5)")


if __name__ == "__main__":
    main()
