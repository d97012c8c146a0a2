"""Run the desk-scale comparison (full symmetry set vs identity only) and print the trend checks.

Usage: python3 scripts/desk_experiment.py OUT_DIR [--threads N]
"""
import argparse
import json
import logging

import numpy as np

from canonlift.experiments import DeskConfig, run_desk, smoothed, sweep_iou


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    s = run_desk(DeskConfig(), args.out, threads=args.threads)
    sym_r, idn_r = s["symmetric"]["metrics"], s["identity"]["metrics"]
    losses = smoothed(s["symmetric"]["epoch_losses"])
    print(f"epoch losses: {np.round(losses, 4).tolist()}")
    print(f"strictly decreasing: {bool(np.all(np.diff(losses) < 0))}")
    print(f"mean IoU (4 views): {sym_r['mean_iou']:.3f}  identity ablation: {idn_r['mean_iou']:.3f}")
    for cls in ("table_rot4", "bench_rot2"):
        a, b = sweep_iou(sym_r, 1, cls), sweep_iou(idn_r, 1, cls)
        print(f"{cls} at 1 view: symmetric {a:.3f}  identity {b:.3f}  margin {a - b:+.3f}")
    print("view sweep:", json.dumps({n: round(sweep_iou(sym_r, n), 3) for n in (1, 2, 3, 4)}))
    print(f"total time {s['timings']['total'] / 60:.1f} min")


if __name__ == "__main__":
    main()
