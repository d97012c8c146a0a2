"""Desk-scale end-to-end experiment: full model against the identity-only ablation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .scenes import DataConfig, Instance, generate_dataset, read_dataset, write_dataset
from .trainer import TrainConfig, evaluate, run_training, save_model, write_metrics, write_trace_csv

log = logging.getLogger(__name__)


@dataclass
class DeskConfig:
    data: DataConfig = field(default_factory=lambda: DataConfig(count=143, grid=16))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=12, grid=16, feature_dim=8))
    views: tuple[int, ...] = (1, 2, 3, 4)
    eval_split: str = "test"

    def to_dict(self) -> dict:
        return {"data": self.data.to_dict(), "train": self.train.to_dict(), "views": list(self.views),
                "eval_split": self.eval_split}


def ablation_config(cfg: TrainConfig) -> TrainConfig:
    return replace(cfg, active_set=["identity"])


def smoothed(values, window: int = 1) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if window <= 1:
        return v
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")


def load_or_generate(cfg: DataConfig, path: Path | None, threads: int = 1) -> list[Instance]:
    if path is not None and (path / "manifest.json").exists():
        manifest = json.loads((path / "manifest.json").read_text())
        if manifest.get("config_hash") == cfg.hash():
            return read_dataset(path)[0]
        log.info("dataset at %s has a different config, regenerating", path)
    data = generate_dataset(cfg, threads)
    if path is not None:
        write_dataset(path, data, cfg)
    return data


def run_desk(cfg: DeskConfig | None = None, out_dir=None, threads: int = 1) -> dict:
    """Train both models, evaluate the view sweep and return a summary dict."""
    cfg = cfg or DeskConfig()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    t0 = time.perf_counter()
    data = load_or_generate(cfg.data, out / "dataset" if out is not None else None, threads)
    train = [d for d in data if d.split == "train"]
    held = [d for d in data if d.split == cfg.eval_split]
    timings = {"data": time.perf_counter() - t0}
    summary: dict = {"train_instances": len(train), "eval_instances": len(held)}
    for name, tcfg in (("symmetric", cfg.train), ("identity", ablation_config(cfg.train))):
        t = time.perf_counter()
        res = run_training(train, tcfg)
        timings[f"train_{name}"] = time.perf_counter() - t
        t = time.perf_counter()
        report = evaluate(res.model, held, cfg.views)
        timings[f"eval_{name}"] = time.perf_counter() - t
        summary[name] = {"epoch_losses": res.epoch_losses, "skipped_steps": res.skipped_steps,
                         "metrics": report}
        if out is not None:
            save_model(out / f"{name}.clpm", res.model)
            write_trace_csv(out / f"{name}_loss.csv", res.trace)
            write_metrics(out / f"{name}_metrics.json", report)
        log.info("%s: mean IoU %.3f, mean L1x100 %.2f", name, report["mean_iou"], report["mean_l1"])
    timings["total"] = time.perf_counter() - t0
    summary["timings"] = timings
    if out is not None:
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def sweep_iou(report: dict, views: int, cls: str | None = None) -> float:
    for s in report["view_sweep"]:
        if s["views"] == views:
            return s["mean_iou"] if cls is None else s["per_class"][cls]["iou"]
    raise KeyError(f"no sweep entry for {views} views")
