"""``canonlift`` command line: gen-data, train, eval, gradcheck, render, inspect.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 check failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .diffcore.nn import CheckpointError
from .scenes import CLASS_NAMES, DataConfig, DatasetFormatError, config_hash
from .trainer import TrainConfig
from .voxelgrid import GridFormatError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
RUN_CONFIG = "run_config.json"

log = logging.getLogger("canonlift")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# configuration ---------------------------------------------------------------------------

SECTIONS = {"data": DataConfig, "train": TrainConfig}


def default_config() -> dict:
    return {name: dataclasses.asdict(cls()) for name, cls in SECTIONS.items()}


def valid_keys() -> list[str]:
    return [f"{s}.{k}" for s, cfg in default_config().items() for k in cfg]


def _coerce(text: str, like):
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {text!r}")
    if isinstance(like, (list, tuple)):
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = [t.strip() for t in text.split(",") if t.strip()]
        if not isinstance(value, list):
            value = [value]
        return value
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def apply_override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise UsageError(f"override {item!r} must look like section.key=value")
    key, text = item.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2 or parts[0] not in cfg or parts[1] not in cfg[parts[0]]:
        raise UsageError(f"unknown config key {key!r}; valid keys: {', '.join(valid_keys())}")
    sec, name = parts
    try:
        cfg[sec][name] = _coerce(text, cfg[sec][name])
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {exc}") from exc


def merge_file(cfg: dict, path: str) -> None:
    p = Path(path)
    if not p.exists():
        raise DataError(f"config file not found: {p}")
    try:
        loaded = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc})") from exc
    for sec, values in loaded.items():
        if sec in ("hash", "command"):
            continue
        if sec not in cfg or not isinstance(values, dict):
            raise UsageError(f"unknown config section {sec!r}; valid sections: {', '.join(cfg)}")
        for k, v in values.items():
            if k not in cfg[sec]:
                raise UsageError(f"unknown config key '{sec}.{k}'; valid keys: {', '.join(valid_keys())}")
            cfg[sec][k] = v


def resolve_config(args) -> dict:
    cfg = default_config()
    if getattr(args, "config", None):
        merge_file(cfg, args.config)
    for item in getattr(args, "set", None) or []:
        apply_override(cfg, item)
    return cfg


def build(cfg: dict) -> tuple[DataConfig, TrainConfig]:
    try:
        return DataConfig(**cfg["data"]), TrainConfig(**cfg["train"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def write_run_config(out: Path, command: str, cfg: dict) -> str:
    h = config_hash(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / RUN_CONFIG).write_text(json.dumps({"command": command, **cfg, "hash": h}, indent=2,
                                             sort_keys=True))
    return h


def threads_from(args) -> int:
    if getattr(args, "threads", None):
        return max(1, int(args.threads))
    env = os.environ.get("CANONLIFT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise UsageError(f"CANONLIFT_THREADS must be an integer, got {env!r}") from exc
    return 1


def _views(text: str | None) -> list[int]:
    if not text:
        return []
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--views expects comma-separated integers, got {text!r}") from exc


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _load_data(path, splits=None):
    from .scenes import read_dataset
    root = _require(path, "dataset directory")
    _require(root / "manifest.json", "dataset manifest")
    return read_dataset(root, splits)


def _checkpoint_config(ckpt: Path, cfg: dict, args) -> dict:
    """Use the config stored next to a checkpoint unless one was given explicitly."""
    stored = ckpt.parent / RUN_CONFIG
    if stored.exists() and not getattr(args, "config", None):
        merged = default_config()
        merge_file(merged, str(stored))
        for item in getattr(args, "set", None) or []:
            apply_override(merged, item)
        return merged
    return cfg


def _load_model(ckpt_path, tcfg: TrainConfig):
    from .trainer import load_model
    ckpt = _require(ckpt_path, "checkpoint")
    try:
        return load_model(ckpt, tcfg)
    except KeyError as exc:
        raise DataError(f"{ckpt}: checkpoint does not match the model config ({exc})") from exc


def _pick_instance(instances, key: str):
    if key.isdigit():
        i = int(key)
        if i >= len(instances):
            raise DataError(f"instance index {i} out of range ({len(instances)} instances)")
        return instances[i]
    raise UsageError("--instance must be an index into the dataset")


# subcommands ---------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .scenes import generate_dataset, write_dataset
    cfg = resolve_config(args)
    if args.classes:
        cfg["data"]["classes"] = [c.strip() for c in args.classes.split(",") if c.strip()]
    if args.count is not None:
        cfg["data"]["count"] = args.count
    if args.seed is not None:
        cfg["data"]["seed"] = args.seed
    dcfg, _ = build(cfg)
    out = Path(args.out)
    data = generate_dataset(dcfg, threads_from(args))
    manifest = write_dataset(out, data, dcfg)
    write_run_config(out, "gen-data", {"data": dcfg.to_dict()})
    print(f"wrote {manifest['total']} instances to {out} (config {manifest['config_hash']})")
    for c, n in manifest["counts"].items():
        splits = {s: sum(e["class"] == c and e["split"] == s for e in manifest["instances"])
                  for s in ("train", "val", "test")}
        print(f"  {c:<16} {n:>4}  train {splits['train']} val {splits['val']} test {splits['test']}")
    return EXIT_OK


def _check_grid(manifest: dict, tcfg: TrainConfig) -> None:
    g = manifest["config"]["grid"]
    if g != tcfg.grid:
        raise DataError(f"dataset occupancy grid is {g} but train.grid is {tcfg.grid}")


def cmd_train(args) -> int:
    from .trainer import evaluate, run_training, save_model, write_metrics, write_trace_csv
    cfg = resolve_config(args)
    _, tcfg = build(cfg)
    instances, manifest = _load_data(args.data)
    _check_grid(manifest, tcfg)
    train = [i for i in instances if i.split == "train"]
    if not train:
        raise DataError(f"no 'train' instances in {args.data}")
    held, held_split = [i for i in instances if i.split == args.eval_split], args.eval_split
    if not held:
        held, held_split = train, "train"
    out = Path(args.out)
    h = write_run_config(out, "train", {**cfg, "data": manifest["config"]})
    res = run_training(train, tcfg, log_every=args.log_every)
    save_model(out / "model.clpm", res.model)
    write_trace_csv(out / "loss.csv", res.trace)
    report = evaluate(res.model, held)
    report["run_hash"] = h
    write_metrics(out / "metrics.json", report)
    print(f"trained on {len(train)} instances; mean IoU {report['mean_iou']:.3f}, "
          f"mean L1x100 {report['mean_l1']:.2f} on {len(held)} '{held_split}' instances")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import evaluate, write_metrics
    cfg = resolve_config(args)
    ckpt = _require(args.checkpoint, "checkpoint")
    cfg = _checkpoint_config(ckpt, cfg, args)
    _, tcfg = build(cfg)
    instances, manifest = _load_data(args.data, [args.split])
    _check_grid(manifest, tcfg)
    if not instances:
        raise DataError(f"no '{args.split}' instances in {args.data}")
    model = _load_model(ckpt, tcfg)
    views = _views(args.views)
    avail = min(len(i.inputs) for i in instances)
    if any(v < 1 or v > avail for v in views):
        raise UsageError(f"--views entries must lie in 1..{avail}")
    report = evaluate(model, instances, views)
    out = Path(args.out)
    h = write_run_config(out, "eval", {**cfg, "data": manifest["config"]})
    report["run_hash"] = h
    write_metrics(out / "metrics.json", report)
    print(f"mean IoU {report['mean_iou']:.3f} (threshold {report['threshold']:.2f}), "
          f"mean L1x100 {report['mean_l1']:.2f}")
    for s in report["view_sweep"]:
        print(f"  {s['views']} view(s): IoU {s['mean_iou']:.3f}  L1x100 {s['mean_l1']:.2f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import format_table, run_suite
    names = [n.strip() for n in args.ops.split(",")] if args.ops else None
    try:
        rows = run_suite(range(args.seeds), names, h=args.step, tol=args.tol)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    print(format_table(rows))
    failed = [r.name for r in rows if not r.ok]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_CHECK
    print(f"all {len(rows)} ops pass")
    return EXIT_OK


def _camera_from_args(args, size: int):
    from .heads import Camera
    tr = [float(v) for v in args.translation.split(",")] if args.translation else [0.0, 0.0, 0.0]
    if len(tr) != 3:
        raise UsageError("--translation needs three comma-separated numbers")
    return Camera(args.azimuth, args.elevation, np.array(tr), args.distance, args.focal, (size, size))


def cmd_render(args) -> int:
    from .diffcore.tape import Tape
    from .heads import write_clim, write_ppm
    from .voxelgrid import write_grid
    cfg = resolve_config(args)
    ckpt = _require(args.checkpoint, "checkpoint")
    cfg = _checkpoint_config(ckpt, cfg, args)
    _, tcfg = build(cfg)
    instances, _ = _load_data(args.data)
    inst = _pick_instance(instances, args.instance)
    model = _load_model(ckpt, tcfg)
    cam = _camera_from_args(args, tcfg.output_size)
    tape = Tape(np.float32, model.params, grad=False)
    res = model.forward(tape, inst.inputs[:tcfg.input_views], [cam], np.random.default_rng(args.seed))
    img = res.renders[0].data
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(out, img)
    if args.raw:
        write_clim(out.with_suffix(".clim"), img)
    if args.grid:
        write_grid(out.with_suffix(".cvgf"), res.refined.data, tcfg.grid)
    write_run_config(out.parent, "render", cfg)
    print(f"wrote {out}")
    return EXIT_OK


def _overlay(image: np.ndarray, pixels, color=(1.0, 0.0, 1.0)) -> np.ndarray:
    out = np.array(image, dtype=np.float64, copy=True)
    for r, c in pixels:
        out[r, c] = color
    return out


def cmd_inspect(args) -> int:
    from .analysis import find_correspondences, predict_fields, saliency_backtrace
    from .heads import write_ppm
    cfg = resolve_config(args)
    ckpt = _require(args.checkpoint, "checkpoint")
    cfg = _checkpoint_config(ckpt, cfg, args)
    _, tcfg = build(cfg)
    instances, _ = _load_data(args.data)
    inst = _pick_instance(instances, args.instance)
    model = _load_model(ckpt, tcfg)
    views = inst.inputs[:tcfg.input_views]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cam = inst.supervision[0].camera
    s = tcfg.output_size
    region = np.zeros((s, s), bool)
    r0, c0 = s // 2 - s // 8, s // 2 - s // 8
    region[r0:r0 + s // 4, c0:c0 + s // 4] = True
    for k, m in enumerate(saliency_backtrace(model, views, cam, region)):
        write_ppm(out / f"saliency_view{k}.ppm", m)
    fields = predict_fields(model, views)
    qv = 0
    fg = np.argwhere(views[qv].mask)
    if fg.size == 0:
        raise DataError("query view has no foreground pixels")
    q = tuple(int(v) for v in fg[len(fg) // 2])
    matches = find_correspondences(fields, (qv, q), top_n=args.top)
    for k, v in enumerate(views):
        pix = [m.pixel for m in matches[k]]
        img = _overlay(v.image, pix)
        if k == qv:
            img = _overlay(img, [q], (0.0, 1.0, 0.0))
        write_ppm(out / f"correspondence_view{k}.ppm", img)
    write_run_config(out, "inspect", cfg)
    print(f"query pixel {q} in view {qv}; wrote maps to {out}")
    return EXIT_OK


# parser ---------------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file with 'data' and 'train' sections")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry, e.g. train.lr=0.001 (repeatable)")
    p.add_argument("--threads", type=int, help="worker count (default: $CANONLIFT_THREADS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="canonlift", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a procedural dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", help=f"comma-separated subset of {', '.join(CLASS_NAMES)}")
    p.add_argument("--count", type=int, help="instances per class")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-split", default="val")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--views", help="view counts for the sweep, e.g. 1,2,3,4")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    _common(p)
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--ops", help="comma-separated subset of ops")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("render", help="render a novel view of a dataset instance")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--instance", default="0")
    p.add_argument("--azimuth", type=float, default=30.0)
    p.add_argument("--elevation", type=float, default=20.0)
    p.add_argument("--translation", help="x,y,z")
    p.add_argument("--distance", type=float, default=1.5)
    p.add_argument("--focal", type=float, default=1.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raw", action="store_true", help="also write a CLIM float dump")
    p.add_argument("--grid", action="store_true", help="also write the refined grid as CVGF")
    p.add_argument("--out", required=True, help="output .ppm path")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("inspect", help="saliency and correspondence maps")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--instance", default="0")
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, DatasetFormatError, GridFormatError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
