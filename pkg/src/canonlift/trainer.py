"""Model composition, the joint objective, training loop and metrics."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import symmetry as sym
from .aggregate import AggregateGrid, Refiner, ViewLift, average, lift_view, refine
from .canonical import CoordinateField, coord_loss, mix_probs, predict_coords, spurious_loss
from .diffcore import ops
from .diffcore.nn import Adam, AdamConfig, ParametricMap, load_checkpoint, save_checkpoint
from .diffcore.tape import Buffer, ParamStore, Tape
from .heads import (Camera, RenderSettings, decode, occupancy_loss, predict_occupancy, project,
                    view_synthesis_loss)
from .scenes import CLASS_NAMES, Instance, RenderSample, config_hash
from .voxelgrid import GridSpec

log = logging.getLogger(__name__)

LOSS_NAMES = ("coord", "spurious", "vol", "vs")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_c: float = 1.0
    lambda_s: float = 1.0
    lambda_vol: float = 1.0
    lambda_vs: float = 1.0
    lr: float = 3e-3
    min_lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 10
    batch_size: int = 4
    input_views: int = 4
    supervision_views: int = 5
    grid: int = 16
    feature_dim: int = 8
    active_set: list[str] = field(default_factory=lambda: [t.value for t in sym.ALL_TYPES])
    samples: int = 8
    decouple: bool = True
    normalize_weight_input: bool = False
    seed: int = 0
    coord_hidden: int = 64
    feature_hidden: int = 32
    refine_hidden: int = 16
    head_hidden: int = 16
    ray_grid: int = 16
    depth_samples: int = 16
    output_size: int = 32
    input_scale: float = 4.0
    type_warmup_steps: int = 600
    max_bad_steps: int = 3

    def __post_init__(self):
        lambdas = (self.lambda_c, self.lambda_s, self.lambda_vol, self.lambda_vs)
        if any(v < 0 for v in lambdas) or not any(v > 0 for v in lambdas):
            raise ValueError("loss weights must be non-negative with at least one positive")
        sym.SymmetryConfig.from_names(self.active_set, sample_count=self.samples)

    @property
    def symmetry(self) -> sym.SymmetryConfig:
        return sym.SymmetryConfig.from_names(self.active_set, sample_count=self.samples,
                                             rng_seed=self.seed)

    @property
    def render(self) -> RenderSettings:
        return RenderSettings(self.ray_grid, self.depth_samples, self.output_size)

    @property
    def lambdas(self) -> dict[str, float]:
        return {"coord": self.lambda_c, "spurious": self.lambda_s, "vol": self.lambda_vol,
                "vs": self.lambda_vs}

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


class TwoTower:
    """Pixel predictor with separate coordinate/probability and feature maps.

    Output layout per pixel: [|G| * 3 coordinates, |G| logits, D features].
    Keeping the towers apart means the feature loss path never touches the
    coordinate parameters. Inputs are centred at 0.5 and multiplied by
    ``input_scale`` first; texture differences are small in raw colour units.
    """

    def __init__(self, coord_net: ParametricMap, feature_net: ParametricMap,
                 input_scale: float = 1.0):
        if coord_net.input_dim != feature_net.input_dim:
            raise ValueError("towers must share the input dimension")
        self.coord_net = coord_net
        self.feature_net = feature_net
        self.input_scale = input_scale
        self.input_dim = coord_net.input_dim
        self.output_dim = coord_net.output_dim + feature_net.output_dim

    def apply(self, tape: Tape, x: Buffer) -> Buffer:
        if self.input_scale != 1.0:
            shift = tape.constant(np.full((1, x.shape[1]), -0.5))
            x = ops.scale(ops.add(x, shift), self.input_scale)
        return ops.concat([self.coord_net.apply(tape, x), self.feature_net.apply(tape, x)], axis=1)


@dataclass
class ForwardResult:
    fields: list[CoordinateField]
    lifts: list[ViewLift]
    aggregate: AggregateGrid
    refined: Buffer
    occ_logits: Buffer
    occ_probs: Buffer
    renders: list[Buffer]


def view_rng(base: int, view: RenderSample) -> np.random.Generator:
    """Closure-sampling stream keyed by the view's pixels, not its position,
    so reordering the input views leaves the lifted grids unchanged."""
    h = hashlib.blake2b(view.image.tobytes(), digest_size=8)
    h.update(np.packbits(view.mask).tobytes())
    return np.random.default_rng([base, int.from_bytes(h.digest(), "little")])


class Model:
    def __init__(self, cfg: TrainConfig, params: ParamStore | None = None):
        self.cfg = cfg
        self.types = cfg.symmetry.active_set
        self.spec = GridSpec(cfg.grid, cfg.feature_dim)
        self.params = ParamStore(np.float32)
        rng = np.random.default_rng([cfg.seed, 17])
        g, d = len(self.types), cfg.feature_dim
        self.coord_net = ParametricMap(self.params, "coord", [5, cfg.coord_hidden, cfg.coord_hidden, 4 * g],
                                       ["relu", "relu", "none"], rng)
        self.feature_net = ParametricMap(self.params, "feature", [5, cfg.feature_hidden, d],
                                         ["relu", "none"], rng)
        self.predictor = TwoTower(self.coord_net, self.feature_net, cfg.input_scale)
        self.refiner = Refiner.default(self.params, d, cfg.refine_hidden, rng)
        self.occ_head = ParametricMap(self.params, "occupancy", [2 * d, cfg.head_hidden, 1],
                                      ["relu", "none"], rng)
        self.occlusion = ParametricMap(self.params, "occlusion", [d + 1, cfg.head_hidden, 1],
                                       ["relu", "none"], rng)
        self.decoder = ParametricMap(self.params, "decoder", [d, cfg.head_hidden, 3],
                                     ["relu", "none"], rng)
        if params is not None:
            self.params.load(params.values)

    def coordinate_param_names(self) -> list[str]:
        return self.coord_net.param_names()

    def feature_param_names(self) -> list[str]:
        return self.feature_net.param_names()

    def forward(self, tape: Tape, views: Sequence[RenderSample], cameras: Sequence[Camera],
                rng: np.random.Generator, decouple: bool | None = None,
                images: Sequence[Buffer] | None = None) -> ForwardResult:
        cfg = self.cfg
        decouple = cfg.decouple if decouple is None else decouple
        fields, lifts = [], []
        base = int(rng.integers(2 ** 63))
        for k, view in enumerate(views):
            img = images[k] if images is not None else tape.constant(view.image)
            f = predict_coords(self.predictor, tape, img, view.mask, self.types)
            fields.append(f)
            lifts.append(lift_view(f, self.spec, cfg.symmetry, decouple, view_rng(base, view)))
        agg = average(lifts)
        v = refine(self.refiner, tape, agg, cfg.normalize_weight_input)
        logits, probs = predict_occupancy(self.occ_head, tape, v, cfg.grid)
        renders = []
        for cam in cameras:
            proj = project(tape, v, self.spec, cam, self.occlusion, cfg.render)
            renders.append(decode(self.decoder, tape, proj.features, cfg.render))
        return ForwardResult(fields, lifts, agg, v, logits, probs, renders)


# objective -------------------------------------------------------------------------------

def total_loss(parts: dict[str, Buffer], lambdas: dict[str, float]) -> Buffer:
    """Σ λ_i L_i over the terms with a positive weight."""
    terms = [(lambdas[k], parts[k]) for k in LOSS_NAMES if lambdas.get(k, 0.0) > 0 and k in parts]
    if not terms:
        raise ValueError("no loss term has a positive weight")
    return ops.weighted_sum(terms)


def loss_parts(model: Model, tape: Tape, inst: Instance, rng: np.random.Generator,
               decouple: bool | None = None, num_views: int | None = None,
               images: Sequence[Buffer] | None = None,
               type_mix: float = 0.0) -> tuple[dict[str, Buffer], ForwardResult]:
    """The four loss terms for one instance; ``type_mix`` feeds :func:`mix_probs`."""
    cfg = model.cfg
    views = inst.inputs[:num_views or cfg.input_views]
    sup = inst.supervision[:cfg.supervision_views]
    res = model.forward(tape, views, [s.camera for s in sup], rng, decouple, images)
    oracle = inst.oracle
    lc, ls = [], []
    for f, view in zip(res.fields, views):
        gt = view.gt_coords.reshape(-1, 3)[f.pixel_index]
        f = mix_probs(f, type_mix)
        lc.append(coord_loss(f, gt))
        ls.append(spurious_loss(f, oracle, cfg.samples, rng))
    parts = {
        "coord": ops.scale(_add_all(lc), 1.0 / len(lc)),
        "spurious": ops.scale(_add_all(ls), 1.0 / len(ls)),
        "vol": occupancy_loss(res.occ_logits, inst.occupancy.reshape(-1, 1)),
        "vs": view_synthesis_loss(res.renders, [s.image for s in sup]),
    }
    return parts, res


def _add_all(bufs: Sequence[Buffer]) -> Buffer:
    out = bufs[0]
    for b in bufs[1:]:
        out = ops.add(out, b)
    return out


# training ---------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    trace: list[dict]
    epoch_losses: list[float]
    skipped_steps: int


def lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    """Cosine decay from lr to min_lr."""
    if total <= 1:
        return cfg.lr
    frac = step / (total - 1)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1 + math.cos(math.pi * frac))


def type_mix_at(cfg: TrainConfig, step: int) -> float:
    """Linear decay of the type-weight warm-up from 1 to 0."""
    if cfg.type_warmup_steps <= 0:
        return 0.0
    return max(0.0, 1.0 - step / cfg.type_warmup_steps)


def train_step(model: Model, batch: Sequence[Instance], optimizer: Adam, rng: np.random.Generator,
               lr: float, type_mix: float = 0.0) -> dict[str, float] | None:
    """One optimizer step over a batch; returns None when the loss was not finite."""
    store = model.params
    store.zero_grad()
    sums = {k: 0.0 for k in (*LOSS_NAMES, "total")}
    for inst in batch:
        tape = Tape(np.float32, store)
        parts, _ = loss_parts(model, tape, inst, rng, type_mix=type_mix)
        tot = total_loss(parts, model.cfg.lambdas)
        if not np.isfinite(tot.item()):
            return None
        tape.backward(ops.scale(tot, 1.0 / len(batch)))
        for k in LOSS_NAMES:
            sums[k] += parts[k].item() / len(batch)
        sums["total"] += tot.item() / len(batch)
    report = optimizer.step(lr)
    if report.skipped:
        log.warning("skipped non-finite gradients for %s", report.skipped)
    return sums


def run_training(train_set: Sequence[Instance], cfg: TrainConfig, log_every: int = 0) -> TrainResult:
    if not train_set:
        raise ValueError("empty training set")
    model = Model(cfg)
    opt = Adam(model.params, AdamConfig(cfg.lr, cfg.beta1, cfg.beta2))
    rng = np.random.default_rng([cfg.seed, 23])
    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    trace, epoch_losses = [], []
    step, bad, skipped = 0, 0, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        tot_epoch = []
        for b in range(steps_per_epoch):
            batch = [train_set[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            lr = lr_at(cfg, step, total)
            losses = train_step(model, batch, opt, rng, lr, type_mix_at(cfg, step))
            if losses is None:
                bad += 1
                skipped += 1
                log.warning("non-finite loss at step %d, skipped", step)
                if bad >= cfg.max_bad_steps:
                    raise TrainingError(f"{bad} consecutive non-finite steps, aborting at {step}")
            else:
                bad = 0
                trace.append({"epoch": epoch, "step": step, "lr": lr, **losses})
                tot_epoch.append(losses["total"])
                if log_every and step % log_every == 0:
                    log.info("epoch %d step %d total %.4f (c %.4f s %.4f vol %.4f vs %.4f)", epoch,
                             step, losses["total"], losses["coord"], losses["spurious"],
                             losses["vol"], losses["vs"])
            step += 1
        epoch_losses.append(float(np.mean(tot_epoch)) if tot_epoch else float("nan"))
        log.info("epoch %d mean total loss %.5f", epoch, epoch_losses[-1])
    return TrainResult(model, trace, epoch_losses, skipped)


def save_model(path, model: Model) -> None:
    save_checkpoint(path, model.params.values)


def load_model(path, cfg: TrainConfig) -> Model:
    model = Model(cfg)
    model.params.load(load_checkpoint(path))
    return model


def write_trace_csv(path, trace: Sequence[dict]) -> None:
    cols = ["epoch", "step", "lr", "total", *LOSS_NAMES]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in trace:
            w.writerow({k: row[k] for k in cols})


# metrics ------------------------------------------------------------------------------------

DEFAULT_THRESHOLDS = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))


def iou_at(pred: np.ndarray, gt: np.ndarray, threshold: float) -> float:
    p = pred >= threshold
    g = gt.astype(bool)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def eval_iou(pred, gt, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> tuple[float, float]:
    """Best IoU over the threshold sweep and the (first) threshold achieving it.

    Binarisation keeps voxels with probability >= threshold.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if len(thresholds) == 0:
        raise ValueError("need at least one threshold")
    best, best_t = -1.0, float(thresholds[0])
    for t in thresholds:
        v = iou_at(pred, gt, t)
        if v > best:
            best, best_t = v, float(t)
    return best, best_t


def eval_l1(renders: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> float:
    """Mean absolute image error scaled by 100."""
    if len(renders) != len(targets) or not renders:
        raise ValueError("need one target per render")
    errs = []
    for r, t in zip(renders, targets):
        if r.shape != t.shape:
            raise ValueError(f"shape mismatch: {r.shape} vs {t.shape}")
        errs.append(np.abs(np.asarray(r, np.float64) - np.asarray(t, np.float64)).mean())
    return 100.0 * float(np.mean(errs))


@dataclass
class Prediction:
    cls: str
    occupancy: np.ndarray
    gt_occupancy: np.ndarray
    renders: list[np.ndarray]
    targets: list[np.ndarray]


def predict_instance(model: Model, inst: Instance, num_views: int, seed: int = 0) -> Prediction:
    tape = Tape(np.float32, model.params, grad=False)
    rng = np.random.default_rng([seed, inst.spec.seed % (2 ** 32), num_views])
    sup = inst.supervision[:model.cfg.supervision_views]
    res = model.forward(tape, inst.inputs[:num_views], [s.camera for s in sup], rng)
    c = model.cfg.grid
    return Prediction(inst.spec.cls, res.occ_probs.data.reshape(c, c, c), inst.occupancy,
                      [r.data for r in res.renders], [s.image for s in sup])


def summarize(preds: Sequence[Prediction], thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
              threshold: float | None = None) -> dict:
    """Per-class and mean IoU at one dataset-wide threshold (best mean if not given)."""
    if not preds:
        raise ValueError("no predictions to summarise")
    classes = [c for c in CLASS_NAMES if any(p.cls == c for p in preds)]
    table = np.array([[iou_at(p.occupancy, p.gt_occupancy, t) for t in thresholds] for p in preds])
    labels = np.array([p.cls for p in preds])
    class_means = np.array([table[labels == c].mean(axis=0) for c in classes])
    if threshold is None:
        ti = int(np.argmax(class_means.mean(axis=0)))
    else:
        ti = int(np.argmin(np.abs(np.asarray(thresholds) - threshold)))
    l1 = np.array([eval_l1(p.renders, p.targets) for p in preds])
    per_class = {c: {"iou": float(class_means[i, ti]), "l1": float(l1[labels == c].mean())}
                 for i, c in enumerate(classes)}
    return {
        "per_class": per_class,
        "mean_iou": float(np.mean([v["iou"] for v in per_class.values()])),
        "mean_l1": float(np.mean([v["l1"] for v in per_class.values()])),
        "threshold": float(thresholds[ti]),
    }


def evaluate(model: Model, instances: Sequence[Instance], views: Sequence[int] | None = None,
             seed: int = 0, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> dict:
    """Metrics with all input views plus an optional per-view-count sweep."""
    k = model.cfg.input_views
    counts = sorted(set(views or [])) if views else []
    for n in counts:
        if n < 1 or n > min(len(i.inputs) for i in instances):
            raise ValueError(f"view count {n} not available")
    cache = {n: [predict_instance(model, inst, n, seed) for inst in instances] for n in set(counts) | {k}}
    report = summarize(cache[k], thresholds)
    report["config_hash"] = model.cfg.hash()
    report["views"] = k
    report["view_sweep"] = []
    for n in counts:
        s = summarize(cache[n], thresholds)
        report["view_sweep"].append({"views": n, **s})
    return report


def eval_view_sweep(model: Model, instances: Sequence[Instance], counts: Sequence[int],
                    seed: int = 0) -> list[dict]:
    return evaluate(model, instances, counts, seed)["view_sweep"]


def write_metrics(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))
    rows = [("all", report["views"], "mean", report["mean_iou"], report["mean_l1"], report["threshold"])]
    for c, v in report["per_class"].items():
        rows.append(("all", report["views"], c, v["iou"], v["l1"], report["threshold"]))
    for s in report.get("view_sweep", []):
        rows.append(("sweep", s["views"], "mean", s["mean_iou"], s["mean_l1"], s["threshold"]))
        for c, v in s["per_class"].items():
            rows.append(("sweep", s["views"], c, v["iou"], v["l1"], s["threshold"]))
    with open(Path(path).with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["section", "views", "class", "iou", "l1", "threshold"])
        w.writerows(rows)
