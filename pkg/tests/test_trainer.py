import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from canonlift.diffcore import ops
from canonlift.diffcore.tape import Tape
from canonlift.trainer import (DEFAULT_THRESHOLDS, LOSS_NAMES, Model, TrainingError, eval_iou, eval_l1,
                               evaluate, load_model, loss_parts, lr_at, run_training, save_model,
                               total_loss, train_step, type_mix_at, write_metrics)
from canonlift.diffcore.nn import Adam, AdamConfig

from conftest import small_train_config


def _parts(t, values):
    return {k: t.constant(np.array(v)) for k, v in zip(LOSS_NAMES, values)}


def test_total_loss_examples():
    t = Tape(np.float64)
    parts = _parts(t, [0.3, 0.2, 0.7, 0.1])
    only_vol = {"coord": 0.0, "spurious": 0.0, "vol": 1.0, "vs": 0.0}
    assert total_loss(parts, only_vol).item() == 0.7
    lam = {"coord": 1.0, "spurious": 2.0, "vol": 0.5, "vs": 3.0}
    assert total_loss(parts, lam).item() == pytest.approx(0.3 + 0.4 + 0.35 + 0.3)
    with pytest.raises(ValueError):
        total_loss(parts, dict.fromkeys(LOSS_NAMES, 0.0))


def test_config_validation():
    with pytest.raises(ValueError):
        small_train_config(lambda_c=0, lambda_s=0, lambda_vol=0, lambda_vs=0)
    with pytest.raises(ValueError):
        small_train_config(lambda_vs=-1.0)
    with pytest.raises(ValueError):
        small_train_config(active_set=["spiral"])
    assert small_train_config().decouple is True


def _grads(model, inst, lambdas, decouple=True, seed=0):
    store = model.params.astype(np.float64)
    store.zero_grad()
    t = Tape(np.float64, store)
    m = Model(model.cfg, store)
    parts, _ = loss_parts(m, t, inst, np.random.default_rng(seed), decouple=decouple)
    t.backward(total_loss(parts, lambdas))
    return {k: store.grads[k].copy() for k in store.values}


def test_doubling_lambdas_doubles_gradients(small_data):
    model = Model(small_train_config())
    lam = {"coord": 1.0, "spurious": 0.5, "vol": 2.0, "vs": 1.5}
    g1 = _grads(model, small_data[0], lam)
    g2 = _grads(model, small_data[0], {k: 2 * v for k, v in lam.items()})
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("decouple", [True, False])
def test_task_losses_and_coordinate_parameters(small_data, decouple):
    model = Model(small_train_config())
    task_only = {"coord": 0.0, "spurious": 0.0, "vol": 1.0, "vs": 1.0}
    g = _grads(model, small_data[0], task_only, decouple=decouple)
    coord = [g[k] for k in model.coordinate_param_names()]
    feat = [g[k] for k in model.feature_param_names()]
    assert any(np.any(x != 0) for x in feat)
    if decouple:
        assert all(not np.any(x) for x in coord)
    else:
        assert any(np.any(x != 0) for x in coord)


def test_schedules():
    cfg = small_train_config(lr=1e-2, min_lr=1e-3, type_warmup_steps=10)
    assert lr_at(cfg, 0, 100) == pytest.approx(1e-2)
    assert lr_at(cfg, 99, 100) == pytest.approx(1e-3)
    assert type_mix_at(cfg, 0) == 1.0 and type_mix_at(cfg, 5) == 0.5 and type_mix_at(cfg, 20) == 0.0
    assert type_mix_at(small_train_config(type_warmup_steps=0), 0) == 0.0


def test_fifty_steps_reduce_loss(small_data):
    cfg = small_train_config(type_warmup_steps=0, lr=3e-3)
    model = Model(cfg)
    opt = Adam(model.params, AdamConfig(cfg.lr))
    rng = np.random.default_rng(0)
    batch = small_data[:2]
    first = train_step(model, batch, opt, rng, cfg.lr)["total"]
    for _ in range(48):
        train_step(model, batch, opt, rng, cfg.lr)
    last = train_step(model, batch, opt, rng, cfg.lr)["total"]
    assert last < first


def test_nonfinite_loss_aborts(small_data, monkeypatch):
    import canonlift.trainer as tr

    def bad(parts, lambdas):
        return ops.scale(parts["vol"], float("nan"))

    monkeypatch.setattr(tr, "total_loss", bad)
    with pytest.raises(TrainingError):
        run_training(small_data, small_train_config(epochs=3, batch_size=1))


def test_training_is_deterministic(tmp_path, small_data):
    cfg = small_train_config()
    a, b = run_training(small_data, cfg), run_training(small_data, cfg)
    save_model(tmp_path / "a.clpm", a.model)
    save_model(tmp_path / "b.clpm", b.model)
    assert (tmp_path / "a.clpm").read_bytes() == (tmp_path / "b.clpm").read_bytes()
    assert a.epoch_losses == b.epoch_losses
    back = load_model(tmp_path / "a.clpm", cfg)
    ra = evaluate(a.model, small_data, [1, 2])
    rb = evaluate(back, small_data, [1, 2])
    write_metrics(tmp_path / "ma.json", ra)
    write_metrics(tmp_path / "mb.json", rb)
    assert (tmp_path / "ma.json").read_bytes() == (tmp_path / "mb.json").read_bytes()
    assert (tmp_path / "ma.csv").read_bytes() == (tmp_path / "mb.csv").read_bytes()


def test_eval_iou_examples(rng):
    gt = rng.uniform(size=(4, 4, 4)) > 0.5
    assert eval_iou(gt.astype(float), gt)[0] == 1.0
    assert eval_iou((~gt).astype(float), gt)[0] == 0.0
    half = np.zeros((4, 4, 4), bool)
    half[:2] = True
    best, t = eval_iou(np.full((4, 4, 4), 0.5), half)
    assert best == 0.5 and t <= 0.5
    assert eval_iou(np.full((4, 4, 4), 0.5), half, [0.55, 0.9])[0] == 0.0
    assert eval_iou(np.zeros(3), np.zeros(3, bool))[0] == 1.0
    with pytest.raises(ValueError):
        eval_iou(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        eval_iou(np.zeros(3), np.zeros(3), [])


@given(st.integers(0, 2**31), st.lists(st.sampled_from(DEFAULT_THRESHOLDS), min_size=1, max_size=6))
def test_eval_iou_duplicate_thresholds(seed, ts):
    rng = np.random.default_rng(seed)
    pred, gt = rng.uniform(size=(5, 5, 5)), rng.uniform(size=(5, 5, 5)) > 0.6
    assert eval_iou(pred, gt, ts)[0] == eval_iou(pred, gt, ts + ts[::-1])[0]
    assert 0.0 <= eval_iou(pred, gt, ts)[0] <= 1.0


def test_eval_l1():
    a = [np.zeros((2, 2, 3)), np.ones((2, 2, 3))]
    assert eval_l1(a, [np.ones((2, 2, 3)), np.ones((2, 2, 3))]) == 50.0
    with pytest.raises(ValueError):
        eval_l1(a, a[:1])
    with pytest.raises(ValueError):
        eval_l1([np.zeros((2, 2, 3))], [np.zeros((3, 2, 3))])


def test_view_sweep_schema(tmp_path, small_data):
    model = Model(small_train_config())
    report = evaluate(model, small_data, [1, 2, 3, 4])
    assert [s["views"] for s in report["view_sweep"]] == [1, 2, 3, 4]
    full = report["view_sweep"][-1]
    assert full["mean_iou"] == report["mean_iou"] and full["mean_l1"] == report["mean_l1"]
    for key in ("config_hash", "per_class", "mean_iou", "mean_l1", "threshold", "view_sweep"):
        assert key in report
    for c in report["per_class"].values():
        assert 0 <= c["iou"] <= 1 and c["l1"] >= 0
    write_metrics(tmp_path / "m.json", report)
    assert json.loads((tmp_path / "m.json").read_text())["view_sweep"][0]["views"] == 1
    with pytest.raises(ValueError):
        evaluate(model, small_data, [5])
