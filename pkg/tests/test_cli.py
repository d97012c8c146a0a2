import json

import numpy as np
import pytest

from canonlift.cli import EXIT_CHECK, EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from canonlift.heads import read_clim, read_ppm
from canonlift.voxelgrid import read_grid

SMALL_DATA = ["--set", "data.grid=8", "--set", "data.input_size=16", "--set", "data.supervision_size=16",
              "--set", "data.oracle_points=512"]
SMALL_TRAIN = {"train": {"grid": 8, "feature_dim": 4, "coord_hidden": 16, "feature_hidden": 8,
                         "refine_hidden": 8, "head_hidden": 8, "ray_grid": 8, "depth_samples": 4,
                         "output_size": 16, "epochs": 1, "batch_size": 4, "samples": 4}}


def _gen(out, *extra):
    return main(["gen-data", "--out", str(out), "--classes", "table_rot4", "--count", "10",
                 "--seed", "7", *SMALL_DATA, *extra])


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert _gen(root / "data") == EXIT_OK
    (root / "cfg.json").write_text(json.dumps(SMALL_TRAIN))
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"),
                 "--config", str(root / "cfg.json")]) == EXIT_OK
    return root


def test_gen_data_twice_is_bitwise_identical(tmp_path, run_dir, capsys):
    assert _gen(tmp_path / "b") == EXIT_OK
    assert "table_rot4" in capsys.readouterr().out
    a, b = run_dir / "data", tmp_path / "b"
    names = sorted(str(p.relative_to(a)) for p in a.rglob("*") if p.is_file())
    assert names == sorted(str(p.relative_to(b)) for p in b.rglob("*") if p.is_file())
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_threads_do_not_change_data(tmp_path, run_dir, monkeypatch):
    monkeypatch.setenv("CANONLIFT_THREADS", "2")
    assert _gen(tmp_path / "t") == EXIT_OK
    a = run_dir / "data"
    for p in a.rglob("*"):
        if p.is_file():
            assert (tmp_path / "t" / p.relative_to(a)).read_bytes() == p.read_bytes()


def test_train_outputs(run_dir):
    run = run_dir / "run"
    for name in ("model.clpm", "metrics.json", "metrics.csv", "loss.csv", "run_config.json"):
        assert (run / name).exists()
    cfg = json.loads((run / "run_config.json").read_text())
    assert cfg["command"] == "train" and len(cfg["hash"]) == 16
    assert cfg["train"]["grid"] == 8
    assert json.loads((run / "metrics.json").read_text())["run_hash"] == cfg["hash"]


def test_eval_view_sweep_and_reproducible(tmp_path, run_dir):
    args = ["eval", "--data", str(run_dir / "data"), "--checkpoint", str(run_dir / "run" / "model.clpm"),
            "--views", "1,2,3,4"]
    assert main([*args, "--out", str(tmp_path / "e1")]) == EXIT_OK
    assert main([*args, "--out", str(tmp_path / "e2")]) == EXIT_OK
    m = json.loads((tmp_path / "e1" / "metrics.json").read_text())
    assert [s["views"] for s in m["view_sweep"]] == [1, 2, 3, 4]
    assert (tmp_path / "e1" / "metrics.json").read_bytes() == (tmp_path / "e2" / "metrics.json").read_bytes()
    assert (tmp_path / "e1" / "run_config.json").exists()


def test_render_outputs(tmp_path, run_dir):
    out = tmp_path / "r" / "view.ppm"
    assert main(["render", "--data", str(run_dir / "data"), "--checkpoint",
                 str(run_dir / "run" / "model.clpm"), "--azimuth", "45", "--elevation", "10",
                 "--translation", "0.05,0,0", "--raw", "--grid", "--out", str(out)]) == EXIT_OK
    img = read_ppm(out)
    assert img.shape == (16, 16, 3)
    assert np.abs(read_clim(out.with_suffix(".clim")) - img).max() <= 0.5 / 255 + 1e-6
    assert read_grid(out.with_suffix(".cvgf")).spec.cells == 8
    assert (out.parent / "run_config.json").exists()


def test_inspect_outputs(tmp_path, run_dir):
    out = tmp_path / "i"
    assert main(["inspect", "--data", str(run_dir / "data"), "--checkpoint",
                 str(run_dir / "run" / "model.clpm"), "--out", str(out)]) == EXIT_OK
    for k in range(4):
        assert read_ppm(out / f"saliency_view{k}.ppm").shape == (16, 16, 3)
        assert (out / f"correspondence_view{k}.ppm").exists()


def test_usage_errors(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["gen-data", "--out", str(tmp_path), "--set", "data.colour=red"]) == EXIT_USAGE
    assert "valid keys" in capsys.readouterr().err
    assert main(["gen-data", "--out", str(tmp_path), "--set", "nodots"]) == EXIT_USAGE
    assert main(["gen-data", "--out", str(tmp_path), "--classes", "chair"]) == EXIT_USAGE
    assert main(["gradcheck", "--ops", "no_such_op", "--seeds", "1"]) == EXIT_USAGE


def test_data_errors(tmp_path, run_dir, capsys):
    missing = tmp_path / "nowhere"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert str(missing) in capsys.readouterr().err
    assert main(["eval", "--data", str(run_dir / "data"), "--checkpoint", str(missing),
                 "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert main(["gen-data", "--out", str(tmp_path), "--config", str(missing)]) == EXIT_DATA
    bad = tmp_path / "bad.clpm"
    bad.write_bytes(b"JUNK" + bytes(32))
    assert main(["eval", "--data", str(run_dir / "data"), "--checkpoint", str(bad),
                 "--out", str(tmp_path / "o")]) == EXIT_DATA
    # default train.grid (16) does not match the 8^3 dataset
    assert main(["train", "--data", str(run_dir / "data"), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--ops", "splat,sample", "--seeds", "3"]) == EXIT_OK
    assert "all 2 ops pass" in capsys.readouterr().out


def test_gradcheck_catches_flipped_adjoint(monkeypatch, capsys):
    import canonlift.voxelgrid as vg
    real = vg._splat_adjoint

    def flipped(*args):
        gx, gf, gs = real(*args)
        return -gx, gf, gs

    monkeypatch.setattr(vg, "_splat_adjoint", flipped)
    assert main(["gradcheck", "--ops", "splat", "--seeds", "2"]) == EXIT_CHECK
    assert "FAILED" in capsys.readouterr().out
