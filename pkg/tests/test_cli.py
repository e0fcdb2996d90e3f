import json

import numpy as np
import pytest

import multisplat.normals as nrm
from multisplat.cli import main, prune_histogram
from multisplat.evaluation import evaluate_scene, render_all
from multisplat.io import load_cameras, load_dataset, load_scene_ply, read_pfm, save_dataset, save_scene_ply
from multisplat.scene import Scene


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory, tiny_dataset):
    root = tmp_path_factory.mktemp("data")
    save_dataset(tiny_dataset, root)
    return root


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("run")
    (out / "cfg.yaml").write_text("prune_interval: 3\n")
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--config", str(out / "cfg.yaml"),
                 "--iterations", "5", "--deterministic"]) == 0
    return out


def test_train_writes_outputs(trained):
    for name in ("config.yaml", "scene.ply", "log.jsonl", "metrics.json"):
        assert (trained / name).exists(), name
    recs = [json.loads(line) for line in (trained / "log.jsonl").read_text().splitlines()]
    assert [r["iter"] for r in recs] == [1, 2, 3, 4, 5]
    assert "seconds" not in recs[0]
    assert set(json.loads((trained / "metrics.json").read_text())) >= {"psnr", "miou", "count"}


def test_deterministic_train_is_bitwise_repeatable(tmp_path, data_dir, trained):
    out = tmp_path / "again"
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--config", str(trained / "cfg.yaml"),
                 "--iterations", "5", "--deterministic"]) == 0
    for name in ("scene.ply", "log.jsonl", "metrics.json"):
        assert (out / name).read_bytes() == (trained / name).read_bytes(), name


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--out", "x"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["gradcheck", "--suites", "nope"])
    assert e.value.code == 2


def test_missing_data_exits_1(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 1
    assert "error:" in capsys.readouterr().err


def test_render_rgb_only(tmp_path, data_dir, trained):
    out = tmp_path / "r"
    assert main(["render", "--scene", str(trained / "scene.ply"), "--cameras", str(data_dir / "cameras.json"),
                 "--out", str(out), "--modalities", "rgb"]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert len(files) == 4 and all(f.endswith("_rgb.png") for f in files)


def test_render_depth_matches_in_memory(tmp_path, data_dir, trained):
    out = tmp_path / "r"
    assert main(["render", "--scene", str(trained / "scene.ply"), "--cameras", str(data_dir / "cameras.json"),
                 "--out", str(out)]) == 0
    meta, views = load_cameras(data_dir / "cameras.json")
    scene = load_scene_ply(trained / "scene.ply")
    frame, _ = render_all(scene, views[0])
    name = meta["frames"][0]["name"]
    np.testing.assert_array_equal(read_pfm(out / f"{name}_depth.pfm"), frame.depth.astype(np.float32))
    np.testing.assert_array_equal(read_pfm(out / f"{name}_k.pfm"), frame.k_map.astype(np.float32))
    for suffix in ("_rgb.png", "_normal.pfm", "_sem.png"):
        assert (out / f"{name}{suffix}").exists()


def test_render_empty_scene_is_background(tmp_path, data_dir):
    save_scene_ply(Scene.zeros(0, 0), tmp_path / "e.ply")
    assert main(["render", "--scene", str(tmp_path / "e.ply"), "--cameras", str(data_dir / "cameras.json"),
                 "--out", str(tmp_path / "r"), "--modalities", "depth,rgb"]) == 0
    for p in (tmp_path / "r").glob("*_depth.pfm"):
        assert not read_pfm(p).any()


def test_evaluate_matches_library(tmp_path, data_dir, trained, capsys):
    capsys.readouterr()
    assert main(["evaluate", "--scene", str(trained / "scene.ply"), "--data", str(data_dir),
                 "--out", str(tmp_path / "m.json")]) == 0
    rep = json.loads((tmp_path / "m.json").read_text())
    lib = evaluate_scene(load_scene_ply(trained / "scene.ply"), load_dataset(data_dir)).as_dict()
    assert rep["metrics"] == lib
    assert 0 <= rep["outliers"]["radio"] <= 1
    assert json.loads(capsys.readouterr().out) == rep


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--cases", "1", "--suites", "intersection,losses,normals"]) == 0
    out = capsys.readouterr().out
    assert out.count(" ok") == 3


def test_gradcheck_catches_sign_error(monkeypatch, capsys):
    real = nrm.normals_backward
    monkeypatch.setattr(nrm, "normals_backward", lambda *a, **k: -real(*a, **k))
    assert main(["gradcheck", "--cases", "1", "--suites", "normals"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_prune_report_fresh_scene(tmp_path, capsys):
    save_scene_ply(Scene.zeros(7, 0), tmp_path / "s.ply")
    assert main(["prune-report", "--scene", str(tmp_path / "s.ply")]) == 0
    assert "would prune 0" in capsys.readouterr().out


def test_prune_histogram_counts():
    k = np.array([0.9, 1.0, 1.8, 0.2, 1.3])
    rep = prune_histogram(k, 0.5)
    assert sum(rep["histogram"].values()) == rep["count"] == 5
    assert rep["would_prune"] == 2
    assert prune_histogram(k, 0.5, inverted=True)["would_prune"] == 3
