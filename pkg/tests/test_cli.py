import json
import subprocess
import sys

import numpy as np
import pytest

from fieldscale.cli import run
from fieldscale.fsr import read_fsr, read_logits, read_mask, write_fsr, write_logits
from fieldscale.geo import GeoTransform, LogitMap


def _json(capsys, argv, code=0):
    assert run(argv + ["--json"]) == code
    return json.loads(capsys.readouterr().out)


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    d = tmp_path_factory.mktemp("w")
    assert run(["synth", "--seed", "3", "--height", "64", "--width", "80", "--out", str(d)]) == 0
    return d


def test_synth_outputs(world):
    assert read_fsr(world / "image").axes == "TBHW"
    assert read_mask(world / "gt_mask").shape == (64, 80)
    assert (world / "gt.geojson").exists()


def test_pipeline_oracle_end_to_end(world, tmp_path, capsys):
    rep = _json(capsys, ["stitch", "--input", str(world / "image"), "--out", str(tmp_path / "logits"),
                         "--patch-size", "32", "--workers", "2", "--report", str(tmp_path / "stitch.json")])
    assert rep["config"]["workers"] == 2 and rep["results"]["area_km2"] == pytest.approx(0.512)
    assert rep["throughput_km2_s"] > 0
    ex = _json(capsys, ["extract", "--input", str(tmp_path / "logits"), "--out", str(tmp_path / "f.geojson"),
                        "--block-size", "16"])
    assert ex["results"]["field_stats"]["field_count"] > 0
    ev = _json(capsys, ["evaluate", "--pred", str(tmp_path / "f.geojson"), "--gt", str(world / "gt_mask"),
                        "--throughput-from", str(tmp_path / "stitch.json"), "--csv", str(tmp_path / "t1.csv")])
    row = ev["results"]["accuracy"]
    assert row["iou"] == 1.0 and row["obj_f1"] == 1.0 and row["ap50"] == 1.0 and row["ap50_95"] == 1.0
    assert row["throughput_km2_s"] == rep["throughput_km2_s"]
    assert (tmp_path / "t1.csv").read_text().startswith("name,iou,")
    # raster predictions give the same answer as the polygons
    ev2 = _json(capsys, ["evaluate", "--pred", str(tmp_path / "logits"), "--gt", str(world / "gt_mask")])
    assert ev2["results"]["accuracy"]["obj_f1"] == 1.0
    st = _json(capsys, ["stats", "--input", str(tmp_path / "f.geojson")])
    assert st["results"]["field_count"] == ex["results"]["field_stats"]["field_count"]


def test_evaluate_macro_regions(world, capsys):
    gt = str(world / "gt_mask")
    out = _json(capsys, ["evaluate", "--pred", str(world / "gt.geojson"), "--gt", gt,
                         "--pred", gt, "--gt", gt, "--region", "b", "--region", "a"])
    assert set(out["results"]["regions"]) == {"a", "b"}
    assert out["results"]["macro"]["pixel.iou"]["mean"] == 1.0
    assert run(["evaluate", "--pred", gt, "--gt", gt, "--gt", gt]) == 2


def test_text_output_and_report_file(tmp_path, capsys):
    assert run(["seasons", "--lat", "48", "--report", str(tmp_path / "r.json")]) == 0
    out = capsys.readouterr().out
    assert "planting (91, 151)" in out and "harvest (244, 304)" in out
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["results"]["planting"] == [91, 151] and d["config"]["subcommand"] == "seasons"


def test_exit_codes(world, tmp_path, capsys):
    assert run(["seasons"]) == 2
    assert run(["seasons", "--lat", "1", "--bogus"]) == 2
    assert run(["bogus"]) == 2
    assert run(["seasons", "--lat", "120"]) == 2
    assert run(["stats", "--input", str(tmp_path / "missing.geojson")]) == 2
    assert run(["stitch", "--input", str(world / "image"), "--out", str(tmp_path / "o"),
                "--model", "nope"]) == 2
    # a model process that cannot start is a runtime failure
    assert run(["stitch", "--input", str(world / "image"), "--out", str(tmp_path / "o"),
                "--patch-size", "32", "--model", "exec:/nonexistent/model"]) == 1
    capsys.readouterr()


def test_config_file_and_overrides(world, tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'[stitch]\ninput = "{world / "image"}"\npatch-size = 32\nout = "{tmp_path / "l"}"\n')
    rep = _json(capsys, ["stitch", "--config", str(cfg)])
    assert rep["config"]["params"]["patch_size"] == 32
    rep = _json(capsys, ["stitch", "--config", str(cfg), "--patch-size", "40"])
    assert rep["config"]["params"]["patch_size"] == 40
    top = tmp_path / "top.toml"
    top.write_text("lat = -30.0\n")
    assert _json(capsys, ["seasons", "--config", str(top)])["results"]["harvest"] == [32, 120]
    bad = tmp_path / "bad.toml"
    bad.write_text("[seasons]\nlatitude = 3\n")
    assert run(["seasons", "--config", str(bad)]) == 2
    broken = tmp_path / "broken.toml"
    broken.write_text("lat = = 3\n")
    assert run(["seasons", "--config", str(broken)]) == 2
    capsys.readouterr()


def test_workers_from_environment(world, tmp_path, capsys, monkeypatch):
    argv = ["extract", "--input", str(world / "gt_mask"), "--out", str(tmp_path / "g.geojson")]
    monkeypatch.setenv("FIELDSCALE_WORKERS", "3")
    assert _json(capsys, argv)["config"]["workers"] == 3
    assert _json(capsys, argv + ["--workers", "2"])["config"]["workers"] == 2
    monkeypatch.setenv("FIELDSCALE_WORKERS", "zero")
    assert run(argv) == 2
    capsys.readouterr()


def _scene_dir(root):
    t = GeoTransform()
    masks = [np.array([[1, 1], [0, 0]]), np.array([[0, 0], [1, 1]]), np.ones((2, 2), int)]
    dates = ["2023-04-01", "2023-04-11", "2023-04-21"]
    for k, (m, d) in enumerate(zip(masks, dates)):
        bands = np.full((4, 2, 2), float(k + 1), np.float32)
        write_fsr(root / f"s{k}", bands, "BHW", t, meta={"timestamp": d, "cloud_cover_pct": 20.0})
        write_fsr(root / f"s{k}_scl", np.where(m, 4, 9).astype(np.uint8), "HW", t)
    write_fsr(root / "s3", np.zeros((4, 2, 2), np.float32), "BHW", t,
              meta={"timestamp": "2023-05-01", "cloud_cover_pct": 90.0})
    write_fsr(root / "s3_scl", np.full((2, 2), 4, np.uint8), "HW", t)
    write_fsr(root / "s4", np.zeros((4, 2, 2), np.float32), "BHW", t,
              meta={"timestamp": "2023-09-01", "cloud_cover_pct": 0.0})
    write_fsr(root / "s4_scl", np.full((2, 2), 4, np.uint8), "HW", t)


def test_select_scenes(tmp_path, capsys):
    _scene_dir(tmp_path)
    out = _json(capsys, ["select-scenes", "--scenes", str(tmp_path), "--season", "planting", "--lat", "48",
                         "--target-coverage", "2", "--out", str(tmp_path / "out" / "comp")])
    r = out["results"]
    assert r["window"] == [91, 151] and r["n_scenes"] == 4 and r["n_after_prefilter"] == 3
    assert r["selected"] == ["2023-04-21", "2023-04-01", "2023-04-11"] and r["gains"] == [4, 2, 2]
    comp = read_fsr(tmp_path / "out" / "comp")
    assert comp.data[0].tolist() == [[2.0, 2.0], [2.5, 2.5]]
    assert read_fsr(tmp_path / "out" / "comp_count").data.tolist() == [[2, 2], [2, 2]]
    one = _json(capsys, ["select-scenes", "--scenes", str(tmp_path), "--window", "91,151",
                         "--target-coverage", "1"])
    assert one["results"]["selected"] == ["2023-04-21"]
    assert run(["select-scenes", "--scenes", str(tmp_path), "--season", "harvest"]) == 2
    assert run(["select-scenes", "--scenes", str(tmp_path / "nope")]) == 2
    capsys.readouterr()


def test_change(tmp_path, capsys):
    t = GeoTransform(0, 30, 10, -10)
    y1 = np.zeros((3, 3, 3))
    y2 = np.zeros((3, 3, 3))
    y2[1, 0] = [1.0, 3.0, 5.0]
    write_logits(tmp_path / "a", LogitMap(y1, t))
    write_logits(tmp_path / "b", LogitMap(y2, t))
    out = _json(capsys, ["change", "--y1", str(tmp_path / "a"), "--y2", str(tmp_path / "b"),
                         "--out", str(tmp_path / "m"), "--geojson", str(tmp_path / "c.geojson")])
    assert out["results"]["changed_pixels"] == 2 and out["results"]["n_polygons"] == 1
    assert read_mask(tmp_path / "m").values[0].tolist() == [0, 1, 1]
    fc = json.loads((tmp_path / "c.geojson").read_text())
    assert fc["features"][0]["properties"]["determination_method"] == "auto-change"
    same = _json(capsys, ["change", "--y1", str(tmp_path / "a"), "--y2", str(tmp_path / "a")])
    assert same["results"]["changed_pixels"] == 0
    write_logits(tmp_path / "c", LogitMap(y2, GeoTransform(5, 30, 10, -10)))
    assert run(["change", "--y1", str(tmp_path / "a"), "--y2", str(tmp_path / "c")]) == 2
    assert read_logits(tmp_path / "a").values.shape == (3, 3, 3)
    capsys.readouterr()


def test_robustness_command(tmp_path, capsys):
    out = _json(capsys, ["robustness", "--patch-size", "32", "--crop-size", "24", "--n-worlds", "2",
                         "--overlaps", "16,8", "--csv", str(tmp_path / "t2.csv")])
    row = out["results"]["summary"]
    assert row["agreement_avg"] == 1.0 and row["input_order_delta"] == 0.0 and row["pixel_iou"] == 1.0
    assert out["results"]["consistency"]["sweep"] == {"16": 1.0, "8": 1.0}
    assert (tmp_path / "t2.csv").read_text().startswith("name,object_f1,")
    f0 = _json(capsys, ["robustness", "--model", "stub:frame0_only", "--patch-size", "32",
                        "--crop-size", "24", "--n-worlds", "1"])
    assert f0["results"]["summary"]["input_order_delta"] == 1.0
    assert run(["robustness", "--patch-size", "32", "--crop-size", "10"]) == 2
    capsys.readouterr()


def test_loss_check(capsys):
    out = _json(capsys, ["loss-check", "--seeds", "2"])
    assert out["results"]["all_pass"] and len(out["results"]["checks"]) == 11
    assert run(["loss-check", "--seeds", "1", "--tol", "1e-30"]) == 1
    capsys.readouterr()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fieldscale", "seasons", "--lat", "0", "--json"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["results"]["harvest"] == [182, 243]
    proc = subprocess.run([sys.executable, "-m", "fieldscale", "seasons"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr
