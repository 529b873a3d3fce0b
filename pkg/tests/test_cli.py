import json
import subprocess
import sys

import numpy as np
import pytest

from dualguide.cli import main, read_config
from dualguide.io import read_grid_csv, read_pgm


def run(*argv):
    return main([str(a) for a in argv])


def test_target_map_files(tmp_path, data_dir):
    assert run("target-map", "--box", 0.25, 0.25, 0.75, 0.75, "--out", tmp_path) == 0
    grid = read_grid_csv(tmp_path / "target.csv")
    assert np.array_equal(grid, np.loadtxt(data_dir / "golden_target_64.csv", delimiter=","))
    # the box edges fall on pixel boundaries; their midpoints sit between pixel 15 and 16
    assert (grid[15, 31] + grid[16, 31]) / 2 == pytest.approx(0.5, abs=0.05)


def test_full_image_box_brightest_centre(tmp_path):
    assert run("target-map", "--box", 0, 0, 1, 1, "--height", 9, "--width", 9, "--out", tmp_path) == 0
    img = read_pgm(tmp_path / "target.pgm")
    assert img[4, 4] == img.max() == 255
    grid = read_grid_csv(tmp_path / "target.csv")
    assert np.argmax(grid) == 4 * 9 + 4 and (grid == grid.max()).sum() == 1


def test_target_map_midpoints_from_csv(tmp_path):
    # a 4x4 grid whose pixel centres land exactly on the edge midpoints of this box
    assert run("target-map", "--box", 0.125, 0.125, 0.625, 0.625, "--height", 4, "--width", 4,
               "--out", tmp_path) == 0
    g = read_grid_csv(tmp_path / "target.csv")
    for i, j in [(0, 1), (2, 1), (1, 0), (1, 2)]:
        assert g[i, j] == pytest.approx(0.5, abs=1e-12)


def test_bad_box_is_usage_error(tmp_path, capsys):
    assert run("target-map", "--box", 0.9, 0.1, 0.2, 0.5, "--out", tmp_path) == 2
    assert "degenerate" in capsys.readouterr().err


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        run("guide", "--variant", "bogus")
    assert exc.value.code == 2


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# toy run\nv = 30\nw = 0.5  # inline\nrisa = off\nn_steps = 4\nbackward_steps = 1\n"
                   "forward_steps = 2\nseed = 3\n")
    values = read_config(cfg)
    assert values["v"] == 30.0 and values["risa"] is False and values["seed"] == 3
    assert run("guide", "--config", cfg, "--seed", 5, "--set", "w=0", "--out", tmp_path / "o") == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["seeds"] == [5] and summary["config"]["w"] == 0.0 and summary["config"]["v"] == 30.0
    assert summary["config"]["risa"] is False


@pytest.mark.parametrize("text", ["bogus = 1\n", "v = fast\n", "risa = maybe\n", "k_thres = 1.5\n"])
def test_bad_config_exit_2(tmp_path, text):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    assert run("guide", "--config", cfg, "--out", tmp_path) == 2


FAST = ["--set", "n_steps=4", "--set", "backward_steps=2", "--set", "forward_steps=3"]


def test_guide_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("guide", "--seed", 9, "--n-seeds", 2, "--variant", "full", "--variant", "no-su",
                   "--record-vectors", *FAST, "--out", tmp_path / d) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 9
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_guide_mask_flags(tmp_path):
    assert run("guide", "--risa-mask-axis", "query", "--sfca-mask", "own", "--target", "gaussian", *FAST,
               "--out", tmp_path) == 0
    cfg = json.loads((tmp_path / "summary.json").read_text())["config"]
    assert (cfg["risa_mask_axis"], cfg["sfca_mask"], cfg["target"]) == ("query", "own", "gaussian")


def test_zero_scales_warn_but_succeed(tmp_path, capsys):
    assert run("guide", "--set", "v=0", "--set", "w=0", *FAST, "--out", tmp_path) == 0
    assert json.loads((tmp_path / "summary.json").read_text())["warning"] is True
    assert "warning" in capsys.readouterr().out


def test_sweep_outputs(tmp_path):
    assert run("sweep", "--param", "k_thres", "--grid", "0.9,0.6", "--n-seeds", 2, *FAST, "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "sweep.json").read_text())
    assert rep["grid"] == [0.9, 0.6] and len(rep["points"]) == 2
    assert (tmp_path / "sweep.csv").read_text().startswith("k_thres,median_iterations")
    assert run("sweep", "--param", "target", "--grid", "cone", "--out", tmp_path) == 2
    assert run("sweep", "--param", "v", "--grid", ",", "--out", tmp_path) == 2


def test_bench_build(tmp_path, data_dir):
    assert run("bench-build", "--annotations", data_dir / "coco_fixture_50.json", "--seed", 1, "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "benchmark.json").read_text())
    assert doc["schema"] == "actorbench/1"
    assert (doc["report"]["single_sets"], doc["report"]["double_sets"]) == (6, 1)


def test_bench_build_empty_and_malformed(tmp_path):
    empty = tmp_path / "empty.json"
    empty.write_text('{"images": [], "annotations": [], "categories": []}')
    assert run("bench-build", "--annotations", empty, "--out", tmp_path / "e") == 0
    assert json.loads((tmp_path / "e" / "benchmark.json").read_text())["sets"] == []
    bad = tmp_path / "bad.json"
    bad.write_text('{"images": [{"id": 1, "width": 10}]}')
    assert run("bench-build", "--annotations", bad, "--out", tmp_path) == 2


def test_metrics_perfect_detection(tmp_path, capsys):
    ev = {"sets": [{"id": "s", "images": [{"given_boxes": [[0, 0, 0.5, 0.5]], "detected_boxes": [[0, 0, 0.5, 0.5]]}]
                    * 2}]}
    p = tmp_path / "eval.json"
    p.write_text(json.dumps(ev))
    assert run("metrics", "--eval", p, "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["scores"]["mIoU"]["mean"] == 100.0
    assert (tmp_path / "report.csv").read_text().splitlines()[1].startswith("mIoU,100.0")
    p.write_text("{")
    assert run("metrics", "--eval", p, "--out", tmp_path) == 2


def test_gradcheck_pass_and_corrupted(tmp_path, capsys):
    assert run("gradcheck", "--instances", 3, "--suite", "softmax_lastdim", "--suite", "energy_grad_z",
               "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "gradcheck.json").read_text())
    assert [s["op"] for s in rep["suites"]] == ["softmax_lastdim", "energy_grad_z"]
    assert all("max_rel_error" in s for s in rep["suites"])
    assert run("gradcheck", "--instances", 3, "--suite", "energy_grad_z", "--corrupt", "minmax_lastdim") == 1
    assert "FAIL energy_grad_z" in capsys.readouterr().out
    assert run("gradcheck", "--suite", "nope") == 2


def test_console_script_entry():
    out = subprocess.run([sys.executable, "-m", "dualguide.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gradcheck" in out.stdout


def test_bad_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("DGL_THREADS", "many")
    assert run("guide", *FAST, "--n-seeds", 2, "--out", tmp_path) == 2
