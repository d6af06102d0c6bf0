import json
import subprocess
import sys

import pytest

from resinv.cli import main

TINY = {
    "seed": 3,
    "base": {"model": {"hidden": 24, "layers": 1, "time_dim": 4, "scene_dim": 2,
                       "control_dim": 2},
             "train": {"samples": 32, "epochs": 2, "batch_size": 16}},
    "personalized": {"model": {"hidden": 24, "layers": 1, "time_dim": 4, "scene_dim": 2,
                               "identity_dim": 4},
                     "train": {"samples": 32, "epochs": 2, "batch_size": 16}},
    "inversion": {"inner_iters": 2, "repeats": 3},
    "pipeline": {"seeds": [0, 1]},
    "fusion": {"mss_sweep": [0, 25, 50], "seeds": [0, 1]},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    for kind in ("base", "personalized"):
        assert main(["train", "--kind", kind, "--config", str(cfg), "--out", str(root / kind)]) == 0
    return root, cfg


def _weights(root):
    return ["--base", str(root / "base" / "base.rinv"),
            "--personalized", str(root / "personalized" / "personalized.rinv")]


def test_train_outputs(workspace):
    root, _ = workspace
    d = root / "personalized"
    assert sorted(p.name for p in d.iterdir()) == ["loss.csv", "manifest.json", "personalized.rinv"]
    lines = (d / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss" and len(lines) == 3
    man = json.loads((d / "manifest.json").read_text())
    for key in ("command", "args", "config", "seeds", "schedule_hash", "weights", "tool_version",
                "started_utc", "wall_s"):
        assert key in man
    assert man["config"]["personalized"]["model"]["hidden"] == 24


def test_training_twice_gives_the_same_weights(workspace, tmp_path):
    root, cfg = workspace
    assert main(["train", "--kind", "base", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "base.rinv").read_bytes() == (root / "base" / "base.rinv").read_bytes()


def test_invert_bench(workspace, capsys):
    root, cfg = workspace
    out = root / "bench"
    rc = main(["invert-bench", "--config", str(cfg), "--out", str(out), "--count", "2",
               "--personalized", str(root / "personalized" / "personalized.rinv"),
               "--inner-sweep", "1,2", "--save-images"])
    assert rc == 0
    doc = json.loads((out / "bench.json").read_text())
    assert [r["method"] for r in doc["rows"]] == ["ddim", "res", "nti"]
    assert [r["inner_iters"] for r in doc["nti_sweep"]] == [1, 2]
    assert (out / "bench.csv").read_text().startswith("method,T,inner_iters")
    assert "x_res" in capsys.readouterr().out
    assert len(list((out / "images").glob("*.pgm"))) == 2

    again = root / "bench2"
    rc = main(["invert-bench", "--config", str(cfg), "--out", str(again), "--methods", "res",
               "--images", str(out / "images"),
               "--personalized", str(root / "personalized" / "personalized.rinv")])
    assert rc == 0
    (row,) = json.loads((again / "bench.json").read_text())["rows"]
    assert row["max_abs_err"] <= 1e-4


def test_enhance_and_manifest_rerun_is_byte_identical(workspace):
    root, cfg = workspace
    first = root / "enh"
    rc = main(["enhance", "--config", str(cfg), "--out", str(first), "--seed", "5",
               "--target", "ring,1.0,2.5,0,0.5", "--control", "ring", *_weights(root)])
    assert rc == 0
    names = sorted(p.name for p in first.iterdir())
    assert names == ["base.pgm", "enhanced.pgm", "manifest.json", "metrics.json", "swap.pgm"]
    man = json.loads((first / "manifest.json").read_text())
    assert man["request"]["target"]["kind"] == "ring" and man["seeds"] == [5]

    second = root / "enh-rerun"
    assert main(["enhance", "--config", str(first / "manifest.json"), "--out", str(second)]) == 0
    for name in ("base.pgm", "swap.pgm", "enhanced.pgm", "metrics.json"):
        if name == "metrics.json":
            a = json.loads((first / name).read_text())
            b = json.loads((second / name).read_text())
            for doc in (a, b):
                for stage in doc["stages"].values():
                    stage.pop("latency_s")
            assert a == b
        else:
            assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_fuse(workspace):
    root, cfg = workspace
    out = root / "fuse"
    assert main(["fuse", "--config", str(cfg), "--out", str(out),
                 "--personalized", str(root / "personalized" / "personalized.rinv")]) == 0
    doc = json.loads((out / "fusion.json").read_text())
    assert doc["mss_sweep"] == [0, 25, 50] and len(doc["runs"]) == 2
    assert doc["bimd"]["lambda_fwd"] == doc["bimd"]["lambda_bkwd"]
    assert sorted(p.name for p in (out / "seed_000").iterdir()) == \
        ["grid.pgm", "mss_000.pgm", "mss_025.pgm", "mss_050.pgm", "source.pgm"]


def test_ablate_and_report(workspace):
    pytest.importorskip("matplotlib")
    root, cfg = workspace
    out = root / "ablate"
    assert main(["ablate", "--config", str(cfg), "--out", str(out), *_weights(root)]) == 0
    doc = json.loads((out / "ablation.json").read_text())
    assert [r["stage"] for r in doc["rows"]] == ["final", "after-swap", "after-base", "ab-fwd",
                                                 "ab-bkwd"]
    rep = root / "report"
    assert main(["report", "--out", str(rep), "--runs", str(out), str(root / "personalized")]) == 0
    assert {p.name for p in rep.glob("*.png")} == {"ablate-ablation.png", "personalized-loss.png"}


@pytest.mark.parametrize("argv, needle", [
    (["invert-bench", "--repeats", "1"], "--repeats must be at least 3"),
    (["enhance", "--target", "star,1,2,0,0"], "unknown glyph kind"),
    (["enhance", "--target", "disk,1,2"], "--target wants"),
    (["enhance", "--seed", "-1"], "--seed must be non-negative"),
])
def test_usage_errors_exit_2(workspace, tmp_path, capsys, argv, needle):
    root, cfg = workspace
    weights = _weights(root) if argv[0] == "enhance" else \
        ["--personalized", str(root / "personalized" / "personalized.rinv")]
    rc = main([*argv, "--config", str(cfg), "--out", str(tmp_path), *weights])
    assert rc == 2
    assert needle in capsys.readouterr().err


def test_malformed_config_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"seed": 1,\n "bimd": {"mss": }}')
    assert main(["train", "--kind", "base", "--config", str(bad), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "config error" in err and "line 2" in err


def test_missing_weights(tmp_path, capsys):
    assert main(["enhance", "--out", str(tmp_path), "--base", str(tmp_path / "nope.rinv"),
                 "--personalized", str(tmp_path / "nope.rinv")]) == 2
    assert "not found" in capsys.readouterr().err
    assert main(["fuse", "--out", str(tmp_path)]) == 2


def test_wrong_model_kind(workspace, tmp_path, capsys):
    root, _ = workspace
    base = str(root / "base" / "base.rinv")
    assert main(["fuse", "--out", str(tmp_path), "--personalized", base]) == 2
    assert "expected personalized" in capsys.readouterr().err


def test_report_without_runs(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 2


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "resinv.cli", "--version"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("resinv ")
    bad = subprocess.run([sys.executable, "-m", "resinv.cli", "train", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert bad.returncode != 0 and "--kind" in bad.stderr
