import json
import subprocess
import sys

import numpy as np
import pytest

from sais.cli import EXIT_DIVERGED, EXIT_INPUT, build_parser, main
from sais.mesh import write_point_cloud

SUBCOMMANDS = ["gen-corpus", "gen-data", "train", "align-eval", "transfer", "eval", "export-mesh"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.mark.parametrize("command", SUBCOMMANDS)
def test_help_lists_every_flag(command, capsys):
    with pytest.raises(SystemExit) as exc:
        run(command, "--help")
    assert exc.value.code == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "sais.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for command in SUBCOMMANDS:
        assert command in out.stdout


def test_unknown_flag_is_an_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("gen-corpus", "--family", "mug", "--out", tmp_path, "--colour", "red")
    assert exc.value.code == 2
    assert "unrecognized arguments" in capsys.readouterr().err


def test_out_of_range_cylinder_diameter_exits_2(tmp_path, capsys):
    code = run("gen-corpus", "--family", "cylinder", "--range", "diameter=0.05,0.5", "--out", tmp_path / "c")
    assert code == EXIT_INPUT
    assert "diameter" in capsys.readouterr().err


def test_missing_input_exits_2(tmp_path):
    assert run("gen-data", "--corpus", tmp_path / "nope", "--out", tmp_path / "d") == EXIT_INPUT
    assert run("export-mesh", "--checkpoint", tmp_path / "none.ckpt", "--out", tmp_path / "m.obj") == EXIT_INPUT


def test_invalid_thread_settings(tmp_path, monkeypatch):
    monkeypatch.setenv("SAIS_THREADS", "many")
    assert run("gen-corpus", "--family", "cylinder", "--count", "1", "--out", tmp_path / "c") == EXIT_INPUT
    monkeypatch.delenv("SAIS_THREADS")
    assert run("gen-corpus", "--family", "cylinder", "--count", "1", "--threads", "0",
               "--out", tmp_path / "c") == EXIT_INPUT


def test_config_file_and_unknown_keys(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"count": 2, "yaw-range": 10.0}))
    assert run("gen-corpus", "--family", "cylinder", "--config", cfg, "--out", tmp_path / "c") == 0
    assert len(json.loads((tmp_path / "c" / "manifest.json").read_text())["shapes"]) == 2
    cfg.write_text(json.dumps({"colour": "red"}))
    assert run("gen-corpus", "--family", "cylinder", "--config", cfg, "--out", tmp_path / "d") == EXIT_INPUT


def test_eight_mugs_give_eight_objs(tmp_path):
    out = tmp_path / "mugs"
    assert run("gen-corpus", "--family", "mug", "--count", 8, "--resolution", 40, "--out", out) == 0
    assert len(list(out.glob("*.obj"))) == 8
    assert len(json.loads((out / "manifest.json").read_text())["shapes"]) == 8


def test_same_seed_gives_identical_manifests(tmp_path):
    for name in ("a", "b"):
        assert run("gen-corpus", "--family", "cylinder", "--count", 3, "--yaw-range", 40,
                   "--translation-range", 0.1, "--seed", 5, "--out", tmp_path / name) == 0
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    for obj in (tmp_path / "a").glob("*.obj"):
        assert obj.read_bytes() == (tmp_path / "b" / obj.name).read_bytes()


# -- end to end ----------------------------------------------------------------

TINY = ["--code-dim", 4, "--width", 16, "--hyper-width", 16, "--hidden-layers", 2, "--num-bands", 2,
        "--batch-size", 64, "--sphere-radius", 0.3, "--init-radius", 0.15, "--log-every", 10]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    assert run("gen-corpus", "--family", "cylinder", "--count", 3, "--range", "diameter=0.3,0.5",
               "--yaw-range", 20, "--translation-range", 0.02, "--out", root / "corpus") == 0
    assert run("gen-data", "--corpus", root / "corpus", "--n-surface", 1500, "--n-free", 500,
               "--keep-radius", 0.6, "--out", root / "data") == 0
    assert run("train", "--data", root / "data", "--out", root / "model.ckpt", "--iterations", 30, *TINY) == 0
    return root


def test_train_outputs(pipeline):
    rows = (pipeline / "model.loss.csv").read_text().splitlines()
    assert rows[0] == "iteration,loss" and len(rows) == 31
    assert all(np.isfinite(float(r.split(",")[1])) for r in rows[1:])
    report = json.loads((pipeline / "model.alignment.json").read_text())
    assert len(report["shapes"]) == 3 and np.isfinite(report["final_loss"])


def test_train_is_idempotent(pipeline, tmp_path):
    assert run("train", "--data", pipeline / "data", "--out", tmp_path / "again.ckpt", "--iterations", 30,
               *TINY) == 0
    assert (tmp_path / "again.ckpt").read_bytes() == (pipeline / "model.ckpt").read_bytes()
    assert (tmp_path / "again.loss.csv").read_bytes() == (pipeline / "model.loss.csv").read_bytes()


def test_align_eval_report(pipeline, tmp_path):
    assert run("align-eval", "--checkpoint", pipeline / "model.ckpt", "--data", pipeline / "data",
               "--grid-res", 24, "--points", 500, "--out", tmp_path / "r") == 0
    rows = (tmp_path / "r" / "alignment.csv").read_text().splitlines()
    assert rows[0].split(",")[:3] == ["shape", "reconstructed", "perturbed"] and len(rows) == 4


def test_export_mesh(pipeline, tmp_path):
    out = tmp_path / "m.obj"
    assert run("export-mesh", "--checkpoint", pipeline / "model.ckpt", "--grid-res", 24, "--out", out) == 0
    assert out.read_text().count("\nf ") > 0
    assert run("export-mesh", "--checkpoint", pipeline / "model.ckpt", "--shape", 9, "--out", out) == EXIT_INPUT


def test_transfer_without_match_exits_cleanly(pipeline, tmp_path):
    cloud = tmp_path / "far.ply"
    write_point_cloud(np.random.default_rng(0).normal(size=(200, 3)) * 0.01 + [5.0, 0.0, 0.0], cloud)
    out = tmp_path / "t.json"
    assert run("transfer", "--checkpoint", pipeline / "model.ckpt", "--cloud", cloud, "--reference", "0,0,0",
               "--candidates", 2, "--fit-iterations", 5, "--refine-top", 1, "--refine-iterations", 5,
               "--n-uniform", 200, "--out", out) == 0
    result = json.loads(out.read_text())
    assert result["accepted"] == []
    assert len(result["candidates"]) == 2 and all("residual" in c for c in result["candidates"])
    assert result["seed"] == 0


def test_divergence_exits_3(pipeline, tmp_path, capsys):
    code = run("train", "--data", pipeline / "data", "--out", tmp_path / "bad.ckpt", "--iterations", 5,
               "--lr", "1e30", *TINY)
    assert code == EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err
