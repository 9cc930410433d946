import json
import subprocess
import sys

import pytest

from conftest import tiny_config
from keymotion.cli import build_parser, main
from keymotion.config import save_config


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    save_config(tiny_config(steps=2), p)
    return p


def last_line(capsys):
    return capsys.readouterr().out.strip().splitlines()[-1]


@pytest.mark.parametrize("argv,expected", [
    (["--duration", "5", "--fps", "24"], "46 tokens"),
    (["--duration", "5", "--fps", "24", "--mode", "frame_sampling", "--n-frames", "8"], "128 tokens"),
    (["--duration", "5", "--fps", "24", "--mode", "frame_sampling", "--n-frames", "4"], "64 tokens"),
    (["--frames", "1"], "16 tokens"),
])
def test_tokenize_budget_summary(argv, expected, capsys):
    assert main(["tokenize", *argv]) == 0
    assert last_line(capsys).startswith(expected)


def test_tokenize_listing_is_role_tagged(tmp_path, capsys):
    assert main(["tokenize", "--frames", "9", "--fps", "4", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split()[1] == "spatial" and out[-2].split()[1] == "motion"
    dump = json.loads((tmp_path / "tokens.json").read_text())
    assert dump["n_tokens"] == 28
    assert (tmp_path / "manifest.json").is_file()


def test_bad_tokenize_spec_exits_2():
    assert main(["tokenize", "--frames", "0"]) == 2
    assert main(["tokenize", "--frames", "4", "--category", "direction"]) == 2


def test_usage_errors_exit_2(tmp_path, capsys):
    for argv in (["eval", "--mode", "vbench", "--stub", "random"], ["train", "--bogus"], []):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2
    assert main(["build-data", "--config", str(tmp_path / "missing.json")]) == 2
    (tmp_path / "bad.json").write_text('{"version": 1, "trian": {}}')
    assert main(["build-data", "--config", str(tmp_path / "bad.json")]) == 2
    assert main(["eval", "--mode", "tvalign", "--checkpoint", str(tmp_path / "nope.vtok")]) == 2
    assert main(["eval", "--mode", "tvalign"]) == 2


def test_help_lists_every_flag():
    text = build_parser()._subparsers._group_actions[0].choices["eval"].format_help()
    for flag in ("--config", "--seed", "--out", "--mode", "--checkpoint", "--stub", "--suite", "--limit"):
        assert flag in text


def test_build_data_is_reproducible(tmp_path, cfg_path, capsys):
    assert main(["build-data", "--config", str(cfg_path), "--out", str(tmp_path / "a")]) == 0
    assert main(["build-data", "--config", str(cfg_path), "--out", str(tmp_path / "b")]) == 0
    assert "train: 8 tasks" in capsys.readouterr().out
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_eval_stubs(tmp_path, capsys):
    assert main(["eval", "--mode", "tvalign", "--stub", "oracle", "--limit", "70", "--out", str(tmp_path)]) == 0
    assert last_line(capsys).startswith("average 100.00")
    assert main(["eval", "--mode", "understanding", "--stub", "random", "--out", str(tmp_path), "--no-plot"]) == 0
    avg = float(last_line(capsys).split()[1])
    assert 15.0 < avg < 35.0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert "report_understanding.json" in manifest["files"]


def test_train_then_eval_round_trip(tmp_path, cfg_path, capsys):
    data = tmp_path / "data"
    assert main(["build-data", "--config", str(cfg_path), "--out", str(data)]) == 0
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--data", str(data), "--out", str(run)]) == 0
    assert (run / "model.vtok").is_file() and (run / "train_log.csv").is_file()
    ev = tmp_path / "ev"
    argv = ["eval", "--mode", "understanding", "--checkpoint", str(run / "model.vtok"), "--suite", str(data),
            "--data", str(data), "--limit", "7", "--out", str(ev)]
    assert main(argv) == 0
    assert json.loads((ev / "report_understanding.json").read_text())["tokens"] == 28


def test_empty_grid_exits_2(tmp_path):
    g = tmp_path / "grid.json"
    g.write_text('{"cells": []}')
    assert main(["ablate", "--grid", str(g), "--out", str(tmp_path)]) == 2
    g.write_text('{"cells": [{"tokenizer": {"S": 7}}]}')
    assert main(["ablate", "--grid", str(g), "--out", str(tmp_path)]) == 2


@pytest.mark.parametrize("grid,counts", [
    ({"cells": [{"label": f"r{r}", "tokenizer": {"motion_rate": r}} for r in (3, 6, 12)]}, [31, 46, 76]),
    ({"cells": [{"label": f"S{s}", "tokenizer": {"S": s}} for s in (1, 4, 9, 16, 25)]}, [31, 34, 39, 46, 55]),
])
def test_ablate_token_counts(tmp_path, cfg_path, grid, counts):
    g = tmp_path / "grid.json"
    g.write_text(json.dumps({**grid, "evaluate": False}))
    assert main(["ablate", "--grid", str(g), "--config", str(cfg_path), "--out", str(tmp_path)]) == 0
    table = json.loads((tmp_path / "ablation.json").read_text())
    assert [row["tokens"] for row in table] == counts


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "keymotion.cli", "tokenize", "--frames", "1"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "16 tokens" in res.stdout
