import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_config
from keymotion.bundle import ModelBundle
from keymotion.dataset import DataConfig, SplitOverlapError, generate_split
from keymotion.harness import (TV_ALIGN, UNDERSTANDING, AblationGrid, EvalError, EvalReport, EvalSuite,
                               GroundTruthStub, ModelAnswerer, RandomStub, aggregate, binomial_interval, binomial_p,
                               match_choice, reference_tokens, run_ablation, run_suite, wilson_interval)
from keymotion.report import CSV_COLUMNS, emit_report, emit_table, load_report
from keymotion.tasks import CATEGORIES
from keymotion.tokenizer import TokenizerConfig

CFG = DataConfig(n_test=28)


@pytest.fixture(scope="module")
def suite():
    return EvalSuite(generate_split(CFG, "test"))


def test_wilson_interval_known_values():
    lo, hi = wilson_interval(50, 100)
    assert lo == pytest.approx(0.4038, abs=1e-4) and hi == pytest.approx(0.5962, abs=1e-4)
    assert wilson_interval(0, 10)[0] == 0.0 and wilson_interval(10, 10)[1] == 1.0


@given(st.integers(1, 500), st.data())
def test_wilson_interval_contains_estimate(n, data):
    k = data.draw(st.integers(0, n))
    lo, hi = wilson_interval(k, n)
    assert 0.0 <= lo <= k / n <= hi <= 1.0


def test_binomial_helpers():
    lo, hi = binomial_interval(700, 0.25, 0.99)
    assert lo < 175 < hi
    assert binomial_p(175, 700) > 0.5
    assert binomial_p(60, 100) < 1e-6


def test_average_is_unweighted_category_mean(suite):
    tasks = suite.tasks[:9]  # two counting tasks, one of everything else
    correct = [t.category == "counting" for t in tasks]
    r = aggregate(TV_ALIGN, tasks, correct, 0, 46)
    assert r.per_category["counting"]["acc"] == 100.0
    assert r.average == pytest.approx(100.0 / 7)
    assert sum(v["total"] for v in r.per_category.values()) == 9


def test_oracle_and_random_stubs(suite):
    assert run_suite(GroundTruthStub(), suite, TV_ALIGN).average == 100.0
    assert run_suite(GroundTruthStub(), suite, UNDERSTANDING).average == 100.0
    r = run_suite(RandomStub(), suite, UNDERSTANDING)
    k = sum(v["correct"] for v in r.per_category.values())
    lo, hi = binomial_interval(len(suite.tasks), 0.25, 0.999)
    assert lo <= k <= hi


def test_empty_suite_and_training_seeds_rejected():
    with pytest.raises(EvalError):
        EvalSuite([])
    with pytest.raises(EvalError):
        EvalSuite(generate_split(CFG, "train", 3))


def test_overlap_with_training_split_is_fatal(suite):
    with pytest.raises(SplitOverlapError):
        run_suite(RandomStub(), suite, TV_ALIGN, train_tasks=suite.tasks[:1])


def test_unknown_mode_rejected(suite):
    with pytest.raises(EvalError):
        run_suite(RandomStub(), suite, "vbench")


class Exploding(RandomStub):
    def tv_align(self, task, index, decode_seed):
        if index % 2:
            raise RuntimeError("decoder blew up")
        return task.answer


def test_decode_failures_count_as_incorrect(suite):
    r = run_suite(Exploding(), suite, TV_ALIGN)
    assert r.failures == 14
    assert sum(v["correct"] for v in r.per_category.values()) == 14


def test_threads_do_not_change_results(suite):
    a = run_suite(RandomStub(), suite, TV_ALIGN, threads=1)
    b = run_suite(RandomStub(), suite, TV_ALIGN, threads=4)
    assert a.to_dict() == b.to_dict()


def test_match_choice():
    choices = ["top left", "top right", "bottom left", "bottom right"]
    assert match_choice("bottom  right", choices) == 3
    assert match_choice("bottom rigt", choices) == 3
    assert match_choice("red", choices) == -1


def test_model_answerer_is_a_pure_function_of_seeds(suite):
    cfg = tiny_config()
    small = EvalSuite(generate_split(cfg.data, "test", 7))
    bundle = ModelBundle(cfg)
    a = run_suite(ModelAnswerer(bundle), small, TV_ALIGN, decode_seed=3)
    b = run_suite(ModelAnswerer(ModelBundle(cfg)), small, TV_ALIGN, decode_seed=3)
    assert a.to_dict() == b.to_dict()
    u = run_suite(ModelAnswerer(bundle), small, UNDERSTANDING)
    assert u.tokens == 28 and u.failures == 0


def test_report_round_trip_and_csv_order(tmp_path, suite):
    r = run_suite(RandomStub(), suite, TV_ALIGN, config={"fingerprint": "abc"})
    paths = emit_report(r, tmp_path / "rep")
    back = load_report(paths[".json"])
    assert back.to_dict() == r.to_dict()
    assert back.wall_clock == pytest.approx(r.wall_clock)
    header = paths[".csv"].read_text().splitlines()[0].split(",")
    assert tuple(header) == CSV_COLUMNS
    assert header[3:10] == list(CATEGORIES)
    tsv = paths[".tsv"].read_text().splitlines()
    assert tsv[0] == "category\taccuracy" and len(tsv) == 8
    assert paths[".png"].read_bytes()[:4] == b"\x89PNG"
    blob = json.loads(paths[".json"].read_text())
    for key in ("config", "seed", "per_category", "average", "tokens"):
        assert key in blob
    assert set(blob["per_category"]["counting"]) == {"correct", "total", "acc", "ci"}


def test_identical_reports_are_byte_identical(tmp_path, suite):
    a = emit_report(run_suite(RandomStub(), suite, TV_ALIGN), tmp_path / "a")
    b = emit_report(run_suite(RandomStub(), suite, TV_ALIGN), tmp_path / "b")
    for ext in (".json", ".csv", ".tsv", ".png"):
        assert a[ext].read_bytes() == b[ext].read_bytes()


def test_empty_report_refused(tmp_path):
    with pytest.raises(EvalError):
        emit_report(EvalReport(TV_ALIGN, 0, {}, math.nan, 0), tmp_path / "x")


def test_reference_token_counts():
    assert [reference_tokens(TokenizerConfig(S=s)) for s in (1, 4, 9, 16, 25)] == [31, 34, 39, 46, 55]
    assert [reference_tokens(TokenizerConfig(motion_rate=r)) for r in (3, 6, 12)] == [31, 46, 76]
    assert [reference_tokens(TokenizerConfig(mode="frame_sampling", n_frames=n)) for n in (4, 8)] == [64, 128]


def test_ablation_bookkeeping_without_training(tmp_path):
    cfg = tiny_config()
    grid = AblationGrid.from_dict({"cells": [{"label": f"S{s}", "tokenizer": {"S": s}} for s in (1, 4, 16)]
                                   + [{"label": "bad", "tokenizer": {"S": 7}}], "evaluate": False})
    cells = run_ablation(cfg, grid, generate_split(cfg.data, "train"), None, tmp_path)
    assert [c.get("tokens") for c in cells[:3]] == [31, 34, 46]
    assert "error" in cells[3] and "ConfigError" in cells[3]["error"]
    paths = emit_table(cells, tmp_path / "table")
    lines = paths[".csv"].read_text().splitlines()
    assert lines[0].startswith("label,seed,tokens,clip_tokens,counting")
    assert len(lines) == 5


def test_ablation_trains_and_scores_each_cell(tmp_path):
    cfg = tiny_config(steps=2)
    grid = AblationGrid.from_dict({"cells": [{"label": "dec", "tokenizer": {}},
                                             {"label": "fs4", "tokenizer": {"mode": "frame_sampling", "n_frames": 4}}],
                                   "seeds": [0], "categories": ["direction"]})
    suite = EvalSuite(generate_split(cfg.data, "test", 4))
    cells = run_ablation(cfg, grid, generate_split(cfg.data, "train"), suite, tmp_path)
    assert all("report" in c for c in cells), cells
    assert [c["report"].tokens for c in cells] == [28, 64]
    assert list(cells[0]["report"].per_category) == ["direction"]


def test_grid_validation():
    with pytest.raises(EvalError):
        AblationGrid.from_dict({"cells": []})
    with pytest.raises(EvalError):
        AblationGrid.from_dict({"cells": [{"tokenizer": {}}], "sedes": [1]})
