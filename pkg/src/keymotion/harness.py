"""Evaluation protocols: prompt-to-video alignment, clip understanding, and tokenizer ablation grids."""

from __future__ import annotations

import difflib
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.stats import binom, binomtest

from .bundle import ModelBundle
from .config import RunConfig
from .dataset import check_disjoint, split_of_seed
from .judge import ABSTAIN, judge_from_pixels
from .optim import OptimizerState
from .scenes import render_scene
from .tasks import CATEGORIES, TaskTriplet, judge_from_program
from .tokenizer import TokenizerConfig, frame_sampling_budget, sequence_length, token_budget

log = logging.getLogger(__name__)

TV_ALIGN = "tvalign"
UNDERSTANDING = "understanding"
MODES = (TV_ALIGN, UNDERSTANDING)
REFERENCE_CLIP = (5.0, 24.0)  # seconds, frames per second used for reported token counts


class EvalError(RuntimeError):
    pass


def wilson_interval(k: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    p = k / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if k == 0 else max(0.0, centre - half)
    hi = 1.0 if k == n else min(1.0, centre + half)
    return (lo, hi)


def binomial_p(k: int, n: int, p: float = 0.25) -> float:
    """Two-sided exact binomial test p-value."""
    return float(binomtest(k, n, p, alternative="two-sided").pvalue)


def binomial_interval(n: int, p: float = 0.25, level: float = 0.99) -> tuple[int, int]:
    """Central interval [lo, hi] of counts holding at least ``level`` of Binomial(n, p) mass."""
    tail = (1.0 - level) / 2.0
    return int(binom.ppf(tail, n, p)), int(binom.isf(tail, n, p))


@dataclass
class EvalSuite:
    tasks: list[TaskTriplet]
    seed: int = 0

    def __post_init__(self):
        if not self.tasks:
            raise EvalError("evaluation suite is empty")
        leaked = [t.scene.seed for t in self.tasks
                  if t.scene.seed is not None and split_of_seed(t.scene.seed) == "train"]
        if leaked:
            raise EvalError(f"suite contains {len(leaked)} scenes from the training seed range")

    def counts(self) -> dict[str, int]:
        out = {c: 0 for c in CATEGORIES}
        for t in self.tasks:
            out[t.category] += 1
        return out

    def only(self, categories) -> "EvalSuite":
        return EvalSuite([t for t in self.tasks if t.category in set(categories)], self.seed)


@dataclass
class EvalReport:
    mode: str
    seed: int
    per_category: dict[str, dict]
    average: float
    tokens: int
    config: dict = field(default_factory=dict)
    failures: int = 0
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return {"mode": self.mode, "seed": self.seed, "per_category": self.per_category, "average": self.average,
                "tokens": self.tokens, "config": self.config, "failures": self.failures}

    @classmethod
    def from_dict(cls, d: dict, wall_clock: float = 0.0) -> "EvalReport":
        return cls(d["mode"], d["seed"], d["per_category"], d["average"], d["tokens"], d.get("config", {}),
                   d.get("failures", 0), wall_clock)

    def accuracy(self, categories) -> float:
        """Pooled accuracy (percent) over the named categories."""
        k = sum(self.per_category[c]["correct"] for c in categories if c in self.per_category)
        n = sum(self.per_category[c]["total"] for c in categories if c in self.per_category)
        if n == 0:
            raise EvalError("no tasks in the requested categories")
        return 100.0 * k / n


def aggregate(mode: str, tasks: list[TaskTriplet], correct: list[bool], seed: int, tokens: int,
              config: dict | None = None, failures: int = 0) -> EvalReport:
    per: dict[str, dict] = {}
    for c in CATEGORIES:
        hits = [ok for t, ok in zip(tasks, correct) if t.category == c]
        if not hits:
            continue
        k, n = int(sum(hits)), len(hits)
        lo, hi = wilson_interval(k, n)
        per[c] = {"correct": k, "total": n, "acc": 100.0 * k / n, "ci": [100.0 * lo, 100.0 * hi]}
    if not per:
        raise EvalError("cannot build a report from an empty suite")
    # unweighted mean over the categories present
    average = float(np.mean([v["acc"] for v in per.values()]))
    return EvalReport(mode, seed, per, average, tokens, config or {}, failures)


# answerers ------------------------------------------------------------------


class Answerer(Protocol):
    def tv_align(self, task: TaskTriplet, index: int, decode_seed: int) -> int: ...

    def understand(self, task: TaskTriplet, index: int, decode_seed: int) -> int: ...

    def tokens(self, task: TaskTriplet) -> int: ...


def match_choice(text: str, choices: list[str]) -> int:
    """Exact match after whitespace normalisation, else the closest choice if it is close enough."""
    norm = " ".join(text.split())
    for i, c in enumerate(choices):
        if norm == c:
            return i
    close = difflib.get_close_matches(norm, choices, n=1, cutoff=0.8)
    return choices.index(close[0]) if close else ABSTAIN


class ModelAnswerer:
    """Runs a trained bundle: generate then judge, or read the clip then answer."""

    def __init__(self, bundle: ModelBundle, decoder_path: str | None = None):
        self.bundle = bundle
        self.decoder_path = decoder_path or bundle.cfg.eval.decoder

    def _rng(self, index: int, decode_seed: int) -> np.random.Generator:
        return np.random.default_rng([decode_seed, index])

    def generate(self, task: TaskTriplet, index: int, decode_seed: int):
        s = task.scene
        return self.bundle.generate_video(task.prompt, s.duration, s.fps, self._rng(index, decode_seed),
                                          self.decoder_path)

    def tv_align(self, task, index, decode_seed):
        return judge_from_pixels(self.generate(task, index, decode_seed), task.question, task.choices)

    def understand(self, task, index, decode_seed):
        text = self.bundle.answer(task.question, render_scene(task.scene), self._rng(index, decode_seed))
        return match_choice(text, task.choices)

    def tokens(self, task):
        return sequence_length(self.bundle.cfg.tokenizer, task.scene.duration, task.scene.fps)


class GroundTruthStub:
    """Protocol upper bound: renders the true scene and reads the program's answer."""

    def tv_align(self, task, index, decode_seed):
        return judge_from_pixels(render_scene(task.scene), task.question, task.choices)

    def understand(self, task, index, decode_seed):
        return judge_from_program(task.scene, task.question, task.choices)

    def tokens(self, task):
        return 0


class RandomStub:
    """Chance baseline: a uniformly random choice per task."""

    def tv_align(self, task, index, decode_seed):
        return int(np.random.default_rng([decode_seed, index]).integers(len(task.choices)))

    understand = tv_align

    def tokens(self, task):
        return 0


# protocols ------------------------------------------------------------------


def eval_threads() -> int:
    raw = os.environ.get("VTOK_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise EvalError(f"VTOK_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


def run_suite(answerer: Answerer, suite: EvalSuite, mode: str, decode_seed: int = 0,
              train_tasks: list[TaskTriplet] | None = None, config: dict | None = None,
              threads: int | None = None) -> EvalReport:
    if mode not in MODES:
        raise EvalError(f"unknown evaluation mode {mode!r}")
    if train_tasks is not None:
        check_disjoint(train_tasks, suite.tasks)
    fn = answerer.tv_align if mode == TV_ALIGN else answerer.understand

    def one(item):
        i, task = item
        try:
            return fn(task, i, decode_seed) == task.answer, False
        except Exception as exc:  # a failed decode scores as incorrect
            log.warning("task %d (%s) failed: %s", i, task.category, exc)
            return False, True

    start = time.perf_counter()
    items = list(enumerate(suite.tasks))
    n_threads = eval_threads() if threads is None else threads
    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(x) for x in items]
    correct = [ok for ok, _ in results]
    failures = sum(f for _, f in results)
    report = aggregate(mode, suite.tasks, correct, decode_seed, answerer.tokens(suite.tasks[0]), config, failures)
    report.wall_clock = time.perf_counter() - start
    return report


def run_tv_align(answerer: Answerer, suite: EvalSuite, **kw) -> EvalReport:
    return run_suite(answerer, suite, TV_ALIGN, **kw)


def run_understanding(answerer: Answerer, suite: EvalSuite, **kw) -> EvalReport:
    return run_suite(answerer, suite, UNDERSTANDING, **kw)


# ablations --------------------------------------------------------------------


def reference_tokens(tc: TokenizerConfig) -> int:
    """Token count a config spends on the reference 5 s, 24 fps clip."""
    if tc.mode == "frame_sampling":
        return frame_sampling_budget(tc.n_frames, tc.S)
    return token_budget(REFERENCE_CLIP[0], tc.S, tc.motion_rate)


@dataclass
class AblationCell:
    label: str
    tokenizer: dict


@dataclass
class AblationGrid:
    cells: list[AblationCell]
    seeds: list[int] = field(default_factory=lambda: [0])
    steps: int | None = None
    mode: str = TV_ALIGN
    categories: list[str] | None = None
    evaluate: bool = True

    def __post_init__(self):
        if not self.cells:
            raise EvalError("ablation grid has no cells")
        if not self.seeds:
            raise EvalError("ablation grid has no seeds")
        if self.mode not in MODES:
            raise EvalError(f"unknown evaluation mode {self.mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "AblationGrid":
        known = {"cells", "seeds", "steps", "mode", "categories", "evaluate"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise EvalError(f"unknown key(s) in ablation grid: {', '.join(unknown)}")
        cells = [AblationCell(c.get("label", f"cell{i}"), dict(c.get("tokenizer", {})))
                 for i, c in enumerate(d.get("cells", []))]
        return cls(cells, list(d.get("seeds", [0])), d.get("steps"), d.get("mode", TV_ALIGN),
                   d.get("categories"), bool(d.get("evaluate", True)))


def run_ablation(base: RunConfig, grid: AblationGrid, train_tasks: list[TaskTriplet], suite: EvalSuite | None,
                 out_dir: str | Path) -> list[dict]:
    """Train and evaluate one model per (cell, seed) under identical budgets.

    A failing cell is recorded with its error and the grid carries on.
    """
    from .training import Trainer

    out = Path(out_dir)
    rows = []
    if grid.evaluate and suite is None:
        raise EvalError("an evaluating grid needs a suite")
    if suite is not None:
        check_disjoint(train_tasks, suite.tasks)
        if grid.categories:
            suite = suite.only(grid.categories)
    for cell in grid.cells:
        for seed in grid.seeds:
            row = {"label": cell.label, "seed": seed}
            try:
                tc = replace(base.tokenizer, **cell.tokenizer)
                train = base.train if grid.steps is None else replace(base.train, steps=grid.steps)
                cfg = replace(base, seed=seed, tokenizer=tc, train=train)
                row["tokens"] = reference_tokens(tc)
                T, fps = train_tasks[0].scene.duration, train_tasks[0].scene.fps
                row["clip_tokens"] = sequence_length(tc, T, fps)
                if grid.evaluate:
                    trainer = Trainer(cfg, train_tasks, out / f"{cell.label}_seed{seed}")
                    trainer.run()
                    with trainer.bundle.using_ema(trainer.state):
                        report = run_suite(ModelAnswerer(trainer.bundle), suite, grid.mode,
                                           decode_seed=cfg.eval.decode_seed, config=cfg.to_dict())
                    row["report"] = report
            except Exception as exc:
                log.warning("ablation cell %s seed %d failed: %s", cell.label, seed, exc)
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
    return rows


def evaluate_checkpoint(bundle: ModelBundle, state: OptimizerState | None, suite: EvalSuite, mode: str,
                        **kw) -> EvalReport:
    """Evaluate with EMA weights when a shadow is available."""
    answerer = ModelAnswerer(bundle)
    if state is None:
        return run_suite(answerer, suite, mode, **kw)
    with bundle.using_ema(state):
        return run_suite(answerer, suite, mode, **kw)
