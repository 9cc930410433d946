"""JSON-lines task datasets with disjoint per-split scene seeds."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .tasks import CATEGORIES, TaskTriplet, sample_task

SPLITS = ("train", "val", "test")
# each split draws scene seeds from its own half-open range of width SEED_SPAN
SEED_SPAN = 1_000_000_000
_SPLIT_BASE = {"train": 0, "val": SEED_SPAN, "test": 2 * SEED_SPAN}


class SplitOverlapError(RuntimeError):
    pass


@dataclass
class DataConfig:
    seed: int = 0
    n_train: int = 64
    n_val: int = 70
    n_test: int = 700
    height: int = 64
    width: int = 64
    duration: int = 16
    fps: float = 8.0

    def sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


def scene_seed(split: str, seed: int, index: int) -> int:
    return _SPLIT_BASE[split] + (seed * 1_000_003 + index) % SEED_SPAN


def split_of_seed(s: int) -> str:
    return SPLITS[s // SEED_SPAN]


def generate_split(cfg: DataConfig, split: str, n: int | None = None) -> list[TaskTriplet]:
    n = cfg.sizes()[split] if n is None else n
    if n < 1:
        raise ValueError(f"split {split} needs at least one task")
    tasks = []
    for i in range(n):
        s = scene_seed(split, cfg.seed, i)
        tasks.append(sample_task(CATEGORIES[i % len(CATEGORIES)], np.random.default_rng(s),
                                 height=cfg.height, width=cfg.width, duration=cfg.duration,
                                 fps=cfg.fps, seed=s))
    return tasks


def encode_record(task: TaskTriplet) -> str:
    return json.dumps(task.to_dict(), sort_keys=True, separators=(",", ":"))


def write_tasks(path: str | Path, tasks: list[TaskTriplet]) -> None:
    Path(path).write_text("".join(encode_record(t) + "\n" for t in tasks), encoding="utf-8")


def read_tasks(path: str | Path) -> list[TaskTriplet]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [TaskTriplet.from_dict(json.loads(line)) for line in lines if line.strip()]


def check_disjoint(*splits: list[TaskTriplet]) -> None:
    seen: dict[int, int] = {}
    for k, tasks in enumerate(splits):
        for t in tasks:
            s = t.scene.seed
            if s in seen and seen[s] != k:
                raise SplitOverlapError(f"scene seed {s} appears in two splits")
            seen[s] = k


def build_dataset(cfg: DataConfig, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = {name: generate_split(cfg, name) for name in SPLITS}
    check_disjoint(*splits.values())
    paths = {}
    for name, tasks in splits.items():
        paths[name] = out / f"{name}.jsonl"
        write_tasks(paths[name], tasks)
    (out / "data_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    return paths


def category_counts(tasks: list[TaskTriplet]) -> dict[str, int]:
    counts = {c: 0 for c in CATEGORIES}
    for t in tasks:
        counts[t.category] += 1
    return counts
