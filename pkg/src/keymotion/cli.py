"""Command-line entry point: ``keymotion {build-data,train,tokenize,eval,ablate}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import RunConfig, load_config
from .dataset import SplitOverlapError, build_dataset, generate_split, read_tasks
from .harness import (MODES, AblationGrid, EvalError, EvalSuite, GroundTruthStub, ModelAnswerer, RandomStub,
                      run_ablation, run_suite)
from .optim import TrainingError
from .scenes import render_scene
from .tasks import CATEGORIES, sample_task
from .tokenizer import ConfigError, Tokenizer, sequence_length

log = logging.getLogger("keymotion")

USAGE, RUNTIME = 2, 1


class UsageError(Exception):
    pass


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig, files: list[Path], extra: dict | None = None) -> Path:
    """Record what produced the files under ``out``; paths are relative so identical runs match byte for byte."""
    entries = {}
    for f in sorted(set(files)):
        if f.is_file():
            entries[str(f.relative_to(out))] = _sha256(f)
    blob = {"command": command, "config_fingerprint": cfg.fingerprint(), "seed": cfg.seed, "files": entries}
    if extra:
        blob.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(blob, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _tasks(path: str | None, cfg: RunConfig, split: str) -> list:
    if path is None:
        return generate_split(cfg.data, split)
    p = Path(path)
    if p.is_dir():
        p = p / f"{split}.jsonl"
    if not p.is_file():
        raise UsageError(f"task file not found: {p}")
    return read_tasks(p)


# commands -------------------------------------------------------------------


def cmd_build_data(args) -> int:
    cfg = _load_cfg(args)
    data = cfg.data if args.seed is None else replace(cfg.data, seed=args.seed)
    out = Path(args.out)
    paths = build_dataset(data, out)
    for name, p in paths.items():
        n = sum(1 for _ in p.open(encoding="utf-8"))
        print(f"{name}: {n} tasks -> {p}")
    write_manifest(out, "build-data", replace(cfg, data=data), list(paths.values()) + [out / "data_config.json"])
    return 0


def cmd_train(args) -> int:
    from .training import Trainer

    cfg = _load_cfg(args)
    if args.steps is not None:
        cfg = replace(cfg, train=replace(cfg.train, steps=args.steps))
    out = Path(args.out)
    tasks = _tasks(args.data, cfg, "train")
    if args.resume and not Path(args.resume).is_file():
        raise UsageError(f"checkpoint not found: {args.resume}")
    trainer = Trainer(cfg, tasks, out, resume=args.resume)
    history = trainer.run(cfg.train.steps)
    if history:
        print(f"trained to step {trainer.state.step}: total loss {history[0]['total']:.4f} -> {history[-1]['total']:.4f}")
    print(f"checkpoint: {trainer.checkpoint_path}")
    files = [trainer.checkpoint_path, trainer.checkpoint_path.with_suffix(".json"), trainer.log_path]
    write_manifest(out, "train", trainer.bundle.cfg, files, {"steps": trainer.state.step})
    return 0


def cmd_tokenize(args) -> int:
    cfg = _load_cfg(args)
    tc = cfg.tokenizer
    if args.mode is not None:
        tc = replace(tc, mode=args.mode)
    if args.n_frames is not None:
        tc = replace(tc, n_frames=args.n_frames)
    if args.frames is not None:
        T = args.frames
    elif args.duration is not None:
        T = int(round(args.duration * args.fps)) + 1
    else:
        T = cfg.data.duration
    if T < 1 or args.fps <= 0:
        raise UsageError("a video needs at least one frame and a positive frame rate")
    category = args.category or ("direction" if T >= 8 else "color")
    if category not in CATEGORIES:
        raise UsageError(f"unknown category {category!r}")
    rng = np.random.default_rng(cfg.seed)
    try:
        task = sample_task(category, rng, cfg.data.height, cfg.data.width, T, args.fps, seed=None)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    video = render_scene(task.scene)
    if args.checkpoint:
        from .bundle import load_checkpoint

        bundle, _ = load_checkpoint(args.checkpoint)
        tok = bundle.tokenizer
        tok.cfg = replace(tok.cfg, mode=tc.mode, n_frames=tc.n_frames)
    else:
        tok = Tokenizer(tc, cfg.data.height, cfg.data.width, rng)
        tok.init_codebooks(video.frames[None], video.fps, rng)
    if tok.cfg.mode == "frame_sampling":
        seq = tok.frame_sampling_tokenize(video, tok.cfg.n_frames)
    else:
        seq = tok.tokenize_video(video)
    expected = sequence_length(tok.cfg, T, args.fps)
    if len(seq) != expected:
        raise RuntimeError(f"tokenizer produced {len(seq)} tokens, budget says {expected}")
    for i, e in enumerate(seq.entries):
        print(f"{i:4d} {e.role:<8s} window {e.t_window:3d} code {e.code}")
    print(f"{len(seq)} tokens ({T} frames at {args.fps:g} fps, {tok.cfg.mode}, S={tok.cfg.S})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        dump = seq.to_dump(tok.cfg)
        dump["n_tokens"] = len(seq)
        dump["video"] = {"frames": T, "fps": args.fps, "prompt": task.prompt}
        p = out / "tokens.json"
        p.write_text(json.dumps(dump, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        write_manifest(out, "tokenize", replace(cfg, tokenizer=tc), [p])
    return 0


def cmd_eval(args) -> int:
    from .report import emit_report

    cfg = _load_cfg(args)
    state = None
    if args.stub == "oracle":
        answerer = GroundTruthStub()
    elif args.stub == "random":
        answerer = RandomStub()
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint unless a --stub is chosen")
        if not Path(args.checkpoint).is_file():
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        from .bundle import load_checkpoint

        bundle, state = load_checkpoint(args.checkpoint)
        if args.config is None:
            cfg = bundle.cfg if args.seed is None else replace(bundle.cfg, seed=args.seed)
        bundle.cfg = replace(bundle.cfg, eval=cfg.eval)
        answerer = ModelAnswerer(bundle, args.decoder)
    tasks = _tasks(args.suite, cfg, cfg.eval.split)
    if args.limit is not None:
        tasks = tasks[: args.limit]
    cats = args.categories.split(",") if args.categories else cfg.eval.categories
    suite = EvalSuite(tasks, cfg.seed)
    if cats:
        bad = sorted(set(cats) - set(CATEGORIES))
        if bad:
            raise UsageError(f"unknown categories: {', '.join(bad)}")
        suite = suite.only(cats)
    train = _tasks(args.data, cfg, "train") if args.data else generate_split(cfg.data, "train")
    decode_seed = cfg.eval.decode_seed
    meta = {"fingerprint": cfg.fingerprint(), "checkpoint": Path(args.checkpoint).name if args.checkpoint else None,
            "stub": args.stub, "decode_seed": decode_seed}
    if state is not None:
        with answerer.bundle.using_ema(state):
            report = run_suite(answerer, suite, args.mode, decode_seed, train_tasks=train, config=meta)
    else:
        report = run_suite(answerer, suite, args.mode, decode_seed, train_tasks=train, config=meta)
    out = Path(args.out)
    paths = emit_report(report, out / f"report_{args.mode}", plot=not args.no_plot)
    for c, v in report.per_category.items():
        lo, hi = v["ci"]
        print(f"{c:<13s} {v['correct']:4d}/{v['total']:<4d} {v['acc']:6.2f}  [{lo:5.1f}, {hi:5.1f}]")
    print(f"average {report.average:.2f}  ({report.failures} decode failures)")
    files = [p for k, p in paths.items() if k != ".timing.json"]
    write_manifest(out, f"eval {args.mode}", cfg, files)
    return 0


def cmd_ablate(args) -> int:
    from .report import emit_table

    cfg = _load_cfg(args)
    gp = Path(args.grid)
    if not gp.is_file():
        raise UsageError(f"grid file not found: {gp}")
    try:
        raw = json.loads(gp.read_text(encoding="utf-8"))
        grid = AblationGrid.from_dict(raw)
    except (json.JSONDecodeError, EvalError, ConfigError, TypeError, AttributeError) as exc:
        raise UsageError(f"invalid grid {gp}: {exc}") from exc
    for cell in grid.cells:
        try:
            replace(cfg.tokenizer, **cell.tokenizer)
        except (TypeError, ConfigError) as exc:
            raise UsageError(f"cell {cell.label}: {exc}") from exc
    train = _tasks(args.data, cfg, "train")
    suite = None
    if grid.evaluate:
        tasks = _tasks(args.suite, cfg, cfg.eval.split)
        if args.limit is not None:
            tasks = tasks[: args.limit]
        suite = EvalSuite(tasks, cfg.seed)
    out = Path(args.out)
    cells = run_ablation(cfg, grid, train, suite, out / "runs")
    paths = emit_table(cells, out / "ablation", plot=not args.no_plot)
    for c in cells:
        tail = c.get("error") or (f"avg {c['report'].average:.2f}" if "report" in c else "")
        print(f"{c['label']:<16s} seed {c['seed']:<3d} {c.get('tokens', '?'):>4} tokens  {tail}")
    write_manifest(out, "ablate", cfg, [p for k, p in paths.items() if k != ".timing.json"])
    return 0 if not any("error" in c for c in cells) else RUNTIME


# parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="keymotion", description="Key-frame plus motion video tokens on synthetic clips.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-data", parents=[common], help="write train/val/test task files")
    s.set_defaults(fn=cmd_build_data)

    s = sub.add_parser("train", parents=[common], help="train tokenizer, language model and decoder jointly")
    s.add_argument("--data", help="dataset directory or train.jsonl (generated from the config when omitted)")
    s.add_argument("--steps", type=int, help="override the number of optimiser steps")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("tokenize", parents=[common], help="tokenize a synthetic clip and print the token listing")
    s.add_argument("--frames", type=int, help="number of frames")
    s.add_argument("--duration", type=float, help="clip length in seconds (frames = duration*fps + 1)")
    s.add_argument("--fps", type=float, default=8.0, help="frame rate (default 8)")
    s.add_argument("--category", help="scene category to render")
    s.add_argument("--mode", choices=("decoupled", "frame_sampling"), help="override the tokenizer mode")
    s.add_argument("--n-frames", type=int, help="frames kept in frame_sampling mode")
    s.add_argument("--checkpoint", help="use a trained tokenizer")
    s.set_defaults(fn=cmd_tokenize, out=None)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint (or stub) on an evaluation suite")
    s.add_argument("--mode", required=True, choices=MODES)
    s.add_argument("--checkpoint", help="model checkpoint (model.vtok)")
    s.add_argument("--stub", choices=("oracle", "random"), help="score a reference answerer instead of a model")
    s.add_argument("--suite", help="suite .jsonl or dataset directory (generated when omitted)")
    s.add_argument("--data", help="training tasks used for the disjointness check")
    s.add_argument("--decoder", choices=("diffusion", "regress"), help="video decoding path")
    s.add_argument("--categories", help="comma-separated subset of categories")
    s.add_argument("--limit", type=int, help="use only the first N tasks")
    s.add_argument("--no-plot", action="store_true", help="skip the PNG figure")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="train and evaluate a grid of tokenizer configs")
    s.add_argument("--grid", required=True, help="grid JSON with cells, seeds, steps")
    s.add_argument("--data", help="dataset directory or train.jsonl")
    s.add_argument("--suite", help="suite .jsonl or dataset directory")
    s.add_argument("--limit", type=int, help="use only the first N suite tasks")
    s.add_argument("--no-plot", action="store_true", help="skip the PNG figure")
    s.set_defaults(fn=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on unknown flags or bad choices
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError, CheckpointError, SplitOverlapError, EvalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE
    except (TrainingError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME


if __name__ == "__main__":
    sys.exit(main())
