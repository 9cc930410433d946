"""Joint training of both branches with CSV logging, periodic checkpoints and exact resume."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .bundle import ModelBundle, load_checkpoint, save_checkpoint
from .config import RunConfig
from .mllm import combined_loss, generation_example, make_batch, understanding_example
from .optim import OptimizerState, TrainingError, adamw_step, init_state
from .scenes import render_scene
from .tasks import TaskTriplet, augment_task, scene_questions
from .tokenizer import n_motion_tokens

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "total", "under", "vis_lm", "dec", "reg", "commit")


@dataclass
class ClipCache:
    frames: np.ndarray  # N x T x H x W x 3
    fps: float
    tasks: list[TaskTriplet]
    latents: np.ndarray | None = None  # decoder latents, filled in by the trainer

    @classmethod
    def render(cls, tasks: list[TaskTriplet]) -> "ClipCache":
        clips = [render_scene(t.scene) for t in tasks]
        if len({c.frames.shape for c in clips}) != 1 or len({c.fps for c in clips}) != 1:
            raise ValueError("training clips must share shape and frame rate")
        return cls(np.stack([c.frames for c in clips]), clips[0].fps, tasks)


def _encode(bundle: ModelBundle, frames: np.ndarray, fps: float, train_tokenizer: bool):
    tok = bundle.tokenizer
    n = n_motion_tokens(tok.cfg, frames.shape[1], fps)
    if train_tokenizer:
        spatial, motion = tok.encode_batch(frames, n)
    else:
        with ad.no_grad():
            spatial, motion = tok.encode_batch(frames, n)
    s_ids, s_st, m_ids, m_st = tok.quantize_batch(spatial, motion)
    vocab = bundle.vocab
    ids = s_ids + vocab.spatial_offset
    feats = s_st
    if motion is not None:
        ids = np.concatenate([ids, m_ids + vocab.motion_offset], axis=1)
        feats = ad.concat([s_st, m_st], axis=1)
    return {"spatial": spatial, "motion": motion, "s_ids": s_ids, "m_ids": m_ids, "ids": ids, "feats": feats}


def _commitment(enc: dict, bundle: ModelBundle) -> Tensor:
    tok = bundle.tokenizer
    s = enc["spatial"]
    diff = s - Tensor(tok.spatial_codebook.entries[enc["s_ids"]])
    total = (diff * diff).mean()
    if enc["motion"] is not None:
        m = enc["motion"]
        dm = m - Tensor(tok.motion_codebook.entries[enc["m_ids"]])
        total = total + (dm * dm).mean()
    return total


def _encode_tasks(bundle: ModelBundle, cache: ClipCache, idx: np.ndarray, tc, rng: np.random.Generator,
                  augment: bool = False):
    """Tokenize the clips of ``idx``, mirrored and recoloured when ``augment`` is set."""
    if not augment:
        tasks = [cache.tasks[i] for i in idx]
        frames = cache.frames[idx]
        latents = None if cache.latents is None else cache.latents[idx]
    else:
        tasks = [augment_task(cache.tasks[i], rng) for i in idx]
        frames = np.stack([render_scene(t.scene).frames for t in tasks])
        latents = bundle.decoder.to_latent(frames)
    enc = _encode(bundle, frames, cache.fps, tc.train_tokenizer)
    enc["frames"], enc["latents"] = frames, latents
    return enc, tasks


def train_step(bundle: ModelBundle, state: OptimizerState, cache: ClipCache, cfg: RunConfig, step: int) -> dict:
    """One optimiser update on an understanding half-batch plus a generation half-batch."""
    tc = cfg.train
    rng = np.random.default_rng([cfg.seed, step])
    half = tc.batch // 2
    n = len(cache.tasks)
    ui = rng.integers(n, size=half)
    gi = rng.integers(n, size=half)
    for p in bundle.params.values():
        p.grad = None

    enc_u, tasks_u = _encode_tasks(bundle, cache, ui, tc, rng, tc.augment)
    examples = []
    for row, task in enumerate(tasks_u):
        qas = scene_questions(task.scene, rng)
        _, question, choices, answer = qas[rng.integers(len(qas))]
        examples.append(understanding_example(bundle.vocab, question, enc_u["ids"][row], choices[answer]))
    l_under = bundle.mllm.loss(make_batch(examples, enc_u["feats"]))

    enc_g, tasks_g = _encode_tasks(bundle, cache, gi, tc, rng)
    frames_g, latents_g = enc_g.pop("frames"), enc_g.pop("latents")
    examples = [generation_example(bundle.vocab, t.prompt, enc_g["ids"][row]) for row, t in enumerate(tasks_g)]
    l_vis = bundle.mllm.loss(make_batch(examples, enc_g["feats"])) if tc.lambda_vis else None

    l_dec = l_reg = None
    if tc.lambda_dec:
        layout = bundle.layout(cache.frames.shape[1], cache.fps)
        ctx = bundle.decoder.context(enc_g["feats"], layout, cache.frames.shape[1])
        l_dec = bundle.decoder.diffusion_loss_batch(enc_g["feats"], layout, frames_g, rng, latents_g, ctx)
        l_reg = bundle.decoder.regression_loss_batch(enc_g["feats"], layout, frames_g, latents_g, ctx)

    total = combined_loss(l_under, l_vis, l_dec, tc.lambda_vis, tc.lambda_dec)
    objective = total
    if l_reg is not None:
        objective = objective + l_reg
    commit = None
    if tc.train_tokenizer and tc.commitment:
        commit = _commitment(enc_u, bundle) + _commitment(enc_g, bundle)
        objective = objective + commit * tc.commitment
    if not np.isfinite(objective.item()):
        raise TrainingError(f"non-finite loss at step {step}")
    objective.backward()
    adamw_step(bundle.params, state)

    tok = bundle.tokenizer
    for enc in (enc_u, enc_g):
        tok.update_codebooks(enc["spatial"], enc["s_ids"], enc["motion"], enc["m_ids"], step, rng)

    def val(x):
        return float("nan") if x is None else x.item()

    return {"step": step, "total": total.item(), "under": l_under.item(), "vis_lm": val(l_vis),
            "dec": val(l_dec), "reg": val(l_reg), "commit": val(commit)}


class Trainer:
    """Owns a bundle and optimiser state; writes ``train_log.csv`` and checkpoints under ``out_dir``."""

    def __init__(self, cfg: RunConfig, tasks: list[TaskTriplet], out_dir: str | Path,
                 resume: str | Path | None = None):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cache = ClipCache.render(tasks)
        if resume is not None:
            self.bundle, self.state = load_checkpoint(resume)
        else:
            rng = np.random.default_rng(cfg.seed)
            self.bundle = ModelBundle(cfg, rng)
            self.bundle.tokenizer.init_codebooks(self.cache.frames, self.cache.fps, rng)
            tc = cfg.train
            self.state = init_state(self.bundle.params, lr=tc.lr, weight_decay=tc.weight_decay,
                                    ema_decay=tc.ema_decay)
        self.cache.latents = self.bundle.decoder.to_latent(self.cache.frames)
        self.log_path = self.out / "train_log.csv"

    @property
    def checkpoint_path(self) -> Path:
        return self.out / "model.vtok"

    def _open_log(self):
        rows = []
        if self.state.step and self.log_path.is_file():
            with self.log_path.open(newline="") as fh:
                rows = [r for r in csv.DictReader(fh) if int(r["step"]) < self.state.step]
        fh = self.log_path.open("w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
        return fh, writer

    def checkpoint(self) -> None:
        save_checkpoint(self.checkpoint_path, self.bundle, self.state)

    def run(self, steps: int | None = None) -> list[dict]:
        """Train until ``steps`` total updates; a non-finite loss stops the run with the last checkpoint intact."""
        steps = self.cfg.train.steps if steps is None else steps
        history = []
        fh, writer = self._open_log()
        try:
            while self.state.step < steps:
                k = self.state.step
                try:
                    row = train_step(self.bundle, self.state, self.cache, self.cfg, k)
                except (NonFiniteError, FloatingPointError) as exc:
                    raise TrainingError(f"non-finite value at step {k}: {exc}") from exc
                writer.writerow({c: _fmt(row[c]) for c in LOG_COLUMNS})
                history.append(row)
                if k % 100 == 0:
                    log.info("step %d total %.4f under %.4f vis %.4f dec %.4f", k, row["total"], row["under"],
                             row["vis_lm"], row["dec"])
                if self.state.step % self.cfg.train.checkpoint_every == 0:
                    fh.flush()
                    self.checkpoint()
        finally:
            fh.close()
        if not self.checkpoint_path.is_file() or self.state.step % self.cfg.train.checkpoint_every:
            self.checkpoint()
        return history


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def read_log(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]

