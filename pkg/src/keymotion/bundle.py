"""Tokenizer, language model and decoder wired together, with checkpoint I/O."""

from __future__ import annotations

import json
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .checkpoint import CheckpointError, read_arrays, save_arrays
from .config import RunConfig, config_from_dict
from .decoder import Layout, VideoDecoder
from .mllm import MLLM, generation_example, understanding_example
from .optim import OptimizerState
from .scenes import VideoClip
from .tokenizer import TokenEntry, Tokenizer, TokenSequence, layout_roles, layout_windows, n_motion_tokens
from .vocab import UnifiedVocab


class ModelBundle:
    """Everything needed to answer questions about clips and to generate clips from prompts."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        d = cfg.data
        t = cfg.tokenizer
        self.cfg = cfg
        self.vocab = UnifiedVocab(t.K_spatial, t.K_motion)
        self.tokenizer = Tokenizer(t, d.height, d.width, rng)
        self.mllm = MLLM(cfg.model, self.vocab, t.d_v, rng)
        self.decoder = VideoDecoder(cfg.decoder, t.S, t.d_v, d.height, d.width, rng)

    @property
    def params(self) -> dict[str, Tensor]:
        return {**self.tokenizer.params, **self.mllm.params, **self.decoder.params}

    # layout helpers ---------------------------------------------------------

    def layout(self, T: int, fps: float) -> Layout:
        return Layout.for_clip(self.cfg.tokenizer, T, fps)

    def visual_ids(self, tokens: TokenSequence) -> list[int]:
        return [self.vocab.visual_id(e.role, e.code) for e in tokens.entries]

    # inference ------------------------------------------------------------

    def sample_visual_tokens(self, prompts: list[str], T: int, fps: float, rng: np.random.Generator,
                             temperature: float = 1.0, top_k: int | None = 32) -> list[TokenSequence]:
        """One visual sequence per prompt, its length fixed by the requested clip length."""
        cfg = self.cfg.tokenizer
        n = n_motion_tokens(cfg, T, fps)
        roles = layout_roles(cfg, n)
        windows = layout_windows(cfg, n)
        examples = [generation_example(self.vocab, p, []) for p in prompts]
        out: list[TokenSequence] = []
        # prompts of equal length share one cached batch
        by_len: dict[int, list[int]] = {}
        for i, e in enumerate(examples):
            by_len.setdefault(len(e.ids), []).append(i)
        results: dict[int, np.ndarray] = {}
        for _, idx in sorted(by_len.items()):
            ids = self.mllm.sample_visual([examples[i] for i in idx], roles, self.tokenizer.code_vectors,
                                          temperature=temperature, top_k=top_k, rng=rng)
            for i, row in zip(idx, ids):
                results[i] = row
        for i in range(len(prompts)):
            entries = []
            for sym, role, w in zip(results[i], roles, windows):
                code = self.vocab.code_of(int(sym))
                entries.append(TokenEntry(role, code, self.tokenizer.code_vectors(role, [code])[0], w))
            out.append(TokenSequence(entries, cfg.S, cfg.mode, {"T": T, "fps": fps}))
        return out

    def generate_video(self, prompt: str, T: int, fps: float, rng: np.random.Generator,
                       path: str = "diffusion") -> VideoClip:
        ev = self.cfg.eval
        tokens = self.sample_visual_tokens([prompt], T, fps, rng, ev.temperature, ev.top_k)[0]
        if path == "regress":
            return self.decoder.regress_video(tokens, T, fps)
        return self.decoder.sample_video(tokens, T, rng, fps)

    def answer(self, question: str, video: VideoClip, rng: np.random.Generator | None = None) -> str:
        ev = self.cfg.eval
        tokens = self.tokenizer.tokenize_video(video)
        ex = understanding_example(self.vocab, question, self.visual_ids(tokens), None)
        out = self.mllm.generate_text([ex], tokens.features[None], max_new=ev.max_answer,
                                      temperature=ev.text_temperature, rng=rng)[0]
        return self.vocab.decode(out)

    # state ----------------------------------------------------------------

    def arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        out.update(self.tokenizer.state())
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise CheckpointError(f"checkpoint lacks parameter {name}")
            if arrays[name].shape != p.data.shape:
                raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape} != model {p.data.shape}")
            p.data = arrays[name].copy()
        self.tokenizer.load_state(arrays)

    @contextmanager
    def using_ema(self, state: OptimizerState):
        """Temporarily swap every parameter for its EMA shadow."""
        saved = {}
        for name, p in self.params.items():
            if name in state.ema:
                saved[name] = p.data
                p.data = state.ema[name].copy()
        try:
            yield self
        finally:
            for name, p in self.params.items():
                if name in saved:
                    p.data = saved[name]


# checkpoints --------------------------------------------------------------

_OPT_SCALARS = ("step", "lr", "weight_decay", "beta1", "beta2", "eps", "ema_decay")


def save_checkpoint(path: str | Path, bundle: ModelBundle, state: OptimizerState) -> None:
    """Raw weights, EMA shadows, optimiser moments and codebook state in one file, config beside it."""
    path = Path(path)
    arrays = bundle.arrays()
    for name, v in state.ema.items():
        arrays[f"{name}.ema"] = v
    for name, v in state.m.items():
        arrays[f"opt.m.{name}"] = v
    for name, v in state.v.items():
        arrays[f"opt.v.{name}"] = v
    for key in _OPT_SCALARS:
        arrays[f"opt.{key}"] = np.array(float(getattr(state, key)))
    arrays["opt.ema_warmup"] = np.array(float(state.ema_warmup))
    save_arrays(path, arrays)
    meta = {"config": bundle.cfg.to_dict(), "vocab": bundle.vocab.to_dict()}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[ModelBundle, OptimizerState]:
    path = Path(path)
    meta_path = path.with_suffix(".json")
    if not path.is_file() or not meta_path.is_file():
        raise CheckpointError(f"checkpoint {path} or its manifest {meta_path} is missing")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    cfg = config_from_dict(meta["config"])
    arrays = read_arrays(path)
    bundle = ModelBundle(cfg)
    bundle.load_arrays(arrays)
    state = OptimizerState(
        step=int(arrays["opt.step"]), lr=float(arrays["opt.lr"]), weight_decay=float(arrays["opt.weight_decay"]),
        beta1=float(arrays["opt.beta1"]), beta2=float(arrays["opt.beta2"]), eps=float(arrays["opt.eps"]),
        ema_decay=float(arrays["opt.ema_decay"]), ema_warmup=bool(arrays["opt.ema_warmup"]))
    for name in bundle.params:
        state.ema[name] = arrays.get(f"{name}.ema", arrays[name]).copy()
        if f"opt.m.{name}" in arrays:
            state.m[name] = arrays[f"opt.m.{name}"].copy()
            state.v[name] = arrays[f"opt.v.{name}"].copy()
    return bundle, state

