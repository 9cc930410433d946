"""Decoder-only transformer over the unified text + visual-code vocabulary."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokenizer import MOTION, SPATIAL
from .vocab import BOS, BOV, EOS, EOV, PAD, SEP, SPECIALS, TEXT, UnifiedVocab

ROLE_INDEX = {TEXT: 0, SPATIAL: 1, MOTION: 2}
MASK_VALUE = -1e9
UNDERSTANDING = "understanding"
GENERATION = "generation"


class SequenceLengthError(ValueError):
    pass


class LossError(ValueError):
    pass


@dataclass
class ModelConfig:
    layers: int = 4
    d: int = 128
    heads: int = 4
    max_len: int = 256
    dropout: float = 0.0

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError("model width must be divisible by the head count")
        if self.dropout != 0.0:
            raise ValueError("dropout is not supported; runs are deterministic")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Example:
    ids: np.ndarray
    roles: np.ndarray
    loss_pos: np.ndarray
    branch: str

    @property
    def vis_pos(self) -> np.ndarray:
        return np.nonzero(self.roles != 0)[0]


@dataclass
class Batch:
    ids: np.ndarray  # B x L, PAD beyond each row's length
    roles: np.ndarray  # B x L
    lengths: np.ndarray
    vis_pos: np.ndarray  # B x n_vis
    vis_feats: Tensor | None  # B x n_vis x d_v
    loss_rows: np.ndarray  # flat indices into B * L
    targets: np.ndarray
    branch: str


def _roles_of(vocab: UnifiedVocab, ids) -> np.ndarray:
    return np.array([ROLE_INDEX[vocab.role_of(int(i))] for i in ids], dtype=np.int64)


def understanding_example(vocab: UnifiedVocab, question: str, vis_ids, answer: str | None) -> Example:
    """<bos> question <sep> <bov> visual <eov> answer <eos>; loss on answer and <eos>."""
    head = [BOS] + vocab.encode(question) + [SEP, BOV] + list(vis_ids) + [EOV]
    tail = [] if answer is None else vocab.encode(answer) + [EOS]
    ids = np.array(head + tail, dtype=np.int64)
    loss_pos = np.arange(len(head) - 1, len(ids) - 1) if tail else np.zeros(0, dtype=np.int64)
    return Example(ids, _roles_of(vocab, ids), loss_pos, UNDERSTANDING)


def generation_example(vocab: UnifiedVocab, prompt: str, vis_ids) -> Example:
    """<bos> prompt <bov> visual; loss on every visual position."""
    head = [BOS] + vocab.encode(prompt) + [BOV]
    ids = np.array(head + list(vis_ids), dtype=np.int64)
    loss_pos = np.arange(len(head) - 1, len(ids) - 1)
    return Example(ids, _roles_of(vocab, ids), loss_pos, GENERATION)


def make_batch(examples: list[Example], vis_feats: Tensor | None) -> Batch:
    branch = examples[0].branch
    if any(e.branch != branch for e in examples):
        raise ValueError("a batch mixes branches")
    B = len(examples)
    L = max(len(e.ids) for e in examples)
    ids = np.full((B, L), PAD, dtype=np.int64)
    roles = np.zeros((B, L), dtype=np.int64)
    for b, e in enumerate(examples):
        ids[b, : len(e.ids)] = e.ids
        roles[b, : len(e.ids)] = e.roles
    vis = [e.vis_pos for e in examples]
    if len({len(v) for v in vis}) != 1:
        raise ValueError("all rows of a batch need the same number of visual tokens")
    vis_pos = np.stack(vis) if vis[0].size else np.zeros((B, 0), dtype=np.int64)
    rows, targets = [], []
    for b, e in enumerate(examples):
        rows.append(b * L + e.loss_pos)
        targets.append(e.ids[e.loss_pos + 1])
    return Batch(ids, roles, np.array([len(e.ids) for e in examples]), vis_pos, vis_feats,
                 np.concatenate(rows).astype(np.int64), np.concatenate(targets).astype(np.int64), branch)


def _init(rng, shape, std):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class MLLM:
    def __init__(self, cfg: ModelConfig, vocab: UnifiedVocab, d_v: int, rng: np.random.Generator):
        self.cfg = cfg
        self.vocab = vocab
        self.d_v = d_v
        d = cfg.d
        std = 0.02
        resid = 0.02 / math.sqrt(2 * cfg.layers)
        p: dict[str, Tensor] = {
            "lm.emb.text": _init(rng, (vocab.n_text, d), std),
            "lm.vis.W": _init(rng, (d_v, d), 1.0 / math.sqrt(d_v)),
            "lm.vis.b": Tensor(np.zeros(d), requires_grad=True),
            "lm.emb.pos": _init(rng, (cfg.max_len, d), std),
            "lm.emb.type": _init(rng, (3, d), std),
        }
        for i in range(cfg.layers):
            k = f"lm.block{i}"
            p[f"{k}.ln1.g"] = Tensor(np.ones(d), requires_grad=True)
            p[f"{k}.ln1.b"] = Tensor(np.zeros(d), requires_grad=True)
            p[f"{k}.attn.Wqkv"] = _init(rng, (d, 3 * d), std)
            p[f"{k}.attn.bqkv"] = Tensor(np.zeros(3 * d), requires_grad=True)
            p[f"{k}.attn.Wo"] = _init(rng, (d, d), resid)
            p[f"{k}.attn.bo"] = Tensor(np.zeros(d), requires_grad=True)
            p[f"{k}.ln2.g"] = Tensor(np.ones(d), requires_grad=True)
            p[f"{k}.ln2.b"] = Tensor(np.zeros(d), requires_grad=True)
            p[f"{k}.mlp.W1"] = _init(rng, (d, 4 * d), std)
            p[f"{k}.mlp.b1"] = Tensor(np.zeros(4 * d), requires_grad=True)
            p[f"{k}.mlp.W2"] = _init(rng, (4 * d, d), resid)
            p[f"{k}.mlp.b2"] = Tensor(np.zeros(d), requires_grad=True)
        p["lm.lnf.g"] = Tensor(np.ones(d), requires_grad=True)
        p["lm.lnf.b"] = Tensor(np.zeros(d), requires_grad=True)
        p["lm.head.W"] = _init(rng, (d, vocab.size), std)
        p["lm.head.b"] = Tensor(np.zeros(vocab.size), requires_grad=True)
        self.params = p

    # embedding ------------------------------------------------------------

    def embed(self, batch: Batch) -> Tensor:
        """Z = [text embeddings ; projected visual features] + position + modality."""
        p = self.params
        B, L = batch.ids.shape
        if L > self.cfg.max_len:
            raise SequenceLengthError(f"sequence of {L} symbols exceeds max length {self.cfg.max_len}")
        is_text = batch.roles == 0
        text_ids = np.where(is_text, batch.ids, PAD)
        z = ad.embedding(p["lm.emb.text"], text_ids) * Tensor(is_text[..., None].astype(np.float64))
        if batch.vis_pos.shape[1]:
            if batch.vis_feats is None:
                raise ValueError("visual positions present but no features supplied")
            nv = batch.vis_pos.shape[1]
            proj = ad.matmul(batch.vis_feats.reshape(B * nv, self.d_v), p["lm.vis.W"]) + p["lm.vis.b"]
            flat = (np.arange(B)[:, None] * L + batch.vis_pos).reshape(-1)
            z = z + ad.scatter_rows(proj, flat, B * L).reshape(B, L, self.cfg.d)
        z = z + p["lm.emb.pos"][:L] + ad.embedding(p["lm.emb.type"], batch.roles)
        return z

    # transformer ----------------------------------------------------------

    def trunk(self, z: Tensor) -> Tensor:
        cfg = self.cfg
        p = self.params
        B, L, d = z.shape
        h, dh = cfg.heads, cfg.d // cfg.heads
        mask = Tensor(np.triu(np.full((L, L), MASK_VALUE), k=1))
        scale = 1.0 / math.sqrt(dh)
        x = z
        for i in range(cfg.layers):
            k = f"lm.block{i}"
            a = ad.layer_norm(x, p[f"{k}.ln1.g"], p[f"{k}.ln1.b"])
            qkv = (ad.matmul(a, p[f"{k}.attn.Wqkv"]) + p[f"{k}.attn.bqkv"]).reshape(B, L, 3, h, dh)
            qkv = qkv.transpose(2, 0, 3, 1, 4)
            q, kk, v = qkv[0], qkv[1], qkv[2]
            att = ad.softmax(ad.matmul(q, kk.swapaxes(-1, -2)) * scale + mask, axis=-1)
            o = ad.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, L, d)
            x = x + ad.matmul(o, p[f"{k}.attn.Wo"]) + p[f"{k}.attn.bo"]
            m = ad.layer_norm(x, p[f"{k}.ln2.g"], p[f"{k}.ln2.b"])
            m = ad.gelu(ad.matmul(m, p[f"{k}.mlp.W1"]) + p[f"{k}.mlp.b1"])
            x = x + ad.matmul(m, p[f"{k}.mlp.W2"]) + p[f"{k}.mlp.b2"]
        return x

    def head(self, hidden: Tensor) -> Tensor:
        p = self.params
        x = ad.layer_norm(hidden, p["lm.lnf.g"], p["lm.lnf.b"])
        return ad.matmul(x, p["lm.head.W"]) + p["lm.head.b"]

    def forward(self, batch: Batch) -> Tensor:
        """Next-symbol logits at every position, shape B x L x |vocab|."""
        return self.head(self.trunk(self.embed(batch)))

    def loss(self, batch: Batch) -> Tensor:
        if batch.loss_rows.size == 0:
            raise LossError("loss mask selects no positions")
        hidden = self.trunk(self.embed(batch))
        B, L, d = hidden.shape
        rows = hidden.reshape(B * L, d)[batch.loss_rows]
        return ad.softmax_cross_entropy(self.head(rows), batch.targets)

    # cached inference -----------------------------------------------------

    def _step(self, x: np.ndarray, cache: list, start: int) -> np.ndarray:
        """Run new positions ``x`` (B x n x d, already embedded) through the trunk."""
        cfg = self.cfg
        p = {k: v.data for k, v in self.params.items()}
        B, n, d = x.shape
        h, dh = cfg.heads, d // cfg.heads
        total = start + n
        mask = np.triu(np.full((total, total), MASK_VALUE), k=1)[start:total]
        for i in range(cfg.layers):
            k = f"lm.block{i}"
            a = _ln(x, p[f"{k}.ln1.g"], p[f"{k}.ln1.b"])
            qkv = (a @ p[f"{k}.attn.Wqkv"] + p[f"{k}.attn.bqkv"]).reshape(B, n, 3, h, dh).transpose(2, 0, 3, 1, 4)
            q, kk, v = qkv[0], qkv[1], qkv[2]
            if len(cache) > i:
                kk = np.concatenate([cache[i][0], kk], axis=2)
                v = np.concatenate([cache[i][1], v], axis=2)
                cache[i] = (kk, v)
            else:
                cache.append((kk, v))
            s = q @ np.swapaxes(kk, -1, -2) * (1.0 / math.sqrt(dh)) + mask
            s = np.exp(s - s.max(-1, keepdims=True))
            s /= s.sum(-1, keepdims=True)
            o = (s @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
            x = x + o @ p[f"{k}.attn.Wo"] + p[f"{k}.attn.bo"]
            m = _ln(x, p[f"{k}.ln2.g"], p[f"{k}.ln2.b"])
            m = _gelu(m @ p[f"{k}.mlp.W1"] + p[f"{k}.mlp.b1"])
            x = x + m @ p[f"{k}.mlp.W2"] + p[f"{k}.mlp.b2"]
        last = _ln(x[:, -1], p["lm.lnf.g"], p["lm.lnf.b"])
        return last @ p["lm.head.W"] + p["lm.head.b"]

    def _embed_np(self, batch: Batch) -> np.ndarray:
        with ad.no_grad():
            return self.embed(batch).data

    def _embed_symbol(self, ids: np.ndarray, roles: np.ndarray, position: int, feats: np.ndarray | None) -> np.ndarray:
        p = self.params
        out = np.where((roles == 0)[:, None], p["lm.emb.text"].data[np.where(roles == 0, ids, PAD)], 0.0)
        if feats is not None:
            vis = feats @ p["lm.vis.W"].data + p["lm.vis.b"].data
            out = np.where((roles != 0)[:, None], vis, out)
        out = out + p["lm.emb.pos"].data[position] + p["lm.emb.type"].data[roles]
        return out[:, None, :]

    # decoding -------------------------------------------------------------

    def generate_text(self, examples: list[Example], vis_feats: np.ndarray | None, max_new: int = 8,
                      temperature: float = 0.0, rng: np.random.Generator | None = None) -> list[list[int]]:
        """Continue each understanding prefix with text symbols until <eos> or ``max_new``.

        All prefixes must share a length. Non-text symbols and the structural
        specials are masked out of every step.
        """
        vocab = self.vocab
        B = len(examples)
        L0 = len(examples[0].ids)
        if L0 + max_new > self.cfg.max_len:
            raise SequenceLengthError("prefix plus answer exceeds max length")
        batch = make_batch(examples, None if vis_feats is None else Tensor(vis_feats))
        cache: list = []
        logits = self._step(self._embed_np(batch), cache, 0)
        allowed = np.full(vocab.size, MASK_VALUE)
        allowed[len(SPECIALS):vocab.n_text] = 0.0
        allowed[EOS] = 0.0
        out = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        for step in range(max_new):
            ids = _pick(logits + allowed, temperature, None, rng)
            for b in range(B):
                if not done[b]:
                    out[b].append(int(ids[b]))
                    done[b] = ids[b] == EOS
            if done.all() or step == max_new - 1:
                break
            x = self._embed_symbol(ids, np.zeros(B, dtype=np.int64), L0 + step, None)
            logits = self._step(x, cache, L0 + step)
        return out

    def sample_visual(self, examples: list[Example], roles: list[str], code_vectors, temperature: float = 1.0,
                      top_k: int | None = 32, rng: np.random.Generator | None = None) -> np.ndarray:
        """Sample one visual symbol per layout position, restricted to that position's role range.

        ``code_vectors(role, codes)`` maps codes to feature vectors so each
        sampled symbol is fed back through the visual projection.
        """
        vocab = self.vocab
        B = len(examples)
        L0 = len(examples[0].ids)
        if L0 + len(roles) > self.cfg.max_len:
            raise SequenceLengthError("prompt plus visual layout exceeds max length")
        batch = make_batch(examples, None)
        cache: list = []
        logits = self._step(self._embed_np(batch), cache, 0)
        out = np.zeros((B, len(roles)), dtype=np.int64)
        for j, role in enumerate(roles):
            lo, hi = vocab.role_range(role)
            codes = _pick(logits[:, lo:hi], temperature, top_k, rng)
            out[:, j] = lo + codes
            if j == len(roles) - 1:
                break
            feats = code_vectors(role, codes)
            r = np.full(B, ROLE_INDEX[role], dtype=np.int64)
            x = self._embed_symbol(out[:, j], r, L0 + j, feats)
            logits = self._step(x, cache, L0 + j)
        return out


def _ln(x, g, b, eps=1e-8):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = np.where(var >= ad.ZERO_VARIANCE, 1.0 / np.sqrt(var + eps), 0.0)
    return xc * inv * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(ad._GELU_C * (x + 0.044715 * x**3)))


def _pick(logits: np.ndarray, temperature: float, top_k: int | None, rng) -> np.ndarray:
    if temperature <= 0.0:
        return logits.argmax(-1)
    if rng is None:
        raise ValueError("stochastic decoding needs an rng")
    z = logits / temperature
    if top_k is not None and top_k < z.shape[-1]:
        kth = np.sort(z, axis=-1)[:, -top_k][:, None]
        z = np.where(z >= kth, z, -np.inf)
    z = z - z.max(-1, keepdims=True)
    pr = np.exp(z)
    pr /= pr.sum(-1, keepdims=True)
    u = rng.random(z.shape[0])
    cdf = np.cumsum(pr, axis=-1)
    return np.minimum((cdf < u[:, None]).sum(-1), z.shape[-1] - 1)


def combined_loss(l_under: Tensor, l_vis: Tensor | None, l_dec: Tensor | None,
                  lam_vis: float = 1.0, lam_dec: float = 1.0) -> Tensor:
    """l_under + lam_vis * l_vis + lam_dec * l_dec; zero-weight terms are dropped from the graph."""
    if lam_vis < 0 or lam_dec < 0:
        raise ValueError("loss weights must be non-negative")
    total = l_under
    if lam_vis and l_vis is not None:
        total = total + l_vis * lam_vis
    if lam_dec and l_dec is not None:
        total = total + l_dec * lam_dec
    return total
