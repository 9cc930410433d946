"""Key-frame spatial tokens plus residual motion tokens, and the frame-sampling baseline.

The key frame (always frame 0) is cut into a sqrt(S) x sqrt(S) patch grid; a
shared per-patch affine extractor ``F`` embeds each patch and an affine head
turns those into the S spatial features. Every later frame contributes
``F(x_t) - F(x_0)``; residuals are averaged over evenly tiled time windows
and mapped through a two-layer network to one motion feature per window.
Features are snapped to learned codebooks (straight-through gradient, EMA
codebook updates) so that every visual token has a discrete id.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SPATIAL = "spatial"
MOTION = "motion"
VALID_S = (1, 4, 9, 16, 25)


class ConfigError(ValueError):
    pass


class EmptyVideoError(ValueError):
    pass


class SamplingError(ValueError):
    pass


@dataclass
class TokenizerConfig:
    S: int = 16
    motion_rate: float = 6.0
    d_v: int = 64
    K_spatial: int = 256
    K_motion: int = 128
    motion_hidden: int = 128
    motion_pool: str = "flatten"
    mode: str = "decoupled"
    n_frames: int = 4
    codebook_decay: float = 0.99
    dead_code_steps: int = 500

    def __post_init__(self):
        if self.S not in VALID_S:
            raise ConfigError(f"S must be one of {VALID_S}, got {self.S}")
        if self.motion_rate < 1:
            raise ConfigError("motion_rate must be at least 1 token per second")
        if self.K_spatial < 2 or self.K_motion < 2:
            raise ConfigError("codebooks need at least two entries")
        if self.motion_pool not in ("flatten", "mean"):
            raise ConfigError(f"unknown motion pooling {self.motion_pool!r}")
        if self.mode not in ("decoupled", "frame_sampling"):
            raise ConfigError(f"unknown tokenizer mode {self.mode!r}")
        if self.n_frames < 1:
            raise ConfigError("frame sampling needs at least one frame")

    @property
    def grid(self) -> int:
        return math.isqrt(self.S)

    def to_dict(self) -> dict:
        return asdict(self)


# budget arithmetic --------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def token_budget(duration_s: float, S: int, motion_rate: float) -> int:
    """Visual sequence length: S spatial tokens plus one motion token per window."""
    if duration_s < 0:
        raise ValueError("duration must be non-negative")
    return S + _round_half_up(duration_s * motion_rate)


def frame_sampling_budget(n_frames: int, S: int) -> int:
    return n_frames * S


def sequence_length(cfg: TokenizerConfig, n_video_frames: int, fps: float) -> int:
    if cfg.mode == "frame_sampling":
        return frame_sampling_budget(cfg.n_frames, cfg.S)
    return token_budget((n_video_frames - 1) / fps, cfg.S, cfg.motion_rate)


def n_motion_tokens(cfg: TokenizerConfig, n_video_frames: int, fps: float) -> int:
    if cfg.mode == "frame_sampling":
        return 0
    return sequence_length(cfg, n_video_frames, fps) - cfg.S


def window_of_frame(i: int, n_windows: int, T: int) -> int:
    """Motion window containing frame ``i`` (``i >= 1``); windows tile (0, T-1]."""
    if i < 1 or n_windows < 1:
        raise ValueError("only frames after the key frame belong to a window")
    w = -(-i * n_windows // (T - 1)) - 1
    return min(max(w, 0), n_windows - 1)


def window_frames(n_windows: int, T: int) -> list[list[int]]:
    """Frame indices averaged by each window; an empty window borrows its nearest frame."""
    groups: list[list[int]] = [[] for _ in range(n_windows)]
    for i in range(1, T):
        groups[window_of_frame(i, n_windows, T)].append(i)
    for w, g in enumerate(groups):
        if not g:
            centre = (w + 0.5) * (T - 1) / n_windows
            g.append(min(max(_round_half_up(centre), 1), T - 1))
    return groups


def window_matrix(n_windows: int, T: int) -> np.ndarray:
    A = np.zeros((n_windows, T - 1))
    for w, g in enumerate(window_frames(n_windows, T)):
        A[w, np.array(g) - 1] = 1.0 / len(g)
    return A


def sampled_frame_indices(T: int, n_frames: int) -> list[int]:
    if n_frames > T:
        raise SamplingError(f"cannot sample {n_frames} frames from a {T}-frame clip")
    return [_round_half_up(x) for x in np.linspace(0, T - 1, n_frames)]


# token sequences ----------------------------------------------------------


@dataclass
class TokenEntry:
    role: str
    code: int
    feature: np.ndarray
    t_window: int


@dataclass
class TokenSequence:
    entries: list[TokenEntry]
    S: int
    mode: str = "decoupled"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def roles(self) -> list[str]:
        return [e.role for e in self.entries]

    @property
    def codes(self) -> list[int]:
        return [e.code for e in self.entries]

    @property
    def features(self) -> np.ndarray:
        return np.stack([e.feature for e in self.entries])

    @property
    def n_motion(self) -> int:
        return sum(e.role == MOTION for e in self.entries)

    @property
    def n_groups(self) -> int:
        return max(1, sum(e.role == SPATIAL for e in self.entries) // self.S)

    def is_well_formed(self) -> bool:
        roles = self.roles
        if self.mode == "frame_sampling":
            return len(roles) % self.S == 0 and all(r == SPATIAL for r in roles)
        if roles[: self.S] != [SPATIAL] * self.S:
            return False
        motion = self.entries[self.S:]
        if any(e.role != MOTION for e in motion):
            return False
        return all(a.t_window < b.t_window for a, b in zip(motion, motion[1:]))

    def to_dump(self, cfg: TokenizerConfig) -> dict:
        return {"config": cfg.to_dict(),
                "entries": [{"role": e.role, "code": int(e.code), "t_window": int(e.t_window)} for e in self.entries]}


def layout_roles(cfg: TokenizerConfig, n_motion: int) -> list[str]:
    if cfg.mode == "frame_sampling":
        return [SPATIAL] * (cfg.n_frames * cfg.S)
    return [SPATIAL] * cfg.S + [MOTION] * n_motion


def layout_windows(cfg: TokenizerConfig, n_motion: int) -> list[int]:
    if cfg.mode == "frame_sampling":
        return [g for g in range(cfg.n_frames) for _ in range(cfg.S)]
    return [0] * cfg.S + list(range(n_motion))


# quantisation -------------------------------------------------------------


def quantize(features: np.ndarray, codebook: np.ndarray, chunk: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Nearest codebook rows under squared Euclidean distance, lowest index on ties."""
    feats = np.atleast_2d(features)
    if feats.shape[-1] != codebook.shape[1]:
        raise ConfigError(f"feature width {feats.shape[-1]} != codebook width {codebook.shape[1]}")
    ids = np.empty(feats.shape[0], dtype=np.int64)
    c2 = (codebook * codebook).sum(-1)
    for lo in range(0, feats.shape[0], chunk):
        # |f|^2 is constant per row, so it does not affect the argmin
        ids[lo:lo + chunk] = (c2 - 2.0 * feats[lo:lo + chunk] @ codebook.T).argmin(-1)
    return ids, codebook[ids]


class Codebook:
    def __init__(self, entries: np.ndarray, decay: float = 0.99, dead_steps: int = 500):
        self.entries = np.array(entries, dtype=np.float64)
        K = self.entries.shape[0]
        self.decay = decay
        self.dead_steps = dead_steps
        self.ema_count = np.ones(K)
        self.ema_sum = self.entries.copy()
        self.usage = np.zeros(K)
        self.last_used = np.zeros(K)

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    def init_from(self, feats: np.ndarray, rng: np.random.Generator) -> None:
        """k-means++ seeding from a sample of features."""
        feats = np.asarray(feats)
        K = self.K
        centres = [feats[rng.integers(len(feats))]]
        d2 = ((feats - centres[0]) ** 2).sum(1)
        for _ in range(1, K):
            total = d2.sum()
            if total <= 0:
                pick = feats[rng.integers(len(feats))] + rng.normal(0, 1e-3, feats.shape[1])
            else:
                pick = feats[rng.choice(len(feats), p=d2 / total)]
            centres.append(pick)
            d2 = np.minimum(d2, ((feats - pick) ** 2).sum(1))
        self.entries = np.array(centres)
        self.ema_sum = self.entries.copy()
        self.ema_count = np.ones(K)

    def update(self, feats: np.ndarray, ids: np.ndarray, step: int, rng: np.random.Generator) -> None:
        K = self.K
        counts = np.bincount(ids, minlength=K).astype(np.float64)
        sums = np.zeros_like(self.entries)
        np.add.at(sums, ids, feats)
        g = self.decay
        self.ema_count = g * self.ema_count + (1 - g) * counts
        self.ema_sum = g * self.ema_sum + (1 - g) * sums
        n = self.ema_count.sum()
        smoothed = (self.ema_count + 1e-5) / (n + K * 1e-5) * n
        self.entries = self.ema_sum / smoothed[:, None]
        self.usage += counts
        self.last_used[counts > 0] = step
        dead = np.nonzero(step - self.last_used > self.dead_steps)[0]
        if dead.size and len(feats):
            picks = feats[rng.integers(len(feats), size=dead.size)]
            self.entries[dead] = picks
            self.ema_sum[dead] = picks
            self.ema_count[dead] = 1.0
            self.last_used[dead] = step

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.entries": self.entries, f"{prefix}.ema_count": self.ema_count,
                f"{prefix}.ema_sum": self.ema_sum, f"{prefix}.usage": self.usage,
                f"{prefix}.last_used": self.last_used}

    def load_state(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        self.entries = arrays[f"{prefix}.entries"].copy()
        self.ema_count = arrays[f"{prefix}.ema_count"].copy()
        self.ema_sum = arrays[f"{prefix}.ema_sum"].copy()
        self.usage = arrays[f"{prefix}.usage"].copy()
        self.last_used = arrays[f"{prefix}.last_used"].copy()


# the tokenizer ------------------------------------------------------------


def _moment_init(ph: int, pw: int, d_v: int, rng: np.random.Generator) -> np.ndarray:
    """Per-patch extractor weights: colour mass and first moments, then random channels."""
    P = ph * pw * 3
    W = rng.normal(0.0, 1.0 / math.sqrt(P), size=(P, d_v))
    ys, xs = np.mgrid[0:ph, 0:pw]
    u = (xs - (pw - 1) / 2) / pw
    v = (ys - (ph - 1) / 2) / ph
    k = 0
    for c in range(3):
        for scale, weight in ((4.0, np.ones_like(u)), (16.0, u), (16.0, v)):
            if k >= d_v:
                break
            col = np.zeros((ph, pw, 3))
            col[:, :, c] = scale * weight / (ph * pw)
            W[:, k] = col.reshape(-1)
            k += 1
    return W


class Tokenizer:
    def __init__(self, cfg: TokenizerConfig, height: int, width: int, rng: np.random.Generator):
        g = cfg.grid
        if height % g or width % g:
            raise ConfigError(f"{height}x{width} frame does not split into a {g}x{g} grid")
        self.cfg = cfg
        self.height, self.width = height, width
        self.ph, self.pw = height // g, width // g
        d = cfg.d_v
        P = self.ph * self.pw * 3
        g_in = cfg.S * d if cfg.motion_pool == "flatten" else d
        self.params: dict[str, Tensor] = {
            "tok.F.W": Tensor(_moment_init(self.ph, self.pw, d, rng), requires_grad=True),
            "tok.F.b": Tensor(np.zeros(d), requires_grad=True),
            "tok.key.W": Tensor(np.eye(d) + rng.normal(0, 0.02, (d, d)), requires_grad=True),
            "tok.key.b": Tensor(np.zeros(d), requires_grad=True),
            "tok.g1.W": Tensor(rng.normal(0, 1.0 / math.sqrt(g_in), (g_in, cfg.motion_hidden)), requires_grad=True),
            "tok.g1.b": Tensor(np.zeros(cfg.motion_hidden), requires_grad=True),
            "tok.g2.W": Tensor(rng.normal(0, 1.0 / math.sqrt(cfg.motion_hidden), (cfg.motion_hidden, d)), requires_grad=True),
            "tok.g2.b": Tensor(np.zeros(d), requires_grad=True),
        }
        self.spatial_codebook = Codebook(rng.normal(0, 1, (cfg.K_spatial, d)), cfg.codebook_decay, cfg.dead_code_steps)
        self.motion_codebook = Codebook(rng.normal(0, 1, (cfg.K_motion, d)), cfg.codebook_decay, cfg.dead_code_steps)

    # differentiable pieces ------------------------------------------------

    def patchify(self, frames: np.ndarray) -> np.ndarray:
        """(..., H, W, 3) -> (..., S, patch_dim) in row-major patch order."""
        g = self.cfg.grid
        lead = frames.shape[:-3]
        x = frames.reshape(lead + (g, self.ph, g, self.pw, 3))
        nd = len(lead)
        order = tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3, nd + 4)
        return x.transpose(order).reshape(lead + (g * g, self.ph * self.pw * 3))

    def extract(self, frames: np.ndarray) -> Tensor:
        """Shared extractor F: per-patch features of shape (..., S, d_v)."""
        p = self.params
        return ad.matmul(Tensor(self.patchify(frames)), p["tok.F.W"]) + p["tok.F.b"]

    def key_head(self, feats: Tensor) -> Tensor:
        p = self.params
        return ad.matmul(feats, p["tok.key.W"]) + p["tok.key.b"]

    def motion_head(self, residual: Tensor) -> Tensor:
        """g_phi applied to window-averaged residual features of shape (..., S, d_v)."""
        p = self.params
        if self.cfg.motion_pool == "flatten":
            x = residual.reshape(residual.shape[:-2] + (residual.shape[-2] * residual.shape[-1],))
        else:
            x = residual.mean(axis=-2)
        h = ad.gelu(ad.matmul(x, p["tok.g1.W"]) + p["tok.g1.b"])
        return ad.matmul(h, p["tok.g2.W"]) + p["tok.g2.b"]

    def encode_batch(self, frames: np.ndarray, n_motion: int | None = None) -> tuple[Tensor, Tensor | None]:
        """Continuous features for a (B, T, H, W, 3) batch.

        Decoupled mode returns (B, S, d_v) spatial and (B, n, d_v) motion
        features; frame sampling returns (B, n_frames * S, d_v) and ``None``.
        """
        B, T = frames.shape[:2]
        cfg = self.cfg
        if T == 0:
            raise EmptyVideoError("video has no frames")
        if cfg.mode == "frame_sampling":
            idx = sampled_frame_indices(T, cfg.n_frames)
            feats = self.key_head(self.extract(frames[:, idx]))
            return feats.reshape(B, cfg.n_frames * cfg.S, cfg.d_v), None
        if T == 1 or n_motion == 0:
            spatial = self.key_head(self.extract(frames[:, 0]))
            return spatial, None
        if n_motion is None:
            raise ValueError("decoupled encoding of a multi-frame clip needs n_motion")
        fx = self.extract(frames)  # B, T, S, d
        key = fx[:, 0]
        spatial = self.key_head(key)
        S, d = cfg.S, cfg.d_v
        residual = fx[:, 1:] - key.reshape(B, 1, S, d)
        A = Tensor(window_matrix(n_motion, T))
        pooled = ad.matmul(A, residual.reshape(B, T - 1, S * d)).reshape(B, n_motion, S, d)
        return spatial, self.motion_head(pooled)

    def quantize_batch(self, spatial: Tensor, motion: Tensor | None):
        """Code ids plus straight-through quantised tensors."""
        s_flat = spatial.data.reshape(-1, self.cfg.d_v)
        s_ids, s_q = quantize(s_flat, self.spatial_codebook.entries)
        s_st = ad.straight_through(spatial, s_q.reshape(spatial.shape))
        s_ids = s_ids.reshape(spatial.shape[:-1])
        if motion is None:
            return s_ids, s_st, None, None
        m_flat = motion.data.reshape(-1, self.cfg.d_v)
        m_ids, m_q = quantize(m_flat, self.motion_codebook.entries)
        m_st = ad.straight_through(motion, m_q.reshape(motion.shape))
        return s_ids, s_st, m_ids.reshape(motion.shape[:-1]), m_st

    def update_codebooks(self, spatial, s_ids, motion, m_ids, step: int, rng: np.random.Generator) -> None:
        d = self.cfg.d_v
        self.spatial_codebook.update(spatial.data.reshape(-1, d), s_ids.reshape(-1), step, rng)
        if motion is not None:
            self.motion_codebook.update(motion.data.reshape(-1, d), m_ids.reshape(-1), step, rng)

    def init_codebooks(self, frames: np.ndarray, fps: float, rng: np.random.Generator) -> None:
        with ad.no_grad():
            n = n_motion_tokens(self.cfg, frames.shape[1], fps)
            spatial, motion = self.encode_batch(frames, n)
        self.spatial_codebook.init_from(spatial.data.reshape(-1, self.cfg.d_v), rng)
        if motion is not None:
            self.motion_codebook.init_from(motion.data.reshape(-1, self.cfg.d_v), rng)

    # single-clip conveniences ---------------------------------------------

    def encode_key_frame(self, frame: np.ndarray) -> np.ndarray:
        g = self.cfg.grid
        if frame.shape[0] % g or frame.shape[1] % g:
            raise ConfigError("frame does not split into the patch grid")
        with ad.no_grad():
            return self.key_head(self.extract(frame)).data

    def encode_motion(self, frame_window: list[np.ndarray], key_frame: np.ndarray) -> np.ndarray:
        if not frame_window:
            raise ValueError("motion window is empty")
        with ad.no_grad():
            key = self.extract(key_frame).data
            res = np.mean([self.extract(f).data - key for f in frame_window], axis=0)
            return self.motion_head(Tensor(res[None])).data[0]

    def code_vectors(self, role: str, ids) -> np.ndarray:
        book = self.spatial_codebook if role == SPATIAL else self.motion_codebook
        return book.entries[np.asarray(ids)]

    def tokenize_video(self, video) -> TokenSequence:
        frames = video.frames
        if frames.shape[0] == 0:
            raise EmptyVideoError("video has no frames")
        cfg = self.cfg
        n = n_motion_tokens(cfg, frames.shape[0], video.fps)
        with ad.no_grad():
            spatial, motion = self.encode_batch(frames[None], n)
            s_ids, s_q, m_ids, m_q = self.quantize_batch(spatial, motion)
        roles = layout_roles(cfg, n)
        windows = layout_windows(cfg, n)
        feats = [s_q.data[0]] + ([m_q.data[0]] if motion is not None else [])
        ids = [s_ids[0]] + ([m_ids[0]] if motion is not None else [])
        feats = np.concatenate(feats)
        ids = np.concatenate(ids)
        entries = [TokenEntry(r, int(i), f, w) for r, i, f, w in zip(roles, ids, feats, windows)]
        return TokenSequence(entries, cfg.S, cfg.mode, {"T": int(frames.shape[0]), "fps": float(video.fps)})

    def frame_sampling_tokenize(self, video, n_frames: int) -> TokenSequence:
        T = video.frames.shape[0]
        idx = sampled_frame_indices(T, n_frames)
        cfg = self.cfg
        entries = []
        for g, t in enumerate(idx):
            feats = self.encode_key_frame(video.frames[t])
            ids, q = quantize(feats, self.spatial_codebook.entries)
            entries += [TokenEntry(SPATIAL, int(i), v, g) for i, v in zip(ids, q)]
        return TokenSequence(entries, cfg.S, "frame_sampling", {"T": int(T), "fps": float(video.fps), "frames": idx})

    def state(self) -> dict[str, np.ndarray]:
        out = self.spatial_codebook.state("tok.codebook.spatial")
        out.update(self.motion_codebook.state("tok.codebook.motion"))
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.spatial_codebook.load_state("tok.codebook.spatial", arrays)
        self.motion_codebook.load_state("tok.codebook.motion", arrays)
