"""Token-conditioned video decoders: a small denoising model and a direct regression head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .scenes import VideoClip
from .tokenizer import TokenizerConfig, TokenSequence, n_motion_tokens, window_of_frame

FRAME_FEATURES = 8  # sin/cos pairs describing a frame's place in the clip
STEP_FEATURES = 32  # sin/cos pairs describing the diffusion step
GATE_BIAS = -3.0  # skip gate starts almost open: g = 0.0025


class DecoderError(ValueError):
    pass


@dataclass
class DecoderConfig:
    pool: int = 4
    ctx: int = 256
    hidden: int = 512
    steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    norm: str = "mse"
    sigma_data: float = 0.1

    def __post_init__(self):
        if self.norm not in ("mse", "l2"):
            raise DecoderError(f"unknown loss norm {self.norm!r}")
        if self.steps < 1:
            raise DecoderError("the noise schedule needs at least one step")

    def to_dict(self) -> dict:
        return asdict(self)


class NoiseSchedule:
    """Linear beta schedule; step t in 1..N has noise level betas[t-1]."""

    def __init__(self, N: int = 100, beta_start: float = 1e-4, beta_end: float = 2e-2):
        if not 0.0 < beta_start < beta_end < 1.0:
            raise DecoderError("need 0 < beta_start < beta_end < 1")
        self.N = N
        self.betas = np.linspace(beta_start, beta_end, N) if N > 1 else np.array([beta_start])
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)

    def q_sample(self, x0: np.ndarray, t: np.ndarray, eps: np.ndarray) -> np.ndarray:
        ab = self.alpha_bar[np.asarray(t) - 1][..., None]
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

    def posterior_std(self, t: int) -> float:
        if t <= 1:
            return 0.0
        return math.sqrt(self.betas[t - 1] * (1.0 - self.alpha_bar[t - 2]) / (1.0 - self.alpha_bar[t - 1]))


@dataclass(frozen=True)
class Layout:
    """What a visual token sequence looks like, independent of its codes."""

    mode: str
    S: int
    n_groups: int
    n_motion: int

    @property
    def length(self) -> int:
        return self.n_groups * self.S + self.n_motion

    @classmethod
    def of(cls, tokens: TokenSequence) -> "Layout":
        return cls(tokens.mode, tokens.S, tokens.n_groups, tokens.n_motion)

    @classmethod
    def for_clip(cls, cfg: TokenizerConfig, T: int, fps: float) -> "Layout":
        if cfg.mode == "frame_sampling":
            return cls(cfg.mode, cfg.S, cfg.n_frames, 0)
        return cls(cfg.mode, cfg.S, 1, n_motion_tokens(cfg, T, fps))


def conditioning_plan(layout: Layout, T_out: int) -> list[tuple[int, int | None]]:
    """(spatial group, motion token or None) feeding each output frame.

    The key frame sees only the spatial context; every later frame also sees
    the one motion token whose window holds it. Frame-sampling sequences have
    no motion tokens, so each frame takes the nearest sampled frame's group.
    """
    if T_out < 1:
        raise DecoderError("need at least one output frame")
    if layout.mode == "frame_sampling":
        # groups sit where the tokenizer sampled them, evenly over the clip
        at = np.linspace(0, T_out - 1, layout.n_groups)
        return [(int(np.abs(at - i).argmin()), None) for i in range(T_out)]
    plan: list[tuple[int, int | None]] = [(0, None)]
    for i in range(1, T_out):
        plan.append((0, window_of_frame(i, layout.n_motion, T_out) if layout.n_motion else None))
    return plan


def _plan_matrices(layout: Layout, T_out: int) -> tuple[np.ndarray, np.ndarray]:
    plan = conditioning_plan(layout, T_out)
    G = np.zeros((T_out, layout.n_groups))
    M = np.zeros((T_out, max(layout.n_motion, 1)))
    for i, (g, m) in enumerate(plan):
        G[i, g] = 1.0
        if m is not None:
            M[i, m] = 1.0
    return G, M


def _fourier(u: np.ndarray, n: int) -> np.ndarray:
    k = 2.0 ** np.arange(n) * math.pi
    arg = np.asarray(u, dtype=np.float64)[..., None] * k
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def frame_features(T: int) -> np.ndarray:
    u = np.arange(T) / max(T - 1, 1)
    return _fourier(u, FRAME_FEATURES)


def step_features(t: np.ndarray, N: int) -> np.ndarray:
    freqs = np.exp(-math.log(1000.0) * np.arange(STEP_FEATURES) / STEP_FEATURES)
    arg = (np.asarray(t, dtype=np.float64) / N * 1000.0)[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def _dense(rng, n_in, n_out, scale=1.0):
    return Tensor(rng.normal(0.0, scale / math.sqrt(n_in), (n_in, n_out)), requires_grad=True)


def _zeros(n):
    return Tensor(np.zeros(n), requires_grad=True)


class VideoDecoder:
    def __init__(self, cfg: DecoderConfig, S: int, d_v: int, height: int, width: int, rng: np.random.Generator):
        if height % cfg.pool or width % cfg.pool:
            raise DecoderError(f"{height}x{width} frames do not pool by {cfg.pool}")
        self.cfg, self.S, self.d_v = cfg, S, d_v
        self.height, self.width = height, width
        self.lh, self.lw = height // cfg.pool, width // cfg.pool
        self.D = self.lh * self.lw * 3
        self.schedule = NoiseSchedule(cfg.steps, cfg.beta_start, cfg.beta_end)
        C, H, D = cfg.ctx, cfg.hidden, self.D
        self.params: dict[str, Tensor] = {
            "dec.cond.Ws": _dense(rng, S * d_v, C),
            "dec.cond.Wm": _dense(rng, d_v, C),
            "dec.cond.Wf": _dense(rng, 2 * FRAME_FEATURES, C),
            "dec.cond.b": _zeros(C),
            "dec.eps.Wx": _dense(rng, D, H),
            "dec.eps.Wc": _dense(rng, C, H),
            "dec.eps.Wt": _dense(rng, 2 * STEP_FEATURES, H),
            "dec.eps.b1": _zeros(H),
            "dec.eps.W2": _dense(rng, H, H),
            "dec.eps.b2": _zeros(H),
            "dec.eps.W3": _dense(rng, H, D, 0.1),
            "dec.eps.b3": _zeros(D),
            "dec.eps.Wg": Tensor(np.zeros((H, D)), requires_grad=True),
            "dec.eps.bg": Tensor(np.full(D, GATE_BIAS), requires_grad=True),
            "dec.reg.W1": _dense(rng, C, H),
            "dec.reg.b1": _zeros(H),
            "dec.reg.W2": _dense(rng, H, D, 0.1),
            "dec.reg.b2": _zeros(D),
        }

    # pixel <-> latent -----------------------------------------------------

    def to_latent(self, frames: np.ndarray) -> np.ndarray:
        """Average-pool (..., H, W, 3) frames to a flat latent; black background sits at 0."""
        p = self.cfg.pool
        lead = frames.shape[:-3]
        if frames.shape[-3:] != (self.height, self.width, 3):
            raise DecoderError(f"frames of shape {frames.shape[-3:]} do not match {self.height}x{self.width}x3")
        x = frames.reshape(lead + (self.lh, p, self.lw, p, 3)).mean(axis=(-4, -2))
        return x.reshape(lead + (self.D,))

    def from_latent(self, latent: np.ndarray) -> np.ndarray:
        p = self.cfg.pool
        x = latent.reshape(latent.shape[:-1] + (self.lh, self.lw, 3))
        return np.repeat(np.repeat(x, p, axis=-3), p, axis=-2)

    # conditioning ---------------------------------------------------------

    def context(self, feats: Tensor, layout: Layout, T_out: int) -> Tensor:
        """Per-frame context vectors (B, T_out, ctx) from visual features (B, L, d_v)."""
        p = self.params
        B, L, d = feats.shape
        if L != layout.length or d != self.d_v or layout.S != self.S:
            raise DecoderError(f"features {feats.shape} do not match layout {layout}")
        G, M = _plan_matrices(layout, T_out)
        n_sp = layout.n_groups * layout.S
        groups = feats[:, :n_sp].reshape(B, layout.n_groups, layout.S * d)
        ctx = ad.matmul(Tensor(G), ad.matmul(groups, p["dec.cond.Ws"]))
        if layout.n_motion:
            motion = ad.matmul(feats[:, n_sp:], p["dec.cond.Wm"])
            ctx = ctx + ad.matmul(Tensor(M), motion)
        return ctx + ad.matmul(Tensor(frame_features(T_out)), p["dec.cond.Wf"]) + p["dec.cond.b"]

    def eps_pred(self, x_t: Tensor, t: np.ndarray, ctx: Tensor) -> Tensor:
        """Noise estimate derived from a preconditioned clean-latent estimate.

        The network output F enters as x0 = c_skip (1 - g) x_t + c_out F with
        the skip and output scales that are optimal for data of spread
        ``sigma_data``. A plain MLP cannot learn the step-dependent rescaling
        of x_t by itself, so the scales carry it. The per-dimension gate g in
        (0, 1) lets the network drop the skip where it is sure of the clean
        value (the empty background), which a hidden layer narrower than the
        latent cannot do for every dimension.
        """
        p = self.params
        ab = self.schedule.alpha_bar[np.asarray(t) - 1][..., None]
        s2 = self.cfg.sigma_data ** 2
        denom = ab * s2 + 1.0 - ab
        c_in = 1.0 / np.sqrt(denom)
        c_skip = np.sqrt(ab) * s2 / denom
        c_out = self.cfg.sigma_data * np.sqrt(1.0 - ab) / np.sqrt(denom)
        temb = Tensor(step_features(t, self.schedule.N))
        h = ad.matmul(x_t * Tensor(c_in), p["dec.eps.Wx"]) + ad.matmul(ctx, p["dec.eps.Wc"]) \
            + ad.matmul(temb, p["dec.eps.Wt"]) + p["dec.eps.b1"]
        h = ad.gelu(h)
        h = ad.gelu(ad.matmul(h, p["dec.eps.W2"]) + p["dec.eps.b2"])
        F = ad.matmul(h, p["dec.eps.W3"]) + p["dec.eps.b3"]
        gate = (ad.tanh(ad.matmul(h, p["dec.eps.Wg"]) + p["dec.eps.bg"]) + 1.0) * 0.5
        # eps = (x_t - sqrt(ab) x0) / sqrt(1 - ab), expanded term by term
        a = (1.0 - np.sqrt(ab) * c_skip) / np.sqrt(1.0 - ab)
        k = np.sqrt(ab) * c_skip / np.sqrt(1.0 - ab)
        b = np.sqrt(ab) * c_out / np.sqrt(1.0 - ab)
        return x_t * Tensor(a) + (x_t * Tensor(k)) * gate - F * Tensor(b)

    def regress_latent(self, ctx: Tensor) -> Tensor:
        p = self.params
        h = ad.gelu(ad.matmul(ctx, p["dec.reg.W1"]) + p["dec.reg.b1"])
        return ad.matmul(h, p["dec.reg.W2"]) + p["dec.reg.b2"]

    # objectives -----------------------------------------------------------

    def noise_loss(self, eps: np.ndarray, eps_hat: Tensor) -> Tensor:
        err = Tensor(eps) - eps_hat
        sq = (err * err).sum(axis=-1)
        if self.cfg.norm == "l2":
            return ad.sqrt(sq + 1e-12).mean() / math.sqrt(self.D)
        return sq.mean() / self.D

    def diffusion_loss_batch(self, feats: Tensor, layout: Layout, frames: np.ndarray,
                             rng: np.random.Generator, latents: np.ndarray | None = None,
                             ctx: Tensor | None = None) -> Tensor:
        """Denoising loss for a (B, T, H, W, 3) batch; one step and one noise draw per frame.

        ``latents`` and ``ctx`` may carry ``to_latent(frames)`` and the
        per-frame context precomputed.
        """
        B, T = frames.shape[:2]
        if feats.shape[0] != B:
            raise DecoderError("features and frames disagree on batch size")
        x0 = self.to_latent(frames) if latents is None else latents
        t = rng.integers(1, self.schedule.N + 1, size=(B, T))
        eps = rng.standard_normal(x0.shape)
        x_t = self.schedule.q_sample(x0, t, eps)
        if ctx is None:
            ctx = self.context(feats, layout, T)
        return self.noise_loss(eps, self.eps_pred(Tensor(x_t), t, ctx))

    def diffusion_loss(self, tokens: TokenSequence, video: VideoClip, rng: np.random.Generator) -> Tensor:
        return self.diffusion_loss_batch(Tensor(tokens.features[None]), Layout.of(tokens), video.frames[None], rng)

    def regression_loss_batch(self, feats: Tensor, layout: Layout, frames: np.ndarray,
                              latents: np.ndarray | None = None, ctx: Tensor | None = None) -> Tensor:
        """Per-pixel MSE of the direct head; the context is detached so only the head learns.

        Pooled-latent error equals full-resolution error minus a constant
        (the within-block variance), so the gradients agree.
        """
        T = frames.shape[1]
        ctx = (self.context(feats, layout, T) if ctx is None else ctx).detach()
        target = self.to_latent(frames) if latents is None else latents
        diff = self.regress_latent(ctx) - Tensor(target)
        return (diff * diff).mean()

    # inference ------------------------------------------------------------

    def sample_latents(self, feats: np.ndarray, layout: Layout, T_out: int, rng: np.random.Generator) -> np.ndarray:
        sched = self.schedule
        B = feats.shape[0]
        with ad.no_grad():
            ctx = self.context(Tensor(feats), layout, T_out)
            x = rng.standard_normal((B, T_out, self.D))
            for t in range(sched.N, 0, -1):
                eps_hat = self.eps_pred(Tensor(x), np.full((B, T_out), t), ctx).data
                beta, ab = sched.betas[t - 1], sched.alpha_bar[t - 1]
                x = (x - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(sched.alphas[t - 1])
                if t > 1:
                    x = x + sched.posterior_std(t) * rng.standard_normal(x.shape)
        return x

    def sample_video(self, tokens: TokenSequence, T_out: int, rng: np.random.Generator, fps: float = 8.0) -> VideoClip:
        lat = self.sample_latents(tokens.features[None], Layout.of(tokens), T_out, rng)[0]
        return VideoClip(np.clip(self.from_latent(lat), 0.0, 1.0), fps)

    def regress_video(self, tokens: TokenSequence, T_out: int, fps: float = 8.0) -> VideoClip:
        with ad.no_grad():
            ctx = self.context(Tensor(tokens.features[None]), Layout.of(tokens), T_out)
            lat = self.regress_latent(ctx).data[0]
        return VideoClip(np.clip(self.from_latent(lat), 0.0, 1.0), fps)


def video_mse(a: VideoClip, b: VideoClip) -> float:
    if a.frames.shape != b.frames.shape:
        raise DecoderError(f"cannot compare clips of shape {a.frames.shape} and {b.frames.shape}")
    return float(np.mean((a.frames - b.frames) ** 2))

