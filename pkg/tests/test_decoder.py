import math

import numpy as np
import pytest

from keymotion.autodiff import Tensor, finite_difference_check
from keymotion.decoder import (DecoderConfig, DecoderError, Layout, NoiseSchedule, VideoDecoder, conditioning_plan,
                               video_mse)
from keymotion.scenes import VideoClip
from keymotion.tokenizer import TokenizerConfig, window_of_frame

S, D_V, H = 4, 6, 16


class ZeroDecoder(VideoDecoder):
    """Predicts zero noise everywhere."""

    def eps_pred(self, x_t, t, ctx):
        return Tensor(np.zeros(x_t.shape))


def make(cfg=None, seed=0, cls=VideoDecoder):
    return cls(cfg or DecoderConfig(pool=4, hidden=16, ctx=8, steps=20), S, D_V, H, H, np.random.default_rng(seed))


def test_schedule_endpoints_and_monotonicity():
    s = NoiseSchedule(100, 1e-4, 2e-2)
    assert s.betas[0] == pytest.approx(1e-4) and s.betas[-1] == pytest.approx(2e-2)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.posterior_std(1) == 0.0
    x0, eps = np.ones((1, 3)), np.full((1, 3), 2.0)
    ab = s.alpha_bar[49]
    np.testing.assert_allclose(s.q_sample(x0, np.array([50]), eps), math.sqrt(ab) + 2 * math.sqrt(1 - ab))
    with pytest.raises(DecoderError):
        NoiseSchedule(10, 0.1, 0.01)


def test_conditioning_plan_decoupled():
    lay = Layout("decoupled", S, 1, 5)
    plan = conditioning_plan(lay, 11)
    assert plan[0] == (0, None)
    assert [m for _, m in plan[1:]] == [window_of_frame(i, 5, 11) for i in range(1, 11)]


def test_conditioning_plan_frame_sampling_uses_nearest_group():
    plan = conditioning_plan(Layout("frame_sampling", S, 4, 0), 16)
    assert [g for g, _ in plan] == [0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 3, 3, 3]
    assert all(m is None for _, m in plan)


def test_layout_for_clip():
    assert Layout.for_clip(TokenizerConfig(), 121, 24.0).length == 46
    assert Layout.for_clip(TokenizerConfig(mode="frame_sampling", n_frames=8), 121, 24.0).length == 128


def test_motion_token_only_reaches_its_window():
    dec = make()
    lay = Layout("decoupled", S, 1, 3)
    feats = np.random.default_rng(0).normal(size=(1, lay.length, D_V))
    base = dec.context(Tensor(feats), lay, 10).data
    bumped = feats.copy()
    bumped[0, S + 1] += 1.0
    moved = np.abs(dec.context(Tensor(bumped), lay, 10).data - base).max(-1)[0] > 0
    expect = [i > 0 and window_of_frame(i, 3, 10) == 1 for i in range(10)]
    assert list(moved) == expect


def test_latent_round_trip_for_block_constant_frames():
    dec = make()
    lat = np.random.default_rng(0).uniform(size=(2, dec.D))
    np.testing.assert_allclose(dec.to_latent(dec.from_latent(lat)), lat)
    with pytest.raises(DecoderError):
        dec.to_latent(np.zeros((1, 8, 8, 3)))


@pytest.mark.parametrize("norm", ["mse", "l2"])
def test_diffusion_loss_gradients(norm):
    dec = make(DecoderConfig(pool=4, hidden=8, ctx=6, steps=20, norm=norm))
    lay = Layout("decoupled", S, 1, 2)
    feats = Tensor(np.random.default_rng(1).normal(size=(2, lay.length, D_V)), requires_grad=True)
    frames = np.random.default_rng(2).uniform(size=(2, 4, H, H, 3))
    fn = lambda: dec.diffusion_loss_batch(feats, lay, frames, np.random.default_rng(7))  # noqa: E731
    params = [dec.params[k] for k in ("dec.cond.Ws", "dec.cond.Wm", "dec.eps.Wx", "dec.eps.W3", "dec.eps.Wg", "dec.eps.bg")] + [feats]
    assert finite_difference_check(fn, params, max_entries=10, rng=np.random.default_rng(0)) < 1e-3


def test_regression_head_does_not_touch_conditioning():
    dec = make()
    lay = Layout("decoupled", S, 1, 2)
    feats = Tensor(np.ones((1, lay.length, D_V)), requires_grad=True)
    dec.regression_loss_batch(feats, lay, np.zeros((1, 3, H, H, 3))).backward()
    assert feats.grad is None and dec.params["dec.cond.Ws"].grad is None
    assert dec.params["dec.reg.W2"].grad is not None


def test_zero_predictor_loss_is_unit_per_dimension():
    dec = make(cls=ZeroDecoder)
    n = 10_000
    lay = Layout("decoupled", S, 1, 1)
    frames = np.zeros((n, 1, H, H, 3))
    feats = Tensor(np.zeros((n, lay.length, D_V)))
    loss = dec.diffusion_loss_batch(feats, lay, frames, np.random.default_rng(0)).item()
    sigma = math.sqrt(2.0 / dec.D / n)
    assert abs(loss - 1.0) < 3 * sigma


def test_sampling_shapes_and_range():
    dec = make()
    lay = Layout("decoupled", S, 1, 2)
    feats = np.random.default_rng(0).normal(size=(1, lay.length, D_V))
    a = dec.sample_latents(feats, lay, 5, np.random.default_rng(3))
    b = dec.sample_latents(feats, lay, 5, np.random.default_rng(3))
    assert a.shape == (1, 5, dec.D)
    np.testing.assert_array_equal(a, b)


def test_mismatched_features_rejected():
    dec = make()
    with pytest.raises(DecoderError):
        dec.context(Tensor(np.zeros((1, 3, D_V))), Layout("decoupled", S, 1, 2), 4)
    with pytest.raises(DecoderError):
        video_mse(VideoClip(np.zeros((2, 4, 4, 3)), 8.0), VideoClip(np.zeros((3, 4, 4, 3)), 8.0))
