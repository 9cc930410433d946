import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keymotion.scenes import SceneObject, SceneProgram, VideoClip, render_scene
from keymotion.tokenizer import (MOTION, SPATIAL, Codebook, ConfigError, EmptyVideoError, SamplingError, Tokenizer,
                                 TokenizerConfig, frame_sampling_budget, quantize, sampled_frame_indices,
                                 sequence_length, token_budget, window_frames, window_matrix, window_of_frame)
from keymotion.vocab import BOS, EOS, UnifiedVocab


@pytest.mark.parametrize("duration,S,rate,expected", [
    (5.0, 16, 6.0, 46), (5.0, 1, 6.0, 31), (5.0, 4, 6.0, 34), (5.0, 9, 6.0, 39), (5.0, 25, 6.0, 55),
    (5.0, 16, 3.0, 31), (5.0, 16, 12.0, 76), (0.0, 16, 6.0, 16), (2.0, 16, 6.0, 28),
])
def test_token_budget_counts(duration, S, rate, expected):
    assert token_budget(duration, S, rate) == expected


def test_frame_sampling_budget():
    assert frame_sampling_budget(4, 16) == 64
    assert frame_sampling_budget(8, 16) == 128


def test_sequence_length_uses_key_instant_duration():
    cfg = TokenizerConfig()
    assert sequence_length(cfg, 121, 24.0) == 46
    assert sequence_length(cfg, 1, 24.0) == 16
    assert sequence_length(TokenizerConfig(mode="frame_sampling", n_frames=8), 121, 24.0) == 128


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 80), st.integers(1, 30))
def test_windows_tile_every_frame_once(T, n):
    owners = [window_of_frame(i, n, T) for i in range(1, T)]
    assert owners == sorted(owners)
    assert max(owners) <= n - 1
    if n <= T - 1:
        assert min(owners) == 0 and max(owners) == n - 1
    A = window_matrix(n, T)
    np.testing.assert_allclose(A.sum(1), 1.0)
    assert all(len(g) >= 1 for g in window_frames(n, T))


def test_sampled_frames_cover_both_ends():
    assert sampled_frame_indices(16, 4) == [0, 5, 10, 15]
    with pytest.raises(SamplingError):
        sampled_frame_indices(3, 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_quantize_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    feats, book = r.normal(size=(20, 5)), r.normal(size=(9, 5))
    ids, q = quantize(feats, book, chunk=7)
    brute = ((feats[:, None] - book[None]) ** 2).sum(-1).argmin(-1)
    np.testing.assert_array_equal(ids, brute)
    np.testing.assert_array_equal(q, book[brute])


def test_quantize_ties_pick_lowest_index():
    book = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
    ids, _ = quantize(np.array([[2.0, 0.0]]), book)
    assert ids[0] == 0


def test_invalid_configs_rejected():
    with pytest.raises(ConfigError):
        TokenizerConfig(S=8)
    with pytest.raises(ConfigError):
        TokenizerConfig(mode="keyframes")
    with pytest.raises(ConfigError):
        Tokenizer(TokenizerConfig(S=9), 64, 64, np.random.default_rng(0))


def moving_clip(T=17, fps=8.0):
    scene = SceneProgram([SceneObject("circle", "red", 4.0, (16.0, 16.0), (1.5, 1.0))], duration=T, fps=fps)
    return render_scene(scene)


@pytest.fixture
def tok(rng):
    t = Tokenizer(TokenizerConfig(d_v=16, K_spatial=32, K_motion=16, motion_hidden=16), 64, 64, rng)
    clip = moving_clip()
    t.init_codebooks(clip.frames[None], clip.fps, rng)
    return t


def test_tokenize_video_layout(tok):
    seq = tok.tokenize_video(moving_clip())
    assert len(seq) == sequence_length(tok.cfg, 17, 8.0) == 28
    assert seq.roles == [SPATIAL] * 16 + [MOTION] * 12
    assert seq.is_well_formed()
    assert max(seq.codes[:16]) < 32 and max(seq.codes[16:]) < 16
    assert seq.features.shape == (28, 16)


def test_single_frame_has_only_spatial_tokens(tok):
    clip = VideoClip(moving_clip().frames[:1], 8.0)
    seq = tok.tokenize_video(clip)
    assert len(seq) == 16 and seq.n_motion == 0


def test_empty_video_rejected(tok):
    class Empty:
        frames = np.zeros((0, 64, 64, 3))
        fps = 8.0
    with pytest.raises(EmptyVideoError):
        tok.tokenize_video(Empty())


def test_static_clip_motion_features_equal_zero_residual(tok):
    frames = np.repeat(moving_clip().frames[:1], 9, axis=0)
    seq = tok.tokenize_video(VideoClip(frames, 8.0))
    zero = tok.encode_motion([frames[0]], frames[0])
    motion = [e for e in seq.entries if e.role == MOTION]
    assert len({e.code for e in motion}) == 1
    _, q = quantize(zero, tok.motion_codebook.entries)
    np.testing.assert_array_equal(motion[0].feature, q[0])


def test_encode_motion_agrees_with_batch_encoder(tok):
    frames = moving_clip().frames
    n = 12
    spatial, motion = tok.encode_batch(frames[None], n)
    groups = window_frames(n, len(frames))
    single = tok.encode_motion([frames[i] for i in groups[3]], frames[0])
    np.testing.assert_allclose(motion.data[0, 3], single.reshape(-1), atol=1e-10)
    np.testing.assert_allclose(spatial.data[0], tok.encode_key_frame(frames[0]), atol=1e-12)


def test_key_tokens_ignore_later_frames(tok):
    a = moving_clip().frames
    b = a.copy()
    b[5:] = 0.0
    sa, sb = tok.tokenize_video(VideoClip(a, 8.0)), tok.tokenize_video(VideoClip(b, 8.0))
    assert sa.codes[:16] == sb.codes[:16]


def test_frame_sampling_layout(rng):
    t = Tokenizer(TokenizerConfig(mode="frame_sampling", n_frames=4, d_v=16, K_spatial=32), 64, 64, rng)
    seq = t.frame_sampling_tokenize(moving_clip(), 4)
    assert len(seq) == 64 and seq.is_well_formed()
    assert seq.meta["frames"] == [0, 5, 11, 16]


def test_codebook_ema_moves_used_entry_towards_data(rng):
    book = Codebook(np.zeros((3, 2)), decay=0.5, dead_steps=10)
    feats = np.array([[2.0, 2.0], [2.0, 2.0]])
    for step in range(20):
        book.update(feats, np.array([1, 1]), step, rng)
    np.testing.assert_allclose(book.entries[1], [2.0, 2.0], atol=1e-3)


def test_dead_codes_are_restarted_from_batch(rng):
    book = Codebook(np.full((3, 2), 50.0), decay=0.9, dead_steps=2)
    feats = np.array([[1.0, 1.0]])
    for step in range(5):
        book.update(feats, np.array([0]), step, rng)
    np.testing.assert_allclose(book.entries[2], [1.0, 1.0], atol=1e-5)


def test_token_dump_round_trips_roles(tok):
    seq = tok.tokenize_video(moving_clip())
    dump = seq.to_dump(tok.cfg)
    assert [e["role"] for e in dump["entries"]] == seq.roles
    assert dump["config"]["S"] == 16


def test_vocab_ranges_are_disjoint_and_invertible():
    v = UnifiedVocab(32, 16)
    lo_s, hi_s = v.role_range(SPATIAL)
    lo_m, hi_m = v.role_range(MOTION)
    assert v.n_text == lo_s and hi_s == lo_m and hi_m == v.size
    for code in (0, 31):
        i = v.visual_id(SPATIAL, code)
        assert v.role_of(i) == SPATIAL and v.code_of(i) == code
    assert v.role_of(v.visual_id(MOTION, 15)) == MOTION
    with pytest.raises(IndexError):
        v.visual_id(MOTION, 16)
    text = "which direction does the red circle move ?"
    assert v.decode([BOS] + v.encode(text) + [EOS, 5]) == text
    assert UnifiedVocab.from_dict(v.to_dict()).words == v.words


def test_patch_features_are_local(tok):
    a = moving_clip().frames[0]
    b = a.copy()
    b[:16, :16] = np.random.default_rng(1).random((16, 16, 3))
    fa, fb = tok.encode_key_frame(a), tok.encode_key_frame(b)
    assert not np.allclose(fa[0], fb[0])
    np.testing.assert_array_equal(fa[1:], fb[1:])


def test_moving_clip_motion_features_vary_over_windows(tok):
    frames = moving_clip().frames
    groups = window_frames(12, len(frames))
    feats = np.stack([tok.encode_motion([frames[i] for i in g], frames[0]) for g in groups])
    assert feats.var(axis=0).sum() > 0


def test_length_grows_linearly_with_frames():
    cfg = TokenizerConfig(motion_rate=8.0)
    for T in range(2, 65):
        assert sequence_length(cfg, T, 8.0) == 16 + T - 1
        assert frame_sampling_budget(T, 16) == 16 * T


def test_one_sampled_frame_matches_decoupled_key_block(tok):
    clip = moving_clip()
    sampled = tok.frame_sampling_tokenize(clip, 1)
    decoupled = tok.tokenize_video(clip)
    np.testing.assert_array_equal(sampled.features, decoupled.features[:16])
    assert sampled.codes == decoupled.codes[:16]
