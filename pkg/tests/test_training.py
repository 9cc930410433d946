from dataclasses import replace

import numpy as np
import pytest

from conftest import tiny_config
from keymotion.bundle import ModelBundle, load_checkpoint, save_checkpoint
from keymotion.checkpoint import CheckpointError, dump_arrays, load_arrays, read_arrays
from keymotion.config import RunConfig, config_from_dict, load_config, save_config
from keymotion.dataset import generate_split
from keymotion.optim import TrainingError, adamw_step, init_state
from keymotion.autodiff import Tensor
from keymotion.tokenizer import ConfigError
from keymotion.training import LOG_COLUMNS, Trainer, read_log


def trainer(cfg, out, **kw):
    return Trainer(cfg, generate_split(cfg.data, "train"), out, **kw)


def test_array_container_round_trip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b.c": np.array(3.5), "e": np.zeros((0, 2))}
    back = load_arrays(dump_arrays(arrays))
    assert list(back) == list(arrays)
    assert back["b.c"].shape == ()
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    with pytest.raises(CheckpointError):
        load_arrays(b"nope")
    with pytest.raises(CheckpointError):
        load_arrays(dump_arrays(arrays)[:-3])


def test_config_round_trip_and_validation(tmp_path):
    cfg = tiny_config(seed=3)
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg
    assert cfg.fingerprint() == load_config(tmp_path / "c.json").fingerprint()
    with pytest.raises(ConfigError):
        config_from_dict({"version": 1, "trian": {}})
    with pytest.raises(ConfigError):
        config_from_dict({"version": 1, "train": {"lambda_dec": -1.0}})
    with pytest.raises(ConfigError):
        config_from_dict({"version": 2})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    d = RunConfig().train
    assert (d.lambda_vis, d.lambda_dec, d.ema_decay, d.batch) == (1.0, 1.0, 0.999, 16)


def test_adamw_skips_parameters_without_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    params = {"a": a, "b": b}
    state = init_state(params, lr=0.1)
    a.grad = np.ones(3)
    adamw_step(params, state)
    assert np.all(a.data < 1.0)
    np.testing.assert_array_equal(b.data, np.ones(3))
    np.testing.assert_array_equal(state.ema["b"], np.ones(3))


def test_training_logs_every_component(tmp_path, tiny):
    tr = trainer(replace(tiny, train=replace(tiny.train, steps=3)), tmp_path)
    hist = tr.run()
    rows = read_log(tmp_path / "train_log.csv")
    assert [r["step"] for r in rows] == [0.0, 1.0, 2.0]
    assert tuple(rows[0]) == LOG_COLUMNS
    assert all(np.isfinite(r[c]) for r in rows for c in LOG_COLUMNS)
    assert hist[0]["total"] == pytest.approx(hist[0]["under"] + hist[0]["vis_lm"] + hist[0]["dec"])
    assert (tmp_path / "model.vtok").is_file() and (tmp_path / "model.json").is_file()


def test_loss_falls_on_a_tiny_corpus(tmp_path):
    cfg = tiny_config(steps=60, lr=3e-3)
    cfg = replace(cfg, data=replace(cfg.data, n_train=4))
    hist = trainer(cfg, tmp_path).run()
    first = np.mean([h["total"] for h in hist[:3]])
    last = np.mean([h["total"] for h in hist[-3:]])
    assert last < 0.5 * first


def test_zero_decoder_weight_never_updates_decoder(tmp_path):
    cfg = tiny_config(lambda_dec=0.0, steps=3)
    tr = trainer(cfg, tmp_path)
    before = {k: v.data.copy() for k, v in tr.bundle.decoder.params.items()}
    lm_before = tr.bundle.mllm.params["lm.head.W"].data.copy()
    tr.run()
    for k, v in tr.bundle.decoder.params.items():
        assert v.data.tobytes() == before[k].tobytes(), k
        assert tr.state.ema[k].tobytes() == before[k].tobytes()
    assert not np.array_equal(tr.bundle.mllm.params["lm.head.W"].data, lm_before)


def test_resume_reproduces_uninterrupted_run(tmp_path, tiny):
    cfg = replace(tiny, train=replace(tiny.train, steps=4, checkpoint_every=2))
    full = trainer(cfg, tmp_path / "full")
    h_full = full.run()
    part = trainer(cfg, tmp_path / "part")
    part.run(2)
    resumed = trainer(cfg, tmp_path / "resumed", resume=tmp_path / "part" / "model.vtok")
    h_res = resumed.run()
    assert [h["total"] for h in h_res] == [h["total"] for h in h_full[2:]]
    assert (tmp_path / "full" / "model.vtok").read_bytes() == (tmp_path / "resumed" / "model.vtok").read_bytes()


def test_resume_truncates_log_past_checkpoint(tmp_path, tiny):
    cfg = replace(tiny, train=replace(tiny.train, steps=3, checkpoint_every=2))
    tr = trainer(cfg, tmp_path)
    tr.run()
    # the final checkpoint sits at step 3; roll back to the step-2 snapshot
    part = trainer(cfg, tmp_path / "p")
    part.run(2)
    again = trainer(cfg, tmp_path / "p", resume=tmp_path / "p" / "model.vtok")
    again.run()
    assert [r["step"] for r in read_log(tmp_path / "p" / "train_log.csv")] == [0.0, 1.0, 2.0]


def test_checkpoint_round_trip_preserves_outputs(tmp_path, tiny):
    b = ModelBundle(tiny)
    state = init_state(b.params)
    save_checkpoint(tmp_path / "m.vtok", b, state)
    b2, state2 = load_checkpoint(tmp_path / "m.vtok")
    for k, p in b.params.items():
        np.testing.assert_array_equal(p.data, b2.params[k].data)
    assert b2.cfg == tiny and state2.step == 0
    arrays = read_arrays(tmp_path / "m.vtok")
    assert any(k.endswith(".ema") for k in arrays) and any(k.startswith("opt.m.") for k in arrays)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.vtok")


def test_non_finite_loss_aborts_and_keeps_last_checkpoint(tmp_path, tiny):
    cfg = replace(tiny, train=replace(tiny.train, steps=4, checkpoint_every=2))
    tr = trainer(cfg, tmp_path)
    tr.run(2)
    good = (tmp_path / "model.vtok").read_bytes()
    tr.bundle.mllm.params["lm.head.W"].data[:] = np.nan
    with pytest.raises(TrainingError):
        tr.run()
    assert (tmp_path / "model.vtok").read_bytes() == good


def test_ema_weights_swap_in_and_out(tiny):
    b = ModelBundle(tiny)
    state = init_state(b.params)
    name = "lm.head.W"
    raw = b.params[name].data.copy()
    state.ema[name] = raw + 1.0
    with b.using_ema(state):
        np.testing.assert_array_equal(b.params[name].data, raw + 1.0)
    np.testing.assert_array_equal(b.params[name].data, raw)
