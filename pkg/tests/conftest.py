import numpy as np
import pytest

from keymotion.config import RunConfig, TrainConfig
from keymotion.dataset import DataConfig
from keymotion.decoder import DecoderConfig
from keymotion.mllm import ModelConfig
from keymotion.tokenizer import TokenizerConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(seed: int = 0, **train) -> RunConfig:
    """A model small enough for unit tests: 32x32 clips, 2 layers, small codebooks."""
    tr = dict(steps=4, batch=4, checkpoint_every=2)
    tr.update(train)
    return RunConfig(
        seed=seed,
        data=DataConfig(n_train=8, n_val=7, n_test=14, height=48, width=48, duration=9, fps=4.0),
        tokenizer=TokenizerConfig(d_v=16, K_spatial=32, K_motion=16, motion_hidden=16),
        model=ModelConfig(layers=2, d=32, heads=2, max_len=96),
        decoder=DecoderConfig(pool=4, hidden=32, ctx=32, steps=10),
        train=TrainConfig(**tr),
    )


@pytest.fixture
def tiny():
    return tiny_config()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
