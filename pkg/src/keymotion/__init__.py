"""Video tokens split into one key frame plus a few motion tokens, on synthetic moving-shape clips.

The package holds a small numpy autodiff engine, the tokenizer, a decoder-only language model over a shared
text/visual vocabulary, a diffusion video decoder and an evaluation harness with a pixel-level judge.
"""

from .config import RunConfig, load_config
from .tokenizer import TokenizerConfig, frame_sampling_budget, token_budget

__version__ = "0.1.0"
__all__ = ["RunConfig", "TokenizerConfig", "frame_sampling_budget", "load_config", "token_budget"]
