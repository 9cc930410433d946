"""Unified symbol space: special symbols and template words, then spatial codes, then motion codes."""

from __future__ import annotations

from .scenes import PALETTE_NAMES, SHAPES
from .tasks import DIRECTIONS, MOTION_ANSWERS, MOTION_PROMPTS, NUMBER_WORDS, RELATIONS, STATE_CHOICES
from .tokenizer import MOTION, SPATIAL

SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>", "<sep>", "<bov>", "<eov>")
PAD, UNK, BOS, EOS, SEP, BOV, EOV = range(len(SPECIALS))
TEXT = "text"

_TEMPLATE_WORDS = """
a an the how many appear which direction does move moves where is relative to object larger
what color change from and large small turns stays ? of it
""".split()


def template_words() -> list[str]:
    words = set(_TEMPLATE_WORDS)
    words.update(NUMBER_WORDS)
    words.update(str(k) for k in range(1, 6))
    words.update(PALETTE_NAMES)
    words.update(SHAPES)
    words.update(s + "s" for s in SHAPES)
    for phrase in list(DIRECTIONS) + list(RELATIONS) + list(MOTION_ANSWERS.values()) \
            + list(MOTION_PROMPTS.values()) + list(STATE_CHOICES):
        words.update(phrase.split())
    return sorted(words)


class UnifiedVocab:
    def __init__(self, K_spatial: int, K_motion: int, words: list[str] | None = None):
        self.words = list(SPECIALS) + (template_words() if words is None else list(words))
        self.index = {w: i for i, w in enumerate(self.words)}
        self.n_text = len(self.words)
        self.K_spatial = K_spatial
        self.K_motion = K_motion
        self.spatial_offset = self.n_text
        self.motion_offset = self.n_text + K_spatial
        self.size = self.motion_offset + K_motion

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, UNK) for w in text.split()]

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i < len(SPECIALS):
                continue
            out.append(self.words[i] if i < self.n_text else f"<{self.role_of(i)}:{self.code_of(i)}>")
        return " ".join(out)

    def role_of(self, i: int) -> str:
        if not 0 <= i < self.size:
            raise IndexError(f"symbol {i} outside the vocabulary")
        if i < self.n_text:
            return TEXT
        return SPATIAL if i < self.motion_offset else MOTION

    def code_of(self, i: int) -> int:
        role = self.role_of(i)
        if role == SPATIAL:
            return i - self.spatial_offset
        if role == MOTION:
            return i - self.motion_offset
        raise ValueError(f"symbol {i} is text, not a visual code")

    def visual_id(self, role: str, code: int) -> int:
        if role == SPATIAL:
            if not 0 <= code < self.K_spatial:
                raise IndexError("spatial code out of range")
            return self.spatial_offset + code
        if not 0 <= code < self.K_motion:
            raise IndexError("motion code out of range")
        return self.motion_offset + code

    def role_range(self, role: str) -> tuple[int, int]:
        if role == SPATIAL:
            return self.spatial_offset, self.motion_offset
        if role == MOTION:
            return self.motion_offset, self.size
        return 0, self.n_text

    def to_dict(self) -> dict:
        return {"words": self.words[len(SPECIALS):], "specials": list(SPECIALS),
                "K_spatial": self.K_spatial, "K_motion": self.K_motion, "size": self.size,
                "ranges": {"text": [0, self.n_text], "spatial": list(self.role_range(SPATIAL)),
                           "motion": list(self.role_range(MOTION))}}

    @classmethod
    def from_dict(cls, d: dict) -> "UnifiedVocab":
        return cls(d["K_spatial"], d["K_motion"], d["words"])
