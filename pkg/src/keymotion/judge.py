"""Answer task questions from pixels via palette quantisation and connected components."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .scenes import PALETTE_NAMES, PALETTE_RGB, VideoClip
from .tasks import MOTION_ANSWERS, direction_of, parse_question, relation_of

ABSTAIN = -1
MIN_AREA = 3
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class Blob:
    color: str
    area: int
    cx: float
    cy: float


class _Abstain(Exception):
    pass


def quantize_palette(frame: np.ndarray) -> np.ndarray:
    """Index of the nearest palette colour for every pixel."""
    d = ((frame[:, :, None, :] - PALETTE_RGB[None, None]) ** 2).sum(-1)
    return d.argmin(-1)


def detect_objects(frame: np.ndarray, background: str = "black", min_area: int = MIN_AREA) -> list[Blob]:
    labels_pal = quantize_palette(frame)
    fg = labels_pal != PALETTE_NAMES.index(background)
    comp, n = ndimage.label(fg, structure=_EIGHT)
    blobs = []
    for k in range(1, n + 1):
        ys, xs = np.nonzero(comp == k)
        if ys.size < min_area:
            continue
        counts = np.bincount(labels_pal[ys, xs], minlength=len(PALETTE_NAMES))
        blobs.append(Blob(PALETTE_NAMES[int(counts.argmax())], int(ys.size), float(xs.mean()), float(ys.mean())))
    return blobs


def _largest(blobs: list[Blob], color: str | None = None) -> Blob:
    cands = [b for b in blobs if color is None or b.color == color]
    if not cands:
        raise _Abstain
    return max(cands, key=lambda b: b.area)


def _choice(choices: list[str], text: str) -> int:
    if text not in choices:
        raise _Abstain
    return choices.index(text)


def _classify_track(track: np.ndarray) -> str:
    spread = np.sqrt(((track - track.mean(0)) ** 2).sum(1)).max()
    if spread < 1.0:
        return "static"
    chord = track[-1] - track[0]
    length = float(np.hypot(*chord))
    if length < 2.0:
        return "circle"
    normal = np.array([-chord[1], chord[0]]) / length
    deviation = np.abs((track - track[0]) @ normal).max()
    return "linear" if deviation < 1.5 else "zigzag"


def judge_from_pixels(video: VideoClip, question: str, choices: list[str], background: str = "black") -> int:
    """Choice index answering ``question`` about ``video``; ``ABSTAIN`` when nothing is detectable."""
    kind, args = parse_question(question)
    frames = video.frames
    try:
        first = detect_objects(frames[0], background)
        if not first:
            raise _Abstain
        if kind == "counting":
            return _choice(choices, str(len(first)))
        if kind == "direction":
            a = _largest(first, args[0])
            b = _largest(detect_objects(frames[-1], background), args[0])
            d = direction_of(b.cx - a.cx, b.cy - a.cy)
            if d is None:
                raise _Abstain
            return _choice(choices, d)
        if kind == "rel_position":
            a = _largest(first, args[0])
            b = _largest(first, args[2])
            return _choice(choices, relation_of(a.cx - b.cx, a.cy - b.cy))
        if kind == "rel_size":
            sized = {}
            for ch in choices:
                color = ch.split()[1]
                cands = [bl for bl in first if bl.color == color]
                if cands:
                    sized[ch] = max(bl.area for bl in cands)
            if not sized:
                raise _Abstain
            return choices.index(max(sized, key=sized.get))
        if kind == "color":
            return _choice(choices, _largest(first).color)
        if kind == "state":
            last = detect_objects(frames[-1], background)
            changed = _largest(first).color != _largest(last).color
            return _choice(choices, "yes" if changed else "no")
        if kind == "motion":
            track = []
            for t in range(frames.shape[0]):
                b = _largest(detect_objects(frames[t], background))
                track.append((b.cx, b.cy))
            return _choice(choices, MOTION_ANSWERS[_classify_track(np.array(track))])
    except _Abstain:
        return ABSTAIN
    return ABSTAIN
