"""Symbolic scene programs of moving coloured shapes and their rasteriser."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PALETTE: dict[str, tuple[float, float, float]] = {
    "black": (0.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}
PALETTE_NAMES = list(PALETTE)
PALETTE_RGB = np.array([PALETTE[n] for n in PALETTE_NAMES])
SHAPES = ("circle", "square", "triangle")
TRAJECTORIES = ("linear", "circle", "zigzag", "static")

ZIGZAG_PERIOD = 8.0


class SceneError(ValueError):
    """Scene violates the canvas or palette constraints."""


@dataclass
class SceneObject:
    shape: str
    color: str
    radius: float
    start: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    trajectory: str = "linear"
    orbit_radius: float = 0.0
    phase: float = 0.0
    zigzag_amplitude: float = 0.0
    flip_frame: int | None = None
    flip_color: str | None = None

    def position(self, t: int, duration: int) -> tuple[float, float]:
        x0, y0 = self.start
        vx, vy = self.velocity
        if self.trajectory == "static":
            return x0, y0
        if self.trajectory == "linear":
            return x0 + t * vx, y0 + t * vy
        if self.trajectory == "circle":
            span = max(duration - 1, 1)
            a = self.phase + 2.0 * math.pi * t / span
            if t == duration - 1:
                a = self.phase  # close the loop exactly
            r = self.orbit_radius
            return (x0 + r * (math.cos(a) - math.cos(self.phase)),
                    y0 + r * (math.sin(a) - math.sin(self.phase)))
        if self.trajectory == "zigzag":
            norm = math.hypot(vx, vy) or 1.0
            px, py = -vy / norm, vx / norm
            off = self.zigzag_amplitude * _triangle_wave(t / ZIGZAG_PERIOD)
            return x0 + t * vx + off * px, y0 + t * vy + off * py
        raise SceneError(f"unknown trajectory {self.trajectory!r}")

    def color_at(self, t: int) -> str:
        if self.flip_frame is not None and t >= self.flip_frame:
            return self.flip_color or self.color
        return self.color


def _triangle_wave(u: float) -> float:
    u = u % 1.0
    if u < 0.25:
        return 4 * u
    if u < 0.75:
        return 2 - 4 * u
    return 4 * u - 4


@dataclass
class SceneProgram:
    objects: list[SceneObject]
    height: int = 64
    width: int = 64
    background: str = "black"
    duration: int = 16
    fps: float = 8.0
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not 1 <= len(self.objects) <= 5:
            raise SceneError(f"object count {len(self.objects)} outside [1, 5]")
        if self.duration < 1:
            raise SceneError("scene needs at least one frame")
        if self.background not in PALETTE:
            raise SceneError(f"background {self.background!r} not in palette")
        for obj in self.objects:
            if obj.shape not in SHAPES:
                raise SceneError(f"unknown shape {obj.shape!r}")
            for c in (obj.color, obj.flip_color):
                if c is not None and c not in PALETTE:
                    raise SceneError(f"colour {c!r} not in palette")
            lo_x, hi_x, lo_y, hi_y = self.extent(obj)
            if lo_x < 0 or lo_y < 0 or hi_x > self.width - 1 or hi_y > self.height - 1:
                raise SceneError(f"{obj.color} {obj.shape} leaves the canvas")

    def extent(self, obj: SceneObject) -> tuple[float, float, float, float]:
        pts = np.array([obj.position(t, self.duration) for t in range(self.duration)])
        r = obj.radius
        return pts[:, 0].min() - r, pts[:, 0].max() + r, pts[:, 1].min() - r, pts[:, 1].max() + r

    def to_dict(self) -> dict:
        d = asdict(self)
        for o in d["objects"]:
            o["start"] = list(o["start"])
            o["velocity"] = list(o["velocity"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneProgram":
        objs = []
        for o in d["objects"]:
            o = dict(o)
            o["start"] = tuple(o["start"])
            o["velocity"] = tuple(o["velocity"])
            objs.append(SceneObject(**o))
        rest = {k: v for k, v in d.items() if k != "objects"}
        return cls(objects=objs, **rest)


@dataclass
class VideoClip:
    frames: np.ndarray  # T x H x W x 3 in [0, 1]
    fps: float

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be T x H x W x 3, got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("video has no frames")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ValueError("pixel values outside [0, 1]")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def duration(self) -> float:
        """Seconds from the key instant (frame 0) to the last frame."""
        return (self.T - 1) / self.fps


def shape_mask(shape: str, cx: float, cy: float, r: float, height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    dx = xs - cx
    dy = ys - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    raise SceneError(f"unknown shape {shape!r}")


def render_scene(scene: SceneProgram) -> VideoClip:
    scene.validate()
    T, H, W = scene.duration, scene.height, scene.width
    frames = np.empty((T, H, W, 3))
    frames[...] = PALETTE[scene.background]
    for t in range(T):
        for obj in scene.objects:
            cx, cy = obj.position(t, T)
            m = shape_mask(obj.shape, cx, cy, obj.radius, H, W)
            frames[t][m] = PALETTE[obj.color_at(t)]
    return VideoClip(frames, scene.fps)


def write_ppm(path: str | Path, frame: np.ndarray) -> None:
    h, w, _ = frame.shape
    data = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pixels = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
    return pixels.reshape(h, w, 3) / float(maxval)


def export_frames(video: VideoClip, directory: str | Path, prefix: str = "frame") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in range(video.T):
        p = directory / f"{prefix}_{t:04d}.ppm"
        write_ppm(p, video.frames[t])
        paths.append(p)
    return paths
