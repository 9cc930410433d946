"""Templated (prompt, question, choices, answer) tasks over scene programs.

Seven categories, each with one prompt template and one question template.
``judge_from_program`` answers any known question exactly from the symbolic
scene; ``answer_from_prompt`` recovers the answer from the prompt text alone.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace

import numpy as np

from .scenes import PALETTE_NAMES, SHAPES, TRAJECTORIES, SceneObject, SceneProgram

CATEGORIES = ("counting", "direction", "rel_position", "rel_size", "color", "state", "motion")
OBJECT_COLORS = tuple(c for c in PALETTE_NAMES if c != "black")
NUMBER_WORDS = ("one", "two", "three", "four", "five")
DIRECTIONS = ("top left", "top right", "bottom left", "bottom right")
OPPOSITE = {"top left": "bottom right", "bottom right": "top left",
            "top right": "bottom left", "bottom left": "top right"}
RELATIONS = ("left of", "right of", "above", "below")
MOTION_ANSWERS = {"linear": "in a straight line", "circle": "in a circle",
                  "zigzag": "in a zigzag", "static": "it stays still"}
MOTION_PROMPTS = {"linear": "moves in a straight line", "circle": "moves in a circle",
                  "zigzag": "moves in a zigzag", "static": "stays still"}
STATE_CHOICES = ("yes", "no", "it disappears", "it splits")


class JudgeError(ValueError):
    """Question does not match any known template."""


@dataclass
class TaskTriplet:
    category: str
    prompt: str
    question: str
    choices: list[str]
    answer: int
    scene: SceneProgram

    def to_dict(self) -> dict:
        return {"category": self.category, "prompt": self.prompt, "question": self.question,
                "choices": list(self.choices), "answer": int(self.answer), "scene": self.scene.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskTriplet":
        return cls(d["category"], d["prompt"], d["question"], list(d["choices"]), int(d["answer"]),
                   SceneProgram.from_dict(d["scene"]))


def plural(shape: str) -> str:
    return shape + "s"


def direction_of(vx: float, vy: float) -> str | None:
    if vx == 0 or vy == 0:
        return None
    return ("top" if vy < 0 else "bottom") + " " + ("left" if vx < 0 else "right")


def relation_of(dx: float, dy: float) -> str:
    """Relation of object A to object B given A - B in image coordinates."""
    if abs(dx) >= abs(dy):
        return "left of" if dx < 0 else "right of"
    return "above" if dy < 0 else "below"


# question templates -------------------------------------------------------

_Q_PATTERNS = {
    "counting": re.compile(r"^how many (\w+)s appear \?$"),
    "direction": re.compile(r"^which direction does the (\w+) (\w+) move \?$"),
    "rel_position": re.compile(r"^where is the (\w+) (\w+) relative to the (\w+) (\w+) \?$"),
    "rel_size": re.compile(r"^which object is larger \?$"),
    "color": re.compile(r"^what color is the (\w+) \?$"),
    "state": re.compile(r"^does the (\w+) change color \?$"),
    "motion": re.compile(r"^how does the (\w+) move \?$"),
}


def parse_question(question: str) -> tuple[str, tuple[str, ...]]:
    for kind, pat in _Q_PATTERNS.items():
        m = pat.match(question)
        if m:
            return kind, m.groups()
    raise JudgeError(f"unknown question template: {question!r}")


def _find(scene: SceneProgram, color: str | None = None, shape: str | None = None) -> list[SceneObject]:
    return [o for o in scene.objects
            if (color is None or o.color == color) and (shape is None or o.shape == shape)]


def _unique(objs: list[SceneObject], question: str) -> SceneObject:
    if len(objs) != 1:
        raise JudgeError(f"question {question!r} does not single out one object")
    return objs[0]


def program_answer_text(scene: SceneProgram, question: str, choices: list[str]) -> str:
    kind, args = parse_question(question)
    T = scene.duration
    if kind == "counting":
        return str(len(_find(scene, shape=args[0])))
    if kind == "direction":
        obj = _unique(_find(scene, args[0], args[1]), question)
        x0, y0 = obj.position(0, T)
        x1, y1 = obj.position(T - 1, T)
        d = direction_of(x1 - x0, y1 - y0)
        if d is None:
            raise JudgeError("object has no diagonal direction")
        return d
    if kind == "rel_position":
        a = _unique(_find(scene, args[0], args[1]), question)
        b = _unique(_find(scene, args[2], args[3]), question)
        ax, ay = a.position(0, T)
        bx, by = b.position(0, T)
        return relation_of(ax - bx, ay - by)
    if kind == "rel_size":
        big = max(scene.objects, key=lambda o: o.radius)
        return f"the {big.color} {big.shape}"
    if kind == "color":
        return _unique(_find(scene, shape=args[0]), question).color_at(0)
    if kind == "state":
        obj = _unique(_find(scene, shape=args[0]), question)
        return "yes" if obj.color_at(T - 1) != obj.color_at(0) else "no"
    if kind == "motion":
        return MOTION_ANSWERS[_unique(_find(scene, shape=args[0]), question).trajectory]
    raise JudgeError(kind)


def judge_from_program(scene: SceneProgram, question: str, choices: list[str]) -> int:
    text = program_answer_text(scene, question, choices)
    if text not in choices:
        raise JudgeError(f"program answer {text!r} not among choices")
    return choices.index(text)


# scene construction -------------------------------------------------------


def _rand_sign(rng) -> float:
    return -1.0 if rng.random() < 0.5 else 1.0


def _shared_velocity(rng, T: int) -> tuple[float, float]:
    span = max(T - 1, 1)
    return (_rand_sign(rng) * rng.uniform(8.0, 16.0) / span,
            _rand_sign(rng) * rng.uniform(8.0, 16.0) / span)


def _min_separation(a: SceneObject, b: SceneObject) -> float:
    # shapes touch only if centres are closer than their circumscribed radii
    return max(2.0 * max(a.radius, b.radius), math.sqrt(2.0) * (a.radius + b.radius) + 2.0)


def _separated(scene: SceneProgram) -> bool:
    objs = scene.objects
    T = scene.duration
    for t in range(T):
        pos = [o.position(t, T) for o in objs]
        for i in range(len(objs)):
            for j in range(i + 1, len(objs)):
                if math.dist(pos[i], pos[j]) < _min_separation(objs[i], objs[j]):
                    return False
    return True


def _inside(scene: SceneProgram) -> bool:
    for obj in scene.objects:
        lo_x, hi_x, lo_y, hi_y = scene.extent(obj)
        if lo_x < 0 or lo_y < 0 or hi_x > scene.width - 1 or hi_y > scene.height - 1:
            return False
    return True


def _place(rng, scene: SceneProgram, tries: int = 2000) -> SceneProgram:
    """Resample start positions until every trajectory fits and stays apart."""
    for _ in range(tries):
        for obj in scene.objects:
            obj.start = (0.0, 0.0)
            lo_x, hi_x, lo_y, hi_y = scene.extent(obj)
            x_min, x_max = -lo_x, scene.width - 1 - hi_x
            y_min, y_max = -lo_y, scene.height - 1 - hi_y
            if x_min > x_max or y_min > y_max:
                raise ValueError("object trajectory cannot fit on the canvas")
            obj.start = (float(rng.uniform(x_min, x_max)), float(rng.uniform(y_min, y_max)))
        if _separated(scene):
            return scene
    raise ValueError("could not place objects with the required separation")


def _linear_object(rng, shape, color, radius, velocity) -> SceneObject:
    return SceneObject(shape=shape, color=color, radius=float(radius), start=(0.0, 0.0),
                       velocity=velocity, trajectory="linear")


def _distinct(rng, pool, k):
    idx = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in idx]


def _shuffled(rng, items: list[str]) -> list[str]:
    order = rng.permutation(len(items))
    return [items[i] for i in order]


def _sample_counting(rng, base: dict):
    T = base["duration"]
    n = int(rng.integers(1, 6))
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = OBJECT_COLORS[rng.integers(len(OBJECT_COLORS))]
    vel = _shared_velocity(rng, T)
    objs = [_linear_object(rng, shape, color, rng.uniform(3.0, 4.0), vel) for _ in range(n)]
    scene = _place(rng, SceneProgram(objects=objs, **base))
    starts = [s for s in (1, 2) if s <= n <= s + 3]
    lo = starts[rng.integers(len(starts))]
    choices = [str(k) for k in range(lo, lo + 4)]
    verb = "moves" if n == 1 else "move"
    noun = shape if n == 1 else plural(shape)
    prompt = f"{NUMBER_WORDS[n - 1]} {color} {noun} {verb} to the {direction_of(*vel)}"
    question = f"how many {plural(shape)} appear ?"
    return scene, prompt, question, choices


def _sample_direction(rng, base: dict):
    T = base["duration"]
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = OBJECT_COLORS[rng.integers(len(OBJECT_COLORS))]
    vel = _shared_velocity(rng, T)
    scene = _place(rng, SceneProgram(objects=[_linear_object(rng, shape, color, rng.uniform(4.0, 7.0), vel)], **base))
    d = direction_of(*vel)
    prompt = f"a {color} {shape} moves from the {OPPOSITE[d]} to the {d}"
    question = f"which direction does the {color} {shape} move ?"
    return scene, prompt, question, _shuffled(rng, list(DIRECTIONS))


def _sample_rel_position(rng, base: dict):
    T, H, W = base["duration"], base["height"], base["width"]
    for _ in range(2000):
        shapes = [SHAPES[i] for i in rng.integers(len(SHAPES), size=2)]
        colors = _distinct(rng, OBJECT_COLORS, 2)
        radii = rng.uniform(3.0, 6.0, size=2)
        vel = _shared_velocity(rng, T)
        a = _linear_object(rng, shapes[0], colors[0], radii[0], vel)
        b = _linear_object(rng, shapes[1], colors[1], radii[1], vel)
        relation = RELATIONS[rng.integers(4)]
        primary = rng.uniform(14.0, 24.0)
        secondary = rng.uniform(-0.3, 0.3) * primary
        dx, dy = {"left of": (-primary, secondary), "right of": (primary, secondary),
                  "above": (secondary, -primary), "below": (secondary, primary)}[relation]
        scene = SceneProgram(objects=[a, b], **base)
        b.start = (0.0, 0.0)
        lo_x, hi_x, lo_y, hi_y = scene.extent(b)
        bx = rng.uniform(-lo_x, W - 1 - hi_x)
        by = rng.uniform(-lo_y, H - 1 - hi_y)
        b.start = (float(bx), float(by))
        a.start = (float(bx + dx), float(by + dy))
        if _inside(scene) and _separated(scene):
            prompt = f"a {colors[0]} {shapes[0]} is {relation} a {colors[1]} {shapes[1]}"
            question = f"where is the {colors[0]} {shapes[0]} relative to the {colors[1]} {shapes[1]} ?"
            return scene, prompt, question, _shuffled(rng, list(RELATIONS))
    raise ValueError("could not place a relative-position pair")


def _sample_rel_size(rng, base: dict):
    T = base["duration"]
    shape = SHAPES[rng.integers(len(SHAPES))]
    colors = _distinct(rng, OBJECT_COLORS, 4)
    small = rng.uniform(3.0, 4.5)
    large = small * rng.uniform(1.5, 1.8)
    vel = _shared_velocity(rng, T)
    objs = [_linear_object(rng, shape, colors[0], large, vel), _linear_object(rng, shape, colors[1], small, vel)]
    if rng.random() < 0.5:
        objs.reverse()
    scene = _place(rng, SceneProgram(objects=objs, **base))
    first, second = objs
    w0, w1 = ("large", "small") if first.radius > second.radius else ("small", "large")
    prompt = f"a {w0} {first.color} {shape} and a {w1} {second.color} {shape}"
    question = "which object is larger ?"
    choices = _shuffled(rng, [f"the {c} {shape}" for c in colors])
    return scene, prompt, question, choices


def _sample_color(rng, base: dict):
    T = base["duration"]
    shape = SHAPES[rng.integers(len(SHAPES))]
    colors = _distinct(rng, OBJECT_COLORS, 4)
    vel = _shared_velocity(rng, T)
    scene = _place(rng, SceneProgram(objects=[_linear_object(rng, shape, colors[0], rng.uniform(4.0, 7.0), vel)], **base))
    prompt = f"a {colors[0]} {shape} moves to the {direction_of(*vel)}"
    question = f"what color is the {shape} ?"
    return scene, prompt, question, _shuffled(rng, colors)


def _sample_state(rng, base: dict):
    T = base["duration"]
    shape = SHAPES[rng.integers(len(SHAPES))]
    c0, c1 = _distinct(rng, OBJECT_COLORS, 2)
    vel = _shared_velocity(rng, T)
    obj = _linear_object(rng, shape, c0, rng.uniform(4.0, 7.0), vel)
    flips = rng.random() < 0.5 and T >= 2
    if flips:
        obj.flip_frame = max(1, T // 2)
        obj.flip_color = c1
    scene = _place(rng, SceneProgram(objects=[obj], **base))
    prompt = f"a {c0} {shape} turns {c1}" if flips else f"a {c0} {shape} stays {c0}"
    question = f"does the {shape} change color ?"
    return scene, prompt, question, _shuffled(rng, list(STATE_CHOICES))


def _sample_motion(rng, base: dict):
    T = base["duration"]
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = OBJECT_COLORS[rng.integers(len(OBJECT_COLORS))]
    kind = TRAJECTORIES[rng.integers(len(TRAJECTORIES))]
    obj = SceneObject(shape=shape, color=color, radius=float(rng.uniform(4.0, 6.0)), start=(0.0, 0.0), trajectory=kind)
    if kind in ("linear", "zigzag"):
        obj.velocity = _shared_velocity(rng, T)
    if kind == "zigzag":
        obj.zigzag_amplitude = float(rng.uniform(3.0, 4.0))
    if kind == "circle":
        obj.orbit_radius = float(rng.uniform(5.0, 8.0))
        obj.phase = float(rng.uniform(0.0, 2.0 * math.pi))
    scene = _place(rng, SceneProgram(objects=[obj], **base))
    prompt = f"a {color} {shape} {MOTION_PROMPTS[kind]}"
    question = f"how does the {shape} move ?"
    return scene, prompt, question, _shuffled(rng, list(MOTION_ANSWERS.values()))


_SAMPLERS = {
    "counting": _sample_counting,
    "direction": _sample_direction,
    "rel_position": _sample_rel_position,
    "rel_size": _sample_rel_size,
    "color": _sample_color,
    "state": _sample_state,
    "motion": _sample_motion,
}


def sample_task(category: str, rng: np.random.Generator, height: int = 64, width: int = 64,
                duration: int = 16, fps: float = 8.0, seed: int | None = None) -> TaskTriplet:
    if category not in _SAMPLERS:
        raise ValueError(f"unknown category {category!r}")
    if category in ("direction", "motion") and duration < 8:
        raise ValueError(f"{category} tasks need at least 8 frames")
    base = dict(height=height, width=width, duration=duration, fps=fps, seed=seed)
    scene, prompt, question, choices = _SAMPLERS[category](rng, base)
    scene.validate()
    answer = judge_from_program(scene, question, choices)
    return TaskTriplet(category, prompt, question, choices, answer, scene)


# extra questions per scene ------------------------------------------------


def scene_questions(scene: SceneProgram, rng: np.random.Generator) -> list[tuple[str, str, list[str], int]]:
    """Every well-posed (category, question, choices, answer) for one scene."""
    out = []
    objs = scene.objects
    shapes = {o.shape for o in objs}
    for shape in sorted(shapes):
        n = len(_find(scene, shape=shape))
        starts = [s for s in (1, 2) if s <= n <= s + 3]
        if starts:
            lo = starts[rng.integers(len(starts))]
            out.append(("counting", f"how many {plural(shape)} appear ?", [str(k) for k in range(lo, lo + 4)]))
    for o in objs:
        if o.trajectory == "linear" and len(_find(scene, o.color, o.shape)) == 1 and direction_of(*o.velocity):
            out.append(("direction", f"which direction does the {o.color} {o.shape} move ?",
                        _shuffled(rng, list(DIRECTIONS))))
    if len(objs) == 2 and objs[0].color != objs[1].color:
        a, b = objs
        out.append(("rel_position", f"where is the {a.color} {a.shape} relative to the {b.color} {b.shape} ?",
                    _shuffled(rng, list(RELATIONS))))
        if a.shape == b.shape and max(a.radius, b.radius) >= 1.5 * min(a.radius, b.radius):
            extra = [c for c in OBJECT_COLORS if c not in (a.color, b.color)]
            pick = _distinct(rng, extra, 2)
            out.append(("rel_size", "which object is larger ?",
                        _shuffled(rng, [f"the {c} {a.shape}" for c in [a.color, b.color] + pick])))
    for shape in sorted(shapes):
        found = _find(scene, shape=shape)
        if len(found) != 1:
            continue
        o = found[0]
        others = [c for c in OBJECT_COLORS if c != o.color]
        out.append(("color", f"what color is the {shape} ?", _shuffled(rng, [o.color] + _distinct(rng, others, 3))))
        out.append(("state", f"does the {shape} change color ?", _shuffled(rng, list(STATE_CHOICES))))
        out.append(("motion", f"how does the {shape} move ?", _shuffled(rng, list(MOTION_ANSWERS.values()))))
    result = []
    for cat, q, ch in out:
        try:
            result.append((cat, q, ch, judge_from_program(scene, q, ch)))
        except JudgeError:
            continue
    return result


def augment_task(task: TaskTriplet, rng: np.random.Generator) -> TaskTriplet:
    """Random mirror and object-colour permutation applied to a task's scene and its text.

    Prompt, question and choices are rewritten word by word, so the answer index
    is unchanged. A transform that breaks placement falls back to the original task.
    """
    scene = task.scene
    flip_x, flip_y = rng.random(2) < 0.5
    words = dict(zip(OBJECT_COLORS, rng.permutation(OBJECT_COLORS).tolist()))
    objs = []
    for o in scene.objects:
        (x, y), (vx, vy), phase = o.start, o.velocity, o.phase
        if flip_x:
            x, vx, phase = scene.width - 1 - x, -vx, math.pi - phase
        if flip_y:
            y, vy, phase = scene.height - 1 - y, -vy, -phase
        objs.append(replace(o, start=(x, y), velocity=(vx, vy), phase=phase, color=words.get(o.color, o.color),
                            flip_color=None if o.flip_color is None else words.get(o.flip_color, o.flip_color)))
    out = replace(scene, objects=objs, meta=dict(scene.meta))
    if not (_inside(out) and _separated(out)):
        return task
    if flip_x:
        words.update(left="right", right="left")
    if flip_y:
        words.update(top="bottom", bottom="top", above="below", below="above")

    def rewrite(text: str) -> str:
        return " ".join(words.get(w, w) for w in text.split(" "))

    return TaskTriplet(task.category, rewrite(task.prompt), rewrite(task.question),
                       [rewrite(c) for c in task.choices], task.answer, out)


# prompt round trip --------------------------------------------------------

_P_PATTERNS = {
    "counting": re.compile(r"^(\w+) (\w+) (\w+?)s? moves? to the (top|bottom) (left|right)$"),
    "direction": re.compile(r"^a (\w+) (\w+) moves from the \w+ \w+ to the (top|bottom) (left|right)$"),
    "rel_position": re.compile(r"^a (\w+) (\w+) is (left of|right of|above|below) a (\w+) (\w+)$"),
    "rel_size": re.compile(r"^a (large|small) (\w+) (\w+) and a (large|small) (\w+) (\w+)$"),
    "color": re.compile(r"^a (\w+) (\w+) moves to the (top|bottom) (left|right)$"),
    "state": re.compile(r"^a (\w+) (\w+) (turns|stays) (\w+)$"),
    "motion": re.compile(r"^a (\w+) (\w+) (moves in a straight line|moves in a circle|moves in a zigzag|stays still)$"),
}


def parse_prompt(category: str, prompt: str) -> dict:
    m = _P_PATTERNS[category].match(prompt)
    if not m:
        raise JudgeError(f"prompt does not match the {category} template: {prompt!r}")
    g = m.groups()
    if category == "counting":
        return {"count": NUMBER_WORDS.index(g[0]) + 1, "color": g[1], "shape": g[2], "direction": f"{g[3]} {g[4]}"}
    if category == "direction":
        return {"color": g[0], "shape": g[1], "direction": f"{g[2]} {g[3]}"}
    if category == "rel_position":
        return {"a": (g[0], g[1]), "relation": g[2], "b": (g[3], g[4])}
    if category == "rel_size":
        big = (g[1], g[2]) if g[0] == "large" else (g[4], g[5])
        return {"larger": big}
    if category == "color":
        return {"color": g[0], "shape": g[1]}
    if category == "state":
        return {"shape": g[1], "changes": g[2] == "turns" and g[3] != g[0]}
    inv = {v: k for k, v in MOTION_PROMPTS.items()}
    return {"shape": g[1], "trajectory": inv[g[2]]}


def answer_from_prompt(task: TaskTriplet) -> int:
    a = parse_prompt(task.category, task.prompt)
    c = task.category
    if c == "counting":
        text = str(a["count"])
    elif c == "direction":
        text = a["direction"]
    elif c == "rel_position":
        text = a["relation"]
    elif c == "rel_size":
        text = f"the {a['larger'][0]} {a['larger'][1]}"
    elif c == "color":
        text = a["color"]
    elif c == "state":
        text = "yes" if a["changes"] else "no"
    else:
        text = MOTION_ANSWERS[a["trajectory"]]
    return task.choices.index(text)
