"""Synthetic scenes, queries and a symbolic referring-expression grounder."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from ..geometry import BinaryMask, rasterize_ellipse
from ..structured_output import ObjectAnswer

EASY = "easy"
HARD = "hard"

# class name -> indirect clue that never contains the name itself
CLASSES = {
    "person": "human figure",
    "cup": "thing people drink coffee from",
    "dog": "animal that barks",
    "car": "vehicle with four wheels",
    "chair": "thing you sit on",
    "bottle": "container for water",
    "bicycle": "two-wheeled ride",
    "umbrella": "thing that keeps rain off",
}
COLORS = ("red", "blue", "green", "yellow", "white", "black")
ACTIONS = ("holding hand", "waving", "sitting", "running")


class InvalidConfig(ValueError):
    pass


class Unresolvable(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    image_w: int = 640
    image_h: int = 480
    min_objects: int = 2
    max_objects: int = 5
    grid_scale: float = 0.125
    min_size: int = 48
    max_size: int = 160
    duplicate_prob: float = 0.5

    def validate(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise InvalidConfig("need 1 <= min_objects <= max_objects")
        if not 0 < self.grid_scale <= 1:
            raise InvalidConfig("grid_scale must be in (0, 1]")
        if not 4 <= self.min_size <= self.max_size:
            raise InvalidConfig("need 4 <= min_size <= max_size")
        if self.max_size >= min(self.image_w, self.image_h):
            raise InvalidConfig("objects must fit inside the image")
        if not 0 <= self.duplicate_prob <= 1:
            raise InvalidConfig("duplicate_prob must be in [0, 1]")

    @property
    def grid_w(self) -> int:
        return int(round(self.image_w * self.grid_scale))

    @property
    def grid_h(self) -> int:
        return int(round(self.image_h * self.grid_scale))


@dataclass(frozen=True)
class SceneObject:
    id: int
    label: str
    color: str
    action: str | None
    answer: ObjectAnswer
    mask: BinaryMask = field(compare=False)

    @property
    def center_x(self) -> float:
        return (self.answer.bbox[0] + self.answer.bbox[2]) / 2


@dataclass(frozen=True)
class Scene:
    image_w: int
    image_h: int
    grid_w: int
    grid_h: int
    grid_scale: float
    objects: tuple[SceneObject, ...]
    seed: int = 0

    def by_id(self, oid: int) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    def union_mask(self, ids) -> BinaryMask:
        bits = np.zeros((self.grid_h, self.grid_w), dtype=bool)
        for oid in ids:
            bits |= self.by_id(oid).mask.bits
        return BinaryMask(bits)

    @property
    def distractor_count(self) -> int:
        return max(0, len(self.objects) - 1)


@dataclass(frozen=True)
class QueryCase:
    query: str
    target_ids: tuple[int, ...]
    difficulty: str
    precise: str


def _overlaps(a, b, gap: float = 4.0) -> bool:
    return not (a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> Scene:
    """Reproducible scene of non-overlapping objects with ellipse masks."""
    config.validate()
    rng = np.random.default_rng(seed)
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    labels = list(CLASSES)
    chosen: list[str] = []
    for _ in range(n):
        if chosen and rng.random() < config.duplicate_prob:
            chosen.append(chosen[int(rng.integers(len(chosen)))])
        else:
            chosen.append(labels[int(rng.integers(len(labels)))])
    boxes: list[tuple[float, float, float, float]] = []
    for _ in range(n):
        for _attempt in range(200):
            w = float(rng.integers(config.min_size, config.max_size + 1))
            h = float(rng.integers(config.min_size, config.max_size + 1))
            x1 = float(rng.integers(0, int(config.image_w - w) + 1))
            y1 = float(rng.integers(0, int(config.image_h - h) + 1))
            box = (x1, y1, x1 + w, y1 + h)
            if not any(_overlaps(box, b) for b in boxes):
                boxes.append(box)
                break
        else:
            raise InvalidConfig("could not place objects without overlap; lower max_objects or sizes")
    objects = []
    for i, (label, box) in enumerate(zip(chosen, boxes)):
        color = COLORS[int(rng.integers(len(COLORS)))]
        action = ACTIONS[int(rng.integers(len(ACTIONS)))] if label == "person" else None
        point = (float(np.floor((box[0] + box[2]) / 2)), float(np.floor((box[1] + box[3]) / 2)))
        mask = rasterize_ellipse(box, config.grid_w, config.grid_h, config.grid_scale)
        objects.append(SceneObject(i, label, color, action, ObjectAnswer(box, point), mask))
    return Scene(
        config.image_w, config.image_h, config.grid_w, config.grid_h, config.grid_scale, tuple(objects), seed
    )


def check_scene(scene: Scene) -> list[str]:
    """Invariant violations of a scene (empty list when valid)."""
    problems = []
    ids = [o.id for o in scene.objects]
    if len(set(ids)) != len(ids):
        problems.append("duplicate ids")
    for o in scene.objects:
        x1, y1, x2, y2 = o.answer.bbox
        px, py = o.answer.point
        if not (x1 < x2 and y1 < y2):
            problems.append(f"object {o.id}: degenerate box")
        if x1 < 0 or y1 < 0 or x2 > scene.image_w or y2 > scene.image_h:
            problems.append(f"object {o.id}: box outside image")
        if not (x1 <= px <= x2 and y1 <= py <= y2):
            problems.append(f"object {o.id}: point outside box")
        if o.mask.shape != (scene.grid_h, scene.grid_w):
            problems.append(f"object {o.id}: mask shape {o.mask.shape}")
        elif o.mask.count() == 0:
            problems.append(f"object {o.id}: empty mask")
        else:
            ys, xs = np.nonzero(o.mask.bits)
            s = scene.grid_scale
            if xs.min() < np.floor(x1 * s) or xs.max() > np.ceil(x2 * s) or ys.min() < np.floor(
                y1 * s
            ) or ys.max() > np.ceil(y2 * s):
                problems.append(f"object {o.id}: mask leaks outside its box")
    return problems


# --- referring expressions ---------------------------------------------------------


def _same_class(scene: Scene, obj: SceneObject) -> list[SceneObject]:
    return [o for o in scene.objects if o.label == obj.label]


def precise_phrase(scene: Scene, obj: SceneObject) -> str:
    """Shortest phrase that grounds to exactly ``obj``."""
    peers = _same_class(scene, obj)
    if len(peers) == 1:
        return obj.label
    if sum(o.color == obj.color for o in peers) == 1:
        return f"{obj.color} {obj.label}"
    xs = sorted(peers, key=lambda o: (o.center_x, o.id))
    if obj is xs[0]:
        return f"{obj.label} on the left"
    if obj is xs[-1]:
        return f"{obj.label} on the right"
    if obj.action is not None and sum(o.action == obj.action for o in peers) == 1:
        return f"{obj.label} {obj.action}"
    return ""


_WORD_RE = re.compile(r"[a-z]+")


def ground(scene: Scene, phrase: str) -> list[int]:
    """Resolve an explicit phrase to object ids; implicit clues resolve to nothing.

    The phrase must name exactly one class. Color, action and left/right
    modifiers narrow the candidates in that order.
    """
    text = phrase.lower()
    words = _WORD_RE.findall(text)
    named = [c for c in CLASSES if c in words]
    if len(named) != 1:
        return []
    cands = [o for o in scene.objects if o.label == named[0]]
    colors = [c for c in COLORS if c in words]
    if colors:
        cands = [o for o in cands if o.color in colors]
    for action in ACTIONS:
        if action in text:
            cands = [o for o in cands if o.action == action]
    if cands and ("left" in words or "right" in words):
        ordered = sorted(cands, key=lambda o: (o.center_x, o.id))
        cands = [ordered[0] if "left" in words else ordered[-1]]
    return [o.id for o in cands]


def generate_query(scene: Scene, difficulty: str, seed: int) -> QueryCase:
    """Easy queries name a unique class; hard ones use an indirect clue plus a
    disambiguating attribute or relation and never say the class name."""
    rng = np.random.default_rng(seed)
    if difficulty == EASY:
        unique = [o for o in scene.objects if len(_same_class(scene, o)) == 1]
        if not unique:
            raise Unresolvable("no object with a unique class")
        obj = unique[int(rng.integers(len(unique)))]
        return QueryCase(obj.label, (obj.id,), EASY, obj.label)
    if difficulty != HARD:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    options = []
    for obj in scene.objects:
        peers = _same_class(scene, obj)
        if len(peers) < 2:
            continue
        clue = CLASSES[obj.label]
        if obj.action is not None and sum(o.action == obj.action for o in peers) == 1:
            options.append((obj, f"the {clue} who is {obj.action}", f"{obj.label} {obj.action}"))
        if sum(o.color == obj.color for o in peers) == 1:
            options.append((obj, f"the {obj.color} {clue}", f"{obj.color} {obj.label}"))
        xs = sorted(peers, key=lambda o: (o.center_x, o.id))
        if obj is xs[0]:
            options.append((obj, f"the {clue} on the left", f"{obj.label} on the left"))
        elif obj is xs[-1]:
            options.append((obj, f"the {clue} on the right", f"{obj.label} on the right"))
    options = [opt for opt in options if ground(scene, opt[2]) == [opt[0].id]]
    if not options:
        raise Unresolvable("no same-class distractor with a distinguishing attribute")
    obj, query, phrase = options[int(rng.integers(len(options)))]
    return QueryCase(query, (obj.id,), HARD, phrase)


@dataclass(frozen=True)
class SceneRef:
    """What a policy may look at: the scene and, in training, the query case."""

    scene: Scene
    case: QueryCase | None = None

    @property
    def image_w(self):
        return self.scene.image_w

    @property
    def image_h(self):
        return self.scene.image_h

    def gt_answers(self) -> tuple[ObjectAnswer, ...]:
        return tuple(self.scene.by_id(i).answer for i in self.case.target_ids)

    def gt_mask(self) -> BinaryMask:
        return self.scene.union_mask(self.case.target_ids)


def build_suite(
    n_cases: int, seed: int, config: SceneConfig = SceneConfig(), hard_fraction: float = 0.5
) -> list[SceneRef]:
    """``n_cases`` resolvable (scene, query) pairs, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    out: list[SceneRef] = []
    attempts = 0
    while len(out) < n_cases:
        attempts += 1
        if attempts > 100 * max(n_cases, 1):
            raise InvalidConfig("scene config cannot produce enough resolvable queries")
        difficulty = HARD if rng.random() < hard_fraction else EASY
        scene_seed = int(rng.integers(2**31))
        scene = generate_scene(scene_seed, config)
        try:
            case = generate_query(scene, difficulty, scene_seed + 1)
        except Unresolvable:
            continue
        out.append(SceneRef(scene, case))
    return out
