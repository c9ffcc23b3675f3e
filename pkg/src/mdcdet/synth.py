"""Synthetic class-incremental detection streams.

Every class is a coloured shape archetype. Training images of task t carry
annotations only for task t's classes; with probability ``recurrence_rate``
they also contain one unannotated object of an earlier task, which is the
situation that pushes old classes into the background. Evaluation images
are fully annotated for every class seen so far.
"""

from __future__ import annotations

import base64
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import PlacementError, StreamFormatError

FORMAT = "mdcdet-stream"
VERSION = 1

SHAPES = ("rectangle", "ellipse", "triangle", "diamond", "cross", "ring", "frame", "hourglass")
PALETTE = (
    (0.95, 0.15, 0.15),
    (0.15, 0.85, 0.2),
    (0.2, 0.35, 1.0),
    (0.95, 0.9, 0.1),
    (0.1, 0.9, 0.9),
    (0.9, 0.2, 0.9),
    (1.0, 0.55, 0.05),
    (0.95, 0.95, 0.95),
)


@dataclass(frozen=True)
class ClassStyle:
    name: str
    shape: str
    color: tuple[float, float, float]


DEFAULT_SHAPES = ("rectangle", "ellipse")  # classes differ mainly by hue


def default_styles(n: int) -> list[ClassStyle]:
    return styles_for([DEFAULT_SHAPES[c % len(DEFAULT_SHAPES)] for c in range(n)],
                      [PALETTE[c % len(PALETTE)] for c in range(n)])


def styles_for(shapes, colors) -> list[ClassStyle]:
    return [ClassStyle(f"{shape}-{c}", shape, tuple(float(v) for v in color))
            for c, (shape, color) in enumerate(zip(shapes, colors))]


@dataclass
class StreamSpec:
    n_tasks: int = 4
    classes_per_task: list[list[int]] | None = None  # defaults to consecutive pairs
    n_classes: int = 8
    train_per_task: int = 300
    eval_per_task: int = 100
    image_size: int = 32
    recurrence_rate: float = 0.6
    objects_per_image: tuple[int, int] = (1, 2)
    size_range: tuple[int, int] = (8, 14)
    noise: float = 0.04
    seed: int = 0
    class_shapes: list[str] | None = None  # per class; defaults cycle DEFAULT_SHAPES
    class_colors: list[tuple[float, float, float]] | None = None  # per class RGB in [0, 1]

    def __post_init__(self):
        if self.n_tasks < 0:
            raise ValueError("n_tasks must be non-negative")
        if self.classes_per_task is None:
            if self.n_tasks and self.n_classes % self.n_tasks:
                raise ValueError("n_classes must divide evenly across tasks")
            k = self.n_classes // self.n_tasks if self.n_tasks else 0
            self.classes_per_task = [list(range(t * k, (t + 1) * k)) for t in range(self.n_tasks)]
        self.classes_per_task = [list(map(int, c)) for c in self.classes_per_task]
        self.objects_per_image = tuple(self.objects_per_image)
        self.size_range = tuple(self.size_range)
        if len(self.classes_per_task) != self.n_tasks:
            raise ValueError("classes_per_task must list one class set per task")
        if not 0.0 <= self.recurrence_rate <= 1.0:
            raise ValueError("recurrence_rate must lie in [0, 1]")
        check_disjoint(self.classes_per_task)
        defaults = default_styles(self.n_classes)
        if self.class_shapes is None:
            self.class_shapes = [st.shape for st in defaults]
        if self.class_colors is None:
            self.class_colors = [st.color for st in defaults]
        self.class_shapes = [str(v) for v in self.class_shapes]
        self.class_colors = [tuple(float(v) for v in c) for c in self.class_colors]
        if len(self.class_shapes) != self.n_classes or len(self.class_colors) != self.n_classes:
            raise ValueError("class_shapes and class_colors need one entry per class")
        unknown = sorted(set(self.class_shapes) - set(SHAPES))
        if unknown:
            raise ValueError(f"unknown shapes {unknown}; expected some of {list(SHAPES)}")
        if any(len(c) != 3 or not all(0.0 <= v <= 1.0 for v in c) for c in self.class_colors):
            raise ValueError("class colors must be RGB triples in [0, 1]")
        if any(c < 0 or c >= self.n_classes for cs in self.classes_per_task for c in cs):
            raise ValueError("class ids must lie in 0..n_classes-1")

    def styles(self) -> list[ClassStyle]:
        return styles_for(self.class_shapes, self.class_colors)


def check_disjoint(class_sets) -> None:
    seen: set[int] = set()
    for t, cs in enumerate(class_sets):
        overlap = seen & set(cs)
        if overlap:
            raise StreamFormatError(f"task {t + 1} reuses classes {sorted(overlap)} from an earlier task")
        seen |= set(cs)


@dataclass
class SynthImage:
    id: str
    pixels_u8: np.ndarray  # (H, W, 3) uint8
    annotations: list[tuple[int, tuple[float, float, float, float]]]
    latent_objects: list[tuple[int, tuple[float, float, float, float]]]

    @property
    def pixels(self) -> np.ndarray:
        return self.pixels_u8 / 255.0

    def classes(self) -> list[int]:
        return [c for c, _ in self.annotations]

    def boxes(self) -> np.ndarray:
        return np.array([b for _, b in self.annotations], dtype=np.float64).reshape(-1, 4)

    def training_view(self) -> "SynthImage":
        """Copy with the latent object list reduced to the annotations."""
        return SynthImage(self.id, self.pixels_u8, list(self.annotations), list(self.annotations))

    def __eq__(self, other):
        return (
            isinstance(other, SynthImage)
            and self.id == other.id
            and np.array_equal(self.pixels_u8, other.pixels_u8)
            and self.annotations == other.annotations
            and self.latent_objects == other.latent_objects
        )


@dataclass
class Task:
    index: int  # 1-based
    classes: list[int]
    train: list[SynthImage] = field(default_factory=list)
    eval: list[SynthImage] = field(default_factory=list)


@dataclass
class TaskStream:
    spec: StreamSpec
    class_names: list[str]
    tasks: list[Task]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def classes_up_to(self, t: int) -> list[int]:
        return [c for task in self.tasks[:t] for c in task.classes]

    def __eq__(self, other):
        return (
            isinstance(other, TaskStream)
            and asdict(self.spec) == asdict(other.spec)
            and self.class_names == other.class_names
            and self.tasks == other.tasks
        )


# rendering --------------------------------------------------------------------


def _shape_mask(shape: str, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w * 2 - 1
    v = (yy + 0.5) / h * 2 - 1
    if shape == "rectangle":
        return np.ones((h, w), dtype=bool)
    if shape == "ellipse":
        return u**2 + v**2 <= 1.0
    if shape == "triangle":
        return np.abs(u) <= (v + 1) / 2
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if shape == "cross":
        return (np.abs(u) <= 0.34) | (np.abs(v) <= 0.34)
    if shape == "ring":
        r2 = u**2 + v**2
        return (r2 <= 1.0) & (r2 >= 0.4)
    if shape == "frame":
        return np.maximum(np.abs(u), np.abs(v)) >= 0.5
    if shape == "hourglass":
        return np.abs(u) <= np.abs(v) + 0.1
    raise ValueError(f"unknown shape {shape!r}")


def _place(rng, size: int, placed: list, size_range, retries: int = 200):
    lo, hi = size_range
    for _ in range(retries):
        w, h = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
        x0, y0 = int(rng.integers(0, size - w + 1)), int(rng.integers(0, size - h + 1))
        if all(x0 + w <= a or a + aw <= x0 or y0 + h <= b or b + bh <= y0 for a, b, aw, bh in placed):
            return x0, y0, w, h
    raise PlacementError(f"could not place object after {retries} attempts on a {size}px grid")


def render_image(rng, spec: StreamSpec, styles, classes: list[int]):
    """Draw ``classes`` on a noisy background; returns (uint8 pixels, objects)."""
    size = spec.image_size
    img = np.full((size, size, 3), rng.uniform(0.05, 0.2)) + rng.normal(0, spec.noise, (size, size, 3))
    placed, objects = [], []
    for c in classes:
        x0, y0, w, h = _place(rng, size, placed, spec.size_range)
        placed.append((x0, y0, w, h))
        mask = _shape_mask(styles[c].shape, w, h)
        shade = np.array(styles[c].color) * rng.uniform(0.85, 1.0)
        patch = img[y0 : y0 + h, x0 : x0 + w]
        patch[mask] = shade + rng.normal(0, spec.noise, (int(mask.sum()), 3))
        box = ((x0 + w / 2) / size, (y0 + h / 2) / size, w / size, h / size)
        objects.append((int(c), tuple(float(v) for v in box)))
    pixels = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return pixels, objects


def _make_image(spec, styles, t: int, split: str, i: int) -> SynthImage:
    rng = np.random.default_rng([spec.seed, t, 0 if split == "train" else 1, i])
    current = spec.classes_per_task[t]
    past = [c for cs in spec.classes_per_task[:t] for c in cs]
    lo, hi = spec.objects_per_image
    classes = [int(rng.choice(current)) for _ in range(int(rng.integers(lo, hi + 1)))]
    recurring = bool(past) and rng.uniform() < spec.recurrence_rate
    if recurring:
        classes.append(int(rng.choice(past)))
    pixels, objects = render_image(rng, spec, styles, classes)
    if split == "train":
        annotations = [o for o in objects if o[0] in current]
    else:
        annotations = list(objects)
    return SynthImage(f"t{t + 1}-{split}-{i:05d}", pixels, annotations, objects)


def generate_stream(spec: StreamSpec) -> TaskStream:
    styles = spec.styles()
    tasks = []
    for t, classes in enumerate(spec.classes_per_task):
        task = Task(t + 1, list(classes))
        task.train = [_make_image(spec, styles, t, "train", i) for i in range(spec.train_per_task)]
        task.eval = [_make_image(spec, styles, t, "eval", i) for i in range(spec.eval_per_task)]
        tasks.append(task)
    return TaskStream(spec, [s.name for s in styles], tasks)


# persistence ------------------------------------------------------------------


def _image_record(task: int, split: str, img: SynthImage) -> dict:
    return {
        "task": task,
        "split": split,
        "id": img.id,
        "shape": list(img.pixels_u8.shape),
        "pixels": base64.b64encode(img.pixels_u8.tobytes()).decode("ascii"),
        "annotations": [[c, list(b)] for c, b in img.annotations],
        "latent_objects": [[c, list(b)] for c, b in img.latent_objects],
    }


def save_stream(stream: TaskStream, path) -> None:
    """Write a JSON-lines stream file atomically (temp file then rename)."""
    path = Path(path)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "spec": asdict(stream.spec),
        "class_names": stream.class_names,
        "tasks": [{"index": t.index, "classes": t.classes} for t in stream.tasks],
    }
    lines = [json.dumps(header, sort_keys=True)]
    for task in stream.tasks:
        for split, images in (("train", task.train), ("eval", task.eval)):
            lines += [json.dumps(_image_record(task.index, split, im), sort_keys=True) for im in images]
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _objects(raw) -> list:
    return [(int(c), tuple(float(v) for v in b)) for c, b in raw]


def load_stream(path) -> TaskStream:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise StreamFormatError(f"{path}:1: empty stream file")

    def parse(lineno, text):
        try:
            return json.loads(text)
        except json.JSONDecodeError as err:
            raise StreamFormatError(f"{path}:{lineno}:{err.colno}: {err.msg}") from err

    header = parse(1, lines[0])
    if header.get("format") != FORMAT:
        raise StreamFormatError(f"{path}:1: not a stream file")
    if header.get("version") != VERSION:
        raise StreamFormatError(f"{path}:1: unsupported version {header.get('version')}")
    task_classes = [t["classes"] for t in header["tasks"]]
    check_disjoint(task_classes)
    spec_fields = dict(header["spec"])
    spec_fields["classes_per_task"] = task_classes
    try:
        spec = StreamSpec(**spec_fields)
    except (TypeError, ValueError) as err:
        raise StreamFormatError(f"{path}:1: invalid spec: {err}") from err
    tasks = [Task(t["index"], list(t["classes"])) for t in header["tasks"]]
    by_index = {t.index: t for t in tasks}
    for lineno, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        rec = parse(lineno, text)
        try:
            raw = base64.b64decode(rec["pixels"])
            pixels = np.frombuffer(raw, dtype=np.uint8).reshape(rec["shape"]).copy()
            img = SynthImage(rec["id"], pixels, _objects(rec["annotations"]), _objects(rec["latent_objects"]))
            task = by_index[rec["task"]]
        except (KeyError, ValueError, TypeError) as err:
            raise StreamFormatError(f"{path}:{lineno}: bad image record: {err}") from err
        if rec["split"] == "train":
            allowed = set(task.classes)
            task.train.append(img)
        elif rec["split"] == "eval":
            allowed = {c for t in tasks if t.index <= task.index for c in t.classes}
            task.eval.append(img)
        else:
            raise StreamFormatError(f"{path}:{lineno}: unknown split {rec['split']!r}")
        if any(c not in allowed for c in img.classes()):
            raise StreamFormatError(f"{path}:{lineno}: annotation outside the task's class set")
    return TaskStream(spec, list(header["class_names"]), tasks)
