"""Procedural shapes corpus: task pairs, captioned training records, retrieval.

A *scene* is one flat-coloured shape (circle, square or triangle) on a
low-contrast grey texture.  Each task maps a scene to an output image; all
generation is a pure function of integer seeds.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from . import prompting
from .prompting import TEXT_LEVELS, TaskDescriptor, render_text

CELL = 32
CANVAS = 64
PATCH = 8

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.9, 0.15, 0.15),
    "green": (0.15, 0.85, 0.2),
    "blue": (0.2, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.15),
    "cyan": (0.1, 0.85, 0.9),
    "magenta": (0.9, 0.2, 0.85),
}
SHAPES = ("circle", "square", "triangle")
# shape extent in pixels of a 32 px cell; large enough that 16 px cells keep solid tokens
SHAPE_SIZE = (16.0, 30.0)
CLASSES = tuple(f"{c} {s}" for c in COLORS for s in SHAPES)

TASKS = ("segmentation", "colorization", "inversion", "outline", "identity", "threshold")
TRAIN_TASKS = ("segmentation", "colorization", "inversion", "outline", "identity")
HELD_OUT_TASKS = ("threshold",)
# image-editing style tasks used for the supervised "structured" corpus
STRUCTURED_TASKS = ("colorization", "inversion", "identity")

LUMA = np.array([0.299, 0.587, 0.114])

# Seed partition: training pairs derive from seeds below EVAL_SEED_BASE,
# evaluation pools draw from [EVAL_SEED_BASE, ...).
EVAL_SEED_BASE = 1 << 40


class TaskError(ValueError):
    """Unknown task name."""


class RetrievalError(LookupError):
    """No pool entry is eligible for the requested strategy."""


# ---------------------------------------------------------------- rendering


@dataclass
class Scene:
    image: np.ndarray  # (S, S, 3)
    shape_mask: np.ndarray  # (S, S) bool
    class_name: str


def luminance(img: np.ndarray) -> np.ndarray:
    return np.asarray(img)[..., :3] @ LUMA


@lru_cache(maxsize=None)
def _coords(side: int) -> np.ndarray:
    grid = np.mgrid[0:side, 0:side].astype(np.float64)
    grid.flags.writeable = False
    return grid


def rasterize(shape: str, cx: float, cy: float, size: float, side: int) -> np.ndarray:
    """Boolean mask of pixels whose centres fall inside the shape."""
    ys, xs = _coords(side) + 0.5
    half = size / 2.0
    if shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= half * half
    if shape == "square":
        return (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    if shape == "triangle":
        # upright isosceles: apex at top, base at bottom
        top, bottom = cy - half, cy + half
        t = (ys - top) / size
        return (ys >= top) & (ys <= bottom) & (np.abs(xs - cx) <= half * t)
    raise ValueError(f"unknown shape {shape!r}")


def texture(rng: np.random.Generator, side: int) -> np.ndarray:
    base = rng.uniform(0.16, 0.24)
    theta = rng.uniform(0, np.pi)
    period = rng.choice([2.0, 4.0])
    phase = rng.uniform(0, 2 * np.pi)
    ys, xs = _coords(side)
    stripes = 0.04 * np.sin(2 * np.pi * (xs * np.cos(theta) + ys * np.sin(theta)) / period + phase)
    noise = rng.uniform(-0.04, 0.04, size=(side, side))
    g = np.clip(base + stripes + noise, 0.0, 1.0)
    return np.repeat(g[:, :, None], 3, axis=2)


def render_scene(class_name: str, rng: np.random.Generator, side: int = CELL,
                 size_range: tuple[float, float] = SHAPE_SIZE) -> Scene:
    color, shape = class_name.split()
    size = rng.uniform(*size_range) * side / CELL
    half = size / 2
    cx = rng.uniform(half, side - half)
    cy = rng.uniform(half, side - half)
    return paint_scene(class_name, rasterize(shape, cx, cy, size, side), texture(rng, side))


def paint_scene(class_name: str, shape_mask: np.ndarray, background: np.ndarray) -> Scene:
    color = np.array(COLORS[class_name.split()[0]])
    img = np.where(shape_mask[:, :, None], color, background)
    return Scene(img, shape_mask, class_name)


def outline_of(mask: np.ndarray) -> np.ndarray:
    """Shape pixels with at least one 4-neighbour outside the shape (or the frame)."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def _binary_image(mask: np.ndarray) -> np.ndarray:
    return np.repeat(mask[:, :, None].astype(np.float64), 3, axis=2)


def apply_task(task: str, scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """(input, output) images of ``task`` applied to ``scene``."""
    img = scene.image
    if task == "segmentation":
        return img, _binary_image(scene.shape_mask)
    if task == "colorization":
        gray = np.repeat(luminance(img)[:, :, None], 3, axis=2)
        return gray, img
    if task == "inversion":
        return img, 1.0 - img
    if task == "outline":
        return img, _binary_image(outline_of(scene.shape_mask))
    if task == "identity":
        return img, img.copy()
    if task == "threshold":
        return img, _binary_image(luminance(img) > 0.5)
    raise TaskError(f"unknown task {task!r}")


# ---------------------------------------------------------------- task pairs


@dataclass
class TaskSample:
    input: np.ndarray
    output: np.ndarray
    task: str
    class_name: str
    seed: int
    shape_mask: np.ndarray = field(repr=False, default=None)

    def features(self) -> np.ndarray:
        return nn_features(self.input)


def gen_task_pair(task: str, class_name: Optional[str], seed: int) -> TaskSample:
    if task not in TASKS:
        raise TaskError(f"unknown task {task!r}")
    rng = np.random.default_rng(seed)
    if class_name is None:
        class_name = CLASSES[rng.integers(len(CLASSES))]
    scene = render_scene(class_name, rng)
    x, y = apply_task(task, scene)
    return TaskSample(x, y, task, class_name, int(seed), scene.shape_mask)


def nn_features(img: np.ndarray) -> np.ndarray:
    """Mean colour of each image quadrant, concatenated (12 values)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[0] // 2, img.shape[1] // 2
    quads = [img[:h, :w], img[:h, w:], img[h:, :w], img[h:, w:]]
    return np.concatenate([q.reshape(-1, 3).mean(axis=0) for q in quads])


def make_pool(task: str, n: int, seed: int, classes: Sequence[str] = CLASSES) -> list[TaskSample]:
    """Evaluation pool drawn from the held-out seed range, classes balanced."""
    rng = np.random.default_rng(seed)
    seeds = EVAL_SEED_BASE + rng.choice(1 << 30, size=n, replace=False)
    return [gen_task_pair(task, classes[i % len(classes)], int(s)) for i, s in enumerate(seeds)]


RETRIEVAL_STRATEGIES = ("random_different_class", "random_same_class", "nearest_neighbor")


def retrieve_example(pool: Sequence[TaskSample], query: TaskSample, strategy: str,
                     rng: Optional[np.random.Generator] = None) -> TaskSample:
    if not pool:
        raise RetrievalError("empty pool")
    if strategy == "random_different_class":
        eligible = [s for s in pool if s.class_name != query.class_name]
    elif strategy in ("random_same_class", "nearest_neighbor"):
        eligible = [s for s in pool if s.class_name == query.class_name]
    else:
        raise ValueError(f"unknown retrieval strategy {strategy!r}")
    if not eligible:
        raise RetrievalError(f"no pool entry eligible for {strategy} (class {query.class_name!r})")
    if strategy == "nearest_neighbor":
        feats = np.stack([s.features() for s in eligible])
        d = ((feats - query.features()) ** 2).sum(axis=1)
        return eligible[int(np.argmin(d))]
    if rng is None:
        raise ValueError("random strategies need an rng")
    return eligible[int(rng.integers(len(eligible)))]


def retrieve_examples(pool, query, strategy, k, rng) -> list[TaskSample]:
    """``k`` distinct examples (never the query itself), best-first for nearest neighbour."""
    candidates = [s for s in pool if s.seed != query.seed]
    out = []
    for _ in range(k):
        pick = retrieve_example(candidates, query, strategy, rng)
        out.append(pick)
        candidates = [s for s in candidates if s.seed != pick.seed]
    return out


# ---------------------------------------------------------------- training records


ORIGINS = ("figure", "plain", "structured")


@dataclass
class TrainRecord:
    image: np.ndarray  # (64, 64, 3)
    caption: str
    origin: str
    seed: int
    task: Optional[str] = None
    discard: Optional[np.ndarray] = None  # (8, 8) white filler tokens, excluded like prompt filler


@dataclass
class CorpusMix:
    """Probabilities of each record origin, plus figure augmentation settings."""

    figure: float = 0.5
    plain: float = 0.5
    structured: float = 0.0
    flip_prob: float = 0.5
    crop_margin: int = PATCH
    small_grid_prob: float = 0.25
    pair_grid_prob: float = 0.0  # single-pair 1x2 figures, the zero-shot layout

    def __post_init__(self):
        total = self.figure + self.plain + self.structured
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"origin probabilities sum to {total}, not 1")
        if self.small_grid_prob + self.pair_grid_prob > 1.0:
            raise ValueError("small_grid_prob + pair_grid_prob exceeds 1")
        if self.crop_margin % PATCH:
            raise ValueError("crop_margin must be a multiple of the patch side")

    @classmethod
    def named(cls, name: str, **kw) -> "CorpusMix":
        presets = {
            "mixed": dict(figure=0.5, plain=0.5, structured=0.0),
            "mixed+structured": dict(figure=0.5, plain=0.25, structured=0.25),
            "structured": dict(figure=0.0, plain=0.0, structured=1.0),
        }
        if name not in presets:
            raise ValueError(f"unknown corpus mix {name!r}; choose from {sorted(presets)}")
        return cls(**presets[name], **kw)


def _pair_seed(record_seed: int, i: int) -> int:
    return record_seed * 16 + i


def caption_for(task: str, level: str, class_name: str) -> str:
    return render_text(TaskDescriptor.for_level(task, level, class_name))


def _figure_pairs(rng, record_seed, task, n_pairs) -> list[TaskSample]:
    shared = rng.random() < 0.5
    last_class = CLASSES[rng.integers(len(CLASSES))]
    pairs = []
    for i in range(n_pairs):
        cls = last_class if (shared or i == n_pairs - 1) else CLASSES[rng.integers(len(CLASSES))]
        pairs.append(gen_task_pair(task, cls, _pair_seed(record_seed, i)))
    return pairs


def make_figure_record(rng: np.random.Generator, record_seed: int, mix: CorpusMix) -> TrainRecord:
    task = TRAIN_TASKS[rng.integers(len(TRAIN_TASKS))]
    u = rng.random()
    if u < mix.small_grid_prob:
        # 2..8 pairs: partly filled grids look like 4x4 prompts with few examples
        grid, n_pairs = (4, 4), int(rng.integers(2, 9))
    elif u < mix.small_grid_prob + mix.pair_grid_prob:
        grid, n_pairs = (1, 2), 1
    else:
        grid, n_pairs = (2, 2), 2
    pairs = _figure_pairs(rng, record_seed, task, n_pairs)
    image = prompting.compose_pairs([(p.input, p.output) for p in pairs], grid, CANVAS)
    level = TEXT_LEVELS[1 + rng.integers(len(TEXT_LEVELS) - 1)]
    caption = caption_for(task, level, pairs[-1].class_name)
    discard = prompting.filler_tokens(grid, n_pairs)
    m = mix.crop_margin
    if m:
        padded = np.pad(image, ((m, m), (m, m), (0, 0)), constant_values=1.0)
        oy, ox = PATCH * rng.integers(0, 2 * m // PATCH + 1, size=2)
        image = padded[oy:oy + CANVAS, ox:ox + CANVAS]
        t = m // PATCH
        g = CANVAS // PATCH
        discard = np.pad(discard, t, constant_values=False)[oy // PATCH:oy // PATCH + g, ox // PATCH:ox // PATCH + g]
    if rng.random() < mix.flip_prob:
        image = image[:, ::-1]
        discard = discard[:, ::-1]
    return TrainRecord(np.ascontiguousarray(image), caption, "figure", record_seed, task,
                       np.ascontiguousarray(discard) if discard.any() else None)


def make_plain_record(rng: np.random.Generator, record_seed: int) -> TrainRecord:
    class_name = CLASSES[rng.integers(len(CLASSES))]
    scene = render_scene(class_name, np.random.default_rng(_pair_seed(record_seed, 0)),
                         side=CANVAS, size_range=(12.0, 26.0))
    return TrainRecord(scene.image, f"a {class_name}", "plain", record_seed)


def make_structured_record(rng: np.random.Generator, record_seed: int,
                           tasks: Sequence[str] = STRUCTURED_TASKS) -> TrainRecord:
    """Uncropped 1x2 or 2x2 grid of one task with its full caption."""
    task = tasks[rng.integers(len(tasks))]
    n_pairs = 1 + int(rng.integers(2))
    pairs = [gen_task_pair(task, None, _pair_seed(record_seed, i)) for i in range(n_pairs)]
    examples = [(p.input, p.output) for p in pairs[:-1]]
    bundle = prompting.arrange_grid(examples, pairs[-1].input, answer=pairs[-1].output)
    level = TEXT_LEVELS[1 + rng.integers(len(TEXT_LEVELS) - 1)]
    caption = caption_for(task, level, pairs[-1].class_name)
    return TrainRecord(bundle.image, caption, "structured", record_seed, task,
                       bundle.discard.copy() if bundle.discard.any() else None)


def make_train_record(rng: np.random.Generator, mix: Optional[CorpusMix] = None) -> TrainRecord:
    mix = mix or CorpusMix()
    record_seed = int(rng.integers(1 << 32))
    u = rng.random()
    if u < mix.figure:
        return make_figure_record(rng, record_seed, mix)
    if u < mix.figure + mix.plain:
        return make_plain_record(rng, record_seed)
    return make_structured_record(rng, record_seed)


def image_hash(img: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(img, dtype=np.float64).tobytes()).hexdigest()


def training_seed_range() -> tuple[int, int]:
    return 0, _pair_seed((1 << 32) - 1, 15) + 1
