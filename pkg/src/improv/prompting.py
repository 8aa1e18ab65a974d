"""Visual grid prompts, textual task prompts, and masked-cell inpainting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .codebook import Codebook
from .textenc import TextPrompt, default_encoder

CANVAS = 64
PATCH = 8
SOURCE_CELL = 32
MAX_EXAMPLES = 7

TEXT_LEVELS = ("none", "task", "task+location", "task+location+class")

LOCATION = "left/right"

# task -> (task-only phrase, phrase with location, class suffix format)
TEMPLATES: dict[str, tuple[str, str, str]] = {
    "segmentation": (
        "Image Segmentation",
        "Left - input image, right: Black and white foreground background segmentation",
        " of a {cls}",
    ),
    "colorization": (
        "Image Colorization",
        "Colorization results: Left - input image, Right - Colorized image",
        " of {cls}",
    ),
    "inversion": (
        "Image Inversion",
        "Left - input image, right: Inverted colors negative image",
        " of a {cls}",
    ),
    "outline": (
        "Edge Detection",
        "Left - input image, right: White outline edges on black",
        " of a {cls}",
    ),
    "identity": (
        "Image Reconstruction",
        "Left - input image, right: Identical copy of the input image",
        " of a {cls}",
    ),
    "threshold": (
        "Image Thresholding",
        "Left - input image, right: Black and white brightness threshold",
        " of a {cls}",
    ),
}


class TemplateError(ValueError):
    """No template exists for the requested task."""


class CapacityError(ValueError):
    """Too many examples for the largest grid."""


@dataclass(frozen=True)
class TaskDescriptor:
    task: Optional[str] = None
    location: Optional[str] = None
    class_name: Optional[str] = None

    @classmethod
    def for_level(cls, task: str, level: str, class_name: Optional[str] = None) -> "TaskDescriptor":
        if level not in TEXT_LEVELS:
            raise ValueError(f"unknown text level {level!r}")
        if level == "none":
            return cls()
        if level == "task":
            return cls(task)
        if level == "task+location":
            return cls(task, LOCATION)
        return cls(task, LOCATION, class_name)


def render_text(d: TaskDescriptor) -> str:
    if d.task is None:
        return ""
    if d.task not in TEMPLATES:
        raise TemplateError(f"no template for task {d.task!r}")
    task_only, located, suffix = TEMPLATES[d.task]
    if d.location is None:
        return task_only
    text = located
    if d.class_name:
        text += suffix.format(cls=d.class_name)
    return text


# ---------------------------------------------------------------- grids


def grid_for(n_examples: int) -> tuple[int, int]:
    if n_examples < 0 or n_examples > MAX_EXAMPLES:
        raise CapacityError(f"{n_examples} examples do not fit (max {MAX_EXAMPLES})")
    if n_examples == 0:
        return (1, 2)
    if n_examples == 1:
        return (2, 2)
    if n_examples == 2:
        return (3, 3)
    return (4, 4)


def cell_side(grid: tuple[int, int], canvas: int = CANVAS, patch: int = PATCH) -> int:
    return (canvas // max(grid)) // patch * patch


def pair_slots(grid: tuple[int, int], order: str = "row") -> list[tuple[int, int]]:
    """(row, col) of the input cell of every pair slot; the output sits to its right."""
    rows, cols = grid
    per_row = cols // 2
    slots = [(r, 2 * k) for r in range(rows) for k in range(per_row)]
    if order == "column":
        slots = [(r, 2 * k) for k in range(per_row) for r in range(rows)]
    elif order != "row":
        raise ValueError(f"order must be 'row' or 'column', got {order!r}")
    return slots


def grid_origin(grid, canvas: int = CANVAS, patch: int = PATCH) -> tuple[int, int]:
    """Pixel (y, x) of the grid's top-left corner; grids hug the bottom-left."""
    c = cell_side(grid, canvas, patch)
    return canvas - grid[0] * c, 0


def resize_cell(img: np.ndarray, side: int) -> np.ndarray:
    """Box-downsample a square image by an integer factor."""
    src = img.shape[0]
    if src == side:
        return np.asarray(img, dtype=np.float64)
    if src % side:
        raise ValueError(f"cannot box-resize {src} to {side}")
    f = src // side
    return np.asarray(img, dtype=np.float64).reshape(side, f, side, f, 3).mean(axis=(1, 3))


def compose_pairs(pairs: Sequence[tuple[np.ndarray, np.ndarray]], grid, canvas: int = CANVAS,
                  order: str = "row") -> np.ndarray:
    """Paint (input, output) pairs into slot order on a white canvas."""
    img = np.ones((canvas, canvas, 3))
    c = cell_side(grid, canvas)
    oy, ox = grid_origin(grid, canvas)
    slots = pair_slots(grid, order)
    if len(pairs) > len(slots):
        raise CapacityError(f"{len(pairs)} pairs exceed {len(slots)} slots of grid {grid}")
    for (x, y), (r, col) in zip(pairs, slots):
        for k, cell in enumerate((x, y)):
            if cell is None:
                continue
            y0, x0 = oy + r * c, ox + (col + k) * c
            img[y0:y0 + c, x0:x0 + c] = resize_cell(cell, c)
    return img


def filler_tokens(grid, n_pairs: int, canvas: int = CANVAS, patch: int = PATCH,
                  order: str = "row") -> np.ndarray:
    """Token-level mask of the canvas not covered by the first ``n_pairs`` slots."""
    c = cell_side(grid, canvas, patch)
    oy, ox = grid_origin(grid, canvas, patch)
    g, t = canvas // patch, c // patch
    discard = np.ones((g, g), dtype=bool)
    for r, col in pair_slots(grid, order)[:n_pairs]:
        ty, tx = (oy + r * c) // patch, (ox + col * c) // patch
        discard[ty:ty + t, tx:tx + 2 * t] = False
    return discard


@dataclass
class PromptBundle:
    image: np.ndarray  # (64, 64, 3)
    mask: np.ndarray  # (8, 8) bool, True over the answer cell
    discard: np.ndarray  # (8, 8) bool, white filler excluded from the model
    grid_shape: tuple[int, int]
    cell_px: int
    answer_box: tuple[int, int]  # pixel (y, x) of the answer cell
    cell_boxes: list = field(default_factory=list)  # (role, y, x) of used cells
    text: Optional[TextPrompt] = None
    text_string: str = ""

    def with_text(self, text: str) -> "PromptBundle":
        return PromptBundle(self.image, self.mask, self.discard, self.grid_shape, self.cell_px,
                            self.answer_box, list(self.cell_boxes), default_encoder().tokenize(text), text)

    def prompt(self) -> TextPrompt:
        return self.text if self.text is not None else default_encoder().tokenize("")

    def cell(self, y: int, x: int, image: Optional[np.ndarray] = None) -> np.ndarray:
        src = self.image if image is None else image
        return src[y:y + self.cell_px, x:x + self.cell_px]

    def answer(self, image: Optional[np.ndarray] = None) -> np.ndarray:
        return self.cell(*self.answer_box, image=image)


def arrange_grid(examples: Sequence[tuple[np.ndarray, np.ndarray]], query: np.ndarray,
                 grid: Optional[tuple[int, int]] = None, order: str = "row",
                 answer: Optional[np.ndarray] = None, canvas: int = CANVAS,
                 patch: int = PATCH) -> PromptBundle:
    """Lay out example pairs then the query pair; mask the query's answer cell.

    Without ``grid`` the layout follows the number of examples (0 -> 1x2,
    1 -> 2x2, 2 -> 3x3, 3..7 -> 4x4).  ``answer``, if given, is painted into
    the answer cell (used to build complete training grids).
    """
    n = len(examples)
    if n > MAX_EXAMPLES:
        raise CapacityError(f"{n} examples exceed the maximum of {MAX_EXAMPLES}")
    grid = grid or grid_for(n)
    slots = pair_slots(grid, order)
    if n + 1 > len(slots):
        raise CapacityError(f"grid {grid} holds {len(slots) - 1} examples, got {n}")
    c = cell_side(grid, canvas, patch)
    if c < patch:
        raise CapacityError(f"grid {grid} leaves cells smaller than one patch")
    pairs = list(examples) + [(query, answer)]
    image = compose_pairs(pairs, grid, canvas, order)
    oy, ox = grid_origin(grid, canvas, patch)
    g = canvas // patch
    t = c // patch
    discard = filler_tokens(grid, n + 1, canvas, patch, order)
    mask = np.zeros((g, g), dtype=bool)
    boxes = []
    for i, (r, col) in enumerate(slots[: n + 1]):
        for k, role in enumerate(("input", "output")):
            y0, x0 = oy + r * c, ox + (col + k) * c
            ty, tx = y0 // patch, x0 // patch
            if i == n and k == 1:
                mask[ty:ty + t, tx:tx + t] = True
                role = "answer"
            elif i == n:
                role = "query"
            boxes.append((role, y0, x0))
    answer_box = next((y, x) for role, y, x in boxes if role == "answer")
    return PromptBundle(image, mask, discard, tuple(grid), c, answer_box, boxes)


def expected_answer(bundle: PromptBundle, output: np.ndarray) -> np.ndarray:
    """Ground-truth answer cell at the bundle's cell resolution."""
    return resize_cell(output, bundle.cell_px)


# ---------------------------------------------------------------- inpainting


def inpaint_batch(model, bundles: Sequence[PromptBundle], codebook: Optional[Codebook] = None):
    """Complete every bundle's masked cell; returns (images, predicted token arrays)."""
    from .model import predict_tokens

    codebook = codebook or Codebook(patch_side=model.config.patch_side,
                                    levels=round(model.config.vocab_size ** (1 / 3)))
    images = np.stack([b.image for b in bundles])
    masks = np.stack([b.mask for b in bundles])
    discards = np.stack([b.discard for b in bundles])
    ids = np.stack([b.prompt().token_ids for b in bundles])
    logits = model.forward_batch(images, masks, ids, discards)
    tokens = predict_tokens(logits)
    out = []
    p = codebook.patch_side
    for b, tok in zip(bundles, tokens):
        img = b.image.copy()
        grid_tokens = np.zeros(b.mask.shape, dtype=np.int64)
        grid_tokens[b.mask] = tok[: int(b.mask.sum())]
        decoded = codebook.decode(grid_tokens)
        ys, xs = np.nonzero(b.mask)
        for ty, tx in zip(ys, xs):
            img[ty * p:(ty + 1) * p, tx * p:(tx + 1) * p] = decoded[ty * p:(ty + 1) * p, tx * p:(tx + 1) * p]
        out.append(img)
    return out, tokens


def inpaint(model, bundle: PromptBundle, codebook: Optional[Codebook] = None) -> np.ndarray:
    images, _ = inpaint_batch(model, [bundle], codebook)
    return images[0]


# ---------------------------------------------------------------- serialisation


def mask_to_rle(mask: np.ndarray) -> str:
    """``rows cols`` then alternating run lengths, starting with a False run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    runs = []
    current, count = False, 0
    for v in flat:
        if v == current:
            count += 1
        else:
            runs.append(count)
            current, count = v, 1
    runs.append(count)
    return f"{mask.shape[0]} {mask.shape[1]}\n{' '.join(map(str, runs))}\n"


def rle_to_mask(text: str) -> np.ndarray:
    lines = text.split("\n")
    rows, cols = map(int, lines[0].split())
    runs = list(map(int, lines[1].split()))
    flat = np.zeros(sum(runs), dtype=bool)
    pos, value = 0, False
    for r in runs:
        flat[pos:pos + r] = value
        pos += r
        value = not value
    if flat.size != rows * cols:
        raise ValueError(f"run lengths cover {flat.size} cells, expected {rows * cols}")
    return flat.reshape(rows, cols)


def save_bundle(bundle: PromptBundle, directory) -> None:
    from .ppm import write_ppm

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ppm(d / "prompt.ppm", bundle.image)
    (d / "mask.rle").write_text(mask_to_rle(bundle.mask))
    (d / "discard.rle").write_text(mask_to_rle(bundle.discard))
    (d / "text.txt").write_text(bundle.text_string, encoding="utf-8")
    meta = {"grid_shape": list(bundle.grid_shape), "cell_px": bundle.cell_px,
            "answer_box": list(bundle.answer_box), "cell_boxes": [list(b) for b in bundle.cell_boxes]}
    (d / "layout.json").write_text(json.dumps(meta, indent=1))


def load_bundle(directory) -> PromptBundle:
    from .ppm import read_image

    d = Path(directory)
    meta = json.loads((d / "layout.json").read_text())
    bundle = PromptBundle(
        read_image(d / "prompt.ppm"),
        rle_to_mask((d / "mask.rle").read_text()),
        rle_to_mask((d / "discard.rle").read_text()),
        tuple(meta["grid_shape"]), meta["cell_px"], tuple(meta["answer_box"]),
        [tuple(b) for b in meta["cell_boxes"]],
    )
    return bundle.with_text((d / "text.txt").read_text(encoding="utf-8"))
