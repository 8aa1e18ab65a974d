"""Metrics and prompt-ablation harness for trained inpainting models."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .codebook import Codebook
from .numerics import DimensionError
from .prompting import (TEXT_LEVELS, PromptBundle, TaskDescriptor, arrange_grid, expected_answer,
                        inpaint_batch, render_text)
from .taskgen import (LUMA, RETRIEVAL_STRATEGIES, TaskSample, make_pool, retrieve_examples)

THRESHOLD = 0.5
SCORE_SIDE = 32
BINARY_TASKS = ("segmentation", "outline", "threshold")

VISUAL_STRATEGIES = ("none",) + RETRIEVAL_STRATEGIES
# visual prompt quality, weakest first (used by the monotonicity audit)
VISUAL_ORDER = VISUAL_STRATEGIES
ABLATION_TEXT_LEVELS = ("none", "task+location", "task+location+class")


# ---------------------------------------------------------------- metrics


def binarize(img: np.ndarray) -> np.ndarray:
    """Foreground mask: per-pixel luminance above 0.5."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected HxWx3 image, got {img.shape}")
    return img @ LUMA > THRESHOLD


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def miou(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> float:
    """Mean over queries of foreground IoU; two empty masks score 1."""
    if len(preds) != len(gts):
        raise DimensionError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if not preds:
        raise ValueError("miou of an empty query list")
    # fsum: correctly rounded, so the result does not depend on query order
    return math.fsum(iou(p, g) for p, g in zip(preds, gts)) / len(preds)


def mse(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    return math.fsum(((pred - gt) ** 2).ravel()) / pred.size


def token_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"token shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.mean(pred == gt))


def upsample(cell: np.ndarray, side: int) -> np.ndarray:
    f = side // cell.shape[0]
    if f * cell.shape[0] != side:
        raise DimensionError(f"cannot upsample {cell.shape[0]} to {side}")
    return np.repeat(np.repeat(cell, f, axis=0), f, axis=1)


def metric_name(task: str) -> str:
    return "miou" if task in BINARY_TASKS else "mse"


# ---------------------------------------------------------------- queries


@dataclass
class QueryResult:
    task: str
    seed: int
    query_seed: int
    example_seeds: list
    text: str
    grid: tuple
    score: float  # IoU for binary tasks, MSE otherwise
    token_acc: float
    pred_cell: np.ndarray = field(repr=False, default=None)
    gt_cell: np.ndarray = field(repr=False, default=None)

    def record(self) -> dict:
        return {"task": self.task, "seed": self.seed, "query_seed": self.query_seed,
                "example_seeds": self.example_seeds, "text": self.text, "grid": list(self.grid),
                "score": self.score, "token_acc": self.token_acc}


def build_prompt(query: TaskSample, examples: Sequence[TaskSample], text: str = "",
                 grid=None) -> PromptBundle:
    bundle = arrange_grid([(e.input, e.output) for e in examples], query.input, grid=grid)
    return bundle.with_text(text)


def score_prompts(model, bundles: Sequence[PromptBundle], targets: Sequence[np.ndarray], task: str,
                  batch: int = 64, codebook: Optional[Codebook] = None):
    """Inpaint and score; returns (scores, token accuracies, predicted cells, gt cells).

    ``targets`` are full-resolution (32 px) output images.  Binary tasks are
    scored by IoU at 32 px after nearest upsampling of the predicted cell,
    the rest by MSE at the cell resolution.
    """
    cb = codebook or Codebook(levels=round(model.config.vocab_size ** (1 / 3)),
                              patch_side=model.config.patch_side)
    scores, accs, preds, gts = [], [], [], []
    with nx.no_grad():
        for lo in range(0, len(bundles), batch):
            chunk = bundles[lo:lo + batch]
            images, tokens = inpaint_batch(model, chunk, cb)
            for b, img, tok, target in zip(chunk, images, tokens, targets[lo:lo + batch]):
                pred = b.answer(img)
                gt = expected_answer(b, target)
                accs.append(token_accuracy(tok, cb.encode(gt).ravel()))
                if task in BINARY_TASKS:
                    side = max(SCORE_SIDE, target.shape[0])
                    scores.append(iou(binarize(upsample(pred, side)), binarize(upsample(target, side))))
                else:
                    scores.append(mse(pred, gt))
                preds.append(pred)
                gts.append(gt)
    return scores, accs, preds, gts


def evaluate(model, task: str, strategy: str, text_level: str, seeds: Iterable[int],
             n_queries: int = 40, pool_size: int = 180, n_examples: Optional[int] = None,
             grid=None, batch: int = 64, text_task: Optional[str] = None) -> list[QueryResult]:
    """Score ``n_queries`` per seed for one (visual strategy, text level) cell.

    Each seed draws its own pool from the held-out seed range; queries are
    the first ``n_queries`` pool entries and examples are retrieved from the
    rest of the pool.
    """
    if strategy not in VISUAL_STRATEGIES:
        raise ValueError(f"unknown visual strategy {strategy!r}")
    k = 0 if strategy == "none" else (1 if n_examples is None else n_examples)
    if strategy == "none" and n_examples:
        raise ValueError("strategy 'none' takes no examples")
    results = []
    for seed in seeds:
        pool = make_pool(task, pool_size + n_queries, seed=seed)
        queries, support = pool[:n_queries], pool[n_queries:]
        rng = np.random.default_rng([seed, 1])
        bundles, picks = [], []
        for q in queries:
            ex = retrieve_examples(support, q, strategy, k, rng) if k else []
            text = render_text(TaskDescriptor.for_level(text_task or task, text_level, q.class_name))
            bundles.append(build_prompt(q, ex, text, grid))
            picks.append(ex)
        scores, accs, preds, gts = score_prompts(model, bundles, [q.output for q in queries], task, batch)
        for q, ex, b, s, a, p, g in zip(queries, picks, bundles, scores, accs, preds, gts):
            results.append(QueryResult(task, int(seed), q.seed, [e.seed for e in ex], b.text_string,
                                       b.grid_shape, s, a, p, g))
    return results


def summarize(results: Sequence[QueryResult], field_name: str = "score") -> tuple[float, float, int]:
    """Mean and std over seeds of the per-seed mean; n = total queries."""
    by_seed: dict[int, list] = {}
    for r in results:
        by_seed.setdefault(r.seed, []).append(getattr(r, field_name))
    per_seed = [float(np.mean(v)) for v in by_seed.values()]
    if not per_seed:
        return math.nan, math.nan, 0
    return float(np.mean(per_seed)), float(np.std(per_seed)), len(results)


# ---------------------------------------------------------------- ablation


@dataclass
class AblationCell:
    visual_strategy: str
    text_level: str
    metric: str
    mean: float
    std: float
    n: int
    seeds: tuple = ()

    def row(self) -> list:
        return [self.visual_strategy, self.text_level, self.metric, repr(self.mean), repr(self.std), self.n]


def run_ablation(model, task: str = "segmentation", seeds: Sequence[int] = (0, 1, 2, 3, 4),
                 n_queries: int = 40, strategies: Sequence[str] = VISUAL_STRATEGIES,
                 text_levels: Sequence[str] = ABLATION_TEXT_LEVELS, out_dir=None,
                 pool_size: int = 180):
    """Fill every (visual strategy, text level) cell; returns (cells, per-query results).

    The (none, none) cell has no prompt at all and is reported with n=0.
    """
    if len(seeds) < 5:
        raise ValueError("each ablation cell aggregates at least 5 seeds")
    cells, per_query = [], {}
    metric = metric_name(task)
    for strategy in strategies:
        for level in text_levels:
            if strategy == "none" and level == "none":
                cells.append(AblationCell(strategy, level, metric, math.nan, math.nan, 0, tuple(seeds)))
                continue
            res = evaluate(model, task, strategy, level, seeds, n_queries, pool_size)
            mean, std, n = summarize(res)
            cells.append(AblationCell(strategy, level, metric, mean, std, n, tuple(seeds)))
            per_query[(strategy, level)] = res
    if out_dir is not None:
        write_ablation(cells, per_query, out_dir)
    return cells, per_query


def write_ablation(cells: Sequence[AblationCell], per_query: dict, out_dir) -> None:
    from .ppm import write_ppm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["visual_strategy", "text_level", "metric", "mean", "std", "n"])
        for c in cells:
            w.writerow(c.row())
    with open(out / "queries.jsonl", "w") as fh:
        for (strategy, level), res in per_query.items():
            for r in res:
                fh.write(json.dumps({"visual_strategy": strategy, "text_level": level, **r.record()}) + "\n")
    write_ppm(out / "comparison.ppm", comparison_figure(per_query))
    audit = monotonicity_audit(cells)
    (out / "audit.json").write_text(json.dumps(audit, indent=1))


def comparison_figure(per_query: dict, n_show: int = 6, side: int = 32, gap: int = 2) -> np.ndarray:
    """Mosaic: first row ground truth, then one row per ablation cell of predicted answers."""
    keys = list(per_query)
    if not keys:
        return np.ones((side, side, 3))
    first = per_query[keys[0]][:n_show]
    rows = [[upsample(r.gt_cell, side) if r.gt_cell.shape[0] != side else r.gt_cell for r in first]]
    for k in keys:
        rows.append([upsample(r.pred_cell, side) for r in per_query[k][:n_show]])
    h = len(rows) * (side + gap) + gap
    w = n_show * (side + gap) + gap
    canvas = np.ones((h, w, 3))
    for i, row in enumerate(rows):
        for j, cell in enumerate(row):
            y, x = gap + i * (side + gap), gap + j * (side + gap)
            canvas[y:y + side, x:x + side] = cell
    return canvas


def monotonicity_audit(cells: Sequence[AblationCell], higher_is_better: bool = True) -> dict:
    """For each text level, flag any drop as visual prompts get better.

    Returns ``{text_level: {"values": [...], "monotone": bool, "violations": [...]}}``.
    """
    out = {}
    levels = []
    for c in cells:
        if c.text_level not in levels:
            levels.append(c.text_level)
    for level in levels:
        col = {c.visual_strategy: c.mean for c in cells if c.text_level == level and c.n > 0}
        ordered = [(s, col[s]) for s in VISUAL_ORDER if s in col]
        violations = []
        for (sa, va), (sb, vb) in zip(ordered, ordered[1:]):
            worse = vb < va if higher_is_better else vb > va
            if worse:
                violations.append(f"{sb} < {sa}" if higher_is_better else f"{sb} > {sa}")
        out[level] = {"values": dict(ordered), "monotone": not violations, "violations": violations}
    return out


def ablation_average(cells: Sequence[AblationCell]) -> float:
    vals = [c.mean for c in cells if c.n > 0]
    return float(np.mean(vals))


# ---------------------------------------------------------------- targeted probes


def zero_shot_disambiguation(model, seeds: Sequence[int] = (0, 1, 2, 3, 4), n_queries: int = 40,
                             tasks=("inversion", "outline"), text_level: str = "task+location"):
    """Token accuracy on text-only (1x2) prompts, with the task's text vs empty text.

    Both tasks share their input distribution, so without text the two
    ground truths cannot both be matched.  Returns per-seed lists
    ``(acc_with_text, acc_without_text)`` averaged over the two tasks.
    """
    with_text, without = [], []
    for seed in seeds:
        w, wo = [], []
        for task in tasks:
            res_t = evaluate(model, task, "none", text_level, [seed], n_queries, pool_size=0)
            res_n = evaluate(model, task, "none", "none", [seed], n_queries, pool_size=0)
            w.append(np.mean([r.token_acc for r in res_t]))
            wo.append(np.mean([r.token_acc for r in res_n]))
        with_text.append(float(np.mean(w)))
        without.append(float(np.mean(wo)))
    return with_text, without


GRID_SWEEP = (((2, 2), 1), ((3, 3), 1), ((3, 3), 2), ((4, 4), 1), ((4, 4), 2), ((4, 4), 3),
              ((4, 4), 5), ((4, 4), 7))


def grid_size_sweep(model, task: str = "segmentation", strategy: str = "random_same_class",
                    text_level: str = "none", seeds: Sequence[int] = (0, 1, 2, 3, 4),
                    n_queries: int = 40, layouts=GRID_SWEEP) -> dict:
    """``{(grid, n_examples): (mean, std, n)}`` of the task metric."""
    out = {}
    for grid, k in layouts:
        res = evaluate(model, task, strategy, text_level, seeds, n_queries, n_examples=k, grid=grid)
        out[(tuple(grid), k)] = summarize(res)
    return out


def held_out_score(model, task: str = "threshold", strategy: str = "random_same_class",
                   text_level: str = "none", seeds: Sequence[int] = (0, 1, 2, 3, 4),
                   n_queries: int = 40) -> tuple[float, float, int]:
    return summarize(evaluate(model, task, strategy, text_level, seeds, n_queries))


__all__ = ["binarize", "iou", "miou", "mse", "token_accuracy", "evaluate", "summarize", "run_ablation",
           "monotonicity_audit", "zero_shot_disambiguation", "grid_size_sweep", "held_out_score",
           "AblationCell", "QueryResult", "TEXT_LEVELS"]
