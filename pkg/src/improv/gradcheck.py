"""Central finite-difference checks of every differentiable op and a micro model.

All checks run in float64.  For each input tensor the error is
``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)``, i.e.
the largest deviation relative to the gradient's own scale; an entry
passes when that stays below the tolerance for every seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

STEP = 1e-3
TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def _scalarize(out: Tensor, weights: np.ndarray) -> Tensor:
    if out.size == 1:
        return nx.tsum(out)
    return nx.tsum(out * Tensor(weights))


def check_function(fn: Callable[[Sequence[Tensor]], Tensor], arrays: Sequence[np.ndarray],
                   rng: np.random.Generator, h: float = STEP, max_entries: Optional[int] = None) -> float:
    """Largest relative error over all inputs of ``fn`` (non-scalar outputs get random weights)."""
    with nx.precision(np.float64):
        leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        out = fn(leaves)
        weights = rng.standard_normal(out.shape)
        loss = _scalarize(out, weights)
        nx.backward(loss)

        def value() -> float:
            with nx.no_grad():
                return float(_scalarize(fn(leaves), weights).data)

        worst = 0.0
        for leaf in leaves:
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            flat = leaf.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            numeric = np.empty(idx.size)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                up = value()
                flat[i] = orig - h
                down = value()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * h)
            worst = max(worst, rel_error(analytic.reshape(-1)[idx], numeric))
    return worst


# ---------------------------------------------------------------- op catalogue


def _op_cases(rng: np.random.Generator):
    """name -> (fn, arrays) with fresh random shapes/values per seed."""
    n = lambda *s: rng.standard_normal(s)
    B, N, D = 2, int(rng.integers(2, 5)), int(rng.integers(2, 6))
    ids = rng.integers(0, 5, size=(B, 3))
    targets = rng.integers(0, D, size=(B, N))
    key_mask = rng.random((B, 1, N)) < 0.7
    key_mask[..., 0] = True
    gate = np.array([True, False])[:, None, None]
    idx = np.stack([rng.permutation(N)[:2] for _ in range(B)])
    cases = {
        "add": (lambda t: nx.add(t[0], t[1]), [n(B, N, D), n(D)]),
        "sub": (lambda t: nx.sub(t[0], t[1]), [n(B, 1, D), n(N, D)]),
        "mul": (lambda t: nx.mul(t[0], t[1]), [n(B, N, D), n(N, 1)]),
        "mul_scalar": (lambda t: nx.mul(t[0], 0.37), [n(N, D)]),
        "gated_residual": (lambda t: nx.gated_residual(t[0], t[1], gate), [n(B, N, D), n(B, N, D)]),
        "matmul_2d": (lambda t: nx.matmul(t[0], t[1]), [n(N, D), n(D, 3)]),
        "matmul_batched_weight": (lambda t: nx.matmul(t[0], t[1]), [n(B, N, D), n(D, 3)]),
        "matmul_batched": (lambda t: nx.matmul(t[0], t[1]), [n(B, 2, N, D), n(B, 2, D, N)]),
        "matmul_broadcast": (lambda t: nx.matmul(t[0], t[1]), [n(B, N, D), n(1, D, 3)]),
        "linear": (lambda t: nx.linear(t[0], t[1], t[2]), [n(B, N, D), n(D, 3), n(3)]),
        "reshape": (lambda t: nx.reshape(t[0], (B, -1)), [n(B, N, D)]),
        "transpose": (lambda t: nx.transpose(t[0], (0, 2, 1)), [n(B, N, D)]),
        "getitem_basic": (lambda t: nx.getitem(t[0], (slice(None), slice(1, None))), [n(B, N, D)]),
        "getitem_fancy": (lambda t: nx.getitem(t[0], np.array([0, 0, 1])), [n(B, N, D)]),
        "concat": (lambda t: nx.concat([t[0], t[1]], axis=1), [n(B, N, D), n(B, 2, D)]),
        "gather_rows": (lambda t: nx.gather_rows(t[0], idx), [n(B, N, D)]),
        "embedding": (lambda t: nx.embedding(t[0], ids), [n(5, D)]),
        "sum": (lambda t: nx.tsum(t[0], axis=1, keepdims=True), [n(B, N, D)]),
        "mean": (lambda t: nx.tmean(t[0], axis=-1), [n(B, N, D)]),
        "softmax": (lambda t: nx.softmax(t[0], axis=-1), [n(B, N, N)]),
        "softmax_masked": (lambda t: nx.softmax(t[0], axis=-1, mask=key_mask), [n(B, N, N)]),
        "layer_norm": (lambda t: nx.layer_norm(t[0], t[1], t[2]), [n(B, N, D), 1 + 0.1 * n(D), n(D)]),
        "gelu": (lambda t: nx.gelu(t[0]), [n(B, N, D)]),
        "cross_entropy": (lambda t: nx.cross_entropy_logits(t[0], targets), [n(B, N, D)]),
    }
    return cases


OP_NAMES = tuple(_op_cases(np.random.default_rng(0)))


def check_ops(seeds: Sequence[int] = range(10), names: Optional[Sequence[str]] = None) -> list[CheckResult]:
    results = []
    for name in names or OP_NAMES:
        t0 = time.perf_counter()
        worst = 0.0
        for seed in seeds:
            rng = np.random.default_rng([seed, 17])
            fn, arrays = _op_cases(rng)[name]
            worst = max(worst, check_function(fn, arrays, rng))
        results.append(CheckResult(name, worst, len(seeds), time.perf_counter() - t0))
    return results


# ---------------------------------------------------------------- micro model


def micro_config():
    from .model import ModelConfig

    return ModelConfig(d_model=8, n_heads=2, enc_depth=1, dec_depth=1, patch_side=4, image_side=8,
                       mlp_ratio=2, vocab_size=8)


def check_micro_model(seeds: Sequence[int] = range(10), per_param: int = 4) -> CheckResult:
    """Loss gradient of a tiny full model (text on one sample, empty text on the other)."""
    from .model import ImprovModel
    from .textenc import default_encoder

    t0 = time.perf_counter()
    worst = 0.0
    enc = default_encoder()
    for seed in seeds:
        rng = np.random.default_rng([seed, 29])
        with nx.precision(np.float64):
            model = ImprovModel(micro_config(), seed=int(seed))
            # move weights off the tiny init so every path carries signal
            for p in model.params.values():
                p.data += 0.3 * rng.standard_normal(p.shape)
            images = rng.random((2, 8, 8, 3))
            # ragged on purpose: 2 masked + 1 discarded vs 1 masked, so the padded path is checked
            order = np.stack([rng.permutation(4) for _ in range(2)])
            mask = np.zeros((2, 4), dtype=bool)
            discard = np.zeros((2, 4), dtype=bool)
            mask[0, order[0, :2]] = True
            discard[0, order[0, 2]] = True
            mask[1, order[1, 0]] = True
            ids = np.stack([enc.tokenize("image segmentation of a red circle").token_ids,
                            enc.tokenize("").token_ids])
            targets = rng.integers(0, 8, size=(2, 4))
            names = list(model.params)
            arrays = [model.params[k].data.copy() for k in names]

            def fn(leaves):
                for k, leaf in zip(names, leaves):
                    model.params[k] = leaf
                return model.loss_batch(images, mask, ids, targets, discard)

            worst = max(worst, check_function(fn, arrays, rng, max_entries=per_param))
    return CheckResult("micro_model", worst, len(seeds), time.perf_counter() - t0)


def run_all(seeds: Sequence[int] = range(10)) -> list[CheckResult]:
    return check_ops(seeds) + [check_micro_model(seeds)]
