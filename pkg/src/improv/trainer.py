"""Masked-token training: random patch masking, caption dropout, AdamW, warmup + cosine."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .codebook import Codebook
from .model import ImprovModel, ModelConfig
from .numerics import ContractError
from .taskgen import CorpusMix, TrainRecord, make_train_record
from .textenc import TextEncoder, default_encoder

log = logging.getLogger(__name__)


class IngestionError(IOError):
    """A corpus file could not be read."""


@dataclass
class TrainConfig:
    lr_peak: float = 2e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    warmup_steps: int = 100
    total_steps: int = 5000
    batch: int = 32
    mask_ratio: float = 0.75
    text_drop: float = 0.1
    seed: int = 0
    corpus_mix: str = "mixed"
    flip_prob: float = 0.5
    crop_margin: int = 8
    small_grid_prob: float = 0.25
    pair_grid_prob: float = 0.0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if not 0 <= self.text_drop <= 1:
            raise ValueError("text_drop must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def corpus(self) -> CorpusMix:
        return CorpusMix.named(self.corpus_mix, flip_prob=self.flip_prob,
                               crop_margin=self.crop_margin, small_grid_prob=self.small_grid_prob,
                               pair_grid_prob=self.pair_grid_prob)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_peak`` then cosine decay to zero at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps if cfg.warmup_steps else cfg.lr_peak
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay on parameters of rank >= 2."""

    def __init__(self, params: dict[str, nx.Tensor], beta1=0.9, beta2=0.95, eps=1e-8,
                 weight_decay=0.05):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def decays(self, name: str) -> bool:
        return self.params[name].ndim >= 2

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay and self.decays(name):
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for k in self.params:
            self.m[k] = np.asarray(state["m"][k], dtype=self.params[k].data.dtype).copy()
            self.v[k] = np.asarray(state["v"][k], dtype=self.params[k].data.dtype).copy()


def sample_mask(rng: np.random.Generator, n_tokens: int, ratio: float) -> np.ndarray:
    """Exactly ``round(ratio * n_tokens)`` positions, uniformly without replacement."""
    k = int(round(ratio * n_tokens))
    mask = np.zeros(n_tokens, dtype=bool)
    mask[rng.permutation(n_tokens)[:k]] = True
    return mask


# ---------------------------------------------------------------- corpora


class SyntheticCorpus:
    """Endless stream of generated records."""

    def __init__(self, mix: Optional[CorpusMix] = None):
        self.mix = mix or CorpusMix()

    def sample(self, rng: np.random.Generator) -> TrainRecord:
        return make_train_record(rng, self.mix)


class ManifestCorpus:
    """Records exported to disk: ``manifest.tsv`` with path, caption, origin, seed."""

    def __init__(self, manifest_path):
        from .ppm import ImageFormatError, read_image

        self.path = Path(manifest_path)
        try:
            lines = self.path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise IngestionError(f"cannot read manifest {self.path}: {exc}") from exc
        if not lines or lines[0].split("\t") != ["path", "caption", "origin", "seed"]:
            raise IngestionError(f"{self.path}: missing or malformed header")
        self.records: list[TrainRecord] = []
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split("\t")
            if len(parts) != 4:
                raise IngestionError(f"{self.path}:{lineno}: expected 4 tab-separated fields")
            rel, caption, origin, seed = parts
            img_path = self.path.parent / rel
            try:
                img = read_image(img_path)
            except (OSError, ImageFormatError) as exc:
                raise IngestionError(f"cannot read image {img_path}: {exc}") from exc
            self.records.append(TrainRecord(img, caption, origin, int(seed)))
        if not self.records:
            raise IngestionError(f"{self.path}: no records")

    def sample(self, rng: np.random.Generator) -> TrainRecord:
        return self.records[int(rng.integers(len(self.records)))]


# ---------------------------------------------------------------- training


@dataclass
class Batch:
    images: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    text_ids: np.ndarray
    dropped: np.ndarray
    origins: list = field(default_factory=list)
    discard: Optional[np.ndarray] = None  # (B, n) white filler, excluded from input and loss


class Trainer:
    def __init__(self, model: ImprovModel, cfg: TrainConfig, corpus=None,
                 text_encoder: Optional[TextEncoder] = None):
        self.model = model
        self.cfg = cfg
        self.corpus = corpus if corpus is not None else SyntheticCorpus(cfg.corpus())
        self.text = text_encoder or model.text_encoder or default_encoder()
        mc = model.config
        self.codebook = Codebook(levels=round(mc.vocab_size ** (1 / 3)), patch_side=mc.patch_side)
        self.opt = AdamW(model.params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0

    def make_batch(self, records: Sequence[TrainRecord]) -> Batch:
        mc = self.model.config
        images = np.stack([r.image for r in records]).astype(np.float32)
        targets = np.stack([self.codebook.encode(r.image) for r in records])
        n = mc.n_tokens
        mask = np.stack([sample_mask(self.rng, n, self.cfg.mask_ratio) for _ in records])
        dropped = self.rng.random(len(records)) < self.cfg.text_drop
        ids = np.stack([self.text.tokenize("" if d else r.caption).token_ids
                        for r, d in zip(records, dropped)])
        discard = np.zeros_like(mask)
        for i, r in enumerate(records):
            if r.discard is None:
                continue
            d = np.asarray(r.discard, dtype=bool).reshape(-1)
            # keep filler in play if it would leave nothing to see or nothing to predict
            if (~mask[i] & ~d).any() and (mask[i] & ~d).any():
                discard[i] = d
        return Batch(images, targets.reshape(len(records), -1), mask, ids, dropped,
                     [r.origin for r in records], discard if discard.any() else None)

    def next_batch(self) -> Batch:
        return self.make_batch([self.corpus.sample(self.rng) for _ in range(self.cfg.batch)])

    def train_step(self, batch: Optional[Batch] = None) -> float:
        """One optimisation step; returns the batch loss."""
        if self.step >= self.cfg.total_steps:
            raise ContractError("training already reached total_steps")
        batch = batch if batch is not None else self.next_batch()
        self.model.zero_grad()
        mask, discard = batch.mask, batch.discard
        if discard is not None:
            # masked filler is neither input nor target
            mask = mask & ~discard
        loss = self.model.loss_batch(batch.images, mask, batch.text_ids, batch.targets, discard)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"non-finite loss at step {self.step + 1}")
        nx.backward(loss)
        self.step += 1
        self.opt.step(lr_at(self.step, self.cfg))
        return float(loss.data)

    def run(self, out_dir=None, on_step: Optional[Callable[[int, float, float], None]] = None) -> None:
        """Train until ``total_steps``; writes metrics.csv and periodic checkpoints."""
        from .checkpoint import save_checkpoint

        out = Path(out_dir) if out_dir is not None else None
        writer = fh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            metrics = out / "metrics.csv"
            fresh = self.step == 0 or not metrics.exists()
            fh = open(metrics, "w" if fresh else "a", newline="")
            writer = csv.writer(fh)
            if fresh:
                writer.writerow(["step", "loss", "lr"])
        t0 = time.perf_counter()
        try:
            while self.step < self.cfg.total_steps:
                loss = self.train_step()
                lr = lr_at(self.step, self.cfg)
                if writer is not None:
                    writer.writerow([self.step, repr(loss), repr(lr)])
                if on_step is not None:
                    on_step(self.step, loss, lr)
                if self.step % 100 == 0:
                    log.info("step %d loss %.4f lr %.2e (%.1fs)", self.step, loss, lr, time.perf_counter() - t0)
                every = self.cfg.checkpoint_every
                if out is not None and every and self.step % every == 0 and self.step < self.cfg.total_steps:
                    fh.flush()
                    save_checkpoint(out / f"step_{self.step:06d}.impv", self)
        finally:
            if fh is not None:
                fh.close()
        if out is not None:
            save_checkpoint(out / "final.impv", self)


def run_training(config: TrainConfig, model_config: Optional[ModelConfig] = None, corpus=None,
                 out_dir=None, model_seed: Optional[int] = None, resume=None) -> Trainer:
    """Build (or resume) a trainer and train to completion."""
    from .checkpoint import load_trainer

    if resume is not None:
        trainer = load_trainer(resume, corpus=corpus, train_config=config)
    else:
        model = ImprovModel(model_config or ModelConfig(),
                            seed=config.seed if model_seed is None else model_seed)
        trainer = Trainer(model, config, corpus)
    trainer.run(out_dir)
    return trainer


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]
