"""Frozen colour-lattice tokenizer for image patches.

Each ``patch_side`` x ``patch_side`` patch is summarised by its mean colour,
and every channel is snapped to one of ``levels`` evenly spaced values in
[0, 1].  The code of a patch is its lattice coordinate in base ``levels``
(red most significant).  Decoding paints a flat patch at the lattice colour.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError


@dataclass
class TokenGrid:
    tokens: np.ndarray  # (h, w) int
    mask: np.ndarray  # (h, w) bool, True = to predict

    @property
    def shape(self) -> tuple:
        return self.tokens.shape


@dataclass(frozen=True)
class Codebook:
    levels: int = 6
    patch_side: int = 8

    @property
    def vocab_size(self) -> int:
        return self.levels ** 3

    @property
    def step(self) -> float:
        return 1.0 / (self.levels - 1)

    def palette(self) -> np.ndarray:
        """(V, 3) lattice colour of every code."""
        codes = np.arange(self.vocab_size)
        return self.code_to_levels(codes) * self.step

    def code_to_levels(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        L = self.levels
        return np.stack([codes // (L * L), (codes // L) % L, codes % L], axis=-1).astype(np.float64)

    def levels_to_code(self, q: np.ndarray) -> np.ndarray:
        L = self.levels
        q = q.astype(np.int64)
        return q[..., 0] * L * L + q[..., 1] * L + q[..., 2]

    def quantize_levels(self, values: np.ndarray) -> np.ndarray:
        """Nearest lattice level per value; exact midpoints go to the lower level."""
        scaled = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * (self.levels - 1)
        return np.clip(np.ceil(scaled - 0.5), 0, self.levels - 1).astype(np.int64)

    def patch_means(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise DimensionError(f"expected an HxWx3 image, got {img.shape}")
        H, W, _ = img.shape
        p = self.patch_side
        if H % p or W % p:
            raise DimensionError(f"image {H}x{W} is not divisible by patch side {p}")
        return img.reshape(H // p, p, W // p, p, 3).mean(axis=(1, 3))

    def encode(self, img: np.ndarray) -> np.ndarray:
        """(H, W, 3) image -> (H/p, W/p) int64 codes."""
        return self.levels_to_code(self.quantize_levels(self.patch_means(img)))

    def encode_image(self, img: np.ndarray) -> TokenGrid:
        tokens = self.encode(img)
        return TokenGrid(tokens, np.zeros(tokens.shape, dtype=bool))

    def decode(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise IndexError(f"token index out of range [0, {self.vocab_size})")
        colours = self.palette()[tokens]  # (h, w, 3)
        p = self.patch_side
        return np.repeat(np.repeat(colours, p, axis=0), p, axis=1)

    def decode_tokens(self, grid: TokenGrid) -> np.ndarray:
        return self.decode(grid.tokens)

    def quantize(self, img: np.ndarray) -> np.ndarray:
        """Patch-mean lattice rendering of ``img`` (what a perfect round trip gives)."""
        return self.decode(self.encode(img))
