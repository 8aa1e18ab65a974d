"""Text-conditioned masked inpainting transformer over codebook tokens.

The encoder embeds only the visible patches (MAE convention).  The decoder
receives the encoded visible tokens plus a learned MASK embedding at every
masked position and predicts, for each masked position, logits over the
patch codebook.  Every self-attention sublayer is followed by a
cross-attention sublayer whose keys and values come from the projected text
embeddings; PAD text tokens are excluded from the keys, and a sample with no
text tokens skips the sublayer exactly.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import numerics as nx
from .numerics import ContractError, DimensionError, Tensor
from .textenc import PAD, TextEncoder, TextPrompt, default_encoder

CROSS_MODES = ("both", "encoder", "decoder", "none")


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    enc_depth: int = 4
    dec_depth: int = 2
    patch_side: int = 8
    image_side: int = 64
    mlp_ratio: int = 4
    vocab_size: int = 216
    d_text: int = 32
    text_len: int = 32
    cross_attention: str = "both"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.image_side % self.patch_side:
            raise ValueError(f"image_side {self.image_side} not divisible by patch_side {self.patch_side}")
        if self.cross_attention not in CROSS_MODES:
            raise ValueError(f"cross_attention must be one of {CROSS_MODES}")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def n_tokens(self) -> int:
        return self.grid_side ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_side * self.patch_side * 3

    def to_dict(self) -> dict:
        return asdict(self)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, N, patch*patch*3), patches in row-major order."""
    B, H, W, C = images.shape
    h, w = H // patch, W // patch
    x = images.reshape(B, h, patch, w, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, h * w, patch * patch * C)


class ImprovModel:
    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0,
                 text_encoder: Optional[TextEncoder] = None):
        self.config = config or ModelConfig()
        self.text_encoder = text_encoder or default_encoder()
        if self.text_encoder.dim != self.config.d_text:
            raise DimensionError(
                f"text encoder dim {self.text_encoder.dim} != config d_text {self.config.d_text}")
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # ------------------------------------------------------------ parameters

    def _cross_in(self, side: str) -> bool:
        mode = self.config.cross_attention
        return mode == "both" or mode == side

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.config
        d = c.d_model
        dtype = nx.get_dtype()

        def normal(name, shape):
            self.params[name] = Tensor((rng.standard_normal(shape) * 0.02).astype(dtype),
                                       requires_grad=True, name=name)

        def const(name, shape, value):
            self.params[name] = Tensor(np.full(shape, value, dtype=dtype), requires_grad=True, name=name)

        def dense(prefix, n_in, n_out):
            normal(prefix + ".w", (n_in, n_out))
            const(prefix + ".b", (n_out,), 0.0)

        def norm(prefix):
            const(prefix + ".w", (d,), 1.0)
            const(prefix + ".b", (d,), 0.0)

        def block(prefix, cross):
            norm(prefix + ".ln1")
            dense(prefix + ".attn.qkv", d, 3 * d)
            dense(prefix + ".attn.out", d, d)
            if cross:
                norm(prefix + ".ln_q")
                norm(prefix + ".ln_kv")
                dense(prefix + ".cross.q", d, d)
                dense(prefix + ".cross.kv", d, 2 * d)
                dense(prefix + ".cross.out", d, d)
            norm(prefix + ".ln2")
            dense(prefix + ".mlp.fc1", d, c.mlp_ratio * d)
            dense(prefix + ".mlp.fc2", c.mlp_ratio * d, d)

        dense("patch_embed", c.patch_dim, d)
        normal("enc_pos", (c.n_tokens, d))
        dense("text_proj", c.d_text, d)
        for i in range(c.enc_depth):
            block(f"enc.{i}", self._cross_in("encoder"))
        norm("enc_norm")
        dense("dec_embed", d, d)
        normal("mask_token", (d,))
        normal("dec_pos", (c.n_tokens, d))
        for i in range(c.dec_depth):
            block(f"dec.{i}", self._cross_in("decoder"))
        norm("dec_norm")
        dense("head", d, c.vocab_size)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def clone(self) -> "ImprovModel":
        """Independent copy of the parameters, e.g. for a parallel evaluator."""
        other = copy.copy(self)
        other.params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return other

    # ------------------------------------------------------------ layers

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _dense(self, prefix: str, x: Tensor) -> Tensor:
        return nx.linear(x, self._p(prefix + ".w"), self._p(prefix + ".b"))

    def _norm(self, prefix: str, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self._p(prefix + ".w"), self._p(prefix + ".b"))

    def _heads(self, t: Tensor, n_parts: int) -> list[Tensor]:
        B, N, _ = t.shape
        H = self.config.n_heads
        dh = self.config.d_model // H
        t = t.reshape(B, N, n_parts, H, dh).transpose(2, 0, 3, 1, 4)
        return [t[i] for i in range(n_parts)]

    def _attend(self, q: Tensor, k: Tensor, v: Tensor, key_mask, record) -> Tensor:
        B, H, N, dh = q.shape
        scores = nx.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        probs = nx.softmax(scores, axis=-1, mask=key_mask)
        if record is not None:
            record.append(probs.data)
        out = nx.matmul(probs, v)
        return out.transpose(0, 2, 1, 3).reshape(B, N, H * dh)

    def _block(self, prefix: str, x: Tensor, text: Optional[dict], record: Optional[dict],
               key_mask: Optional[np.ndarray] = None) -> Tensor:
        q, k, v = self._heads(self._dense(prefix + ".attn.qkv", self._norm(prefix + ".ln1", x)), 3)
        attn = self._attend(q, k, v, key_mask, record["self"] if record is not None else None)
        x = x + self._dense(prefix + ".attn.out", attn)
        if text is not None and (prefix + ".cross.q.w") in self.params:
            (q,) = self._heads(self._dense(prefix + ".cross.q", self._norm(prefix + ".ln_q", x)), 1)
            kv = self._dense(prefix + ".cross.kv", self._norm(prefix + ".ln_kv", text["feats"]))
            k, v = self._heads(kv, 2)
            cross = self._attend(q, k, v, text["key_mask"], record["cross"] if record is not None else None)
            x = nx.gated_residual(x, self._dense(prefix + ".cross.out", cross), text["gate"])
        return x + self._dense(prefix + ".mlp.fc2", nx.gelu(self._dense(prefix + ".mlp.fc1", self._norm(prefix + ".ln2", x))))

    def _text_context(self, text_ids: np.ndarray) -> Optional[dict]:
        ids = np.asarray(text_ids, dtype=np.int64)
        real = ids != PAD
        lengths = real.sum(axis=1)
        if self.config.cross_attention == "none" or not lengths.any():
            return None
        # real tokens first (stable), then trim the all-PAD tail
        order = np.argsort(~real, axis=1, kind="stable")
        ids = np.take_along_axis(ids, order, axis=1)[:, : lengths.max()]
        real = ids != PAD
        emb = Tensor(self.text_encoder.embed_ids(ids))
        feats = self._dense("text_proj", emb)
        return {
            "feats": feats,
            "key_mask": real[:, None, None, :],
            "gate": (lengths > 0)[:, None, None],
        }

    # ------------------------------------------------------------ forward

    def _check_inputs(self, images, mask, text_ids, discard):
        c = self.config
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[1:] != (c.image_side, c.image_side, 3):
            raise DimensionError(
                f"expected images (B, {c.image_side}, {c.image_side}, 3), got {images.shape}")
        B = images.shape[0]
        g = c.grid_side
        mask = np.asarray(mask, dtype=bool).reshape(B, -1)
        if mask.shape[1] != g * g:
            raise DimensionError(f"mask must be (B, {g}, {g})")
        if discard is None:
            discard = np.zeros_like(mask)
        else:
            discard = np.asarray(discard, dtype=bool).reshape(B, -1)
            if discard.shape != mask.shape:
                raise DimensionError("discard mask shape differs from mask")
            if (discard & mask).any():
                raise ContractError("a position cannot be both masked and discarded")
        text_ids = np.asarray(text_ids, dtype=np.int64).reshape(B, -1)
        if (mask.sum(axis=1) == 0).any():
            raise ContractError("mask must select at least one position")
        if ((~mask & ~discard).sum(axis=1) == 0).any():
            raise ContractError("at least one position must stay visible")
        return images, mask, text_ids, discard

    def forward_batch(self, images, mask, text_ids, discard=None, record: Optional[dict] = None) -> Tensor:
        """Logits ``(B, n_masked, V)`` for masked positions in row-major order.

        Samples may differ in their masked or visible counts (e.g. training
        grids with discarded filler cells).  They are then padded to the
        batch maximum: padded positions are excluded as attention keys, and
        each sample's padded logit rows come after its real ones.

        ``record``, if given, is a dict with ``"self"`` and ``"cross"`` lists
        that receive every attention probability array.
        """
        c = self.config
        images, mask, text_ids, discard = self._check_inputs(images, mask, text_ids, discard)
        vis = ~mask & ~discard
        vis_idx, vis_ok = _packed_indices(vis)
        mask_idx, mask_ok = _packed_indices(mask)
        n_vis = vis_idx.shape[1]
        ragged = not (vis_ok.all() and mask_ok.all())
        enc_keys = vis_ok[:, None, None, :] if ragged else None
        dec_keys = np.concatenate([vis_ok, mask_ok], axis=1)[:, None, None, :] if ragged else None

        patches = patchify(images.astype(nx.get_dtype(), copy=False), c.patch_side)
        visible = np.take_along_axis(patches, vis_idx[:, :, None], axis=1)
        text = self._text_context(text_ids)

        x = self._dense("patch_embed", Tensor(visible)) + nx.embedding(self._p("enc_pos"), vis_idx)
        for i in range(c.enc_depth):
            x = self._block(f"enc.{i}", x, text, record, enc_keys)
        x = self._norm("enc_norm", x)

        y = self._dense("dec_embed", x) + nx.embedding(self._p("dec_pos"), vis_idx)
        m = self._p("mask_token") + nx.embedding(self._p("dec_pos"), mask_idx)
        h = nx.concat([y, m], axis=1)
        for i in range(c.dec_depth):
            h = self._block(f"dec.{i}", h, text, record, dec_keys)
        h = self._norm("dec_norm", h[:, n_vis:])
        return self._dense("head", h)

    def forward(self, img: np.ndarray, mask: np.ndarray, text: TextPrompt, discard=None,
                record: Optional[dict] = None) -> Tensor:
        """Single-image convenience wrapper: returns ``(n_masked, V)`` logits."""
        logits = self.forward_batch(np.asarray(img)[None], np.asarray(mask)[None], text.token_ids[None],
                                    None if discard is None else np.asarray(discard)[None], record)
        return logits.reshape(logits.shape[1], logits.shape[2])

    def loss_batch(self, images, mask, text_ids, targets, discard=None) -> Tensor:
        """Cross-entropy over masked positions; ``targets`` is the full (B, h, w) token grid."""
        logits = self.forward_batch(images, mask, text_ids, discard)
        B, P, V = logits.shape
        targets = np.asarray(targets).reshape(B, -1)
        mask_idx, ok = _packed_indices(np.asarray(mask, dtype=bool).reshape(B, -1))
        picked = np.take_along_axis(targets, mask_idx, axis=1)
        if ok.all():
            return nx.cross_entropy_logits(logits, picked)
        rows = np.flatnonzero(ok)
        return nx.cross_entropy_logits(logits.reshape(B * P, V)[rows], picked.ravel()[rows])

    def loss(self, img, mask, text: TextPrompt, target_tokens, discard=None) -> Tensor:
        return self.loss_batch(np.asarray(img)[None], np.asarray(mask)[None], text.token_ids[None],
                               np.asarray(target_tokens)[None],
                               None if discard is None else np.asarray(discard)[None])


def _packed_indices(sel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row positions of True entries, in order, padded to the longest row.

    Returns ``(indices, valid)``; padding repeats position 0 and is flagged
    False in ``valid``.
    """
    counts = sel.sum(axis=1)
    n = int(counts.max())
    order = np.argsort(~sel, axis=1, kind="stable")[:, :n]
    valid = np.arange(n)[None, :] < counts[:, None]
    return np.where(valid, order, 0), valid


def predict_tokens(logits) -> np.ndarray:
    """Argmax over the last axis; ties resolve to the lowest index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=-1)


def sample_tokens(logits, temperature: float, rng: np.random.Generator) -> np.ndarray:
    """Temperature sampling alternative to :func:`predict_tokens`."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if temperature <= 0:
        return predict_tokens(data)
    p = np.exp(nx.log_softmax_np(data.astype(np.float64) / temperature))
    flat = p.reshape(-1, p.shape[-1])
    u = rng.random(flat.shape[0])
    idx = (flat.cumsum(axis=1) < u[:, None]).sum(axis=1)
    return np.minimum(idx, p.shape[-1] - 1).reshape(p.shape[:-1])
