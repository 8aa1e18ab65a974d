"""Closed-vocabulary tokenizer and a frozen random embedding table."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import numerics as nx

PAD = 0
UNK = 1
PAD_WORD = "<pad>"
UNK_WORD = "<unk>"

PROMPT_LENGTH = 32
TEXT_DIM = 32
TABLE_SEED = 20231017

_WORD_RE = re.compile(r"[a-z0-9]+")

# Every word the prompt templates, task names and class names can produce.
# Append-only: ids are positional.
BASE_WORDS = (
    # templates
    "left input image right black and white foreground background segmentation of a "
    "colorization results colorized inverted colors negative edge detection outline edges "
    "shape on identical copy the reconstruction thresholding brightness threshold "
    "inversion identity task mask grid example examples output query "
    # task names as written in prompts
    "colorization inversion outline identity threshold "
    # colours and shapes
    "red green blue yellow cyan magenta orange purple gray grey circle square triangle "
    # Pascal VOC classes
    "aeroplane airplane bicycle bird boat bottle bus car cat chair cow dining table dog horse "
    "motorbike person potted plant sheep sofa train tv monitor rectangle "
    # plain-scene captions
    "photo picture scene small large with in an"
).split()


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


class TextVocab:
    def __init__(self, words: Iterable[str] = BASE_WORDS):
        self.word_to_id: dict[str, int] = {PAD_WORD: PAD, UNK_WORD: UNK}
        for w in words:
            w = w.lower()
            if w not in self.word_to_id:
                self.word_to_id[w] = len(self.word_to_id)
        if len(self.word_to_id) > 512:
            raise ValueError(f"vocabulary too large: {len(self.word_to_id)}")
        self.id_to_word = {i: w for w, i in self.word_to_id.items()}

    def __len__(self) -> int:
        return len(self.word_to_id)

    def __contains__(self, word: str) -> bool:
        return word in self.word_to_id

    def lookup(self, word: str) -> int:
        return self.word_to_id.get(word, UNK)

    def dump(self, path) -> None:
        """Write ``word<TAB>id`` lines, ordered by id."""
        lines = [f"{self.id_to_word[i]}\t{i}" for i in range(len(self))]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class TextPrompt:
    token_ids: np.ndarray  # (K,) int64
    length: int

    @property
    def empty(self) -> bool:
        return self.length == 0

    @property
    def pad_mask(self) -> np.ndarray:
        """True where the id is a real token."""
        return self.token_ids != PAD


class TextEncoder:
    """Tokenizer plus the frozen ``vocab x d_text`` embedding table."""

    def __init__(self, vocab: Optional[TextVocab] = None, max_len: int = PROMPT_LENGTH,
                 dim: int = TEXT_DIM, seed: int = TABLE_SEED):
        self.vocab = vocab or TextVocab()
        self.max_len = max_len
        self.dim = dim
        rng = np.random.default_rng(seed)
        table = rng.standard_normal((len(self.vocab), dim)) / np.sqrt(dim)
        table[PAD] = 0.0
        table.setflags(write=False)
        self._table = table

    @property
    def table(self) -> np.ndarray:
        return self._table

    def tokenize(self, text: str) -> TextPrompt:
        ids = [self.vocab.lookup(w) for w in split_words(text)][: self.max_len]
        out = np.full(self.max_len, PAD, dtype=np.int64)
        out[: len(ids)] = ids
        return TextPrompt(out, len(ids))

    def detokenize(self, prompt: TextPrompt) -> str:
        return " ".join(self.vocab.id_to_word[int(i)] for i in prompt.token_ids if i != PAD)

    def embed(self, prompt: TextPrompt) -> nx.Tensor:
        return nx.Tensor(self._table[prompt.token_ids])

    def embed_ids(self, ids: np.ndarray) -> np.ndarray:
        """Embeddings for a (B, K) id batch as a plain array."""
        return self._table[np.asarray(ids, dtype=np.int64)]

    def batch_ids(self, prompts: Iterable[TextPrompt]) -> np.ndarray:
        return np.stack([p.token_ids for p in prompts])


_default: Optional[TextEncoder] = None


def default_encoder() -> TextEncoder:
    global _default
    if _default is None:
        _default = TextEncoder()
    return _default


def tokenize(text: str) -> TextPrompt:
    return default_encoder().tokenize(text)
