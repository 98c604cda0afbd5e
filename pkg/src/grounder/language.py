"""Linguistic branch: vocabulary, tokenization, embedding, text transformer.

Tokenization is lowercase whitespace splitting over a closed vocabulary.
Ids 0..3 are reserved: [PAD]=0, [UNK]=1, [CLS]=2, [SEP]=3.  A tokenized
expression is [CLS] w1..wm [SEP] padded to a fixed length; the mask is true
exactly on non-[PAD] positions.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, FormatError
from .transformer import EncoderStack, ParamIter, xavier

PAD, UNK, CLS, SEP = 0, 1, 2, 3
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")


class Vocabulary:
    """Injective word -> id map over ids 4.., below the reserved block."""

    def __init__(self, words: Sequence[str] = ()):
        self._ids: dict[str, int] = {}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word in RESERVED:
            raise ContractError(f"{word} is a reserved token")
        if word not in self._ids:
            self._ids[word] = len(RESERVED) + len(self._ids)
        return self._ids[word]

    def id_of(self, word: str) -> int:
        return self._ids.get(word, UNK)

    def word_of(self, idx: int) -> str:
        if idx < len(RESERVED):
            return RESERVED[idx]
        for w, i in self._ids.items():
            if i == idx:
                return w
        raise ContractError(f"id {idx} not in vocabulary")

    def __len__(self) -> int:
        return len(RESERVED) + len(self._ids)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def save(self, path: Union[str, Path]) -> None:
        lines = list(RESERVED) + sorted(self._ids, key=self._ids.get)
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @staticmethod
    def load(path: Union[str, Path]) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:4]) != RESERVED:
            raise FormatError(f"{path}: first four lines must be {RESERVED}")
        vocab = Vocabulary()
        for n, word in enumerate(lines[4:], start=4):
            if not word or word != word.strip():
                raise FormatError(f"{path}:{n + 1}: bad vocabulary line {word!r}")
            vocab.add(word)
        return vocab


def build_vocab(corpus: Iterable[str]) -> Vocabulary:
    """Ids assigned by first occurrence of each lowercased word."""
    vocab = Vocabulary()
    empty = True
    for expression in corpus:
        empty = False
        for word in expression.lower().split():
            vocab.add(word)
    if empty:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    return vocab


def tokenize(expression: str, vocab: Vocabulary,
             n_l: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-length id sequence [CLS] w1..wm [SEP] [PAD]... plus validity mask."""
    if n_l < 3:
        raise ContractError(f"sequence length must be >= 3, got {n_l}")
    words = expression.lower().split()[: n_l - 2]
    ids = np.full(n_l, PAD, dtype=np.int64)
    ids[0] = CLS
    for i, w in enumerate(words, start=1):
        ids[i] = vocab.id_of(w)
    ids[len(words) + 1] = SEP
    mask = ids != PAD
    return ids, mask


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Words between [CLS] and [SEP], joined by single spaces."""
    words = []
    for idx in ids:
        if idx in (CLS, PAD):
            continue
        if idx == SEP:
            break
        words.append(vocab.word_of(int(idx)))
    return " ".join(words)


@dataclass
class LinguisticTokens:
    embeddings: Tensor        # (C_l, N_l)
    token_mask: np.ndarray    # (N_l,) bool, false on [PAD]
    cls_index: int            # always 0


class LinguisticBranch:
    """Embedding table plus text transformer with learned positions."""

    def __init__(self, vocab_size: int, c_l: int, n_l: int,
                 encoder: EncoderStack, rng: np.random.Generator):
        self.table = xavier(rng, vocab_size, c_l)
        self.n_l = n_l
        self.encoder = encoder

    def forward(self, ids: np.ndarray, mask: np.ndarray, train: bool = False,
                rng: Optional[np.random.Generator] = None) -> LinguisticTokens:
        if ids.shape != (self.n_l,):
            raise ContractError(f"expected {self.n_l} token ids, got shape {ids.shape}")
        x = ag.embedding_lookup(self.table, ids)
        x = self.encoder.forward(x, mask=mask, train=train, rng=rng)
        return LinguisticTokens(x, np.asarray(mask, dtype=bool), cls_index=0)

    def named_parameters(self, prefix: str = "") -> ParamIter:
        yield prefix + "embed", self.table
        yield from self.encoder.named_parameters(prefix + "enc.")
