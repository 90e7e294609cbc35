from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .records import DEFAULT_DELIMITERS, RecipeRecord

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
RESERVED = (PAD, UNK, BOS, EOS)


class Vocab:
    """Token <-> id bijection with reserved ids 0..3 and a sentence-delimiter set."""

    def __init__(self, tokens: Sequence[str], delimiters: Iterable[str] = DEFAULT_DELIMITERS):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        self.delimiters = frozenset(delimiters)
        if not self.delimiters:
            raise ValueError("delimiter set is empty")
        self.delimiter_ids = frozenset(self.stoi[d] for d in self.delimiters if d in self.stoi)

    pad_id, unk_id, bos_id, eos_id = 0, 1, 2, 3

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.unk_id)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, self.unk_id) for t in tokens]

    def tokens(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def encode(self, record: RecipeRecord) -> "EncodedRecipe":
        return EncodedRecipe(
            self.ids(record.title_tokens),
            [self.ids(p) for p in record.ingredients],
            self.ids(record.body_tokens),
        )

    @property
    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.itos).encode())
        h.update(b"\0" + "\n".join(sorted(self.delimiters)).encode())
        return h.hexdigest()

    def to_json(self) -> dict:
        return {"tokens": self.itos, "delimiters": sorted(self.delimiters)}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        return cls(obj["tokens"], obj["delimiters"])


def build_vocab(corpus: Iterable[RecipeRecord], min_count: int = 1,
                delimiters: Iterable[str] = DEFAULT_DELIMITERS) -> Vocab:
    """Vocabulary over titles, ingredients and bodies; rarer tokens fall back to UNK.

    Delimiters are always kept so that segmentation survives the id mapping.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    n = 0
    for r in corpus:
        n += 1
        counts.update(r.title_tokens)
        for p in r.ingredients:
            counts.update(p)
        counts.update(r.body_tokens)
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    delimiters = frozenset(delimiters)
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    kept += sorted(d for d in delimiters if d not in kept)
    return Vocab(list(RESERVED) + kept, delimiters)


class EncodedRecipe(NamedTuple):
    title: list[int]
    ingredients: list[list[int]]
    body: list[int]


@dataclass
class Batch:
    """Padded id arrays for a group of recipes; masks are 1 on real tokens."""

    items: list[EncodedRecipe]
    indices: list[int]
    title: np.ndarray
    title_mask: np.ndarray
    ingredients: np.ndarray
    ingredient_mask: np.ndarray
    body: np.ndarray
    body_mask: np.ndarray
    title_lengths: np.ndarray
    ingredient_counts: np.ndarray
    body_lengths: np.ndarray

    def __len__(self) -> int:
        return len(self.items)


def _pad(seqs: Sequence[Sequence[int]], pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    width = max((len(s) for s in seqs), default=0)
    ids = np.full((len(seqs), width), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=np.float64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


def collate(items: Sequence[EncodedRecipe], indices: Sequence[int] | None = None) -> Batch:
    items = list(items)
    title, title_mask = _pad([it.title for it in items])
    body, body_mask = _pad([it.body for it in items])
    n_ing = max((len(it.ingredients) for it in items), default=0)
    width = max((len(p) for it in items for p in it.ingredients), default=0)
    ing = np.zeros((len(items), n_ing, width), dtype=np.int64)
    ing_mask = np.zeros((len(items), n_ing, width))
    for i, it in enumerate(items):
        for j, p in enumerate(it.ingredients):
            ing[i, j, :len(p)] = p
            ing_mask[i, j, :len(p)] = 1.0
    return Batch(
        items=items,
        indices=list(indices) if indices is not None else list(range(len(items))),
        title=title, title_mask=title_mask,
        ingredients=ing, ingredient_mask=ing_mask,
        body=body, body_mask=body_mask,
        title_lengths=np.array([len(it.title) for it in items], dtype=np.int64),
        ingredient_counts=np.array([len(it.ingredients) for it in items], dtype=np.int64),
        body_lengths=np.array([len(it.body) for it in items], dtype=np.int64),
    )


def make_batches(corpus: Sequence[EncodedRecipe], size: int, seed: int | None = None) -> list[Batch]:
    """Bucket by (body length, ingredient count), cut into groups of ``size``.

    With a seed, ties inside a bucket and the order of the batches are shuffled
    deterministically; without one the order is the sorted bucket order.
    """
    if size < 1:
        raise ValueError("batch size must be >= 1")
    n = len(corpus)
    if seed is None:
        tiebreak = np.arange(n)
    else:
        rng = np.random.default_rng(seed)
        tiebreak = rng.permutation(n)
    order = sorted(range(n), key=lambda i: (len(corpus[i].body), len(corpus[i].ingredients), tiebreak[i]))
    groups = [order[i:i + size] for i in range(0, n, size)]
    if seed is not None:
        perm = rng.permutation(len(groups))
        groups = [groups[i] for i in perm]
    return [collate([corpus[i] for i in g], g) for g in groups]
