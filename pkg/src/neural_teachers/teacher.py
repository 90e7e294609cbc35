"""Sentence-ordering teachers.

A teacher embeds each sentence as the sum of its word embeddings and folds a
GRU over the sentence vectors. Training pushes the encoding of a document (or
of a window of it) read forwards away from the encoding of the same sentences
read backwards, by minimising their cosine similarity. The absolute teacher
trains on whole documents, the relative teacher on sampled windows.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import tensor as T
from .core.layers import GruParams, dropout, embedding_table, gru_step, masked_update
from .core.optim import Adam
from .core.params import freeze, named_tensors, to_arrays, load_arrays
from .core.tensor import Tape, Tensor, backward
from .corpus.records import SegmentedDoc

log = logging.getLogger(__name__)

KINDS = ("absolute", "relative")

Sentence = Sequence[int]


@dataclass
class TeacherConfig:
    kind: str = "relative"
    embed_dim: int = 100
    hidden: int = 100
    dropout: float = 0.3
    lr: float = 1e-3
    epochs: int = 20
    patience: int = 5
    batch_size: int = 32
    l_min: int = 3
    l_max: int = 6
    samples_per_doc: int = 20


@dataclass
class TeacherParams:
    embedding: Tensor
    gru: GruParams
    kind: str = "relative"
    dropout: float = 0.3

    @classmethod
    def init(cls, vocab_size: int, config: TeacherConfig, rng: np.random.Generator) -> "TeacherParams":
        if config.kind not in KINDS:
            raise ValueError(f"teacher kind must be one of {KINDS}, got {config.kind!r}")
        return cls(
            embedding=embedding_table(rng, vocab_size, config.embed_dim),
            gru=GruParams.init(config.embed_dim, config.hidden, rng),
            kind=config.kind,
            dropout=config.dropout,
        )

    @property
    def hidden(self) -> int:
        return self.gru.hidden_size


@dataclass(frozen=True)
class SubsequenceSample:
    start: int
    length: int


def encode_sentence_bow(sentence: Sentence, p: TeacherParams, training: bool = False,
                        rng: np.random.Generator | None = None) -> Tensor:
    if len(sentence) == 0:
        raise ValueError("cannot encode an empty sentence")
    s = T.embed_bag(p.embedding, [list(sentence)], "sum")
    return _row(dropout(s, p.dropout, training, rng))


def _row(x: Tensor) -> Tensor:
    # (1, D) -> (D,) through a differentiable reduction over the single row
    return T.sum(x, axis=0)


def encode_sequence(sentence_vectors, p: TeacherParams) -> Tensor:
    """Fold the GRU over sentence vectors from a zero state; return the final state."""
    vecs = list(sentence_vectors) if not isinstance(sentence_vectors, Tensor) else [
        T.take_rows(sentence_vectors, [i]) for i in range(sentence_vectors.shape[0])]
    if not vecs:
        raise ValueError("cannot encode an empty sentence sequence")
    h = Tensor(np.zeros(p.hidden))
    for v in vecs:
        v = T.as_tensor(v)
        if v.ndim == 2:
            v = _row(v)
        h = gru_step(v, h, p.gru)
    return h


def _sentence_table(seqs: Sequence[Sequence[Sentence]]) -> tuple[list[list[int]], list[list[int]]]:
    """Deduplicate sentences; return (unique bags, per-sequence row indices)."""
    index: dict[tuple, int] = {}
    bags: list[list[int]] = []
    rows = []
    for seq in seqs:
        r = []
        for s in seq:
            key = tuple(s)
            if not key:
                raise ValueError("cannot encode an empty sentence")
            if key not in index:
                index[key] = len(bags)
                bags.append(list(key))
            r.append(index[key])
        rows.append(r)
    return bags, rows


def _fold(sent_vecs: Tensor, rows: list[list[int]], p: TeacherParams) -> Tensor:
    n = len(rows)
    width = max((len(r) for r in rows), default=0)
    idx = np.full((n, width), -1, dtype=np.int64)
    for i, r in enumerate(rows):
        idx[i, :len(r)] = r
    h = Tensor(np.zeros((n, p.hidden)))
    for t in range(width):
        col = idx[:, t]
        x = T.take_rows(sent_vecs, col)
        h = masked_update(h, gru_step(x, h, p.gru), col >= 0)
    return h


def encode_batch(seqs: Sequence[Sequence[Sentence]], p: TeacherParams, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Encodings f(S) for many sentence sequences at once, shape (len(seqs), hidden).

    Empty sequences encode to the zero vector.
    """
    bags, rows = _sentence_table(seqs)
    if not bags:
        return Tensor(np.zeros((len(seqs), p.hidden)))
    vecs = dropout(T.embed_bag(p.embedding, bags, "sum"), p.dropout, training, rng)
    return _fold(vecs, rows, p)


def encode_many(seqs: Sequence[Sequence[Sentence]], p: TeacherParams) -> np.ndarray:
    """Inference-mode encodings as a plain array."""
    return encode_batch(seqs, p).data


def encode_pairs(slices: Sequence[Sequence[Sentence]], p: TeacherParams, training: bool = False,
                 rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Forward and reverse encodings of each slice; both orders share dropout masks."""
    bags, rows = _sentence_table(slices)
    n = len(slices)
    vecs = dropout(T.embed_bag(p.embedding, bags, "sum"), p.dropout, training, rng)
    both = _fold(vecs, rows + [r[::-1] for r in rows], p)
    return T.take_rows(both, np.arange(n)), T.take_rows(both, np.arange(n, 2 * n))


def teacher_loss(doc_or_window, p: TeacherParams, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """cos(f(forward), f(reverse)) of one document or window."""
    sentences = doc_or_window.sentences if isinstance(doc_or_window, SegmentedDoc) else doc_or_window
    if len(sentences) == 0:
        raise ValueError("teacher_loss needs at least one sentence")
    fwd, rev = encode_pairs([sentences], p, training, rng)
    return T.sum(T.cosine(fwd, rev))


def batch_loss(slices: Sequence[Sequence[Sentence]], p: TeacherParams, training: bool = False,
               rng: np.random.Generator | None = None) -> tuple[Tensor, int]:
    """Mean order loss over slices; zero-norm encodings are skipped.

    Returns the loss tensor and the number of slices that contributed.
    """
    fwd, rev = encode_pairs(slices, p, training, rng)
    usable = (np.linalg.norm(fwd.data, axis=1) > 0) & (np.linalg.norm(rev.data, axis=1) > 0)
    n = int(usable.sum())
    if n == 0:
        return Tensor(0.0), 0
    cos = T.cosine(fwd, rev)
    return T.sum(cos * (usable / n)), n


def sample_subsequences(doc, l_min: int, l_max: int, k: int,
                        rng: np.random.Generator) -> list[SubsequenceSample]:
    """``k`` windows drawn with replacement: length uniform over the feasible
    lengths, then start uniform over the valid positions.

    Documents shorter than ``l_min`` sentences yield nothing.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if l_min > l_max or l_min < 1:
        raise ValueError(f"bad window bounds [{l_min}, {l_max}]")
    n = doc if isinstance(doc, int) else len(doc)
    hi = min(l_max, n)
    if n < l_min:
        return []
    out = []
    for _ in range(k):
        length = int(rng.integers(l_min, hi + 1))
        start = int(rng.integers(0, n - length + 1))
        out.append(SubsequenceSample(start, length))
    return out


def _training_slices(docs: Sequence[SegmentedDoc], config: TeacherConfig,
                     rng: np.random.Generator) -> list[tuple]:
    if config.kind == "absolute":
        return [d.sentences for d in docs if len(d) >= 2]
    out = []
    for d in docs:
        for s in sample_subsequences(d, config.l_min, config.l_max, config.samples_per_doc, rng):
            out.append(d.sentences[s.start:s.start + s.length])
    return [s for s in out if len(s) >= 2]


def eligible_docs(docs: Sequence[SegmentedDoc], config: TeacherConfig) -> list[SegmentedDoc]:
    floor = 2 if config.kind == "absolute" else max(config.l_min, 2)
    return [d for d in docs if len(d) >= floor]


def mean_loss(slices, p: TeacherParams, chunk: int = 1024) -> float:
    total, count = 0.0, 0
    for i in range(0, len(slices), chunk):
        loss, n = batch_loss(slices[i:i + chunk], p)
        total += loss.item() * n
        count += n
    return total / count if count else 0.0


@dataclass
class TeacherResult:
    params: TeacherParams
    history: list[dict] = field(default_factory=list)
    initial_dev_loss: float = float("nan")
    best_epoch: int = 0


def train_teacher(train_docs: Sequence[SegmentedDoc], dev_docs: Sequence[SegmentedDoc], vocab_size: int,
                  config: TeacherConfig, seed: int = 0) -> TeacherResult:
    """Adam on the mean order loss; keeps the parameters with the best dev loss.

    Stops early after ``config.patience`` epochs without dev improvement. The
    returned parameters are frozen.
    """
    train_docs = eligible_docs(train_docs, config)
    if not train_docs:
        raise ValueError("no training documents left after the sentence-count filter")
    rng = np.random.default_rng(seed)
    p = TeacherParams.init(vocab_size, config, rng)
    dev_rng = np.random.default_rng([seed, 1])
    dev_slices = _training_slices(eligible_docs(dev_docs, config), config, dev_rng) or \
        _training_slices(train_docs[: max(1, len(train_docs) // 10)], config, dev_rng)
    opt = Adam(named_tensors(p), lr=config.lr)
    best = mean_loss(dev_slices, p)
    result = TeacherResult(p, initial_dev_loss=best)
    best_arrays = to_arrays(p)
    stale = 0
    log.info("teacher[%s] initial dev loss %.4f", config.kind, best)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_docs))
        total, count = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            docs = [train_docs[j] for j in order[i:i + config.batch_size]]
            slices = _training_slices(docs, config, rng)
            if not slices:
                continue
            with Tape() as tape:
                loss, n = batch_loss(slices, p, training=True, rng=rng)
            if n == 0:
                continue
            backward(tape, loss)
            opt.step()
            total += loss.item() * n
            count += n
        dev = mean_loss(dev_slices, p)
        result.history.append({"epoch": epoch, "train_loss": total / max(count, 1), "dev_loss": dev})
        log.info("teacher[%s] epoch %d train %.4f dev %.4f", config.kind, epoch, total / max(count, 1), dev)
        if dev < best:
            best, best_arrays, stale = dev, to_arrays(p), 0
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                break
    load_arrays(p, best_arrays)
    freeze(p)
    return result
