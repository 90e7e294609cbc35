"""Title- and ingredient-conditioned recipe generator.

Encoder: the title is a bag of embeddings ``g``; each ingredient phrase is a
bag of embeddings fed, in list order, to a bidirectional GRU whose two final
states form ``e``; the context is ``h_e = [g, e]``.

Decoder: a GRU whose state starts from a learned projection of ``h_e``. At each
step a sigmoid gate computed from the previous state and the current token
embedding scales ``h_e`` elementwise, and the gated context is appended to the
token embedding before the GRU update.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import tensor as T
from .core.layers import GruParams, dropout, embedding_table, glorot, gru_step, masked_update, zeros
from .core.optim import Adam
from .core.params import load_arrays, named_tensors, to_arrays
from .core.tensor import Tape, Tensor, backward
from .corpus.vocab import Batch, EncodedRecipe, collate, make_batches

log = logging.getLogger(__name__)

BOS_ID, EOS_ID = 2, 3


@dataclass
class GeneratorConfig:
    embed_dim: int = 256
    enc_hidden: int = 256
    dec_hidden: int = 256
    dropout: float = 0.3
    bag_mode: str = "mean"
    beta: float = 2.0
    max_len: int = 150
    lr: float = 3e-4
    epochs: int = 30
    batch_size: int = 32
    patience: int | None = None
    scheduled_sampling: bool = True
    ss_step: float = 0.05
    ss_every: int = 5
    ss_cap: float = 0.5
    clip_norm: float | None = None


@dataclass
class GeneratorParams:
    title_emb: Tensor
    ingr_emb: Tensor
    text_emb: Tensor
    empty_ingredient: Tensor
    enc_fwd: GruParams
    enc_bwd: GruParams
    dec: GruParams
    gate_W1: Tensor
    gate_W2: Tensor
    gate_b1: Tensor
    init_W: Tensor
    init_b: Tensor
    out_W: Tensor
    out_b: Tensor
    bag_mode: str = "mean"
    dropout: float = 0.3

    @classmethod
    def init(cls, vocab_size: int, config: GeneratorConfig, rng: np.random.Generator) -> "GeneratorParams":
        d, he, hd = config.embed_dim, config.enc_hidden, config.dec_hidden
        ctx = d + 2 * he
        return cls(
            title_emb=embedding_table(rng, vocab_size, d),
            ingr_emb=embedding_table(rng, vocab_size, d),
            text_emb=embedding_table(rng, vocab_size, d),
            empty_ingredient=embedding_table(rng, 1, d),
            enc_fwd=GruParams.init(d, he, rng),
            enc_bwd=GruParams.init(d, he, rng),
            dec=GruParams.init(d + ctx, hd, rng),
            gate_W1=glorot(rng, hd, ctx),
            gate_W2=glorot(rng, d, ctx),
            gate_b1=zeros(ctx),
            init_W=glorot(rng, ctx, hd),
            init_b=zeros(hd),
            out_W=glorot(rng, hd, vocab_size),
            out_b=zeros(vocab_size),
            bag_mode=config.bag_mode,
            dropout=config.dropout,
        )

    @property
    def vocab_size(self) -> int:
        return self.out_W.shape[1]

    @property
    def context_size(self) -> int:
        return self.gate_b1.shape[0]

    def clone(self) -> "GeneratorParams":
        return copy.deepcopy(self)


@dataclass
class EncodedContext:
    g: Tensor
    e: Tensor
    h_e: Tensor

    def __len__(self) -> int:
        return self.h_e.shape[0]


@dataclass
class DecodeResult:
    tokens: list[int]
    log_probs: list[float]
    reason: str  # "eos" | "max_len"

    @property
    def body(self) -> list[int]:
        """Tokens without the terminating EOS."""
        return self.tokens[:-1] if self.reason == "eos" else list(self.tokens)


def _as_batch(items) -> Batch:
    if isinstance(items, Batch):
        return items
    if isinstance(items, EncodedRecipe):
        return collate([items])
    return collate(list(items))


def _bidirectional(bags: Tensor, rows: list[list[int]], p: GeneratorParams) -> Tensor:
    n = len(rows)
    width = max(len(r) for r in rows)
    fwd = np.full((n, width), -1, dtype=np.int64)
    bwd = np.full((n, width), -1, dtype=np.int64)
    for i, r in enumerate(rows):
        fwd[i, :len(r)] = r
        bwd[i, :len(r)] = r[::-1]
    outs = []
    for cell, idx in ((p.enc_fwd, fwd), (p.enc_bwd, bwd)):
        h = Tensor(np.zeros((n, cell.hidden_size)))
        for t in range(width):
            col = idx[:, t]
            h = masked_update(h, gru_step(T.take_rows(bags, col), h, cell), col >= 0)
        outs.append(h)
    return T.concat(outs, axis=1)


def encode_inputs(items, p: GeneratorParams, training: bool = False,
                  rng: np.random.Generator | None = None) -> EncodedContext:
    """Context vectors for one recipe, a list of recipes or a Batch."""
    batch = _as_batch(items)
    g = T.embed_bag(p.title_emb, [it.title for it in batch.items], p.bag_mode)
    phrases = [ph for it in batch.items for ph in it.ingredients]
    marker = len(phrases)
    rows, k = [], 0
    for it in batch.items:
        if it.ingredients:
            rows.append(list(range(k, k + len(it.ingredients))))
            k += len(it.ingredients)
        else:
            rows.append([marker])
    parts = [p.empty_ingredient]
    if phrases:
        parts.insert(0, T.embed_bag(p.ingr_emb, phrases, p.bag_mode))
    bags = dropout(T.concat(parts, axis=0), p.dropout, training, rng)
    e = _bidirectional(bags, rows, p)
    return EncodedContext(g, e, T.concat([g, e], axis=1))


def initial_state(ctx: EncodedContext, p: GeneratorParams) -> Tensor:
    return ctx.h_e @ p.init_W + p.init_b


def decode_step(x_t, h_prev, ctx: EncodedContext, p: GeneratorParams, training: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Gated context injection then one decoder GRU step; returns (logits, hidden)."""
    a = T.sigmoid(h_prev @ p.gate_W1 + x_t @ p.gate_W2 + p.gate_b1)
    z = a * ctx.h_e
    h = gru_step(T.concat([x_t, z], axis=-1), h_prev, p.dec)
    logits = dropout(h, p.dropout, training, rng) @ p.out_W + p.out_b
    return logits, h


def _embed_tokens(ids: np.ndarray, p: GeneratorParams, training: bool, rng) -> Tensor:
    return dropout(T.embedding(p.text_emb, ids), p.dropout, training, rng)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of a (B, V) probability matrix (inverse CDF)."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def gold_targets(batch: Batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(inputs, targets, mask): inputs start with BOS, targets end with EOS."""
    n, width = batch.body.shape
    inputs = np.zeros((n, width + 1), dtype=np.int64)
    targets = np.zeros((n, width + 1), dtype=np.int64)
    mask = np.zeros((n, width + 1))
    for i, it in enumerate(batch.items):
        L = len(it.body)
        inputs[i, 0] = BOS_ID
        inputs[i, 1:L + 1] = it.body
        targets[i, :L] = it.body
        targets[i, L] = EOS_ID
        mask[i, :L + 1] = 1.0
    return inputs, targets, mask


def batch_mle_loss(items, p: GeneratorParams, schedule_rate: float = 0.0,
                   rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """Mean over recipes of the summed next-token NLL (EOS included).

    With ``schedule_rate`` > 0 each input token after BOS is replaced, with that
    probability, by a draw from the model's own previous-step distribution.
    """
    batch = _as_batch(items)
    if schedule_rate > 0.0 and rng is None:
        raise ValueError("scheduled sampling needs an rng")
    inputs, targets, mask = gold_targets(batch)
    ctx = encode_inputs(batch, p, training, rng)
    h = initial_state(ctx, p)
    total = None
    prev_probs = None
    n = len(batch)
    for t in range(inputs.shape[1]):
        if not mask[:, t].any():
            break
        tok = inputs[:, t]
        if t > 0 and schedule_rate > 0.0:
            swap = rng.random(n) < schedule_rate
            if swap.any():
                tok = np.where(swap, sample_categorical(prev_probs, rng), tok)
        logits, h = decode_step(_embed_tokens(tok, p, training, rng), h, ctx, p, training, rng)
        if schedule_rate > 0.0:
            prev_probs = _softmax_rows(logits.data)
        nll = T.pick(T.log_softmax(logits), targets[:, t]) * (-mask[:, t])
        step = T.sum(nll)
        total = step if total is None else total + step
    return total * (1.0 / n)


def mle_loss(record: EncodedRecipe, p: GeneratorParams, schedule_rate: float = 0.0,
             rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    if len(record.body) < 1:
        raise ValueError("recipe body is empty")
    return batch_mle_loss([record], p, schedule_rate, rng, training)


def per_record_nll(items, p: GeneratorParams) -> np.ndarray:
    """Inference-mode L_mle of every recipe, no gradients."""
    batch = _as_batch(items)
    inputs, targets, mask = gold_targets(batch)
    ctx = encode_inputs(batch, p)
    h = initial_state(ctx, p)
    out = np.zeros(len(batch))
    rows = np.arange(len(batch))
    for t in range(inputs.shape[1]):
        logits, h = decode_step(T.embedding(p.text_emb, inputs[:, t]), h, ctx, p)
        lp = T._log_softmax(logits.data, -1)
        out -= lp[rows, targets[:, t]] * mask[:, t]
    return out


def mean_nll(items: Sequence[EncodedRecipe], p: GeneratorParams, batch_size: int = 64) -> float:
    items = list(items)
    if not items:
        raise ValueError("empty evaluation set")
    total = 0.0
    for i in range(0, len(items), batch_size):
        total += per_record_nll(items[i:i + batch_size], p).sum()
    return float(total / len(items))


def schedule_rate(epoch: int, step: float = 0.05, every: int = 5, cap: float = 0.5) -> float:
    """Scheduled-sampling probability: +``step`` every ``every`` epochs, capped."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return min(step * (epoch // every), cap)


def _decode(ctx: EncodedContext, p: GeneratorParams, max_len: int, choose) -> list[DecodeResult]:
    n = len(ctx)
    h = initial_state(ctx, p)
    tok = np.full(n, BOS_ID, dtype=np.int64)
    results = [DecodeResult([], [], "max_len") for _ in range(n)]
    live = np.ones(n, dtype=bool)
    for _ in range(max_len):
        logits, h = decode_step(T.embedding(p.text_emb, tok), h, ctx, p)
        tok, lp = choose(logits.data)
        for i in np.flatnonzero(live):
            results[i].tokens.append(int(tok[i]))
            results[i].log_probs.append(float(lp[i]))
            if tok[i] == EOS_ID:
                results[i].reason = "eos"
                live[i] = False
        if not live.any():
            break
    return results


def sample_decode(ctx: EncodedContext, p: GeneratorParams, beta: float, max_len: int,
                  rng: np.random.Generator) -> list[DecodeResult]:
    """Ancestral sampling from softmax(beta * logits); log-probs are under that tempered distribution."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    rows = np.arange(len(ctx))

    def choose(logits):
        lp = T._log_softmax(beta * logits, -1)
        tok = sample_categorical(np.exp(lp), rng)
        return tok, lp[rows, tok]

    return _decode(ctx, p, max_len, choose)


def greedy_decode(ctx: EncodedContext, p: GeneratorParams, max_len: int,
                  beta: float = 1.0) -> list[DecodeResult]:
    """Argmax decoding, ties to the lowest id; log-probs under softmax(beta * logits)."""
    rows = np.arange(len(ctx))

    def choose(logits):
        tok = np.argmax(logits, axis=1)
        lp = T._log_softmax(beta * logits, -1)
        return tok, lp[rows, tok]

    return _decode(ctx, p, max_len, choose)


def token_log_probs(ctx: EncodedContext, p: GeneratorParams, seqs: Sequence[Sequence[int]],
                    beta: float = 1.0) -> tuple[list[Tensor], np.ndarray]:
    """Differentiable log P(y_t | y_<t) under softmax(beta * logits) along given token paths.

    Returns one (B,) tensor per step and the (B, T) mask of real positions.
    """
    n = len(seqs)
    width = max((len(s) for s in seqs), default=0)
    inputs = np.full((n, width), BOS_ID, dtype=np.int64)
    targets = np.zeros((n, width), dtype=np.int64)
    mask = np.zeros((n, width))
    for i, s in enumerate(seqs):
        inputs[i, 1:len(s)] = s[:-1]
        targets[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    h = initial_state(ctx, p)
    steps = []
    for t in range(width):
        logits, h = decode_step(T.embedding(p.text_emb, inputs[:, t]), h, ctx, p)
        steps.append(T.pick(T.log_softmax(logits * beta), targets[:, t]))
    return steps, mask


def epoch_batch_seed(seed: int, epoch: int) -> int:
    return seed * 100_003 + epoch


@dataclass
class PretrainResult:
    params: GeneratorParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def dev_losses(self) -> list[float]:
        return [h["dev_loss"] for h in self.history]


def pretrain(train: Sequence[EncodedRecipe], dev: Sequence[EncodedRecipe], vocab_size: int,
             config: GeneratorConfig, seed: int = 0, init: GeneratorParams | None = None) -> PretrainResult:
    """Adam on the mean L_mle with scheduled sampling; best dev-loss parameters win.

    ``init`` continues from existing parameters (which are copied, not mutated).
    """
    if not train:
        raise ValueError("empty training corpus")
    p = init.clone() if init is not None else GeneratorParams.init(vocab_size, config, np.random.default_rng(seed))
    for t in named_tensors(p).values():
        t.requires_grad = True
    train_rng = np.random.default_rng([seed, 2])
    opt = Adam(named_tensors(p), lr=config.lr, clip_norm=config.clip_norm)
    best = mean_nll(dev, p)
    result = PretrainResult(p, [{"epoch": 0, "train_loss": float("nan"), "dev_loss": best, "ss_rate": 0.0}])
    best_arrays = to_arrays(p)
    stale = 0
    for epoch in range(1, config.epochs + 1):
        rate = schedule_rate(epoch - 1, config.ss_step, config.ss_every, config.ss_cap) \
            if config.scheduled_sampling else 0.0
        total, count = 0.0, 0
        for batch in make_batches(list(train), config.batch_size, seed=epoch_batch_seed(seed, epoch)):
            with Tape() as tape:
                loss = batch_mle_loss(batch, p, rate, train_rng, training=True)
            backward(tape, loss)
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        dev_loss = mean_nll(dev, p)
        result.history.append({"epoch": epoch, "train_loss": total / count, "dev_loss": dev_loss, "ss_rate": rate})
        log.info("pretrain epoch %d train %.4f dev %.4f ss %.2f", epoch, total / count, dev_loss, rate)
        if dev_loss < best:
            best, best_arrays, stale = dev_loss, to_arrays(p), 0
            result.best_epoch = epoch
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                break
    load_arrays(p, best_arrays)
    return result
