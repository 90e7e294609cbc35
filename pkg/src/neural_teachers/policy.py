"""Self-critical policy learning against frozen ordering teachers.

A batch step samples one recipe per input at the exploration temperature and
decodes a greedy baseline, scores both with the configured reward, spreads
the rewards over tokens, and minimises a convex mix of the policy-gradient
loss and the maximum-likelihood loss.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import generator as G
from .core import tensor as T
from .core.optim import Adam
from .core.params import checksum, load_arrays, named_tensors, to_arrays
from .core.tensor import Tape, Tensor, backward
from .corpus.records import split_sentences
from .corpus.vocab import EncodedRecipe, make_batches
from .evaluation import bleu, rouge_l
from .teacher import TeacherParams, encode_many

log = logging.getLogger(__name__)

REWARD_KINDS = ("AO", "RO", "RO+B4", "BLEU-1", "BLEU-4", "ROUGE-L")
TEACHER_KIND = {"AO": "absolute", "RO": "relative", "RO+B4": "relative"}

Sentences = Sequence[Sequence[int]]


class TeacherMismatch(ValueError):
    """The teacher does not fit the reward kind or the vocabulary."""


@dataclass
class PolicyConfig:
    reward: str = "RO"
    gamma: float = 0.97
    l_min: int = 3
    l_max: int = 6
    lr: float = 3e-5
    beta: float = 2.0
    max_len: int = 150
    epochs: int = 10
    batch_size: int = 32
    clip_norm: float | None = None

    def validate(self) -> None:
        if self.reward not in REWARD_KINDS:
            raise ValueError(f"reward must be one of {REWARD_KINDS}, got {self.reward!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 1 <= self.l_min <= self.l_max:
            raise ValueError(f"need 1 <= l_min <= l_max, got [{self.l_min}, {self.l_max}]")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")

    @property
    def needs_teacher(self) -> bool:
        return self.reward in TEACHER_KIND


@dataclass
class RewardTrace:
    token_rewards: np.ndarray
    sentence_index: np.ndarray
    sentence_rewards: np.ndarray | None = None
    sequence_reward: float | None = None

    def __len__(self) -> int:
        return len(self.token_rewards)

    @property
    def mean(self) -> float:
        return float(self.token_rewards.mean()) if len(self) else 0.0


# ---------------------------------------------------------------- segmentation

def segment_tokens(tokens: Sequence[int], delimiter_ids, eos_id: int = G.EOS_ID
                   ) -> tuple[list[tuple[int, ...]], np.ndarray]:
    """Split decoded tokens into sentences and give each token its sentence index.

    A sentence closes at each delimiter. A delimiter with no words since the
    last one joins the previous sentence (or the next one when it leads the
    text); EOS and any unterminated tail join the last sentence. Text with no
    words yields no sentences and every index 0.
    """
    delims = set(delimiter_ids)
    sentences: list[list[int]] = []
    index = np.zeros(len(tokens), dtype=np.int64)
    buf: list[int] = []
    buf_pos: list[int] = []
    has_word = False
    for pos, tok in enumerate(tokens):
        if tok == eos_id:
            break
        if tok in delims and not has_word and sentences:
            sentences[-1].append(tok)
            index[pos] = len(sentences) - 1
            continue
        buf.append(tok)
        buf_pos.append(pos)
        if tok not in delims:
            has_word = True
        elif has_word:
            index[buf_pos] = len(sentences)
            sentences.append(buf)
            buf, buf_pos, has_word = [], [], False
    if has_word:
        index[buf_pos] = len(sentences)
        sentences.append(buf)
    elif buf_pos:
        index[buf_pos] = max(len(sentences) - 1, 0)
        if sentences:
            sentences[-1].extend(buf)
    last = max(len(sentences) - 1, 0)
    for pos in range(len(tokens)):
        if tokens[pos] == eos_id:
            index[pos:] = last
            break
    return [tuple(s) for s in sentences], index


def gold_sentences(body: Sequence[int], delimiter_ids) -> list[tuple[int, ...]]:
    return list(split_sentences(list(body), set(delimiter_ids)).sentences)


# ---------------------------------------------------------------- teacher rewards

def _cos_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.sqrt(np.sum(a * a, axis=-1))
    nb = np.sqrt(np.sum(b * b, axis=-1))
    denom = na * nb
    dot = np.sum(a * b, axis=-1)
    return np.divide(dot, denom, out=np.zeros_like(dot), where=denom > 0)


class _Encoder:
    """Deduplicating batch front end to a frozen teacher."""

    def __init__(self, teacher: TeacherParams):
        self.teacher = teacher
        self.keys: dict[tuple, int] = {}
        self.seqs: list[tuple] = []

    def add(self, sentences: Sentences) -> int:
        key = tuple(tuple(s) for s in sentences)
        if key not in self.keys:
            self.keys[key] = len(self.seqs)
            self.seqs.append(key)
        return self.keys[key]

    def run(self) -> np.ndarray:
        if not self.seqs:
            return np.zeros((0, self.teacher.hidden))
        return encode_many(self.seqs, self.teacher)


def _difference(enc: np.ndarray, gen: int, fwd: int, rev: int) -> float:
    return float(_cos_rows(enc[gen], enc[fwd]) - _cos_rows(enc[gen], enc[rev]))


def reward_absolute_batch(gens: Sequence[Sentences], golds: Sequence[Sentences],
                          teacher: TeacherParams) -> np.ndarray:
    """cos(f(S'), f(S fwd)) - cos(f(S'), f(S rev)) for each pair; empty inputs score 0."""
    enc = _Encoder(teacher)
    ids = []
    for g, s in zip(gens, golds):
        if len(g) == 0 or len(s) == 0:
            ids.append(None)
            continue
        ids.append((enc.add(g), enc.add(s), enc.add(list(s)[::-1])))
    E = enc.run()
    return np.array([0.0 if i is None else _difference(E, *i) for i in ids])


def reward_absolute(generated: Sentences, gold: Sentences, teacher: TeacherParams) -> float:
    return float(reward_absolute_batch([generated], [gold], teacher)[0])


def _relative_windows(n_gen: int, n_gold: int, l_min: int, l_max: int):
    """Window start positions for each generated sentence j; None where gold has no sentence j."""
    out = []
    for j in range(n_gen):
        if j >= n_gold:
            out.append(None)
        else:
            out.append([max(0, j - ell + 1) for ell in range(l_min, l_max + 1)])
    return out


def reward_relative_batch(gens: Sequence[Sentences], golds: Sequence[Sentences], teacher: TeacherParams,
                          l_min: int, l_max: int) -> list[np.ndarray]:
    """Per-sentence rewards over trailing windows ending at each generated sentence.

    Sentence j averages, over window lengths l in [l_min, l_max], the
    forward-minus-reverse cosine gap of the generated window against the gold
    window at the same positions; windows are clipped at the first sentence.
    Sentences past the end of the gold document score 0.
    """
    enc = _Encoder(teacher)
    plan = []
    for g, s in zip(gens, golds):
        rows = []
        for j, starts in enumerate(_relative_windows(len(g), len(s), l_min, l_max)):
            if starts is None:
                rows.append(None)
                continue
            rows.append([(enc.add(g[lo:j + 1]), enc.add(s[lo:j + 1]), enc.add(list(s[lo:j + 1])[::-1]))
                         for lo in starts])
        plan.append(rows)
    E = enc.run()
    out = []
    for rows in plan:
        r = np.zeros(len(rows))
        for j, terms in enumerate(rows):
            if terms is not None:
                r[j] = sum(_difference(E, *t) for t in terms) / len(terms)
        out.append(r)
    return out


def reward_relative(generated: Sentences, gold: Sentences, teacher: TeacherParams,
                    l_min: int, l_max: int) -> np.ndarray:
    return reward_relative_batch([generated], [gold], teacher, l_min, l_max)[0]


# ---------------------------------------------------------------- credit assignment

def assign_credit(kind: str, sentence_index: np.ndarray, sequence_reward: float | None = None,
                  sentence_rewards: np.ndarray | None = None, bleu4: float | None = None) -> RewardTrace:
    """Token rewards: uniform for sequence-level kinds, per-sentence for relative
    kinds, and BLEU-4 plus the sentence reward for RO+B4."""
    idx = np.asarray(sentence_index, dtype=np.int64)
    n = len(idx)
    if kind in ("RO", "RO+B4"):
        sr = np.asarray(sentence_rewards, dtype=np.float64)
        tok = sr[idx] if len(sr) else np.zeros(n)
        if kind == "RO+B4":
            tok = bleu4 + tok
        return RewardTrace(tok, idx, sr, bleu4 if kind == "RO+B4" else None)
    if kind in REWARD_KINDS:
        return RewardTrace(np.full(n, float(sequence_reward)), idx, None, float(sequence_reward))
    raise ValueError(f"unknown reward kind {kind!r}")


def metric_reward(kind: str, generated: Sequence[int], gold: Sequence[int]) -> float:
    if kind == "BLEU-1":
        return bleu(generated, gold, 1)
    if kind in ("BLEU-4", "RO+B4"):
        return bleu(generated, gold, 4)
    if kind == "ROUGE-L":
        return rouge_l(generated, gold)
    raise ValueError(f"{kind!r} is not a metric reward")


class RewardModel:
    """Builds reward traces for decoded sequences of a batch."""

    def __init__(self, kind: str, teacher: TeacherParams | None, delimiter_ids, l_min: int = 3,
                 l_max: int = 6, eos_id: int = G.EOS_ID):
        if kind not in REWARD_KINDS:
            raise ValueError(f"unknown reward kind {kind!r}")
        if kind in TEACHER_KIND:
            if teacher is None:
                raise TeacherMismatch(f"reward {kind} needs a {TEACHER_KIND[kind]} teacher")
            if teacher.kind != TEACHER_KIND[kind]:
                raise TeacherMismatch(f"reward {kind} needs a {TEACHER_KIND[kind]} teacher, got {teacher.kind}")
        self.kind, self.teacher = kind, teacher
        self.delimiter_ids = tuple(sorted(delimiter_ids))
        self.l_min, self.l_max, self.eos_id = l_min, l_max, eos_id

    def traces(self, token_seqs: Sequence[Sequence[int]], golds: Sequence[Sequence[int]]) -> list[RewardTrace]:
        """``token_seqs`` are decoded tokens (EOS included if emitted); ``golds`` are gold bodies."""
        segs = [segment_tokens(t, self.delimiter_ids, self.eos_id) for t in token_seqs]
        bodies = [[x for x in t if x != self.eos_id] for t in token_seqs]
        gold_sents = [gold_sentences(b, self.delimiter_ids) for b in golds]
        out = []
        if self.kind == "AO":
            r = reward_absolute_batch([s for s, _ in segs], gold_sents, self.teacher)
            return [assign_credit("AO", idx, sequence_reward=v) for (_, idx), v in zip(segs, r)]
        if self.kind in ("RO", "RO+B4"):
            rel = reward_relative_batch([s for s, _ in segs], gold_sents, self.teacher, self.l_min, self.l_max)
            for (_, idx), sr, body, gold in zip(segs, rel, bodies, golds):
                b4 = metric_reward("BLEU-4", body, gold) if self.kind == "RO+B4" else None
                out.append(assign_credit(self.kind, idx, sentence_rewards=sr, bleu4=b4))
            return out
        for (_, idx), body, gold in zip(segs, bodies, golds):
            out.append(assign_credit(self.kind, idx, sequence_reward=metric_reward(self.kind, body, gold)))
        return out


# ---------------------------------------------------------------- objectives

def advantages(sampled: RewardTrace, greedy: RewardTrace) -> np.ndarray:
    """Sampled token rewards minus the greedy baseline at the same step; steps
    past the greedy length use the greedy mean."""
    n = len(sampled)
    base = np.full(n, greedy.mean)
    k = min(n, len(greedy))
    base[:k] = greedy.token_rewards[:k]
    return sampled.token_rewards - base


def self_critical_loss(step_log_probs: Sequence[Tensor], mask: np.ndarray, adv: Sequence[np.ndarray]) -> Tensor:
    """-sum_t adv_t log p(y_t), averaged over the batch.

    ``step_log_probs[t]`` holds the (B,) log-probabilities of the sampled
    tokens at step t; ``adv[i]`` the advantages of sequence i.
    """
    n = mask.shape[0]
    A = np.zeros_like(mask)
    for i, a in enumerate(adv):
        A[i, :len(a)] = a
    A *= mask
    total = Tensor(0.0)
    for t, lp in enumerate(step_log_probs):
        if A[:, t].any():
            total = total + T.sum(lp * (-A[:, t] / n))
    return total


def mixed_loss(l_rl, l_mle, gamma: float) -> Tensor:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return T.as_tensor(l_rl) * gamma + T.as_tensor(l_mle) * (1.0 - gamma)


def model_selection_score(bleu4: Sequence[float], ro_traces: Sequence[RewardTrace]) -> float:
    """Mean over examples of (BLEU-4 / T) * sum_t r_RO(y_t)."""
    if len(bleu4) == 0 or len(bleu4) != len(ro_traces):
        raise ValueError("need one BLEU-4 score per trace and at least one example")
    vals = [b / len(tr) * float(tr.token_rewards.sum()) if len(tr) else 0.0 for b, tr in zip(bleu4, ro_traces)]
    return float(np.mean(vals))


def exploit_detected(mean_len: float, dev_loss: float, pre_mean_len: float, pre_dev_loss: float) -> bool:
    """Generation length collapsed below half, or dev L_mle more than doubled."""
    return bool(mean_len < 0.5 * pre_mean_len or dev_loss > 2.0 * pre_dev_loss)


# ---------------------------------------------------------------- evaluation and training

@dataclass
class DevStats:
    score: float
    reward: float
    dev_loss: float
    mean_len: float
    metric: str

    def as_dict(self) -> dict:
        return asdict(self)


def selection_metric(kind: str) -> str:
    if kind in ("AO", "RO"):
        return f"mean_{kind}_reward"
    if kind == "RO+B4":
        return "mean_bleu4_x_ro"
    return kind


def evaluate_policy(p: G.GeneratorParams, dev: Sequence[EncodedRecipe], rewards: RewardModel,
                    max_len: int, batch_size: int = 64) -> DevStats:
    """Greedy-decode the dev set and score it with the run's selection rule."""
    if not dev:
        raise ValueError("empty dev set")
    ro_model = None
    if rewards.kind == "RO+B4":
        ro_model = RewardModel("RO", rewards.teacher, rewards.delimiter_ids, rewards.l_min, rewards.l_max)
    token_means, scores, lengths = [], [], []
    for i in range(0, len(dev), batch_size):
        chunk = list(dev[i:i + batch_size])
        results = G.greedy_decode(G.encode_inputs(chunk, p), p, max_len)
        seqs = [r.tokens for r in results]
        golds = [it.body for it in chunk]
        traces = rewards.traces(seqs, golds)
        token_means += [tr.mean for tr in traces]
        lengths += [len(r.body) for r in results]
        if rewards.kind == "RO+B4":
            ro = ro_model.traces(seqs, golds)
            b4 = [metric_reward("BLEU-4", r.body, g) for r, g in zip(results, golds)]
            scores += [b / len(t) * float(t.token_rewards.sum()) if len(t) else 0.0 for b, t in zip(b4, ro)]
        elif rewards.kind in ("AO", "RO"):
            scores += [tr.mean for tr in traces]
        else:
            scores += [tr.sequence_reward for tr in traces]
    return DevStats(
        score=float(np.mean(scores)), reward=float(np.mean(token_means)),
        dev_loss=G.mean_nll(dev, p), mean_len=float(np.mean(lengths)),
        metric=selection_metric(rewards.kind),
    )


@dataclass
class PolicyResult:
    params: G.GeneratorParams
    history: list[dict] = field(default_factory=list)
    batch_log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = float("-inf")
    selection_metric: str = ""

    @property
    def pretrained(self) -> dict:
        return self.history[0]

    @property
    def final(self) -> dict:
        return self.history[-1]

    @property
    def dev_losses(self) -> list[float]:
        return [h["dev_loss"] for h in self.history]

    @property
    def exploit_at_end(self) -> bool:
        return self.final["exploit"]


def train_policy(pretrained: G.GeneratorParams, teacher: TeacherParams | None, train: Sequence[EncodedRecipe],
                 dev: Sequence[EncodedRecipe], delimiter_ids, config: PolicyConfig, seed: int = 0) -> PolicyResult:
    """Fine-tune a copy of ``pretrained`` on gamma * L_rl + (1 - gamma) * L_mle.

    The maximum-likelihood term uses dropout and the training stream of
    random numbers exactly as MLE fine-tuning would; sampling draws from a
    separate stream, so gamma = 0 reproduces plain MLE fine-tuning. The
    teacher is read-only and checked unchanged at the end.
    """
    config.validate()
    if not train or not dev:
        raise ValueError("policy training needs non-empty train and dev sets")
    if teacher is not None and teacher.embedding.shape[0] != pretrained.vocab_size:
        raise TeacherMismatch(f"teacher vocabulary has {teacher.embedding.shape[0]} entries, "
                              f"generator has {pretrained.vocab_size}")
    rewards = RewardModel(config.reward, teacher, delimiter_ids, config.l_min, config.l_max)
    teacher_sum = checksum(teacher) if teacher is not None else None

    p = pretrained.clone()
    for t in named_tensors(p).values():
        t.requires_grad = True
    opt = Adam(named_tensors(p), lr=config.lr, clip_norm=config.clip_norm)
    train_rng = np.random.default_rng([seed, 2])
    sample_rng = np.random.default_rng([seed, 3])
    train = list(train)

    stats = evaluate_policy(p, dev, rewards, config.max_len)
    pre = stats
    result = PolicyResult(p, selection_metric=stats.metric)
    result.history.append({"epoch": 0, **stats.as_dict(), "exploit": False})
    result.best_score = stats.score
    best_arrays = to_arrays(p)
    step = 0
    for epoch in range(1, config.epochs + 1):
        for batch in make_batches(train, config.batch_size, seed=G.epoch_batch_seed(seed, epoch)):
            step += 1
            golds = [it.body for it in batch.items]
            ctx = G.encode_inputs(batch, p)
            sampled = G.sample_decode(ctx, p, config.beta, config.max_len, sample_rng)
            greedy = G.greedy_decode(ctx, p, config.max_len)
            s_tr = rewards.traces([r.tokens for r in sampled], golds)
            g_tr = rewards.traces([r.tokens for r in greedy], golds)
            adv = [advantages(a, b) for a, b in zip(s_tr, g_tr)]
            with Tape() as tape:
                l_mle = G.batch_mle_loss(batch, p, 0.0, train_rng, training=True)
                ctx = G.encode_inputs(batch, p)
                steps, mask = G.token_log_probs(ctx, p, [r.tokens for r in sampled], config.beta)
                l_rl = self_critical_loss(steps, mask, adv)
                loss = mixed_loss(l_rl, l_mle, config.gamma)
            backward(tape, loss)
            opt.step()
            entry = {"step": step, "mean_reward": float(np.mean([tr.mean for tr in s_tr])),
                     "L_rl": l_rl.item(), "L_mle": l_mle.item(), "mixed": loss.item()}
            result.batch_log.append(entry)
            log.debug("policy %s", entry)
        stats = evaluate_policy(p, dev, rewards, config.max_len)
        flag = exploit_detected(stats.mean_len, stats.dev_loss, pre.mean_len, pre.dev_loss)
        result.history.append({"epoch": epoch, **stats.as_dict(), "exploit": flag})
        log.info("policy epoch %d %s %.4f reward %.4f dev_loss %.4f len %.1f%s", epoch, stats.metric,
                 stats.score, stats.reward, stats.dev_loss, stats.mean_len, " EXPLOIT" if flag else "")
        if stats.score > result.best_score:
            result.best_score, result.best_epoch, best_arrays = stats.score, epoch, to_arrays(p)
    load_arrays(p, best_arrays)
    if teacher is not None and checksum(teacher) != teacher_sum:
        raise RuntimeError("teacher parameters changed during policy learning")
    return result
