"""Example-level BLEU and ROUGE-L over words, actions and state changes."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, fields
from typing import Hashable, Sequence

from .corpus.lexicon import EventLexicon

Seq = Sequence[Hashable]


def _ngrams(seq: Seq, k: int) -> Counter:
    return Counter(tuple(seq[i:i + k]) for i in range(len(seq) - k + 1))


def bleu(candidate: Seq, reference: Seq, n: int = 4, smooth: bool = True) -> float:
    """Sentence BLEU-n against one reference.

    Clipped k-gram precisions for k = 1..n, combined by geometric mean and
    scaled by the brevity penalty. With ``smooth``, precisions for k >= 2 get
    one added to numerator and denominator so short texts do not zero out.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    c, r = len(candidate), len(reference)
    if c == 0:
        return 0.0
    log_p = 0.0
    for k in range(1, n + 1):
        cand = _ngrams(candidate, k)
        ref = _ngrams(reference, k)
        matched = sum(min(v, ref[g]) for g, v in cand.items())
        total = max(c - k + 1, 0)
        if smooth and k >= 2:
            matched, total = matched + 1, total + 1
        if matched == 0:
            return 0.0
        log_p += math.log(matched / total)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / n)


def lcs_length(a: Seq, b: Seq) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Seq, reference: Seq, beta: float = 1.0) -> float:
    """LCS F-measure; ``beta`` weights recall over precision (1 = balanced)."""
    m = lcs_length(candidate, reference)
    if m == 0:
        return 0.0
    p, r = m / len(candidate), m / len(reference)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def extract_actions(tokens: Sequence[str], lexicon: EventLexicon) -> list[str]:
    """Action labels of the tokens that match a lexicon lemma, in token order."""
    out = []
    for tok in tokens:
        action = lexicon.action_of(tok)
        if action is not None:
            out.append(action)
    return out


def extract_state_changes(actions: Sequence[str], lexicon: EventLexicon) -> list[str]:
    """Each action's state-change categories, sorted, concatenated in action order."""
    out: list[str] = []
    for a in actions:
        out.extend(sorted(lexicon.state_changes_of_action(a)))
    return out


@dataclass(frozen=True)
class ScoreReport:
    bleu1: float
    bleu4: float
    rouge_l: float
    action_bleu1: float
    action_bleu4: float
    action_rouge_l: float
    state_bleu1: float
    state_bleu4: float
    state_rouge_l: float

    COLUMNS = ("BLEU-1", "BLEU-4", "R-L", "AB1", "AB4", "AR-L", "SCB1", "SCB4", "SCR-L")

    def values(self) -> list[float]:
        return [getattr(self, f.name) for f in fields(self)]

    def to_dict(self) -> dict[str, float]:
        """Column name -> score in [0, 1]."""
        return dict(zip(self.COLUMNS, self.values()))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    def format_table(self) -> str:
        """Header row and a row of scores x100 with two decimals, tab separated."""
        head = "\t".join(self.COLUMNS)
        row = "\t".join(f"{100 * v:.2f}" for v in self.values())
        return f"{head}\n{row}\n"


def score_example(generated: Sequence[str], gold: Sequence[str], lexicon: EventLexicon,
                  smooth: bool = True, rouge_beta: float = 1.0) -> list[float]:
    ga, ra = extract_actions(generated, lexicon), extract_actions(gold, lexicon)
    gs, rs = extract_state_changes(ga, lexicon), extract_state_changes(ra, lexicon)
    out = []
    for c, r in ((generated, gold), (ga, ra), (gs, rs)):
        out += [bleu(c, r, 1, smooth), bleu(c, r, 4, smooth), rouge_l(c, r, rouge_beta)]
    return out


def evaluate_corpus(generations: Sequence[Sequence[str]], golds: Sequence[Sequence[str]],
                    lexicon: EventLexicon, smooth: bool = True, rouge_beta: float = 1.0) -> ScoreReport:
    """Mean of example-level scores at the word, action and state-change level."""
    if len(generations) != len(golds):
        raise ValueError(f"{len(generations)} generations but {len(golds)} references")
    if not generations:
        raise ValueError("nothing to evaluate")
    totals = [0.0] * 9
    for g, r in zip(generations, golds):
        for i, v in enumerate(score_example(g, r, lexicon, smooth, rouge_beta)):
            totals[i] += v
    return ScoreReport(*(t / len(generations) for t in totals))
