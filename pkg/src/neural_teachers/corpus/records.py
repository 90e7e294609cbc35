from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Sequence, TypeVar

DEFAULT_DELIMITERS = frozenset({".", "!", ";"})

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

Tok = TypeVar("Tok", bound=Hashable)


def tokenize(text: str) -> list[str]:
    """Lowercase, split punctuation off into its own tokens, split on whitespace."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class RecipeRecord:
    title_tokens: tuple[str, ...]
    ingredients: tuple[tuple[str, ...], ...]
    body_tokens: tuple[str, ...]
    # stage label per body sentence; only set by the synthetic generator
    stages: tuple[int, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.body_tokens:
            raise ValueError("recipe body is empty")
        if any(len(phrase) == 0 for phrase in self.ingredients):
            raise ValueError("empty ingredient phrase")

    @classmethod
    def from_text(cls, title: str, ingredients: Iterable[str], text: str,
                  stages: Sequence[int] | None = None) -> "RecipeRecord":
        phrases = tuple(tuple(tokenize(i)) for i in ingredients)
        return cls(
            tuple(tokenize(title)),
            tuple(p for p in phrases if p),
            tuple(tokenize(text)),
            tuple(stages) if stages is not None else None,
        )

    def to_json(self) -> dict:
        return {
            "title": " ".join(self.title_tokens),
            "ingredients": [" ".join(p) for p in self.ingredients],
            "text": " ".join(self.body_tokens),
        }


@dataclass(frozen=True)
class SegmentedDoc:
    sentences: tuple[tuple, ...]

    @property
    def lengths(self) -> tuple[int, ...]:
        return tuple(len(s) for s in self.sentences)

    def __len__(self) -> int:
        return len(self.sentences)

    def reversed(self) -> "SegmentedDoc":
        return SegmentedDoc(self.sentences[::-1])

    def window(self, start: int, length: int) -> "SegmentedDoc":
        return SegmentedDoc(self.sentences[start:start + length])

    def tokens(self) -> list:
        return [t for s in self.sentences for t in s]


def split_sentences(tokens: Sequence[Tok], delimiters: Iterable[Tok]) -> SegmentedDoc:
    """Close a sentence at every delimiter; a trailing undelimited run forms the last one.

    Sentences holding nothing but delimiters are dropped.
    """
    delims = set(delimiters)
    if not delims:
        raise ValueError("delimiter set is empty")
    sentences, current = [], []
    for tok in tokens:
        current.append(tok)
        if tok in delims:
            if any(t not in delims for t in current):
                sentences.append(tuple(current))
            current = []
    if current and any(t not in delims for t in current):
        sentences.append(tuple(current))
    return SegmentedDoc(tuple(sentences))


def read_corpus(path: str | Path) -> list[RecipeRecord]:
    """One JSON object per line: {"title", "ingredients", "text"}."""
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(RecipeRecord.from_text(obj["title"], obj["ingredients"], obj["text"]))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad record ({exc})") from exc
    return records


def write_corpus(records: Iterable[RecipeRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
