"""Action / state-change lexicon: one ``lemma<TAB>action<TAB>CAT,CAT`` entry per line."""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator

STATE_CHANGES = ("LOCATION", "COMPOSITION", "COOKEDNESS", "TEMPERATURE", "SHAPE", "CLEANLINESS")
_VOWELS = set("aeiou")


class LexiconError(ValueError):
    pass


@dataclass(frozen=True)
class LexiconEntry:
    action: str
    state_changes: frozenset[str]


def stem_candidates(token: str) -> list[str]:
    """The token plus the lemmas it could inflect from under s/es/ed/ing stripping.

    ``stirring`` -> stirr, stir, stirre; ``baked`` -> bak, bake; ``mashes`` -> mash, mashe.
    """
    token = token.lower()
    out = [token]
    for suffix in ("ing", "ed", "es", "s"):
        if token.endswith(suffix) and len(token) - len(suffix) >= 2:
            base = token[: -len(suffix)]
            out.append(base)
            if suffix in ("ing", "ed"):
                out.append(base + "e")
                if len(base) >= 3 and base[-1] == base[-2] and base[-1] not in _VOWELS:
                    out.append(base[:-1])
            if suffix == "ed" and base.endswith("i"):
                out.append(base[:-1] + "y")
    seen, uniq = set(), []
    for c in out:
        if c not in seen:
            seen.add(c)
            uniq.append(c)
    return uniq


class EventLexicon:
    def __init__(self, entries: dict[str, LexiconEntry] | None = None):
        self.entries: dict[str, LexiconEntry] = {}
        for lemma, entry in (entries or {}).items():
            self.add(lemma, entry.action, entry.state_changes)

    def add(self, lemma: str, action: str, state_changes) -> None:
        bad = sorted(set(state_changes) - set(STATE_CHANGES))
        if bad:
            raise LexiconError(f"unknown state-change categories {bad}")
        self.entries[lemma.lower()] = LexiconEntry(action, frozenset(state_changes))

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, lemma: str) -> bool:
        return lemma in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self.entries))

    def __eq__(self, other) -> bool:
        return isinstance(other, EventLexicon) and self.entries == other.entries

    def match(self, token: str) -> str | None:
        """Lemma matched by ``token``; the longest wins, then the lexicographically first."""
        hits = [c for c in stem_candidates(token) if c in self.entries]
        if not hits:
            return None
        return min(hits, key=lambda c: (-len(c), c))

    def action_of(self, token: str) -> str | None:
        lemma = self.match(token)
        return None if lemma is None else self.entries[lemma].action

    def state_changes_of_action(self, action: str) -> frozenset[str]:
        found = [e.state_changes for e in self.entries.values() if e.action == action]
        if not found:
            raise KeyError(f"action {action!r} is not in the lexicon")
        return frozenset().union(*found)


def parse_lexicon(lines, source: str = "<lexicon>") -> EventLexicon:
    lex = EventLexicon()
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise LexiconError(f"{source}:{lineno}: expected 'lemma<TAB>action<TAB>categories'")
        lemma, action = parts[0].strip(), parts[1].strip()
        cats = [c.strip().upper() for c in parts[2].split(",")] if len(parts) == 3 else []
        cats = [c for c in cats if c]
        unknown = [c for c in cats if c not in STATE_CHANGES]
        if unknown:
            raise LexiconError(f"{source}:{lineno}: unknown state-change category {', '.join(unknown)}")
        if not lemma or not action:
            raise LexiconError(f"{source}:{lineno}: empty lemma or action")
        lex.add(lemma, action, cats)
    return lex


def load_lexicon(path: str | Path) -> EventLexicon:
    with open(path, encoding="utf-8") as f:
        return parse_lexicon(f, str(path))


def save_lexicon(lex: EventLexicon, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for lemma in lex:
            e = lex.entries[lemma]
            f.write(f"{lemma}\t{e.action}\t{','.join(sorted(e.state_changes))}\n")


def sample_lexicon_path() -> Path:
    return Path(str(resources.files("neural_teachers") / "data" / "sample_lexicon.tsv"))


def sample_lexicon() -> EventLexicon:
    return load_lexicon(sample_lexicon_path())
