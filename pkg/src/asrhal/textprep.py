"""Tokenisation, pronunciation lookup, vocabularies and corpus files."""

from __future__ import annotations

import hashlib
import logging
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)

# bracketed non-speech markers, e.g. [laughter], <noise>, {breath}
_SPECIAL = re.compile(r"[\[<{][^\]>}\s]*[\]>}]")
_APOS = "'’"


def _strip_punct(tok: str) -> str:
    chars = []
    n = len(tok)
    for i, ch in enumerate(tok):
        if unicodedata.category(ch).startswith("P"):
            # keep apostrophes with letters on both sides (don't, o'clock)
            if ch in _APOS and 0 < i < n - 1 and tok[i - 1].isalnum() and tok[i + 1].isalnum():
                chars.append("'")
            continue
        chars.append(ch)
    return "".join(chars)


def tokenize(raw: str) -> list[str]:
    """Lowercase, drop punctuation (interior apostrophes survive), split on whitespace.

    >>> tokenize("Do you take Tylenol?")
    ['do', 'you', 'take', 'tylenol']
    """
    out = []
    for tok in raw.lower().split():
        tok = _strip_punct(tok)
        # stripping can expose a new edge apostrophe, e.g. "'don't'" -> "don't"
        out.extend(t for t in tok.split() if t)
    return out


def remove_special_tokens(raw: str) -> str:
    """Drop bracketed non-speech markers such as ``[laughter]`` or ``<noise>``."""
    return _SPECIAL.sub(" ", raw)


# ---------------------------------------------------------------------------
# pronunciations

# Letter/digraph -> ARPAbet-style phones.  Longest match wins.
FALLBACK_G2P: dict[str, tuple[str, ...]] = {
    "tch": ("ch",), "sch": ("s", "k"), "igh": ("ay",), "ough": ("ao",),
    "ch": ("ch",), "sh": ("sh",), "th": ("th",), "ph": ("f",), "wh": ("w",),
    "ck": ("k",), "ng": ("ng",), "qu": ("k", "w"), "gh": ("g",), "kn": ("n",),
    "wr": ("r",), "ee": ("iy",), "ea": ("iy",), "oo": ("uw",), "ou": ("aw",),
    "ow": ("ow",), "oi": ("oy",), "oy": ("oy",), "ai": ("ey",), "ay": ("ey",),
    "au": ("ao",), "aw": ("ao",), "ie": ("iy",), "ei": ("ey",), "ey": ("iy",),
    "er": ("er",), "ir": ("er",), "ur": ("er",), "ar": ("aa", "r"), "or": ("ao", "r"),
    "a": ("ae",), "b": ("b",), "c": ("k",), "d": ("d",), "e": ("eh",), "f": ("f",),
    "g": ("g",), "h": ("hh",), "i": ("ih",), "j": ("jh",), "k": ("k",), "l": ("l",),
    "m": ("m",), "n": ("n",), "o": ("aa",), "p": ("p",), "q": ("k",), "r": ("r",),
    "s": ("s",), "t": ("t",), "u": ("ah",), "v": ("v",), "w": ("w",), "x": ("k", "s"),
    "y": ("y",), "z": ("z",),
    "0": ("z", "iy", "r", "ow"), "1": ("w", "ah", "n"), "2": ("t", "uw"), "3": ("th", "r", "iy"),
    "4": ("f", "ao", "r"), "5": ("f", "ay", "v"), "6": ("s", "ih", "k", "s"),
    "7": ("s", "eh", "v", "ah", "n"), "8": ("ey", "t"), "9": ("n", "ay", "n"),
}
_MAX_KEY = max(len(k) for k in FALLBACK_G2P)


def letter_to_phone(word: str, table: dict[str, tuple[str, ...]] = FALLBACK_G2P) -> list[str]:
    """Greedy longest-match grapheme -> phoneme conversion; unknown characters are skipped."""
    phones: list[str] = []
    i = 0
    while i < len(word):
        for n in range(min(_MAX_KEY, len(word) - i), 0, -1):
            chunk = word[i:i + n]
            if chunk in table:
                phones.extend(table[chunk])
                i += n
                break
        else:
            i += 1
    return phones


G2P = Callable[[str], Sequence[str]]


@dataclass
class Lexicon:
    """word -> ordered pronunciation variants."""

    entries: dict[str, list[tuple[str, ...]]] = field(default_factory=dict)

    def add(self, word: str, phones: Sequence[str]) -> None:
        if not phones:
            raise ValueError(f"empty pronunciation for {word!r}")
        self.entries.setdefault(word, []).append(tuple(phones))

    @property
    def inventory(self) -> set[str]:
        return {ph for prons in self.entries.values() for pron in prons for ph in pron}

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def read(cls, path: str | Path) -> Lexicon:
        lex = cls()
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ValueError(f"{path}:{lineno}: expected word<TAB>phones")
                lex.add(parts[0], parts[1].split())
        return lex

    def lines(self) -> list[str]:
        return [f"{w}\t{' '.join(p)}" for w, prons in self.entries.items() for p in prons]


def phonemize(words: Sequence[str], lex: Lexicon, g2p: G2P = letter_to_phone) -> list[str]:
    """First lexicon pronunciation per word, else the fallback G2P output."""
    phones: list[str] = []
    for w in words:
        prons = lex.entries.get(w)
        if prons:
            phones.extend(prons[0])
            continue
        guess = list(g2p(w))
        if not guess:
            raise ValueError(f"fallback G2P produced no phonemes for {w!r}")
        phones.extend(guess)
    return phones


# ---------------------------------------------------------------------------
# corpus


@dataclass
class UtterancePair:
    id: str
    true_words: list[str]
    recognized_words: list[str] = field(default_factory=list)
    true_phones: list[str] = field(default_factory=list)


def read_corpus(path: str | Path) -> list[UtterancePair]:
    """Read ``id<TAB>true_text[<TAB>recognized_text]`` lines, tokenising both sides."""
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise ValueError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields, got {len(parts)}")
            rec = tokenize(remove_special_tokens(parts[2])) if len(parts) == 3 else []
            pairs.append(UtterancePair(parts[0], tokenize(remove_special_tokens(parts[1])), rec))
    return pairs


def format_pair(pair: UtterancePair) -> str:
    return f"{pair.id}\t{' '.join(pair.true_words)}\t{' '.join(pair.recognized_words)}"


def attach_phones(pairs: Iterable[UtterancePair], lex: Lexicon, g2p: G2P = letter_to_phone) -> None:
    for p in pairs:
        p.true_phones = phonemize(p.true_words, lex, g2p)


@dataclass
class FilterReport:
    total: int
    removed: int

    @property
    def percent_removed(self) -> float:
        return 100.0 * self.removed / self.total if self.total else 0.0


def filter_pairs(pairs: Sequence[UtterancePair], lex: Lexicon | None = None,
                 g2p: G2P = letter_to_phone) -> tuple[list[UtterancePair], FilterReport]:
    """Drop pairs whose true side has no words (or no phonemes) left.

    Surviving pairs are returned untouched.
    """
    kept = []
    for p in pairs:
        words = [w for w in p.true_words if not _SPECIAL.fullmatch(w)]
        if not words:
            continue
        if lex is not None:
            try:
                if not phonemize(words, lex, g2p):
                    continue
            except ValueError:
                continue
        kept.append(p)
    report = FilterReport(len(pairs), len(pairs) - len(kept))
    logger.info("filtered %d of %d pairs (%.1f%%)", report.removed, report.total, report.percent_removed)
    return kept, report


# ---------------------------------------------------------------------------
# vocabulary


class Vocab:
    """Token <-> index bijection with PAD/BOS/EOS/UNK at 0..3."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for t in tokens:
            if t in self.stoi:
                raise ValueError(f"duplicate vocab token {t!r}")
            self.stoi[t] = len(self.itos)
            self.itos.append(t)

    @classmethod
    def build(cls, sequences: Iterable[Sequence[str]], min_count: int = 1) -> Vocab:
        counts = Counter(t for seq in sequences for t in seq)
        if not counts:
            raise ValueError("cannot build a vocabulary from an empty corpus")
        keep = [t for t, c in counts.items() if c >= min_count and t not in RESERVED]
        keep.sort(key=lambda t: (-counts[t], t))
        return cls(keep)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @property
    def tokens(self) -> list[str]:
        return self.itos[len(RESERVED):]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def write(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> Vocab:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:4]) != RESERVED:
            raise ValueError(f"{path}: first four lines must be the reserved tokens {RESERVED}")
        return cls(lines[4:])
