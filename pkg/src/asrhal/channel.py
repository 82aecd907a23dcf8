"""Enumerable synthetic noisy channels standing in for a real recognizer.

A channel spec is plain text, one rule per line (``#`` starts a comment)::

    VOCAB the cat sat on a mat      # words for generated source sentences
    LENGTH 3 8                      # source length range (inclusive)
    SUB cat→cap 0.2                 # substitute
    DEL a 0.3                       # delete
    INS sat→down 0.25               # insert a word after a source word
    CSUB the cat→hat 0.4            # substitute only after the given word

``->`` may be used instead of ``→``.  Rules fire left to right per source
token.  When a CSUB matches the previous source word it replaces the
context-free SUB/DEL rules for that token.  Insertions keyed on the
source word are applied after whatever the token turned into.  Every
utterance therefore has a finite, exactly computable output distribution.
"""

from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .textprep import EOS_ID, UtterancePair, Vocab

Option = tuple[tuple[str, ...], float]

_START = "<s>"


class ChannelSpecError(ValueError):
    pass


def _arrow(text: str, lineno: int) -> tuple[str, str]:
    for sep in ("→", "->"):
        if sep in text:
            a, b = text.split(sep, 1)
            if a and b:
                return a, b
    raise ChannelSpecError(f"line {lineno}: expected src→dst, got {text!r}")


def _prob(text: str, lineno: int) -> float:
    try:
        p = float(text)
    except ValueError:
        raise ChannelSpecError(f"line {lineno}: bad probability {text!r}") from None
    if not 0 <= p <= 1:
        raise ChannelSpecError(f"line {lineno}: probability {p} outside [0, 1]")
    return p


@dataclass
class Channel:
    vocab: list[str] = field(default_factory=list)
    min_len: int = 3
    max_len: int = 8
    subs: dict[str, list[tuple[str | None, float]]] = field(default_factory=lambda: defaultdict(list))
    csubs: dict[tuple[str, str], list[tuple[str | None, float]]] = field(default_factory=lambda: defaultdict(list))
    ins: dict[str, list[tuple[str, float]]] = field(default_factory=lambda: defaultdict(list))

    @classmethod
    def parse(cls, text: str) -> Channel:
        ch = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            head, *rest = line.split()
            if head == "VOCAB":
                ch.vocab.extend(rest)
            elif head == "LENGTH" and len(rest) == 2:
                ch.min_len, ch.max_len = int(rest[0]), int(rest[1])
            elif head == "SUB" and len(rest) == 2:
                src, dst = _arrow(rest[0], lineno)
                ch.subs[src].append((dst, _prob(rest[1], lineno)))
            elif head == "DEL" and len(rest) == 2:
                ch.subs[rest[0]].append((None, _prob(rest[1], lineno)))
            elif head == "INS" and len(rest) == 2:
                left, tok = _arrow(rest[0], lineno)
                ch.ins[left].append((tok, _prob(rest[1], lineno)))
            elif head == "CSUB" and len(rest) == 3:
                src, dst = _arrow(rest[1], lineno)
                ch.csubs[(rest[0], src)].append((dst, _prob(rest[2], lineno)))
            else:
                raise ChannelSpecError(f"line {lineno}: cannot parse {raw!r}")
        for table in (ch.subs, ch.csubs, ch.ins):
            for key, outs in table.items():
                if sum(p for _, p in outs) > 1 + 1e-12:
                    raise ChannelSpecError(f"rules for {key!r} have total probability > 1")
        if not 1 <= ch.min_len <= ch.max_len:
            raise ChannelSpecError("LENGTH needs 1 <= min <= max")
        return ch

    @classmethod
    def read(cls, path) -> Channel:
        with open(path, encoding="utf-8") as f:
            return cls.parse(f.read())

    def token_options(self, prev: str, word: str) -> list[Option]:
        """Possible emissions for one source token with their probabilities."""
        rules = self.csubs.get((prev, word)) or self.subs.get(word, [])
        base = [((word,), 1.0 - sum(p for _, p in rules))]
        base += [(() if dst is None else (dst,), p) for dst, p in rules]
        ins = self.ins.get(word, [])
        tails = [((), 1.0 - sum(p for _, p in ins))] + [((t,), p) for t, p in ins]
        out = [(e + t, pe * pt) for (e, pe), (t, pt) in itertools.product(base, tails)]
        return [o for o in out if o[1] > 0]

    def options(self, words: Sequence[str]) -> list[list[Option]]:
        prevs = [_START] + list(words[:-1])
        return [self.token_options(p, w) for p, w in zip(prevs, words)]

    def distribution(self, words: Sequence[str]) -> dict[tuple[str, ...], float]:
        """Exact output distribution (identical strings from different paths merged)."""
        dist: dict[tuple[str, ...], float] = defaultdict(float)
        for combo in itertools.product(*self.options(words)):
            out = tuple(w for emit, _ in combo for w in emit)
            dist[out] += float(np.prod([p for _, p in combo]))
        return dict(dist)

    def sample(self, words: Sequence[str], rng: np.random.Generator) -> list[str]:
        out: list[str] = []
        for opts in self.options(words):
            probs = np.array([p for _, p in opts])
            out.extend(opts[rng.choice(len(opts), p=probs / probs.sum())][0])
        return out

    def source_sentence(self, rng: np.random.Generator) -> list[str]:
        if not self.vocab:
            raise ChannelSpecError("channel has no VOCAB line to generate sources from")
        n = int(rng.integers(self.min_len, self.max_len + 1))
        return [self.vocab[i] for i in rng.integers(0, len(self.vocab), n)]


def synth_corpus(channel: Channel, size: int, rng: np.random.Generator, max_outputs: int = 50,
                 prefix: str = "utt") -> list[UtterancePair]:
    """Generate ``size`` (source, channel output) pairs.

    Sources whose exact output distribution has more than ``max_outputs``
    distinct strings are redrawn.
    """
    pairs = []
    while len(pairs) < size:
        src = channel.source_sentence(rng)
        if len(channel.distribution(src)) > max_outputs:
            continue
        pairs.append(UtterancePair(f"{prefix}{len(pairs):06d}", src, channel.sample(src, rng)))
    return pairs


class TrieModel:
    """Exact autoregressive step function for an enumerated sequence distribution.

    P(next | prefix) is the total mass of sequences extending prefix+next,
    normalised; EOS carries the mass of the prefix itself.  Decoders run on
    this reproduce the underlying distribution exactly.
    """

    def __init__(self, dist: dict[tuple[int, ...], float], vocab_size: int, eos: int = EOS_ID):
        self.V = vocab_size
        self.eos = eos
        self.mass: dict[tuple[int, ...], float] = defaultdict(float)
        self.ends: dict[tuple[int, ...], float] = defaultdict(float)
        for seq, p in dist.items():
            self.ends[seq] += p
            for i in range(len(seq) + 1):
                self.mass[seq[:i]] += p
        self._rows: dict[tuple[int, ...], np.ndarray] = {}

    def row(self, pre: tuple[int, ...]) -> np.ndarray:
        if pre not in self._rows:
            m = np.zeros(self.V)
            for tok in range(self.V):
                m[tok] = self.ends.get(pre, 0.0) if tok == self.eos else self.mass.get(pre + (tok,), 0.0)
            if m.sum() <= 0:
                m[self.eos] = 1.0
            with np.errstate(divide="ignore"):
                self._rows[pre] = np.log(m / m.sum())
        return self._rows[pre]

    def __call__(self, prefixes: np.ndarray) -> np.ndarray:
        return np.stack([self.row(tuple(int(t) for t in r[1:])) for r in prefixes])


def channel_step_fn(channel: Channel, words: Sequence[str], vocab: Vocab) -> TrieModel:
    """Exact channel as a decoder step function over ``vocab`` ids."""
    dist: dict[tuple[int, ...], float] = defaultdict(float)
    for out, p in channel.distribution(words).items():
        dist[tuple(vocab.encode(out))] += p
    return TrieModel(dict(dist), len(vocab))
