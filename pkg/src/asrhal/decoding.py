"""N-best list construction: beam search and sampled decoding.

Both decoders talk to the model through a *step function*: it receives an
int array of BOS-initial prefixes ``[N, t]`` (all of equal length) and
returns next-token log-probabilities ``[N, V]``.  ``Seq2Seq.scorer`` builds
one for a source sentence; tests use small table-driven ones.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .textprep import BOS_ID, EOS_ID, Vocab

StepFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class NBestEntry:
    tokens: tuple[int, ...]
    score: float
    length: int = 0   # decoder steps incl. EOS (beam only)
    count: int = 0    # sample frequency (sampled only)


@dataclass
class NBestList:
    source_id: str
    entries: list[NBestEntry] = field(default_factory=list)
    k: int = 100
    draws: int = 0  # samples drawn (sampled decoding)

    def __len__(self) -> int:
        return len(self.entries)

    def words(self, vocab: Vocab) -> list[list[str]]:
        return [vocab.decode(e.tokens) for e in self.entries]


def max_len_for(source_len: int) -> int:
    return 2 * source_len + 5


def utterance_rng(seed: int, utt_id: str) -> np.random.Generator:
    """Independent stream per (seed, utterance) so parallel and serial runs agree."""
    h = int.from_bytes(hashlib.sha256(utt_id.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng([seed, h])


def _with_bos(seqs: Sequence[tuple[int, ...]]) -> np.ndarray:
    arr = np.empty((len(seqs), len(seqs[0]) + 1), dtype=np.int64)
    arr[:, 0] = BOS_ID
    if arr.shape[1] > 1:
        arr[:, 1:] = seqs
    return arr


def beam_search(step_fn: StepFn, max_len: int, beam: int = 256, k: int = 100,
                source_id: str = "", eos: int = EOS_ID) -> NBestList:
    """Left-to-right beam search returning the K best completed hypotheses.

    Each step expands every running hypothesis and keeps the ``beam`` best
    by cumulative log-probability.  Selected hypotheses ending in EOS move
    to the completed pool; the rest continue.  At ``max_len`` steps all
    survivors are completed as they stand.  Completed hypotheses are ranked
    by cumulative log-probability divided by their length (EOS included),
    ties by token sequence.
    """
    if beam < k:
        raise ValueError(f"beam size {beam} smaller than K={k}")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    active: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    done: list[NBestEntry] = []
    for step in range(1, max_len + 1):
        lp = step_fn(_with_bos([seq for seq, _ in active]))
        total = np.asarray([s for _, s in active])[:, None] + lp
        flat = total.ravel()
        finite = np.flatnonzero(np.isfinite(flat))
        if finite.size > beam:
            # everything tied with the beam-th score stays in contention
            cut = np.partition(flat[finite], finite.size - beam)[finite.size - beam]
            finite = finite[flat[finite] >= cut]
        V = total.shape[1]
        cands = [(float(flat[i]), active[i // V][0] + (int(i % V),)) for i in finite]
        cands.sort(key=lambda c: (-c[0], c[1]))
        next_active = []
        for score, seq in cands[:beam]:
            if seq[-1] == eos:
                done.append(NBestEntry(seq[:-1], score / step, step))
            elif step == max_len:
                done.append(NBestEntry(seq, score / step, step))
            else:
                next_active.append((seq, score))
        active = next_active
        if not active:
            break
    done.sort(key=lambda e: (-e.score, e.tokens))
    return NBestList(source_id, done[:k], k)


def greedy_decode(step_fn: StepFn, max_len: int, eos: int = EOS_ID) -> tuple[int, ...]:
    seq: tuple[int, ...] = ()
    for _ in range(max_len):
        tok = int(np.argmax(step_fn(_with_bos([seq]))[0]))
        if tok == eos:
            break
        seq += (tok,)
    return seq


def draw_samples(step_fn: StepFn, n: int, max_len: int, rng: np.random.Generator,
                 eos: int = EOS_ID, with_logp: bool = False):
    """Ancestral sampling of ``n`` sequences, each token drawn from the step distribution.

    With ``with_logp`` also returns each sample's log-probability (for a
    sequence cut at ``max_len`` that is the probability of the prefix).
    """
    seqs = np.zeros((n, 0), dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    lengths = np.full(n, max_len)
    logp = np.zeros(n)
    for step in range(max_len):
        idx = np.flatnonzero(alive)
        # many samples share a prefix; score each distinct prefix once
        uniq, inverse = np.unique(seqs[idx], axis=0, return_inverse=True)
        lp = step_fn(_with_bos(uniq))[inverse.reshape(-1)]
        probs = np.exp(lp)
        cdf = np.cumsum(probs, axis=1)
        u = rng.random(idx.size) * cdf[:, -1]
        tok = np.minimum((cdf <= u[:, None]).sum(axis=1), probs.shape[1] - 1)
        logp[idx] += lp[np.arange(idx.size), tok]
        col = np.full(n, eos, dtype=np.int64)
        col[idx] = tok
        seqs = np.concatenate([seqs, col[:, None]], axis=1)
        ended = idx[tok == eos]
        lengths[ended] = step
        alive[ended] = False
        if not alive.any():
            break
    out = [tuple(int(t) for t in seqs[i, :lengths[i]]) for i in range(n)]
    return (out, logp) if with_logp else out


def sample_decode(step_fn: StepFn, max_len: int, rng: np.random.Generator, min_samples: int = 250,
                  max_samples: int = 1000, target_unique: int = 100, source_id: str = "",
                  chunk: int = 250, eos: int = EOS_ID, exhausted_tol: float = 1e-9) -> NBestList:
    """Sampled N-best construction.

    Draw at least ``min_samples`` sequences, keep drawing until
    ``target_unique`` distinct ones have been seen or ``max_samples`` is
    reached, then keep the ``target_unique`` most frequent (ties: earliest
    first occurrence).  When the distinct sequences already seen carry all
    but ``exhausted_tol`` of the probability mass no new ones can turn up,
    so drawing stops as if the target had been met.  The stopping rule is
    checked after every draw; chunked generation only affects speed.
    """
    if not 0 < min_samples <= max_samples:
        raise ValueError("need 0 < min_samples <= max_samples")
    counts: Counter[tuple[int, ...]] = Counter()
    first: dict[tuple[int, ...], int] = {}
    mass = 0.0
    drawn = 0
    stop = False
    while not stop and drawn < max_samples:
        want = min(max(chunk, min_samples - drawn), max_samples - drawn)
        seqs, logps = draw_samples(step_fn, want, max_len, rng, eos, with_logp=True)
        for seq, lp in zip(seqs, logps):
            if seq not in counts:
                first[seq] = drawn
                mass += math.exp(lp)
            counts[seq] += 1
            drawn += 1
            if drawn >= min_samples and (len(counts) >= target_unique or mass >= 1 - exhausted_tol):
                stop = True
                break
    ranked = sorted(counts, key=lambda s: (-counts[s], first[s]))[:target_unique]
    entries = [NBestEntry(s, float(counts[s]), count=counts[s]) for s in ranked]
    return NBestList(source_id, entries, target_unique, drawn)


# ---------------------------------------------------------------------------
# corpus-level helpers and file format


def decode_corpus(model, pairs, method: str = "sample", k: int = 100, beam: int = 256, seed: int = 0,
                  min_samples: int = 250, max_samples: int = 1000) -> list[NBestList]:
    out = []
    for pair in pairs:
        step = model.scorer(pair.true_words)
        max_len = max_len_for(len(pair.true_words))
        if method == "beam":
            out.append(beam_search(step, max_len, beam=beam, k=k, source_id=pair.id))
        elif method == "sample":
            out.append(sample_decode(step, max_len, utterance_rng(seed, pair.id), min_samples, max_samples,
                                     target_unique=k, source_id=pair.id))
        else:
            raise ValueError(f"unknown decoding method {method!r}")
    return out


def format_nbest(lists: Iterable[NBestList], vocab: Vocab) -> str:
    lines = []
    for nb in lists:
        for rank, (entry, words) in enumerate(zip(nb.entries, nb.words(vocab)), 1):
            lines.append(f"{nb.source_id}\t{rank}\t{entry.score:.6f}\t{' '.join(words)}\n")
    return "".join(lines)


def read_nbest(path: str | Path) -> dict[str, list[list[str]]]:
    """Parse an N-best file into ``id -> hypotheses in rank order``."""
    out: dict[str, list[tuple[int, list[str]]]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected id<TAB>rank<TAB>score<TAB>words")
            out.setdefault(parts[0], []).append((int(parts[1]), parts[3].split()))
    return {k: [w for _, w in sorted(v, key=lambda x: x[0])] for k, v in out.items()}
