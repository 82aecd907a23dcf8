"""Error-chunk and utterance recall, plus WER.

Error chunks come from aligning a gold word sequence with an errorful one
and removing the longest common subsequence; what is left between matched
words forms (gold span : hypothesis span) pairs.  A real chunk counts as
recalled only when a hypothesis reproduces it at the same gold position
with error-free neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence


@dataclass(frozen=True)
class ErrorChunk:
    gold_start: int
    gold_end: int
    gold: tuple[str, ...]
    hyp: tuple[str, ...]

    @property
    def key(self) -> tuple[int, int, tuple[str, ...]]:
        # gold words are implied by the gold positions
        return self.gold_start, self.gold_end, self.hyp

    def __str__(self) -> str:
        return f"{{{' '.join(self.gold)} : {' '.join(self.hyp)}}}"


def lcs_alignment(gold: Sequence[str], hyp: Sequence[str]) -> list[tuple[int, int]]:
    """Matched index pairs of a longest common subsequence.

    Among equally long subsequences the lexicographically smallest list of
    (gold index, hyp index) pairs is returned, i.e. matches are taken as
    early as possible.
    """
    n, m = len(gold), len(hyp)
    # suffix table: L[i][j] = LCS length of gold[i:], hyp[j:]
    L = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        row, nxt = L[i], L[i + 1]
        for j in range(m - 1, -1, -1):
            row[j] = nxt[j + 1] + 1 if gold[i] == hyp[j] else max(nxt[j], row[j + 1])
    pairs = []
    i = j = 0
    while L[i][j] > 0:
        target = L[i][j]
        found = False
        for a in range(i, n):
            if L[a][j] < target:
                break
            for b in range(j, m):
                if gold[a] == hyp[b] and L[a + 1][b + 1] == target - 1:
                    pairs.append((a, b))
                    i, j = a + 1, b + 1
                    found = True
                    break
            if found:
                break
    return pairs


def chunks_from_alignment(gold: Sequence[str], hyp: Sequence[str],
                          pairs: Sequence[tuple[int, int]]) -> list[ErrorChunk]:
    chunks = []
    gi = hi = 0
    for a, b in list(pairs) + [(len(gold), len(hyp))]:
        if a > gi or b > hi:
            chunks.append(ErrorChunk(gi, a, tuple(gold[gi:a]), tuple(hyp[hi:b])))
        gi, hi = a + 1, b + 1
    return chunks


def extract_error_chunks(gold: Sequence[str], hyp: Sequence[str]) -> list[ErrorChunk]:
    """Maximal unmatched regions left after removing the LCS, in gold order."""
    return chunks_from_alignment(gold, hyp, lcs_alignment(gold, hyp))


@dataclass
class RecallReport:
    k: int
    chunks_total: int
    chunks_recalled: int
    utterances_total: int
    utterances_recalled: int

    @property
    def chunk_recall(self) -> float:
        return 100.0 * self.chunks_recalled / self.chunks_total if self.chunks_total else 0.0

    @property
    def utterance_recall(self) -> float:
        return 100.0 * self.utterances_recalled / self.utterances_total if self.utterances_total else 0.0


def _check_ids(pairs, nbest):
    missing = [p.id for p in pairs if p.id not in nbest]
    if missing:
        raise KeyError(f"no N-best list for test ids: {missing[:5]}{' ...' if len(missing) > 5 else ''}")


def chunk_recall_at_k(pairs, nbest: Mapping[str, Sequence[Sequence[str]]], k: int = 100) -> tuple[int, int]:
    """(recalled, total) real error chunks over the test pairs.

    ``nbest`` maps each pair id to its hypotheses (word lists) in rank order;
    only the first ``k`` are used.  Chunks are counted per occurrence.
    """
    _check_ids(pairs, nbest)
    total = recalled = 0
    for pair in pairs:
        real = extract_error_chunks(pair.true_words, pair.recognized_words)
        if not real:
            continue
        predicted = set()
        for hyp in nbest[pair.id][:k]:
            predicted.update(c.key for c in extract_error_chunks(pair.true_words, hyp))
        total += len(real)
        recalled += sum(c.key in predicted for c in real)
    return recalled, total


def utterance_recall_at_k(pairs, nbest: Mapping[str, Sequence[Sequence[str]]], k: int = 100) -> tuple[int, int]:
    """(recalled, total) test utterances whose reference appears verbatim in the top k."""
    _check_ids(pairs, nbest)
    recalled = 0
    for pair in pairs:
        ref = list(pair.recognized_words)
        recalled += any(list(h) == ref for h in nbest[pair.id][:k])
    return recalled, len(pairs)


def recall_report(pairs, nbest, k: int = 100) -> RecallReport:
    cr, ct = chunk_recall_at_k(pairs, nbest, k)
    ur, ut = utterance_recall_at_k(pairs, nbest, k)
    return RecallReport(k, ct, cr, ut, ur)


def edit_distance(a: Sequence[str], b: Sequence[str]) -> int:
    """Unit-cost Levenshtein distance."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def wer(gold: Sequence[str], hyp: Sequence[str]) -> float:
    if not gold:
        raise ValueError("WER is undefined for an empty reference")
    return edit_distance(gold, hyp) / len(gold)


def corpus_wer(refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]]) -> float:
    n = sum(len(r) for r in refs)
    if n == 0:
        raise ValueError("WER is undefined for an empty reference")
    return sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / n


def format_report(report: RecallReport, extra: Mapping[str, float] | None = None) -> tuple[str, str]:
    """Human-readable table and ``metric<TAB>value`` lines."""
    rows = [
        ("k", str(report.k)),
        ("chunk_recall", f"{report.chunk_recall:.2f}"),
        ("chunks_recalled", str(report.chunks_recalled)),
        ("chunks_total", str(report.chunks_total)),
        ("utterance_recall", f"{report.utterance_recall:.2f}"),
        ("utterances_recalled", str(report.utterances_recalled)),
        ("utterances_total", str(report.utterances_total)),
    ]
    rows += [(name, f"{value:.4f}") for name, value in (extra or {}).items()]
    width = max(len(n) for n, _ in rows)
    table = "\n".join(f"{n:<{width}}  {v:>10}" for n, v in rows) + "\n"
    machine = "".join(f"{n}\t{v}\n" for n, v in rows)
    return table, machine
