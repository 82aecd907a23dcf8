"""Train-time replacement of clean text with hallucinated ASR output."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from .decoding import draw_samples, max_len_for, utterance_rng
from .textprep import UtterancePair

STANDARD_RATES = (0.05, 0.10, 0.25, 0.50, 0.75, 1.00)


@dataclass(frozen=True)
class AugmentPolicy:
    rate: float
    resample: bool = True  # fresh draw every epoch
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.rate <= 1:
            raise ValueError(f"sample rate must be in [0, 1], got {self.rate}")


class ModelSource:
    """One ancestral sample from a hallucination model per request."""

    def __init__(self, model):
        self.model = model

    def draw(self, pair: UtterancePair, rng: np.random.Generator) -> list[str]:
        seq = draw_samples(self.model.scorer(pair.true_words), 1, max_len_for(len(pair.true_words)), rng)[0]
        return self.model.vocabs.tgt.decode(seq)


class NBestSource:
    """Uniform draw from a precomputed hypothesis list per example id."""

    def __init__(self, nbest: Mapping[str, Sequence[Sequence[str]]]):
        self.nbest = nbest

    def draw(self, pair: UtterancePair, rng: np.random.Generator) -> list[str]:
        hyps = self.nbest.get(pair.id)
        if not hyps:
            raise KeyError(f"no hypotheses available for example {pair.id!r}")
        return list(hyps[int(rng.integers(len(hyps)))])


def transmute(words: Sequence[str], source, policy: AugmentPolicy, rng: np.random.Generator,
              pair_id: str = "") -> tuple[list[str], bool]:
    """With probability ``policy.rate`` swap ``words`` for a hallucinated alternative.

    Returns the (possibly unchanged) words and whether they were replaced.
    """
    if rng.random() >= policy.rate:
        return list(words), False
    return source.draw(UtterancePair(pair_id, list(words)), rng), True


def example_rng(policy: AugmentPolicy, pair_id: str, epoch: int) -> np.random.Generator:
    key = f"{epoch}:{pair_id}" if policy.resample else pair_id
    return utterance_rng(policy.seed, key)


def augment_corpus(pairs: Sequence[UtterancePair], source, policy: AugmentPolicy,
                   epoch: int = 0) -> Iterator[tuple[UtterancePair, bool]]:
    """Yield one epoch-view of the corpus as ``(pair, replaced)``.

    Replaced pairs carry the hallucination in ``recognized_words``; other
    pairs are yielded as the very same objects.  Ids never change.
    """
    for pair in pairs:
        words, replaced = transmute(pair.true_words, source, policy, example_rng(policy, pair.id, epoch), pair.id)
        yield (dataclasses.replace(pair, recognized_words=words) if replaced else pair), replaced
