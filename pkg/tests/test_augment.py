import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asrhal import seq2seq as s2s
from asrhal.augment import (STANDARD_RATES, AugmentPolicy, ModelSource, NBestSource, augment_corpus, example_rng,
                            transmute)
from asrhal.seq2seq import Seq2Seq, Vocabs
from asrhal.textprep import UtterancePair, Vocab

NBEST = {f"u{i}": [[f"h{i}a"], [f"h{i}b"], [f"h{i}c"]] for i in range(50)}
CORPUS = [UtterancePair(f"u{i}", ["w", str(i)], ["w", str(i)]) for i in range(50)]


def test_standard_rates():
    assert STANDARD_RATES == (0.05, 0.10, 0.25, 0.50, 0.75, 1.00)


@pytest.mark.parametrize("rate", [-0.1, 1.5])
def test_rate_bounds(rate):
    with pytest.raises(ValueError):
        AugmentPolicy(rate)


def test_rate_zero_never_calls_source():
    class Boom:
        def draw(self, pair, rng):
            raise AssertionError("called")

    rng = np.random.default_rng(0)
    for _ in range(1000):
        assert transmute(["a"], Boom(), AugmentPolicy(0.0), rng) == (["a"], False)


def test_rate_one_always_replaces():
    src = NBestSource({"x": [["b"]]})
    rng = np.random.default_rng(0)
    for _ in range(1000):
        assert transmute(["a"], src, AugmentPolicy(1.0), rng, "x") == (["b"], True)


def test_rate_frequency():
    src = NBestSource({"x": [["b"]]})
    rng = np.random.default_rng(1)
    hits = sum(transmute(["a"], src, AugmentPolicy(0.25), rng, "x")[1] for _ in range(10_000))
    assert abs(hits / 10_000 - 0.25) <= 0.015


def test_nbest_draws_uniformly():
    src = NBestSource({"x": [["a"], ["b"], ["c"], ["d"]]})
    rng = np.random.default_rng(2)
    counts = {}
    for _ in range(8000):
        w = src.draw(UtterancePair("x", []), rng)[0]
        counts[w] = counts.get(w, 0) + 1
    assert set(counts) == set("abcd")
    assert all(abs(c / 8000 - 0.25) < 0.02 for c in counts.values())


def test_missing_nbest_is_an_error():
    with pytest.raises(KeyError):
        list(augment_corpus(CORPUS[:1], NBestSource({}), AugmentPolicy(1.0)))


def test_empty_corpus():
    assert list(augment_corpus([], NBestSource(NBEST), AugmentPolicy(0.5))) == []


@settings(max_examples=30, deadline=None)
@given(rate=st.floats(0, 1), epoch=st.integers(0, 5), seed=st.integers(0, 100))
def test_ids_preserved_and_untouched_items_identical(rate, epoch, seed):
    view = list(augment_corpus(CORPUS, NBestSource(NBEST), AugmentPolicy(rate, seed=seed), epoch))
    assert [p.id for p, _ in view] == [p.id for p in CORPUS]
    for orig, (p, replaced) in zip(CORPUS, view):
        if replaced:
            assert p.recognized_words in NBEST[p.id] and p.true_words == orig.true_words
        else:
            assert p is orig
    assert CORPUS[0].recognized_words == ["w", "0"]


def test_resample_controls_epoch_views():
    src = NBestSource(NBEST)
    fixed = AugmentPolicy(0.5, resample=False)
    views = [[(p.recognized_words, r) for p, r in augment_corpus(CORPUS, src, fixed, e)] for e in range(3)]
    assert views[0] == views[1] == views[2]
    fresh = AugmentPolicy(0.5, resample=True)
    views = [[(p.recognized_words, r) for p, r in augment_corpus(CORPUS, src, fresh, e)] for e in range(3)]
    assert views[0] != views[1] and views[1] != views[2]
    again = [(p.recognized_words, r) for p, r in augment_corpus(CORPUS, src, fresh, 1)]
    assert again == views[1]


def test_example_rng_depends_on_id_and_seed():
    pol = AugmentPolicy(0.5, seed=3)
    a = example_rng(pol, "u1", 0).random()
    assert a == example_rng(pol, "u1", 0).random()
    assert a != example_rng(pol, "u2", 0).random()
    assert a != example_rng(AugmentPolicy(0.5, seed=4), "u1", 0).random()


def test_model_source_emits_target_words():
    vocabs = Vocabs(Vocab(["a", "b"]), Vocab(["x", "y"]))
    cfg = s2s.named_config("tiny", "single", len(vocabs.src), len(vocabs.tgt))
    src = ModelSource(Seq2Seq(cfg, s2s.init_params(cfg, np.random.default_rng(0)), vocabs))
    rng = np.random.default_rng(0)
    for _ in range(20):
        out = src.draw(UtterancePair("u", ["a", "b"]), rng)
        assert len(out) <= 2 * 2 + 5
        assert set(out) <= {"x", "y", "<unk>"}
