import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asrhal import numkit as nk
from asrhal import seq2seq as s2s
from asrhal.numkit import Tensor
from asrhal.seq2seq import EncoderOut, ModelConfig, Seq2Seq, Vocabs
from asrhal.textprep import BOS_ID, EOS_ID, PAD_ID, Lexicon, UtterancePair, Vocab

from .helpers import naive_attend, naive_dual_attend


def tiny_cfg(mode="single", **kw):
    return s2s.named_config("tiny", mode, 10, 8, 9 if mode == "dual" else 0, dropout=0.0, encoder_dropout=0.0, **kw)


def enc_out(keys, values, mask=None):
    keys = np.asarray(keys, float)[None]
    values = np.asarray(values, float)[None]
    mask = np.ones(keys.shape[:2], bool) if mask is None else np.asarray(mask)[None]
    return EncoderOut(Tensor(keys), Tensor(values), mask)


# -- config / parameters -----------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(10, 10, mode="dual")
    with pytest.raises(ValueError):
        ModelConfig(10, 10, mode="triple")
    with pytest.raises(ValueError):
        ModelConfig(0, 10)
    with pytest.raises(ValueError):
        ModelConfig(10, 10, encoder_dropout=1.5)
    with pytest.raises(ValueError):
        s2s.named_config("huge", "single", 10, 10)


def test_config_dict_round_trip():
    cfg = s2s.named_config("toy", "dual", 30, 40, 20)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_param_shapes_and_init():
    cfg = tiny_cfg("dual")
    shapes = s2s.param_shapes(cfg)
    assert shapes["dual.W"] == (cfg.embed_dim, 2 * cfg.embed_dim)
    assert shapes["encA.embed"][0] == cfg.phone_vocab and shapes["encB.embed"][0] == cfg.src_vocab
    params = s2s.init_params(cfg, np.random.default_rng(0))
    assert s2s.param_count(cfg) == sum(p.size for p in params.values())
    for name, p in params.items():
        assert p.shape == shapes[name] and np.isfinite(p.data).all()
        if name.endswith(".b"):
            assert not p.data.any()
        elif not name.endswith((".embed", ".pos")):
            fan = shapes[name]
            rf = fan[2] if len(fan) == 3 else 1
            assert np.abs(p.data).max() <= math.sqrt(6 / (fan[0] * rf + fan[1] * rf)) + 1e-7


# -- encoder -----------------------------------------------------------------------

def test_encode_zero_params_gives_zero_values():
    cfg = tiny_cfg()
    out = s2s.encode(np.array([[4, 5, 6]]), s2s.zero_params(cfg), cfg)
    assert not out.keys.data.any() and not out.values.data.any()


def test_encode_single_token_shapes():
    cfg = tiny_cfg()
    out = s2s.encode(np.array([[4]]), s2s.init_params(cfg, np.random.default_rng(0)), cfg)
    assert out.keys.shape == (1, 1, cfg.embed_dim) == out.values.shape
    assert out.mask.shape == (1, 1)


def test_encode_errors():
    cfg = tiny_cfg()
    params = s2s.init_params(cfg, np.random.default_rng(0))
    with pytest.raises(ValueError):
        s2s.encode(np.full((1, cfg.max_positions + 1), 4), params, cfg)
    with pytest.raises(IndexError):
        s2s.encode(np.array([[cfg.src_vocab]]), params, cfg)


def test_encoder_receptive_field():
    cfg = s2s.named_config("toy", "single", 12, 8, dropout=0.0)
    params = s2s.init_params(cfg, np.random.default_rng(1), np.float64)
    radius = s2s.receptive_radius(cfg)
    assert radius == 2
    base = np.array([[4, 5, 6, 7, 8, 9, 10, 11, 4, 5]])
    j = 4
    moved = base.copy()
    moved[0, j] = 11 if base[0, j] != 11 else 10
    a = s2s.encode(base, params, cfg).keys.data[0]
    b = s2s.encode(moved, params, cfg).keys.data[0]
    changed = np.abs(a - b).max(axis=1) > 0
    t = np.arange(base.shape[1])
    assert not changed[np.abs(t - j) > radius].any()
    assert changed[np.abs(t - j) <= radius].all()


def test_batched_encoding_matches_single():
    cfg = s2s.named_config("toy", "single", 12, 8, dropout=0.0)
    params = s2s.init_params(cfg, np.random.default_rng(2), np.float64)
    batch = np.array([[4, 5, 6, 7, 8], [9, 10, PAD_ID, PAD_ID, PAD_ID]])
    whole = s2s.encode(batch, params, cfg)
    alone = s2s.encode(batch[1:, :2], params, cfg)
    np.testing.assert_allclose(whole.keys.data[1, :2], alone.keys.data[0], atol=1e-12)
    np.testing.assert_allclose(whole.values.data[1, :2], alone.values.data[0], atol=1e-12)


# -- attention ---------------------------------------------------------------------

def test_attend_single_position():
    rng = np.random.default_rng(3)
    d = 4
    v = rng.normal(size=(1, d))
    enc = enc_out(rng.normal(size=(1, d)), v)
    p, g = Tensor(rng.normal(size=(1, 3, d))), Tensor(rng.normal(size=(1, 3, d)))
    W, b = Tensor(rng.normal(size=(d, d))), Tensor(rng.normal(size=d))
    a = s2s.attention_weights(s2s.query(p, g, W, b), enc).data
    np.testing.assert_array_equal(a, np.ones((1, 3, 1)))
    np.testing.assert_allclose(s2s.attend(p, g, enc, W, b).data[0], np.repeat(v, 3, axis=0), atol=1e-15)


def test_attend_identical_keys_uniform():
    rng = np.random.default_rng(4)
    n, d = 5, 3
    enc = enc_out(np.tile(rng.normal(size=d), (n, 1)), rng.normal(size=(n, d)))
    q = Tensor(rng.normal(size=(1, 2, d)))
    np.testing.assert_allclose(s2s.attention_weights(q, enc).data, np.full((1, 2, n), 1 / n), atol=1e-15)


def test_attend_matches_naive_loops():
    rng = np.random.default_rng(5)
    n, m, d = 3, 2, 4
    k, v = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    p, g = rng.normal(size=(m, d)), rng.normal(size=(m, d))
    W, b = rng.normal(size=(d, d)), rng.normal(size=d)
    got = s2s.attend(Tensor(p[None]), Tensor(g[None]), enc_out(k, v), Tensor(W), Tensor(b)).data[0]
    np.testing.assert_allclose(got, naive_attend(p, g, k, v, np.ones(n, bool), W, b), atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 5), m=st.integers(1, 4), d=st.integers(1, 8), seed=st.integers(0, 2**31), data=st.data())
def test_attention_rows_and_mask(n, m, d, seed, data):
    rng = np.random.default_rng(seed)
    mask = np.array(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    if not mask.any():
        mask[data.draw(st.integers(0, n - 1))] = True
    enc = enc_out(rng.normal(size=(n, d)), rng.normal(size=(n, d)), mask)
    a = s2s.attention_weights(Tensor(rng.normal(size=(1, m, d))), enc).data[0]
    assert (a >= 0).all()
    np.testing.assert_allclose(a.sum(axis=-1), 1, atol=1e-6)
    assert (a[:, ~mask] == 0).all()


def test_attention_all_masked_raises():
    enc = enc_out(np.ones((2, 3)), np.ones((2, 3)), np.zeros(2, bool))
    with pytest.raises(ValueError):
        s2s.attention_weights(Tensor(np.ones((1, 1, 3))), enc)


def test_dual_attend_matches_naive_loops():
    rng = np.random.default_rng(6)
    na, nb, m, d = 4, 3, 2, 4
    ka, va, kb, vb = (rng.normal(size=(n, d)) for n in (na, na, nb, nb))
    p, g = rng.normal(size=(m, d)), rng.normal(size=(m, d))
    W, b = rng.normal(size=(d, d)), rng.normal(size=d)
    Wd, bd = rng.normal(size=(d, 2 * d)), rng.normal(size=d)
    got = s2s.dual_attend(Tensor(p[None]), Tensor(g[None]), enc_out(ka, va), enc_out(kb, vb), Tensor(W), Tensor(b),
                          Tensor(Wd), Tensor(bd)).data[0]
    want = naive_dual_attend(p, g, (ka, va, np.ones(na, bool)), (kb, vb, np.ones(nb, bool)), W, b, Wd, bd)
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_dual_attend_equal_contexts_direct_matmul():
    rng = np.random.default_rng(7)
    d = 3
    v = rng.normal(size=(1, d))
    enc = enc_out(rng.normal(size=(1, d)), v)
    Wd, bd = rng.normal(size=(d, 2 * d)), rng.normal(size=d)
    out = s2s.dual_attend(Tensor(rng.normal(size=(1, 1, d))), Tensor(np.zeros((1, 1, d))), enc, enc,
                          Tensor(np.eye(d)), Tensor(np.zeros(d)), Tensor(Wd), Tensor(bd)).data[0, 0]
    np.testing.assert_allclose(out, Wd @ np.concatenate([v[0], v[0]]) + bd, atol=1e-12)


def test_dual_attend_missing_encoder():
    with pytest.raises(ValueError):
        s2s.dual_attend(Tensor(np.ones((1, 1, 2))), Tensor(np.ones((1, 1, 2))), None, None,
                        Tensor(np.eye(2)), Tensor(np.zeros(2)), Tensor(np.ones((2, 4))), None)


def test_dropped_encoder_b_is_information_blocked():
    cfg = tiny_cfg("dual")
    params = s2s.init_params(cfg, np.random.default_rng(8), np.float64)
    phones = np.array([[4, 5, 6, 7]])
    prev = np.array([[BOS_ID, 4, 5]])
    factors = (np.array([2.0]), np.array([0.0]))
    outs = []
    for words in ([[4, 5, 6]], [[9, 8, 7]]):
        encs = [s2s.encode(phones, params, cfg, "encA"), s2s.encode(np.array(words), params, cfg, "encB")]
        outs.append(s2s.decoder_logits(prev, encs, params, cfg, factors=factors).data)
    np.testing.assert_array_equal(outs[0], outs[1])


def test_encoder_dropout_cases():
    rng = np.random.default_rng(9)
    va, vb = Tensor(rng.normal(size=(50, 2, 3))), Tensor(rng.normal(size=(50, 2, 3)))
    a, b = s2s.encoder_dropout(va, vb, 0.0, rng)
    assert a is va and b is vb
    a, b = s2s.encoder_dropout(va, vb, 1.0, rng)
    for i in range(50):
        zero_a, zero_b = not a.data[i].any(), not b.data[i].any()
        assert zero_a != zero_b
        if zero_a:
            np.testing.assert_array_equal(b.data[i], 2 * vb.data[i])
        else:
            np.testing.assert_array_equal(a.data[i], 2 * va.data[i])
    with pytest.raises(ValueError):
        s2s.encoder_dropout_factors(3, 1.5, rng)


def test_encoder_dropout_frequencies():
    fa, fb = s2s.encoder_dropout_factors(100_000, 0.5, np.random.default_rng(10))
    assert abs((fa == 0).mean() - 0.25) < 0.01
    assert abs((fb == 0).mean() - 0.25) < 0.01
    assert abs(((fa == 1) & (fb == 1)).mean() - 0.5) < 0.01


# -- decoder -----------------------------------------------------------------------

def test_decode_step_zero_params_uniform():
    cfg = tiny_cfg()
    params = s2s.zero_params(cfg)
    encs = [s2s.encode(np.array([[4, 5]]), params, cfg)]
    np.testing.assert_allclose(s2s.decode_step([BOS_ID, 4], encs, params, cfg), np.full(8, 1 / 8), atol=1e-7)
    with pytest.raises(ValueError):
        s2s.decode_step([4], encs, params, cfg)


@pytest.mark.parametrize("mode", ["single", "dual"])
def test_decoder_is_causal_and_normalised(mode):
    cfg = tiny_cfg(mode)
    params = s2s.init_params(cfg, np.random.default_rng(11), np.float64)
    words, phones = np.array([[4, 5, 6]]), np.array([[4, 5, 6, 7]])
    encs = [s2s.encode(words, params, cfg, "enc")] if mode == "single" else \
        [s2s.encode(phones, params, cfg, "encA"), s2s.encode(words, params, cfg, "encB")]
    prev = np.array([[BOS_ID, 4, 5, 6, 7]])
    full = s2s.decoder_logits(prev, encs, params, cfg).data[0]
    for i in range(1, prev.shape[1]):
        changed = prev.copy()
        changed[0, i:] = 3
        other = s2s.decoder_logits(changed, encs, params, cfg).data[0]
        np.testing.assert_array_equal(full[:i], other[:i])
        dist = s2s.decode_step(prev[0, :i], encs, params, cfg)
        assert abs(dist.sum() - 1) < 1e-6


def test_decoder_overlong_target():
    cfg = tiny_cfg()
    params = s2s.zero_params(cfg)
    encs = [s2s.encode(np.array([[4]]), params, cfg)]
    with pytest.raises(ValueError):
        s2s.decoder_logits(np.full((1, cfg.max_positions + 1), BOS_ID), encs, params, cfg)


def test_eval_mode_deterministic():
    cfg = dataclasses.replace(tiny_cfg("dual"), dropout=0.2, encoder_dropout=0.5)
    params = s2s.init_params(cfg, np.random.default_rng(12))
    vocabs = small_vocabs()
    pair = UtterancePair("u", ["a", "b"], ["a", "c"], ["p", "q", "r"])
    a = s2s.forward_loss(pair, params, cfg, vocabs).item()
    b = s2s.forward_loss(pair, params, cfg, vocabs).item()
    assert a == b


# -- loss --------------------------------------------------------------------------

def small_vocabs():
    return Vocabs(Vocab(["a", "b", "c", "d", "e", "f"]), Vocab(["a", "b", "c", "d"]), Vocab(["p", "q", "r", "s", "t"]))


def test_forward_loss_zero_params_is_log_v():
    cfg = tiny_cfg()
    loss = s2s.forward_loss(UtterancePair("u", ["a", "b"], ["c", "a", "d"]), s2s.zero_params(cfg), cfg, small_vocabs())
    assert loss.item() == pytest.approx(math.log(8), abs=1e-6)


def test_forward_loss_perfect_model_is_zero():
    cfg = tiny_cfg()
    vocabs = small_vocabs()
    params = s2s.zero_params(cfg, np.float64)
    pair = UtterancePair("u", ["a"], ["c", "a", "d"])
    target = vocabs.tgt.encode(pair.recognized_words) + [EOS_ID]
    # decoder state at step i is the position embedding e_i; route it to the gold token
    for i, tok in enumerate(target):
        params["dec.pos"].data[i, i] = 100.0
        params["out.W"].data[tok, i] = 1.0
    assert s2s.forward_loss(pair, params, cfg, vocabs).item() < 1e-12


def test_forward_loss_empty_target():
    cfg = tiny_cfg()
    with pytest.raises(ValueError):
        s2s.forward_loss(UtterancePair("u", ["a"], []), s2s.zero_params(cfg), cfg, small_vocabs())


def test_single_model_gradient_check():
    cfg = tiny_cfg()
    vocabs = small_vocabs()
    params = s2s.init_params(cfg, np.random.default_rng(13), np.float64)
    batch = s2s.make_batch([UtterancePair("u", ["a", "b", "c"], ["a", "d"]),
                            UtterancePair("v", ["e"], ["b", "b", "c"])], vocabs)
    names = list(params)
    grads = dict(zip(names, nk.backward(s2s.batch_loss(batch, params, cfg), [params[n] for n in names])))
    eps = 1e-5
    for n in names:
        arr = params[n].data
        flat = arr.reshape(-1)
        for i in range(0, flat.size, max(1, flat.size // 6)):
            old = flat[i]
            flat[i] = old + eps
            hi = s2s.batch_loss(batch, params, cfg).item()
            flat[i] = old - eps
            lo = s2s.batch_loss(batch, params, cfg).item()
            flat[i] = old
            num = (hi - lo) / (2 * eps)
            an = grads[n].reshape(-1)[i]
            assert abs(an - num) <= 1e-5 * max(abs(num), abs(an), 1e-3), (n, i, an, num)


# -- inference wrapper -------------------------------------------------------------

def test_step_logprobs_mask_reserved():
    cfg = tiny_cfg("dual")
    model = Seq2Seq(cfg, s2s.init_params(cfg, np.random.default_rng(14)), small_vocabs(), Lexicon())
    model.vocabs.phone = Vocab(sorted({"k", "ae", "b", "d", "eh", "f", "t"}))
    step = model.scorer(["a", "b"])
    lp = step(np.array([[BOS_ID], [BOS_ID]]))
    assert lp.shape == (2, 8)
    assert np.isneginf(lp[:, PAD_ID]).all() and np.isneginf(lp[:, BOS_ID]).all()
    np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1, atol=1e-9)
