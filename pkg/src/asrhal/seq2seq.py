"""Convolutional encoder-decoder models for ASR error hallucination.

Two variants share one decoder:

* ``single``: a word encoder feeds every decoder layer's attention.
* ``dual``: a phoneme encoder (A) and a word encoder (B) are attended with
  one shared query per layer; the two contexts are concatenated and mixed
  by a linear layer.  During training one encoder may be dropped per
  example (encoder dropout).

All functions take parameters as a plain ``dict[str, Tensor]`` so a model
is just data; randomness (dropout) always comes from an explicit generator.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numkit as nk
from .numkit import Tensor
from .textprep import BOS_ID, EOS_ID, PAD_ID, Lexicon, UtterancePair, Vocab, phonemize

Layer = tuple[int, int]  # (channels, kernel width)


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    phone_vocab: int = 0
    mode: str = "single"
    embed_dim: int = 64
    enc_layers: list[Layer] = field(default_factory=lambda: [(64, 3), (64, 3)])
    dec_layers: list[Layer] = field(default_factory=lambda: [(64, 3), (64, 3)])
    max_positions: int = 256
    dropout: float = 0.2
    encoder_dropout: float = 0.5

    def __post_init__(self):
        self.enc_layers = [tuple(x) for x in self.enc_layers]
        self.dec_layers = [tuple(x) for x in self.dec_layers]
        if self.mode not in ("single", "dual"):
            raise ValueError(f"mode must be 'single' or 'dual', got {self.mode!r}")
        if self.mode == "dual" and self.phone_vocab <= 0:
            raise ValueError("dual mode needs a phoneme vocabulary")
        dims = [self.src_vocab, self.tgt_vocab, self.embed_dim, self.max_positions]
        dims += [v for layer in self.enc_layers + self.dec_layers for v in layer]
        if min(dims) <= 0 or not self.enc_layers or not self.dec_layers:
            raise ValueError("all model dimensions must be positive")
        if any(k % 2 == 0 for _, k in self.enc_layers):
            raise ValueError("encoder kernel widths must be odd")
        if any(c != self.embed_dim for c, _ in self.dec_layers):
            raise ValueError("decoder channels must equal embed_dim")
        if not (0 <= self.dropout < 1 and 0 <= self.encoder_dropout <= 1):
            raise ValueError("dropout must be in [0, 1), encoder_dropout in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


def named_config(name: str, mode: str, src_vocab: int, tgt_vocab: int, phone_vocab: int = 0,
                 **overrides) -> ModelConfig:
    """``toy`` (desk scale), ``tiny`` (gradient checks) or ``paper`` sized models."""
    if name == "paper":
        word = [(256, 3)] * 4
        ladder = [(64, 11)] * 3 + [(128, 7)] * 2 + [(256, 5)]
        kw = dict(embed_dim=256, enc_layers=ladder if mode == "dual" else word,
                  dec_layers=[(256, 3)] * 3, max_positions=1024)
    elif name == "toy":
        kw = dict(embed_dim=64, enc_layers=[(16, 11), (32, 7), (64, 5)] if mode == "dual" else [(64, 3)] * 2,
                  dec_layers=[(64, 3)] * 2, max_positions=256)
    elif name == "tiny":
        kw = dict(embed_dim=8, enc_layers=[(4, 3)] if mode == "dual" else [(8, 3)],
                  dec_layers=[(8, 3)], max_positions=64)
    else:
        raise ValueError(f"unknown model config {name!r}")
    kw.update(overrides)
    return ModelConfig(src_vocab=src_vocab, tgt_vocab=tgt_vocab, phone_vocab=phone_vocab, mode=mode, **kw)


# ---------------------------------------------------------------------------
# parameters


def _encoder_shapes(prefix: str, vocab: int, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.embed_dim
    shapes = {f"{prefix}.embed": (vocab, d), f"{prefix}.pos": (cfg.max_positions, d)}
    cin = cfg.enc_layers[0][0]
    if cin != d:
        shapes[f"{prefix}.fc_in.W"] = (cin, d)
        shapes[f"{prefix}.fc_in.b"] = (cin,)
    for i, (c, k) in enumerate(cfg.enc_layers):
        shapes[f"{prefix}.conv{i}.W"] = (2 * c, cin, k)
        shapes[f"{prefix}.conv{i}.b"] = (2 * c,)
        if cin != c:
            shapes[f"{prefix}.conv{i}.res.W"] = (c, cin)
            shapes[f"{prefix}.conv{i}.res.b"] = (c,)
        cin = c
    if cin != d:
        shapes[f"{prefix}.fc_out.W"] = (d, cin)
        shapes[f"{prefix}.fc_out.b"] = (d,)
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.embed_dim
    if cfg.mode == "dual":
        shapes = _encoder_shapes("encA", cfg.phone_vocab, cfg)
        shapes.update(_encoder_shapes("encB", cfg.src_vocab, cfg))
    else:
        shapes = _encoder_shapes("enc", cfg.src_vocab, cfg)
    shapes["dec.embed"] = (cfg.tgt_vocab, d)
    shapes["dec.pos"] = (cfg.max_positions, d)
    for i, (c, k) in enumerate(cfg.dec_layers):
        shapes[f"dec.conv{i}.W"] = (2 * c, c, k)
        shapes[f"dec.conv{i}.b"] = (2 * c,)
        shapes[f"dec.att{i}.W"] = (d, c)
        shapes[f"dec.att{i}.b"] = (d,)
    if cfg.mode == "dual":
        shapes["dual.W"] = (d, 2 * d)
        shapes["dual.b"] = (d,)
    shapes["out.W"] = (cfg.tgt_vocab, d)
    shapes["out.b"] = (cfg.tgt_vocab,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases, N(0, 0.1) embeddings."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith((".embed", ".pos")):
            arr = rng.normal(0.0, 0.1, shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            rf = shape[2] if len(shape) == 3 else 1
            a = math.sqrt(6.0 / (shape[0] * rf + shape[1] * rf))
            arr = rng.uniform(-a, a, shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return params


def zero_params(cfg: ModelConfig, dtype=np.float32) -> dict[str, Tensor]:
    return {n: Tensor(np.zeros(s, dtype=dtype), requires_grad=True) for n, s in param_shapes(cfg).items()}


def cast_params(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    return {n: Tensor(p.data.astype(dtype), requires_grad=True) for n, p in params.items()}


# ---------------------------------------------------------------------------
# encoder


@dataclass
class EncoderOut:
    keys: Tensor    # [B, n, d]  final hidden states
    values: Tensor  # [B, n, d]  hidden + input embedding
    mask: np.ndarray  # [B, n] True at real positions


def _positions(n: int, max_positions: int, what: str) -> np.ndarray:
    if n > max_positions:
        raise ValueError(f"{what} length {n} exceeds max_positions {max_positions}")
    return np.arange(n)


def encode(tokens: np.ndarray, params: dict[str, Tensor], cfg: ModelConfig, prefix: str = "enc",
           rng: np.random.Generator | None = None) -> EncoderOut:
    """Run one encoder over padded token ids ``[B, n]`` (PAD = 0).

    Padded positions are zeroed before every convolution so a batched
    sequence is encoded exactly as it would be alone.
    """
    tokens = np.atleast_2d(np.asarray(tokens))
    mask = tokens != PAD_ID
    if not mask.any(axis=1).all():
        raise ValueError("encoder input contains an empty sequence")
    pos = _positions(tokens.shape[1], cfg.max_positions, "source")
    keep = mask[..., None].astype(params[f"{prefix}.embed"].dtype)
    p_drop = cfg.dropout if rng is not None else 0.0

    emb = nk.add(nk.embedding(params[f"{prefix}.embed"], tokens), nk.embedding(params[f"{prefix}.pos"], pos))
    x = emb
    if f"{prefix}.fc_in.W" in params:
        x = nk.linear(x, params[f"{prefix}.fc_in.W"], params[f"{prefix}.fc_in.b"])
    for i in range(len(cfg.enc_layers)):
        x = nk.mul(x, keep)
        h = nk.dropout(x, p_drop, rng)
        h = nk.glu(nk.conv1d(h, params[f"{prefix}.conv{i}.W"], params[f"{prefix}.conv{i}.b"], "same"))
        if f"{prefix}.conv{i}.res.W" in params:
            x = nk.linear(x, params[f"{prefix}.conv{i}.res.W"], params[f"{prefix}.conv{i}.res.b"])
        x = nk.add(x, h)
    x = nk.dropout(nk.mul(x, keep), p_drop, rng)
    if f"{prefix}.fc_out.W" in params:
        x = nk.linear(x, params[f"{prefix}.fc_out.W"], params[f"{prefix}.fc_out.b"])
    return EncoderOut(keys=x, values=nk.add(x, emb), mask=mask)


def receptive_radius(cfg: ModelConfig) -> int:
    return sum((k - 1) // 2 for _, k in cfg.enc_layers)


# ---------------------------------------------------------------------------
# attention


def attention_weights(q: Tensor, enc: EncoderOut) -> Tensor:
    """softmax_j(q_i . k_j) over encoder positions; masked positions get exactly 0."""
    scores = nk.matmul(q, nk.swap_last(enc.keys))
    return nk.masked_softmax(scores, enc.mask[:, None, :])


def query(p: Tensor, g: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return nk.add(nk.linear(p, W, b), g)


def attend(p: Tensor, g: Tensor, enc: EncoderOut, W: Tensor, b: Tensor) -> Tensor:
    """Context c_i = sum_j a_ij v_j with q_i = W p_i + b + g_{i-1}."""
    a = attention_weights(query(p, g, W, b), enc)
    return nk.matmul(a, enc.values)


def encoder_dropout_factors(batch: int, p_d: float, rng: np.random.Generator | None,
                            dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Per-example multipliers for the two attended values.

    With probability p_d/2 encoder A is dropped (A x0, B x2), with p_d/2
    encoder B is dropped (A x2, B x0), otherwise both are kept (x1).
    """
    if not 0 <= p_d <= 1:
        raise ValueError(f"encoder dropout must be in [0, 1], got {p_d}")
    fa = np.ones(batch, dtype=dtype)
    fb = np.ones(batch, dtype=dtype)
    if p_d == 0 or rng is None:
        return fa, fb
    u = rng.random(batch)
    drop_a = u < p_d / 2
    drop_b = (u >= p_d / 2) & (u < p_d)
    fa[drop_a], fb[drop_a] = 0, 2
    fa[drop_b], fb[drop_b] = 2, 0
    return fa, fb


def encoder_dropout(va: Tensor, vb: Tensor, p_d: float, rng: np.random.Generator | None) -> tuple[Tensor, Tensor]:
    """Apply encoder dropout to attended values ``[B, ...]``, one draw per example."""
    fa, fb = encoder_dropout_factors(va.shape[0], p_d, rng, va.dtype)
    return _apply_factors(va, vb, fa, fb)


def _apply_factors(va, vb, fa, fb):
    if (fa == 1).all() and (fb == 1).all():
        return va, vb
    shape = (-1,) + (1,) * (va.data.ndim - 1)
    return nk.mul(va, fa.reshape(shape)), nk.mul(vb, fb.reshape(shape))


def dual_attend(p: Tensor, g: Tensor, enc_a: EncoderOut, enc_b: EncoderOut, W: Tensor, b: Tensor,
                W_dual: Tensor, b_dual: Tensor | None,
                factors: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """Attend to both encoders with one shared query and mix the contexts linearly."""
    if enc_a is None or enc_b is None:
        raise ValueError("dual attention needs both encoders")
    q = query(p, g, W, b)
    va = nk.matmul(attention_weights(q, enc_a), enc_a.values)
    vb = nk.matmul(attention_weights(q, enc_b), enc_b.values)
    if factors is not None:
        va, vb = _apply_factors(va, vb, *factors)
    return nk.linear(nk.concat([va, vb], axis=-1), W_dual, b_dual)


# ---------------------------------------------------------------------------
# decoder


def decoder_logits(prev: np.ndarray, encs: Sequence[EncoderOut], params: dict[str, Tensor], cfg: ModelConfig,
                   rng: np.random.Generator | None = None,
                   factors: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """Logits ``[B, m, V]`` for every position of the decoder input ``prev`` ``[B, m]``.

    ``prev`` starts with BOS; position i only sees prev[:, :i+1].
    ``encs`` is ``[word]`` in single mode and ``[phones, words]`` in dual mode.
    """
    prev = np.atleast_2d(np.asarray(prev))
    pos = _positions(prev.shape[1], cfg.max_positions, "target")
    p_drop = cfg.dropout if rng is not None else 0.0
    g = nk.add(nk.embedding(params["dec.embed"], prev), nk.embedding(params["dec.pos"], pos))
    x = g
    for i in range(len(cfg.dec_layers)):
        h = nk.glu(nk.conv1d(nk.dropout(x, p_drop, rng), params[f"dec.conv{i}.W"], params[f"dec.conv{i}.b"], "causal"))
        p = nk.add(x, h)
        W, b = params[f"dec.att{i}.W"], params[f"dec.att{i}.b"]
        if cfg.mode == "dual":
            ctx = dual_attend(p, g, encs[0], encs[1], W, b, params["dual.W"], params["dual.b"], factors)
        else:
            ctx = attend(p, g, encs[0], W, b)
        x = nk.add(p, ctx)
    x = nk.dropout(x, p_drop, rng)
    return nk.linear(x, params["out.W"], params["out.b"])


def decode_step(prev: Sequence[int], encs: Sequence[EncoderOut], params: dict[str, Tensor],
                cfg: ModelConfig) -> np.ndarray:
    """Distribution over the target vocabulary for the step after ``prev`` (eval mode)."""
    prev = list(prev)
    if not prev or prev[0] != BOS_ID:
        raise ValueError("decoder prefix must start with BOS")
    with nk.no_grad():
        logits = decoder_logits(np.asarray([prev]), encs, params, cfg)
    return nk.softmax_row(logits.data[0, -1]).data


# ---------------------------------------------------------------------------
# batches and loss


@dataclass
class Batch:
    src: np.ndarray           # [B, n] word ids
    phones: np.ndarray | None  # [B, n'] phone ids (dual mode)
    prev: np.ndarray          # [B, m+1] BOS + target ids
    target: np.ndarray        # [B, m+1] target ids + EOS
    weights: np.ndarray       # [B, m+1] 1 at real target positions

    @property
    def ntokens(self) -> int:
        return int(self.weights.sum())

    def __len__(self) -> int:
        return self.src.shape[0]


def _pad(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


@dataclass
class Vocabs:
    src: Vocab
    tgt: Vocab
    phone: Vocab | None = None


def make_batch(pairs: Sequence[UtterancePair], vocabs: Vocabs, with_target: bool = True) -> Batch:
    src = _pad([vocabs.src.encode(p.true_words) for p in pairs])
    phones = None
    if vocabs.phone is not None:
        phones = _pad([vocabs.phone.encode(p.true_phones) for p in pairs])
    if not with_target:
        return Batch(src, phones, np.full((len(pairs), 1), BOS_ID), np.zeros((len(pairs), 1), np.int64),
                     np.zeros((len(pairs), 1)))
    tgts = [vocabs.tgt.encode(p.recognized_words) for p in pairs]
    prev = _pad([[BOS_ID] + t for t in tgts])
    target = _pad([t + [EOS_ID] for t in tgts])
    weights = np.zeros(target.shape)
    for i, t in enumerate(tgts):
        weights[i, :len(t) + 1] = 1
    return Batch(src, phones, prev, target, weights)


def encode_batch(batch: Batch, params: dict[str, Tensor], cfg: ModelConfig,
                 rng: np.random.Generator | None = None) -> list[EncoderOut]:
    if cfg.mode == "dual":
        if batch.phones is None:
            raise ValueError("dual mode batch has no phoneme sequences")
        return [encode(batch.phones, params, cfg, "encA", rng), encode(batch.src, params, cfg, "encB", rng)]
    return [encode(batch.src, params, cfg, "enc", rng)]


def batch_loss(batch: Batch, params: dict[str, Tensor], cfg: ModelConfig,
               rng: np.random.Generator | None = None, train: bool = False) -> Tensor:
    """Teacher-forced cross-entropy averaged over target tokens (incl. EOS)."""
    rng = rng if train else None
    encs = encode_batch(batch, params, cfg, rng)
    factors = None
    if cfg.mode == "dual" and train:
        factors = encoder_dropout_factors(len(batch), cfg.encoder_dropout, rng, params["dec.embed"].dtype)
    logits = decoder_logits(batch.prev, encs, params, cfg, rng, factors)
    return nk.cross_entropy(logits, batch.target, batch.weights)


def forward_loss(pair: UtterancePair, params: dict[str, Tensor], cfg: ModelConfig, vocabs: Vocabs,
                 rng: np.random.Generator | None = None, train: bool = False) -> Tensor:
    if not pair.recognized_words:
        raise ValueError(f"pair {pair.id!r} has no recognized words to train on")
    return batch_loss(make_batch([pair], vocabs), params, cfg, rng, train)


# ---------------------------------------------------------------------------
# inference wrapper


@dataclass
class Seq2Seq:
    """A trained model plus everything needed to run it on raw word sequences."""

    cfg: ModelConfig
    params: dict[str, Tensor]
    vocabs: Vocabs
    lexicon: Lexicon | None = None

    def pair_for(self, words: Sequence[str], pid: str = "") -> UtterancePair:
        pair = UtterancePair(pid, list(words))
        if self.cfg.mode == "dual":
            pair.true_phones = phonemize(pair.true_words, self.lexicon or Lexicon())
        return pair

    def encode_words(self, words: Sequence[str]) -> list[EncoderOut]:
        batch = make_batch([self.pair_for(words)], self.vocabs, with_target=False)
        with nk.no_grad():
            return encode_batch(batch, self.params, self.cfg)

    def step_logprobs(self, encs: Sequence[EncoderOut], prefixes: np.ndarray) -> np.ndarray:
        """Log-probabilities ``[N, V]`` of the next token after each BOS-initial prefix.

        PAD and BOS can never be emitted, so they are masked out and the rest
        renormalised.
        """
        prefixes = np.atleast_2d(prefixes)
        with nk.no_grad():
            logits = decoder_logits(prefixes, encs, self.params, self.cfg).data[:, -1, :].astype(np.float64)
        logits[:, PAD_ID] = -np.inf
        logits[:, BOS_ID] = -np.inf
        return nk.log_softmax(logits)

    def scorer(self, words: Sequence[str]):
        """Bind a source sentence; returns ``prefixes -> logprobs`` for the decoders."""
        encs = self.encode_words(words)
        return lambda prefixes: self.step_logprobs(encs, prefixes)
