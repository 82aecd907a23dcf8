"""Teacher-forced training, finetuning and checkpoint files."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numkit as nk
from . import seq2seq as s2s
from .numkit import Tensor
from .seq2seq import ModelConfig, Seq2Seq, Vocabs
from .textprep import Lexicon, UtterancePair, Vocab

logger = logging.getLogger(__name__)

MAGIC = b"AHLC"
FORMAT_VERSION = 1


@dataclass
class TrainPlan:
    epochs: int = 60
    lr: float = 0.1
    momentum: float = 0.99
    batch_tokens: int = 4000
    dropout: float = 0.2
    encoder_dropout: float = 0.5
    seed: int = 0
    patience: int = 10
    clip_norm: float = 0.1  # 0 disables

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr >= 0 and 0 <= momentum < 1")
        if self.batch_tokens <= 0:
            raise ValueError("batch_tokens must be positive")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Checkpoint | None):
        super().__init__(message)
        self.checkpoint = checkpoint


class VocabMismatch(ValueError):
    pass


@dataclass
class Checkpoint:
    cfg: ModelConfig
    params: dict[str, np.ndarray]
    vocabs: Vocabs
    velocity: dict[str, np.ndarray] | None = None
    epoch: int = 0
    best_valid: float = float("inf")
    lexicon: Lexicon | None = None
    meta: dict = field(default_factory=dict)

    def model(self) -> Seq2Seq:
        params = {n: Tensor(a.copy(), requires_grad=True) for n, a in self.params.items()}
        return Seq2Seq(self.cfg, params, self.vocabs, self.lexicon)

    # -- binary format -----------------------------------------------------
    # magic "AHLC" | u32 version | u32 header length | JSON header (utf-8)
    # | u32 tensor count | per tensor: u16 name length, name, u8 ndim,
    # u32 dims..., float32 data; everything little-endian.

    def to_bytes(self) -> bytes:
        header = {
            "config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "best_valid": self.best_valid if np.isfinite(self.best_valid) else None,
            "vocabs": {name: v.tokens for name, v in self._vocab_items()},
            "vocab_hashes": {name: v.digest() for name, v in self._vocab_items()},
            "lexicon": self.lexicon.lines() if self.lexicon is not None else None,
            "meta": self.meta,
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        tensors = [(n, a) for n, a in self.params.items()]
        if self.velocity is not None:
            tensors += [(f"velocity/{n}", a) for n, a in self.velocity.items()]
        parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
        for name, arr in tensors:
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> Checkpoint:
        if data[:4] != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off = 12
        header = json.loads(data[off:off + hlen].decode("utf-8"))
        off += hlen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        params, velocity = {}, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            name = data[off + 2:off + 2 + nlen].decode("utf-8")
            off += 2 + nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            shape = struct.unpack_from(f"<{ndim}I", data, off + 1)
            off += 1 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
            off += 4 * size
            if name.startswith("velocity/"):
                velocity[name[len("velocity/"):]] = arr
            else:
                params[name] = arr
        vs = header["vocabs"]
        vocabs = Vocabs(Vocab(vs["src"]), Vocab(vs["tgt"]), Vocab(vs["phone"]) if "phone" in vs else None)
        for name, v in (("src", vocabs.src), ("tgt", vocabs.tgt), ("phone", vocabs.phone)):
            if v is not None and v.digest() != header["vocab_hashes"][name]:
                raise ValueError(f"checkpoint vocab {name!r} fails its content hash")
        lexicon = None
        if header["lexicon"] is not None:
            lexicon = Lexicon()
            for line in header["lexicon"]:
                w, ph = line.split("\t")
                lexicon.add(w, ph.split())
        best = header["best_valid"]
        return cls(ModelConfig.from_dict(header["config"]), params, vocabs, velocity or None, header["epoch"],
                   float("inf") if best is None else best, lexicon, header["meta"])

    def _vocab_items(self):
        items = [("src", self.vocabs.src), ("tgt", self.vocabs.tgt)]
        if self.vocabs.phone is not None:
            items.append(("phone", self.vocabs.phone))
        return items

    def save(self, path: str | Path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        return cls.from_bytes(Path(path).read_bytes())


def atomic_write(path: str | Path, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# batching


def example_length(pair: UtterancePair) -> int:
    return max(len(pair.true_words), len(pair.true_phones), len(pair.recognized_words) + 1)


def make_batches(pairs: Sequence[UtterancePair], budget: int, rng: np.random.Generator | None) -> list[list[int]]:
    """Group example indices into batches of at most ``budget`` padded tokens.

    Examples are length-sorted (a seeded shuffle breaks ties differently
    each epoch) and the batch order is shuffled.  ``rng=None`` keeps the
    corpus order for evaluation.
    """
    lens = [example_length(p) for p in pairs]
    if lens and max(lens) > budget:
        raise ValueError(f"batch token budget {budget} is smaller than the longest example ({max(lens)})")
    order = rng.permutation(len(pairs)) if rng is not None else np.arange(len(pairs))
    order = sorted(order.tolist(), key=lambda i: lens[i])
    batches: list[list[int]] = []
    cur: list[int] = []
    cur_max = 0
    for i in order:
        new_max = max(cur_max, lens[i])
        if cur and new_max * (len(cur) + 1) > budget:
            batches.append(cur)
            cur, new_max = [], lens[i]
        cur.append(i)
        cur_max = new_max
    if cur:
        batches.append(cur)
    if rng is not None:
        perm = rng.permutation(len(batches))
        batches = [batches[i] for i in perm]
    return batches


def evaluate_loss(pairs: Sequence[UtterancePair], params: dict[str, Tensor], cfg: ModelConfig, vocabs: Vocabs,
                  budget: int = 4000) -> float:
    """Per-token cross-entropy in eval mode (no dropout, no parameter change)."""
    total = tokens = 0.0
    with nk.no_grad():
        for idx in make_batches(pairs, budget, None):
            batch = s2s.make_batch([pairs[i] for i in idx], vocabs)
            loss = s2s.batch_loss(batch, params, cfg)
            total += loss.item() * batch.ntokens
            tokens += batch.ntokens
    return total / tokens


# ---------------------------------------------------------------------------
# training


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in params.items()}


def _run(train_pairs: Sequence[UtterancePair], valid_pairs: Sequence[UtterancePair], cfg: ModelConfig,
         vocabs: Vocabs, plan: TrainPlan, params: dict[str, Tensor], lexicon: Lexicon | None,
         log: Callable[[str], None] | None, meta: dict) -> Checkpoint:
    cfg = dataclasses.replace(cfg, dropout=plan.dropout, encoder_dropout=plan.encoder_dropout)
    rng = np.random.default_rng(plan.seed)
    names = list(params)
    plist = [params[n] for n in names]
    state = nk.NesterovState.for_params(plist, plan.lr, plan.momentum)

    def checkpoint(epoch, best):
        return Checkpoint(cfg, _snapshot(params), vocabs, dict(zip(names, (v.copy() for v in state.velocity))),
                          epoch, best, lexicon, dict(meta))

    select_on = valid_pairs if valid_pairs else train_pairs
    best_valid = evaluate_loss(select_on, params, cfg, vocabs, plan.batch_tokens) if select_on else float("inf")
    best = checkpoint(0, best_valid)
    stale = 0
    for epoch in range(1, plan.epochs + 1):
        total = tokens = 0.0
        for idx in make_batches(train_pairs, plan.batch_tokens, rng):
            batch = s2s.make_batch([train_pairs[i] for i in idx], vocabs)
            try:
                loss = s2s.batch_loss(batch, params, cfg, rng, train=True)
                grads = nk.backward(loss, plist)
                if plan.clip_norm > 0:
                    norm = nk.global_norm(grads)
                    if norm > plan.clip_norm:
                        grads = [g * (plan.clip_norm / norm) for g in grads]
                nk.nesterov_step(plist, grads, state)
            except (nk.NonFiniteError, FloatingPointError) as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", best) from exc
            total += loss.item() * batch.ntokens
            tokens += batch.ntokens
        train_loss = total / tokens
        try:
            valid_loss = evaluate_loss(select_on, params, cfg, vocabs, plan.batch_tokens)
        except (nk.NonFiniteError, FloatingPointError):
            valid_loss = float("nan")
        if not np.isfinite(valid_loss):
            raise TrainingDiverged(f"epoch {epoch}: non-finite validation loss", best)
        if log is not None:
            log(f"{epoch}\t{train_loss:.6f}\t{valid_loss:.6f}")
        logger.debug("epoch %d train %.4f valid %.4f", epoch, train_loss, valid_loss)
        if valid_loss < best_valid:
            best_valid = valid_loss
            best = checkpoint(epoch, best_valid)
            stale = 0
        else:
            stale += 1
            if plan.patience and stale >= plan.patience:
                logger.info("early stop after %d epochs without improvement", stale)
                break
    return best


def train(train_pairs: Sequence[UtterancePair], valid_pairs: Sequence[UtterancePair], cfg: ModelConfig,
          vocabs: Vocabs, plan: TrainPlan, lexicon: Lexicon | None = None,
          log: Callable[[str], None] | None = None) -> Checkpoint:
    """Train from scratch; returns the checkpoint with the best validation loss."""
    params = s2s.init_params(cfg, np.random.default_rng(plan.seed))
    return _run(train_pairs, valid_pairs, cfg, vocabs, plan, params, lexicon, log, {"regime": "train"})


def check_vocab(pairs: Sequence[UtterancePair], vocabs: Vocabs) -> list[str]:
    """Tokens in ``pairs`` that the vocabularies would map to UNK."""
    oov = set()
    for p in pairs:
        oov.update(w for w in p.true_words if w not in vocabs.src)
        oov.update(w for w in p.recognized_words if w not in vocabs.tgt)
    return sorted(oov)


def finetune(base: Checkpoint, train_pairs: Sequence[UtterancePair], valid_pairs: Sequence[UtterancePair],
             plan: TrainPlan, allow_unk: bool = False, log: Callable[[str], None] | None = None) -> Checkpoint:
    """Continue training ``base`` on new data with a fresh optimizer velocity."""
    oov = check_vocab(list(train_pairs) + list(valid_pairs), base.vocabs)
    if oov and not allow_unk:
        raise VocabMismatch(f"{len(oov)} finetune tokens missing from the base vocabulary "
                            f"(e.g. {oov[:5]}); rebuild with a union vocabulary or allow UNK mapping")
    params = {n: Tensor(a.copy(), requires_grad=True) for n, a in base.params.items()}
    meta = dict(base.meta, regime="finetune", base_epoch=base.epoch)
    ck = _run(train_pairs, valid_pairs, base.cfg, base.vocabs, plan, params, base.lexicon, log, meta)
    return ck
