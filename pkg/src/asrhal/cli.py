"""Command-line pipeline: preprocess, train, finetune, decode, evaluate, augment, synthcorpus.

Every command takes ``--config FILE`` (``key = value`` lines, ``#`` comments)
and one ``--key`` flag per setting; flags win over the file.  Outputs are
written atomically and each run leaves ``<output>.manifest.json`` behind.

Exit status: 0 success, 2 bad input or configuration, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .augment import AugmentPolicy, ModelSource, NBestSource, augment_corpus
from .channel import Channel, ChannelSpecError, synth_corpus
from .decoding import decode_corpus, format_nbest, read_nbest
from .evalkit import corpus_wer, format_report, recall_report
from .seq2seq import Vocabs, named_config
from .textprep import (Lexicon, UtterancePair, Vocab, attach_phones, filter_pairs, format_pair, phonemize,
                       read_corpus, remove_special_tokens, tokenize)
from .training import Checkpoint, TrainPlan, VocabMismatch, atomic_write, finetune, train

logger = logging.getLogger("asrhal")


class UsageError(Exception):
    """Bad configuration or input; maps to exit status 2."""


# ---------------------------------------------------------------------------
# settings

REQUIRED = object()


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Key:
    type: Callable[[str], Any]
    default: Any = REQUIRED
    help: str = ""


_PLAN = {
    "epochs": Key(int, 60), "lr": Key(float, 0.1), "momentum": Key(float, 0.99),
    "batch_tokens": Key(int, 4000), "dropout": Key(float, 0.2), "encoder_dropout": Key(float, 0.5),
    "seed": Key(int, 0), "patience": Key(int, 10), "clip_norm": Key(float, 0.1, "0 disables clipping"),
}

COMMANDS: dict[str, dict[str, Key]] = {
    "preprocess": {
        "inputs": Key(str, help="comma-separated raw corpora (id<TAB>true<TAB>recognized)"),
        "out_dir": Key(str),
        "lexicon": Key(str, "", "word<TAB>phones file; enables phoneme-based filtering"),
        "vocab_inputs": Key(str, "", "corpora the vocabularies are built from (default: first input)"),
        "min_count": Key(int, 1),
    },
    "train": {
        "train": Key(str), "valid": Key(str, ""), "vocab_dir": Key(str), "lexicon": Key(str, ""),
        "model": Key(str, "toy", "toy, tiny or paper"), "mode": Key(str, "single", "single or dual"),
        **_PLAN, "out": Key(str),
    },
    "finetune": {
        "base": Key(str), "train": Key(str), "valid": Key(str, ""),
        **_PLAN, "epochs": Key(int, 15),
        "allow_unk": Key(_bool, False, "map unseen tokens to <unk> instead of failing"), "out": Key(str),
    },
    "decode": {
        "checkpoint": Key(str), "corpus": Key(str), "method": Key(str, "sample", "sample or beam"),
        "k": Key(int, 100), "beam": Key(int, 256), "min_samples": Key(int, 250), "max_samples": Key(int, 1000),
        "seed": Key(int, 0), "out": Key(str),
    },
    "evaluate": {"corpus": Key(str), "nbest": Key(str), "k": Key(int, 100), "out": Key(str)},
    "augment": {
        "corpus": Key(str), "checkpoint": Key(str, ""), "nbest": Key(str, ""), "rate": Key(float),
        "resample": Key(_bool, True), "epoch": Key(int, 0), "seed": Key(int, 0), "out": Key(str),
        "sidecar": Key(str, "", "optional id<TAB>0/1 file marking replaced lines"),
    },
    "synthcorpus": {
        "channel": Key(str), "size": Key(int), "seed": Key(int, 0), "max_outputs": Key(int, 50),
        "prefix": Key(str, "utt"), "out": Key(str),
    },
}


def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(command: str, file_values: dict[str, str], flag_values: dict[str, Any]) -> dict[str, Any]:
    """Defaults, then config file, then flags.  Unknown keys are rejected."""
    keys = COMMANDS[command]
    unknown = sorted(set(file_values) - set(keys))
    if unknown:
        raise UsageError(f"unknown {command} setting(s): {', '.join(unknown)}")
    merged = {**file_values, **{k: v for k, v in flag_values.items() if v is not None}}
    cfg = {}
    for name, key in keys.items():
        if name in merged:
            try:
                cfg[name] = key.type(merged[name])
            except ValueError as exc:
                raise UsageError(f"{name}: {exc}") from None
        elif key.default is REQUIRED:
            raise UsageError(f"{command}: missing required setting {name!r}")
        else:
            cfg[name] = key.default
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asrhal", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, keys in COMMANDS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", help="key = value settings file")
        for name, key in keys.items():
            # strings only here; conversion happens after merging with the config file
            default = "required" if key.default is REQUIRED else repr(key.default)
            p.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None,
                           help=f"{key.help} (default: {default})".strip())
    return parser


# ---------------------------------------------------------------------------
# helpers


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _guard_output(out: str | Path, inputs: Sequence[Path]) -> Path:
    out = Path(out)
    for p in inputs:
        if p.exists() and out.exists() and out.resolve() == p.resolve():
            raise UsageError(f"refusing to overwrite input {p}")
    if not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, cfg: dict, inputs: Sequence[Path], outputs: Sequence[Path]) -> None:
    manifest = {
        "tool": "asrhal",
        "version": __version__,
        "command": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
    }
    atomic_write(Path(f"{out}.manifest.json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_pairs(path: str, what: str) -> list[UtterancePair]:
    return read_corpus(_existing(path, what))


def _need_targets(pairs: Sequence[UtterancePair], path: str) -> None:
    missing = [p.id for p in pairs if not p.recognized_words]
    if missing:
        raise UsageError(f"{path}: {len(missing)} pairs lack recognized text (e.g. {missing[0]})")


def _plan(cfg: dict) -> TrainPlan:
    try:
        return TrainPlan(**{k: cfg[k] for k in _PLAN})
    except ValueError as exc:
        raise UsageError(str(exc)) from None


class _EpochLog:
    def __init__(self, cfg: dict):
        self.lines = [f"# {k}={v}" for k, v in cfg.items()]

    def __call__(self, line: str) -> None:
        self.lines.append(line)
        print(line, file=sys.stderr, flush=True)

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(cfg: dict) -> None:
    inputs = [_existing(p, "corpus") for p in cfg["inputs"].split(",") if p]
    if not inputs:
        raise UsageError("preprocess: no inputs given")
    vocab_from = [_existing(p, "corpus") for p in cfg["vocab_inputs"].split(",") if p] or inputs[:1]
    lex_path = [_existing(cfg["lexicon"], "lexicon")] if cfg["lexicon"] else []
    lex = Lexicon.read(lex_path[0]) if lex_path else None
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs, cleaned, report_lines = [], {}, []
    for path in dict.fromkeys(inputs + vocab_from):
        kept, rep = filter_pairs(read_corpus(path), lex)
        cleaned[path] = kept
        report_lines.append(f"{path.name}\t{rep.total}\t{rep.removed}\t{rep.percent_removed:.2f}")
        if path in inputs:
            out = _guard_output(out_dir / path.name, inputs)
            atomic_write(out, "".join(format_pair(p) + "\n" for p in kept))
            outputs.append(out)
    pool = [p for path in vocab_from for p in cleaned[path]]
    lex = lex or Lexicon()
    vocabs = {
        "src.vocab": Vocab.build((p.true_words for p in pool), cfg["min_count"]),
        "tgt.vocab": Vocab.build((p.recognized_words for p in pool), cfg["min_count"]),
        "phone.vocab": Vocab.build((phonemize(p.true_words, lex) for p in pool), 1),
    }
    for name, vocab in vocabs.items():
        atomic_write(out_dir / name, "".join(t + "\n" for t in vocab.itos))
        outputs.append(out_dir / name)
    report = out_dir / "filter_report.tsv"
    atomic_write(report, "file\ttotal\tremoved\tpercent_removed\n" + "\n".join(report_lines) + "\n")
    outputs.append(report)
    write_manifest(out_dir / "preprocess", "preprocess", cfg, list(dict.fromkeys(inputs + vocab_from + lex_path)),
                   outputs)


def _phones(pairs: Sequence[UtterancePair], lex: Lexicon) -> None:
    try:
        attach_phones(pairs, lex)
    except ValueError as exc:
        raise UsageError(f"cannot phonemize corpus: {exc}") from None


def cmd_train(cfg: dict) -> None:
    if cfg["mode"] not in ("single", "dual"):
        raise UsageError(f"mode must be single or dual, got {cfg['mode']!r}")
    vdir = Path(cfg["vocab_dir"])
    inputs = [_existing(cfg["train"], "training corpus"), _existing(vdir / "src.vocab", "vocabulary"),
              _existing(vdir / "tgt.vocab", "vocabulary")]
    train_pairs = read_corpus(inputs[0])
    valid_pairs = []
    if cfg["valid"]:
        inputs.append(_existing(cfg["valid"], "validation corpus"))
        valid_pairs = read_corpus(inputs[-1])
    _need_targets(train_pairs + valid_pairs, cfg["train"])
    dual = cfg["mode"] == "dual"
    lexicon = None
    vocabs = Vocabs(Vocab.read(inputs[1]), Vocab.read(inputs[2]))
    if dual:
        inputs.append(_existing(vdir / "phone.vocab", "vocabulary"))
        vocabs.phone = Vocab.read(inputs[-1])
        if cfg["lexicon"]:
            inputs.append(_existing(cfg["lexicon"], "lexicon"))
            lexicon = Lexicon.read(inputs[-1])
        else:
            lexicon = Lexicon()
        _phones(train_pairs + valid_pairs, lexicon)
    try:
        mcfg = named_config(cfg["model"], cfg["mode"], len(vocabs.src), len(vocabs.tgt),
                            len(vocabs.phone) if dual else 0)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _guard_output(cfg["out"], inputs)
    log = _EpochLog(cfg)
    ck = train(train_pairs, valid_pairs, mcfg, vocabs, _plan(cfg), lexicon, log)
    ck.save(out)
    atomic_write(Path(f"{out}.log"), log.text())
    write_manifest(out, "train", cfg, inputs, [out])


def cmd_finetune(cfg: dict) -> None:
    inputs = [_existing(cfg["base"], "base checkpoint"), _existing(cfg["train"], "finetune corpus")]
    base = Checkpoint.load(inputs[0])
    train_pairs = read_corpus(inputs[1])
    valid_pairs = []
    if cfg["valid"]:
        inputs.append(_existing(cfg["valid"], "validation corpus"))
        valid_pairs = read_corpus(inputs[-1])
    _need_targets(train_pairs + valid_pairs, cfg["train"])
    if base.cfg.mode == "dual":
        _phones(train_pairs + valid_pairs, base.lexicon or Lexicon())
    out = _guard_output(cfg["out"], inputs)
    log = _EpochLog(cfg)
    ck = finetune(base, train_pairs, valid_pairs, _plan(cfg), allow_unk=cfg["allow_unk"], log=log)
    ck.save(out)
    atomic_write(Path(f"{out}.log"), log.text())
    write_manifest(out, "finetune", cfg, inputs, [out])


def cmd_decode(cfg: dict) -> None:
    if cfg["method"] not in ("sample", "beam"):
        raise UsageError(f"method must be sample or beam, got {cfg['method']!r}")
    if cfg["k"] < 1 or (cfg["method"] == "beam" and cfg["beam"] < cfg["k"]):
        raise UsageError("need k >= 1 and, for beam search, beam >= k")
    if not 1 <= cfg["min_samples"] <= cfg["max_samples"]:
        raise UsageError("need 1 <= min_samples <= max_samples")
    inputs = [_existing(cfg["checkpoint"], "checkpoint"), _existing(cfg["corpus"], "corpus")]
    model = Checkpoint.load(inputs[0]).model()
    pairs = read_corpus(inputs[1])
    lists = decode_corpus(model, pairs, cfg["method"], cfg["k"], cfg["beam"], cfg["seed"],
                          cfg["min_samples"], cfg["max_samples"])
    out = _guard_output(cfg["out"], inputs)
    atomic_write(out, format_nbest(lists, model.vocabs.tgt))
    write_manifest(out, "decode", cfg, inputs, [out])


def cmd_evaluate(cfg: dict) -> None:
    inputs = [_existing(cfg["corpus"], "corpus"), _existing(cfg["nbest"], "n-best file")]
    pairs = read_corpus(inputs[0])
    _need_targets(pairs, cfg["corpus"])
    nbest = read_nbest(inputs[1])
    try:
        report = recall_report(pairs, nbest, cfg["k"])
    except KeyError as exc:
        raise UsageError(f"n-best file has no entry for {exc}") from None
    extra = {}
    top = [nbest[p.id][0] if nbest[p.id] else [] for p in pairs]
    if any(p.recognized_words for p in pairs):
        extra["top1_wer"] = corpus_wer([p.recognized_words for p in pairs], top)
    table, machine = format_report(report, extra)
    out = _guard_output(cfg["out"], inputs)
    atomic_write(out, machine)
    sys.stdout.write(table)
    write_manifest(out, "evaluate", cfg, inputs, [out])


def cmd_augment(cfg: dict) -> None:
    if bool(cfg["checkpoint"]) == bool(cfg["nbest"]):
        raise UsageError("augment needs exactly one of checkpoint or nbest")
    try:
        policy = AugmentPolicy(cfg["rate"], cfg["resample"], cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    corpus = _existing(cfg["corpus"], "corpus")
    inputs = [corpus]
    if cfg["checkpoint"]:
        inputs.append(_existing(cfg["checkpoint"], "checkpoint"))
        source = ModelSource(Checkpoint.load(inputs[-1]).model())
    else:
        inputs.append(_existing(cfg["nbest"], "n-best file"))
        source = NBestSource(read_nbest(inputs[-1]))
    raw_lines, pairs = [], []
    with open(corpus, encoding="utf-8", newline="") as f:
        for lineno, line in enumerate(f, 1):
            raw_lines.append(line)
            if not line.strip():
                pairs.append(None)
                continue
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) not in (2, 3):
                raise UsageError(f"{corpus}:{lineno}: expected 2 or 3 tab-separated fields")
            pairs.append(UtterancePair(parts[0], tokenize(remove_special_tokens(parts[1]))))
    live = [p for p in pairs if p is not None]
    try:
        views = iter(augment_corpus(live, source, policy, cfg["epoch"]))
        out_lines, marks = [], []
        for raw, pair in zip(raw_lines, pairs):
            if pair is None:
                out_lines.append(raw)
                continue
            new, replaced = next(views)
            if replaced:
                true_field = raw.rstrip("\r\n").split("\t")[1]
                out_lines.append(f"{pair.id}\t{true_field}\t{' '.join(new.recognized_words)}\n")
            else:
                out_lines.append(raw)
            marks.append(f"{pair.id}\t{int(replaced)}\n")
    except KeyError as exc:
        raise UsageError(str(exc)) from None
    out = _guard_output(cfg["out"], inputs)
    atomic_write(out, "".join(out_lines))
    outputs = [out]
    if cfg["sidecar"]:
        side = _guard_output(cfg["sidecar"], inputs)
        atomic_write(side, "".join(marks))
        outputs.append(side)
    write_manifest(out, "augment", cfg, inputs, outputs)


def cmd_synthcorpus(cfg: dict) -> None:
    path = _existing(cfg["channel"], "channel spec")
    if cfg["size"] < 0 or cfg["max_outputs"] < 1:
        raise UsageError("need size >= 0 and max_outputs >= 1")
    channel = Channel.read(path)
    pairs = synth_corpus(channel, cfg["size"], np.random.default_rng(cfg["seed"]), cfg["max_outputs"],
                         cfg["prefix"])
    out = _guard_output(cfg["out"], [path])
    atomic_write(out, "".join(format_pair(p) + "\n" for p in pairs))
    write_manifest(out, "synthcorpus", cfg, [path], [out])


HANDLERS = {
    "preprocess": cmd_preprocess, "train": cmd_train, "finetune": cmd_finetune, "decode": cmd_decode,
    "evaluate": cmd_evaluate, "augment": cmd_augment, "synthcorpus": cmd_synthcorpus,
}

VALIDATION_ERRORS = (UsageError, VocabMismatch, ChannelSpecError, FileNotFoundError, ValueError)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.command
    flags = {k: v for k, v in vars(args).items() if k in COMMANDS[command]}
    try:
        cfg = resolve(command, read_config_file(args.config) if args.config else {}, flags)
        for k, v in cfg.items():
            logger.info("config %s=%s", k, v)
        HANDLERS[command](cfg)
    except VALIDATION_ERRORS as exc:
        print(f"asrhal {command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        print(f"asrhal {command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
