"""Command-line interface: ``lyricgen train|generate|evaluate|structure|keywords``.

Settings resolve as command-line flags, then the ``--config`` file
(``key = value`` lines or a JSON object), then built-in defaults.

Exit codes: 0 success, 2 usage or configuration error, 3 data/model
mismatch, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

from .corpus import (
    Segmenter,
    SyntheticSpec,
    atomic_write_text,
    build_vocab,
    bundled_corpus_path,
    corpus_pairs,
    encode_pairs,
    generate_synthetic_corpus,
    lexicon_from_corpus,
    normalize_sentence,
    read_corpus,
    read_pairs_jsonl,
    textrank_keywords,
    write_corpus,
    write_pairs_jsonl,
)
from .decoding import DEFAULT_BEAM, compose_lyrics
from .errors import (
    AlignmentError,
    CheckpointError,
    ConfigError,
    ContractError,
    ParseError,
    TrainingDivergenceError,
)
from .evaluation import evaluate
from .melody import DEFAULT_LONG_NOTE, parse_melody
from .model import build_model
from .training import TrainConfig, config_dict, load_checkpoint, save_checkpoint, train, write_log

log = logging.getLogger("lyricgen")

EXIT_OK, EXIT_USAGE, EXIT_MISMATCH, EXIT_DIVERGED = 0, 2, 3, 4
EMPTY_MARKER = "-"

DEFAULTS = {
    **config_dict(TrainConfig()),
    "beam_width": DEFAULT_BEAM,
    "mode": "SG",
    "long_note_threshold": str(DEFAULT_LONG_NOTE),
    "keywords": False,
    "keyword_source": "target",
    "min_count": 1,
    "target_loss": None,
    "corpus": None,
    "checkpoint": None,
    "log": None,
    "figure": None,
    "melody": None,
    "vocab": None,
    "lexicon": None,
    "out": None,
}
ALIASES = {"dropout": "dropout_rate", "beam": "beam_width", "batch": "batch_size"}
MODES = ("SG", "KG", "baseline")


class UsageError(Exception):
    pass


class MismatchError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration


def _coerce(text: str):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def read_config_file(path) -> dict:
    """Parse a JSON object or ``key = value`` lines (``#`` starts a comment)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from exc
    if text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    else:
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = _coerce(value)
    out = {}
    for key, value in raw.items():
        key = key.replace("-", "_")
        key = ALIASES.get(key, key)
        if key not in DEFAULTS:
            raise ConfigError(key, "unknown setting")
        out[key] = value
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(read_config_file(args.config))
    cfg.update({k: v for k, v in vars(args).items() if k in DEFAULTS})
    if cfg["mode"] not in MODES:
        raise ConfigError("mode", f"must be one of {', '.join(MODES)}")
    try:
        cfg["long_note_threshold"] = Fraction(str(cfg["long_note_threshold"]))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError("long_note_threshold", f"not a number: {cfg['long_note_threshold']!r}") from exc
    if cfg["long_note_threshold"] <= 0:
        raise ConfigError("long_note_threshold", "must be positive")
    if int(cfg["beam_width"]) < 1:
        raise ConfigError("beam_width", "must be at least 1")
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    kwargs = {}
    for name in TrainConfig.field_names():
        value = cfg[name]
        default = DEFAULTS[name]
        try:
            kwargs[name] = type(default)(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(name, f"expected {type(default).__name__}, got {value!r}") from exc
    return TrainConfig(**kwargs)


def _require_file(cfg: dict, key: str) -> Path:
    if not cfg.get(key):
        raise ConfigError(key, "a path is required")
    path = Path(cfg[key])
    if not path.exists():
        raise UsageError(f"{key}: {path} does not exist")
    return path


def _read_lines(path) -> list:
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc
    except UnicodeDecodeError as exc:
        raise UsageError(f"{path} is not valid UTF-8") from exc


def _emit(lines, out=None) -> None:
    text = "".join(f"{line}\n" for line in lines)
    if out:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text)
        sys.stdout.flush()


# --------------------------------------------------------------------------
# commands


def cmd_train(cfg: dict) -> int:
    tc = train_config(cfg)
    if not cfg["checkpoint"]:
        raise ConfigError("checkpoint", "an output path is required")
    corpus = Path(cfg["corpus"]) if cfg["corpus"] else bundled_corpus_path()
    if not corpus.exists():
        raise UsageError(f"corpus: {corpus} does not exist")
    thr = cfg["long_note_threshold"]
    docs = read_corpus(corpus)
    lexicon = lexicon_from_corpus([d.sentences for d in docs], [d.melody for d in docs], thr)
    pairs = corpus_pairs(docs, keywords=bool(cfg["keywords"]), segmenter=Segmenter(lexicon),
                         long_note_threshold=thr, keyword_source=cfg["keyword_source"])
    vocab = build_vocab([s for d in docs for s in d.sentences], int(cfg["min_count"]))
    use_structure = cfg["mode"] != "baseline"
    model = build_model(tc.model_config(len(vocab), use_structure), seed=tc.seed)
    extra = {
        "lexicon": lexicon,
        "long_note_threshold": str(thr),
        "mode": cfg["mode"],
        "train_config": config_dict(tc),
    }
    checkpoint = Path(cfg["checkpoint"])
    log_path = Path(cfg["log"]) if cfg["log"] else checkpoint.with_suffix(".log.jsonl")
    target = cfg["target_loss"]
    history, opt = train(model, encode_pairs(pairs, vocab), tc,
                         target_loss=None if target is None else float(target),
                         checkpoint_path=checkpoint, vocab=vocab, extra=extra)
    save_checkpoint(checkpoint, model, opt, vocab=vocab, extra={**extra, "epoch": len(history)})
    write_log(log_path, history)
    if cfg["figure"]:
        from .report import plot_training_curve

        plot_training_curve(history, cfg["figure"], title=f"{cfg['mode']} training loss")
    summary = {
        "checkpoint": str(checkpoint),
        "log": str(log_path),
        "epochs": len(history),
        "pairs": len(pairs),
        "final_loss": history[-1]["mean_loss"] if history else None,
    }
    _emit([json.dumps(summary, sort_keys=True)])
    return EXIT_OK


def _load(cfg: dict):
    ckpt = load_checkpoint(_require_file(cfg, "checkpoint"))
    if ckpt.vocab is None:
        raise MismatchError("checkpoint carries no vocabulary")
    if len(ckpt.vocab) != ckpt.model.config.vocab_size:
        raise MismatchError(
            f"checkpoint vocabulary has {len(ckpt.vocab)} entries but the model expects "
            f"{ckpt.model.config.vocab_size}"
        )
    if cfg["vocab"]:
        chars = [line for line in _read_lines(cfg["vocab"]) if line]
        if chars != ckpt.vocab.characters:
            raise MismatchError(f"vocabulary {cfg['vocab']} does not match the checkpoint")
    return ckpt


def cmd_generate(cfg: dict, seed_text: str) -> int:
    melody_path = _require_file(cfg, "melody")
    ckpt = _load(cfg)
    melody = parse_melody("\n".join(_read_lines(melody_path)))
    lines = compose_lyrics(ckpt.model, ckpt.vocab, melody, seed_text,
                           beam_width=int(cfg["beam_width"]),
                           long_note_threshold=cfg["long_note_threshold"])
    _emit(lines, cfg["out"])
    return EXIT_OK


def _test_pairs(path: Path, thr) -> list:
    if path.is_file() and path.suffix in (".jsonl", ".json"):
        return read_pairs_jsonl(path)
    return corpus_pairs(read_corpus(path), long_note_threshold=thr)


def cmd_evaluate(cfg: dict, test_path: str) -> int:
    path = Path(test_path)
    if not path.exists():
        raise UsageError(f"test set {path} does not exist")
    ckpt = _load(cfg)
    pairs = _test_pairs(path, cfg["long_note_threshold"])
    if not pairs:
        raise UsageError(f"test set {path} is empty")
    lexicon = _read_lines(cfg["lexicon"]) if cfg["lexicon"] else ckpt.extra.get("lexicon", [])
    report = evaluate(ckpt.model, ckpt.vocab, pairs, lexicon, beam_width=int(cfg["beam_width"]))
    if cfg["figure"]:
        from .report import plot_metric_comparison

        plot_metric_comparison({ckpt.extra.get("mode", "model"): report}, cfg["figure"])
    _emit([report.to_json()], cfg["out"])
    return EXIT_OK


def cmd_structure(cfg: dict, melody_path: str) -> int:
    score = parse_melody("\n".join(_read_lines(melody_path)))
    _emit(score.structures(cfg["long_note_threshold"]), cfg["out"])
    return EXIT_OK


def line_keyword(line: str, segmenter: Segmenter | None) -> str:
    """Top TextRank word of one line; whitespace separates pre-segmented words."""
    words = [w for w in (normalize_sentence(t) for t in line.split()) if w]
    if segmenter is not None:
        words = [piece for w in words for piece in segmenter.segment(w)]
    if not words:
        return EMPTY_MARKER
    return textrank_keywords(words).keyword


def cmd_keywords(cfg: dict, text_path: str) -> int:
    segmenter = None
    if cfg["lexicon"]:
        segmenter = Segmenter(w.strip() for w in _read_lines(cfg["lexicon"]))
    _emit([line_keyword(line, segmenter) for line in _read_lines(text_path)], cfg["out"])
    return EXIT_OK


def cmd_synth(cfg: dict, args) -> int:
    spec = SyntheticSpec(num_pairs=args.num_pairs, vocab_size=args.vocab_size,
                         length_range=(args.min_length, args.max_length), seed=args.synth_seed)
    documents, melodies = generate_synthetic_corpus(spec)
    write_corpus(args.directory, documents, melodies)
    _emit([json.dumps({"directory": str(args.directory), "documents": len(documents)})])
    return EXIT_OK


def cmd_pairs(cfg: dict, corpus_path: str) -> int:
    thr = cfg["long_note_threshold"]
    docs = read_corpus(corpus_path)
    lexicon = lexicon_from_corpus([d.sentences for d in docs], [d.melody for d in docs], thr)
    pairs = corpus_pairs(docs, keywords=bool(cfg["keywords"]), segmenter=Segmenter(lexicon),
                         long_note_threshold=thr, keyword_source=cfg["keyword_source"])
    if cfg["out"]:
        write_pairs_jsonl(cfg["out"], pairs)
    else:
        _emit(json.dumps(p.to_json(), ensure_ascii=False) for p in pairs)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="key = value or JSON settings file")
    p.add_argument("--long-note-threshold", dest="long_note_threshold", default=S,
                   help="beats at which a note closes a music segment (default 2)")
    p.add_argument("--out", default=S, help="write output here instead of stdout")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_io(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--vocab", default=S, help="one character per line; must match the checkpoint")
    p.add_argument("--beam-width", dest="beam_width", type=int, default=S)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="lyricgen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p)
    p.add_argument("--corpus", default=S, help="corpus directory (default: bundled synthetic set)")
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--log", default=S, help="JSONL training log (default: next to checkpoint)")
    p.add_argument("--figure", default=S, help="loss-curve image")
    p.add_argument("--mode", choices=MODES, default=S)
    p.add_argument("--keywords", action="store_const", const=True, default=S,
                   help="add keyword-to-sentence pairs")
    p.add_argument("--keyword-source", dest="keyword_source", choices=("target", "context"), default=S)
    p.add_argument("--min-count", dest="min_count", type=int, default=S)
    p.add_argument("--target-loss", dest="target_loss", type=float, default=S)
    for name in TrainConfig.field_names():
        flag = "--" + name.replace("_", "-")
        p.add_argument(flag, dest=name, type=type(DEFAULTS[name]), default=S)
    p.add_argument("--dropout", dest="dropout_rate", type=float, default=S, help=S)

    p = sub.add_parser("generate", help="compose lyrics for a melody")
    _common(p)
    _model_io(p)
    p.add_argument("--melody", default=S)
    p.add_argument("--seed-text", dest="seed_text", required=True, help="keyword for the first line")

    p = sub.add_parser("evaluate", help="score a checkpoint on a test set")
    _common(p)
    _model_io(p)
    p.add_argument("test_path", help="pairs JSONL or corpus directory")
    p.add_argument("--lexicon", default=S, help="one word per line (default: from checkpoint)")
    p.add_argument("--figure", default=S, help="metric bar-chart image")

    p = sub.add_parser("structure", help="print S/B/M/E tokens per melody line")
    _common(p)
    p.add_argument("melody_path")

    p = sub.add_parser("keywords", help="print the top TextRank keyword per line")
    _common(p)
    p.add_argument("text_path")
    p.add_argument("--lexicon", default=S, help="one word per line for segmentation")

    p = sub.add_parser("synth", help="write a synthetic corpus")
    _common(p)
    p.add_argument("directory")
    p.add_argument("--num-pairs", dest="num_pairs", type=int, default=50)
    p.add_argument("--vocab-size", dest="vocab_size", type=int, default=20)
    p.add_argument("--min-length", dest="min_length", type=int, default=4)
    p.add_argument("--max-length", dest="max_length", type=int, default=8)
    p.add_argument("--synth-seed", dest="synth_seed", type=int, default=7)

    p = sub.add_parser("pairs", help="export training pairs of a corpus as JSONL")
    _common(p)
    p.add_argument("corpus_path")
    p.add_argument("--keywords", action="store_const", const=True, default=S)
    p.add_argument("--keyword-source", dest="keyword_source", choices=("target", "context"), default=S)
    return parser


def _dispatch(args, cfg) -> int:
    cmd = args.command
    if cmd == "train":
        return cmd_train(cfg)
    if cmd == "generate":
        return cmd_generate(cfg, args.seed_text)
    if cmd == "evaluate":
        return cmd_evaluate(cfg, args.test_path)
    if cmd == "structure":
        return cmd_structure(cfg, args.melody_path)
    if cmd == "keywords":
        return cmd_keywords(cfg, args.text_path)
    if cmd == "synth":
        return cmd_synth(cfg, args)
    return cmd_pairs(cfg, args.corpus_path)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args, resolve_config(args))
    except (ConfigError, UsageError, ParseError) as exc:
        print(f"lyricgen {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MismatchError, CheckpointError, AlignmentError, ContractError) as exc:
        print(f"lyricgen {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except TrainingDivergenceError as exc:
        where = f" (last good checkpoint: {exc.last_good_checkpoint})" if exc.last_good_checkpoint else ""
        print(f"lyricgen {args.command}: training diverged: {exc}{where}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
