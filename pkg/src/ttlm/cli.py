"""Command-line entry point: ``ttlm prepare|inject|train|eval|compare|probe|sweep``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import corpus
from .checkpoint import read_checkpoint, save_checkpoint
from .corpus import Vocabulary, build_vocabulary, load_corpus, load_ids, save_ids
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .evaluation import (
    SENTENCE_HEADERS,
    format_probe,
    masked_perplexity,
    rank_by_improvement,
    sentence_perplexities,
    sentence_rows,
    word_probabilities,
    write_table,
)
from .injector import ThinkingTokenConfig, inject
from .trainer import TrainConfig, train

log = logging.getLogger("ttlm")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3
VOCAB_FILE = "vocab.txt"
SPLITS = ("train", "valid", "test")

# config key -> (TrainConfig field, value type)
TRAIN_KEYS = {
    "bptt": ("bptt_len", int),
    "batch": ("batch_lanes", int),
    "clip": ("clip_norm", float),
    "hidden": ("hidden", int),
    "embed": ("embed", int),
    "layers": ("layers", int),
    "lr": ("learn_rate", float),
    "epochs": ("max_epochs", int),
    "seed": ("seed", int),
    "nonmono": ("asgd_nonmono", int),
    "asgd_start_epoch": ("asgd_start_epoch", int),
    "lr_patience": ("lr_patience", int),
    "thinking_n": ("thinking_n", int),
    "train_mask_thinking": ("train_mask_thinking", "bool"),
    "tie_weights": ("tie_weights", "bool"),
}
PATH_KEYS = ("data", "out", "dataset")


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _convert(key: str, value):
    kind = TRAIN_KEYS[key][1] if key in TRAIN_KEYS else str
    if kind == "bool":
        return value if isinstance(value, bool) else _parse_bool(value)
    try:
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in TRAIN_KEYS and key not in PATH_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, value)
    return values


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig
    data: Path
    out: Path
    dataset: str


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults < config file < command-line flags."""
    merged: dict = {}
    if os.environ.get("TTLM_SEED"):
        merged["seed"] = _convert("seed", os.environ["TTLM_SEED"])
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    for key in list(TRAIN_KEYS) + list(PATH_KEYS):
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = _convert(key, value)
    fields = {TRAIN_KEYS[k][0]: v for k, v in merged.items() if k in TRAIN_KEYS}
    tc = TrainConfig(**fields)
    tc.validate()
    if "data" not in merged:
        raise ConfigError("no prepared data directory given (--data)")
    data = Path(merged["data"])
    for name in (VOCAB_FILE, "train.npy", "valid.npy"):
        if not (data / name).is_file():
            raise FileNotFoundError(f"missing prepared file {data / name}; run 'ttlm prepare' first")
    out = Path(merged.get("out", "runs"))
    return RunConfig(tc, data, out, merged.get("dataset", data.name))


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    for key, (_, kind) in TRAIN_KEYS.items():
        flag = "--" + key.replace("_", "-")
        if kind == "bool":
            p.add_argument(flag, dest=key, nargs="?", const="true", default=None, metavar="BOOL")
        else:
            p.add_argument(flag, dest=key, default=None)
    p.add_argument("--data", help="directory written by 'ttlm prepare'")
    p.add_argument("--out", help="output directory for checkpoints and logs")
    p.add_argument("--dataset", help="dataset label used in reports")


def _load_vocab(data_dir) -> Vocabulary:
    path = Path(data_dir) / VOCAB_FILE
    if not path.is_file():
        raise FileNotFoundError(f"vocabulary not found: {path}")
    return Vocabulary.load(path)


def _load_pair(base_path, tt_path, vocab: Vocabulary):
    base, base_info = read_checkpoint(base_path)
    tt, tt_info = read_checkpoint(tt_path)
    for path, info in ((base_path, base_info), (tt_path, tt_info)):
        if info.vocab_hash != vocab.hash:
            raise ConfigError(f"{path}: vocabulary hash {info.vocab_hash:016x} does not match {vocab.hash:016x}")
    return base, tt, tt_info.thinking_n


def cmd_prepare(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    streams = {}
    for split in SPLITS:
        path = getattr(args, split)
        if path is not None:
            streams[split] = load_corpus(path, split)
    vocab = build_vocabulary(streams["train"], args.max_size, args.min_count)
    vocab.save(out / VOCAB_FILE)
    for split, tokens in streams.items():
        ids = vocab.encode(tokens)
        save_ids(ids, out / f"{split}.npy")
        print(f"{split}: {len(ids)} tokens, {len(set(tokens))} types")
    print(f"vocabulary size: {len(vocab)}")
    print(f"vocabulary hash: {vocab.hash:016x}")
    return EXIT_OK


def cmd_inject(args) -> int:
    tokens = load_corpus(args.file, "input")
    vocab = _load_vocab(args.data) if args.data else build_vocabulary(tokens)
    n = int(args.n)
    ids = inject(vocab.encode(tokens), ThinkingTokenConfig(n))
    words = vocab.decode(ids)
    line: list[str] = []
    for k in range(0, len(words), n + 1):
        line.extend(words[k:k + n + 1])
        if words[k] == corpus.EOS:
            print(" ".join(line))
            line = []
    return EXIT_OK


def _run_training(cfg: RunConfig, out_dir: Path):
    vocab = _load_vocab(cfg.data)
    train_ids = load_ids(cfg.data / "train.npy")
    valid_ids = load_ids(cfg.data / "valid.npy")
    out_dir.mkdir(parents=True, exist_ok=True)
    return train(cfg.train, train_ids, valid_ids, len(vocab), checkpoint_path=out_dir / "best.ttlm",
                 log_path=out_dir / "epochs.csv", vocab_hash=vocab.hash)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    params, history = _run_training(cfg, cfg.out)
    save_checkpoint(params, cfg.out / "final.ttlm", _load_vocab(cfg.data).hash, cfg.train.thinking_n)
    best = min(h.valid_ppl for h in history)
    print(f"trained {len(history)} epochs, thinking_n={cfg.train.thinking_n}, best valid ppl {best:.4f}")
    print(f"checkpoint: {cfg.out / 'best.ttlm'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    vocab = _load_vocab(args.data)
    params, info = read_checkpoint(args.model)
    if info.vocab_hash != vocab.hash:
        raise ConfigError(f"{args.model}: vocabulary hash does not match {Path(args.data) / VOCAB_FILE}")
    path = Path(args.data) / f"{args.split}.npy"
    if not path.is_file():
        raise FileNotFoundError(f"missing prepared split {path}")
    stream = inject(load_ids(path), ThinkingTokenConfig(info.thinking_n))
    dataset = args.dataset or Path(args.data).name
    report = masked_perplexity(params, stream, dataset_name=dataset, model_name=Path(args.model).stem,
                               include_thinking=args.unmasked)
    headers = ("dataset", "model", "thinking_n", "perplexity", "tokens_counted", "tokens_excluded")
    row = (report.dataset_name, report.model_name, info.thinking_n, report.perplexity, report.tokens_counted,
           report.tokens_excluded)
    print(write_table(Path(args.report_dir) / "eval", headers, [row]), end="")
    return EXIT_OK


def _read_sentences(path) -> list[list[str]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"sentence file not found: {path}")
    return [line.split() for line in path.read_text(encoding="utf-8").splitlines()]


def cmd_compare(args) -> int:
    vocab = _load_vocab(args.data)
    base, tt, n = _load_pair(args.base, args.tt, vocab)
    scores = sentence_perplexities(base, tt, _read_sentences(args.sentences), vocab, ThinkingTokenConfig(n),
                                   workers=args.workers)
    ranked = rank_by_improvement(scores, args.top_k)
    dataset = args.dataset or Path(args.data).name
    print(write_table(Path(args.report_dir) / "compare", SENTENCE_HEADERS, sentence_rows(ranked, dataset)), end="")
    return EXIT_OK


def cmd_probe(args) -> int:
    vocab = _load_vocab(args.data)
    base, tt, n = _load_pair(args.base, args.tt, vocab)
    sentence = args.sentence.split()
    if not sentence:
        raise ConfigError("empty sentence")
    text = format_probe(sentence, word_probabilities(base, tt, sentence, vocab, ThinkingTokenConfig(n)), n)
    report_dir = Path(args.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    (report_dir / "probe.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    try:
        n_values = [int(v) for v in args.n_values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --n-values {args.n_values!r}") from exc
    rows = []
    for n in n_values:
        run = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, thinking_n=n))
        _, history = _run_training(run, cfg.out / f"n{n}")
        rows.append((cfg.dataset, n, min(h.valid_ppl for h in history)))
    print(write_table(cfg.out / "sweep", ("dataset", "n", "valid_ppl"), rows), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttlm", description="LSTM language models with thinking tokens")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print results")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build vocabulary and encoded id streams")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--test")
    p.add_argument("--out", required=True)
    p.add_argument("--max-size", type=int)
    p.add_argument("--min-count", type=int, default=1)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("inject", help="show a text file with thinking tokens inserted")
    p.add_argument("file")
    p.add_argument("-n", default=1, type=int)
    p.add_argument("--data", help="prepared directory whose vocabulary to use")
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("train", help="train one model")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="masked perplexity of a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="valid", choices=SPLITS)
    p.add_argument("--dataset")
    p.add_argument("--unmasked", action="store_true", help="also score thinking-token targets")
    p.add_argument("--report-dir", default="reports")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="rank sentences by perplexity improvement")
    p.add_argument("--base", required=True)
    p.add_argument("--tt", required=True)
    p.add_argument("--sentences", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--top-k", type=int)
    p.add_argument("--dataset")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--report-dir", default="reports")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("probe", help="per-word probabilities under both models")
    p.add_argument("--base", required=True)
    p.add_argument("--tt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sentence", required=True)
    p.add_argument("--report-dir", default="reports")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("sweep", help="train one model per thinking-token count")
    _add_train_flags(p)
    p.add_argument("--n-values", default="0,1,2,3")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, CheckpointError, OSError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
