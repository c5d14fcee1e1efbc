"""Masked perplexity, per-sentence comparison and word-probability probes."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import EOS_ID, THINK_ID, Vocabulary
from .errors import NoScorablePositions
from .injector import ThinkingTokenConfig, derive_loss_mask, inject
from .model import HiddenState, ModelParams, score

log = logging.getLogger(__name__)

EVAL_CHUNK = 4096


@dataclass
class EvalReport:
    dataset_name: str
    model_name: str
    perplexity: float
    tokens_counted: int
    tokens_excluded: int
    total_nll: float


@dataclass
class SentenceScore:
    sentence: list[str]
    ppl_base: float
    ppl_tt: float

    @property
    def delta(self) -> float:
        return self.ppl_base - self.ppl_tt

    @property
    def text(self) -> str:
        return " ".join(self.sentence)


@dataclass
class WordProbRecord:
    word: str
    p_base: float
    p_tt: float
    oov: bool = False


def stream_nll(params: ModelParams, stream, chunk: int = EVAL_CHUNK) -> np.ndarray:
    """NLL of ``stream[1:]`` given the prefix, one lane, state carried throughout."""
    stream = np.asarray(stream, dtype=np.int64)
    out = np.empty(max(len(stream) - 1, 0))
    state = HiddenState.zeros(1, params.dims.hidden)
    for start in range(0, len(stream) - 1, chunk):
        stop = min(start + chunk, len(stream) - 1)
        nll, state = score(params, stream[None, start:stop], stream[None, start + 1:stop + 1], state)
        out[start:stop] = nll[0]
    return out


def masked_perplexity(params: ModelParams, stream, thinking_id: int = THINK_ID, dataset_name: str = "",
                      model_name: str = "", include_thinking: bool = False) -> EvalReport:
    """Perplexity over targets that are not thinking tokens.

    ``include_thinking=True`` scores every target (the unmasked variant).
    """
    stream = np.asarray(stream, dtype=np.int64)
    nll = stream_nll(params, stream)
    flags = derive_loss_mask(stream[1:], thinking_id).flags
    if include_thinking:
        flags = np.ones_like(flags)
    counted = int(flags.sum())
    if counted == 0:
        raise NoScorablePositions("no scorable positions")
    total = float(nll[flags].sum())
    return EvalReport(dataset_name, model_name, math.exp(total / counted), counted, len(flags) - counted, total)


def sentence_nll(params: ModelParams, ids, n: int, thinking_id: int = THINK_ID) -> np.ndarray:
    """Per-word NLL for one sentence scored from a zero state.

    ``ids`` are the sentence's word ids; ``<eos>`` is appended. Targets are
    words 1..L-1 then ``<eos>``; with ``n > 0`` the sentence is injected and
    thinking-token targets are dropped.
    """
    seq = np.append(np.asarray(ids, dtype=np.int64), EOS_ID)
    seq = inject(seq, ThinkingTokenConfig(n, thinking_id))
    nll, _ = score(params, seq[None, :-1], seq[None, 1:])
    return nll[0][derive_loss_mask(seq[1:], thinking_id).flags]


def _score_sentence(params_base, params_tt, ids, cfg) -> tuple[float, float]:
    base = sentence_nll(params_base, ids, 0, cfg.thinking_id)
    tt = sentence_nll(params_tt, ids, cfg.n, cfg.thinking_id)
    return math.exp(base.mean()), math.exp(tt.mean())


def sentence_perplexities(params_base: ModelParams, params_tt: ModelParams, sentences: Sequence[Sequence[str]],
                          vocab: Vocabulary, cfg: ThinkingTokenConfig, workers: int = 1) -> list[SentenceScore]:
    kept = []
    for sent in sentences:
        if not sent:
            log.warning("skipping empty sentence")
            continue
        kept.append(list(sent))

    def run(sent):
        return _score_sentence(params_base, params_tt, vocab.encode(sent), cfg)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, kept))
    else:
        results = [run(s) for s in kept]
    return [SentenceScore(s, b, t) for s, (b, t) in zip(kept, results)]


def rank_by_improvement(scores: Sequence[SentenceScore], top_k: int | None = None) -> list[SentenceScore]:
    ranked = sorted(scores, key=lambda s: (-s.delta, s.text))
    return ranked if top_k is None else ranked[:top_k]


def word_probabilities(params_base: ModelParams, params_tt: ModelParams, sentence: Sequence[str],
                       vocab: Vocabulary, cfg: ThinkingTokenConfig) -> list[WordProbRecord]:
    """Probability of each word after the first under both models."""
    ids = vocab.encode(sentence)
    p_base = np.exp(-sentence_nll(params_base, ids, 0, cfg.thinking_id))
    p_tt = np.exp(-sentence_nll(params_tt, ids, cfg.n, cfg.thinking_id))
    records = []
    for t in range(1, len(sentence)):
        oov = sentence[t] not in vocab
        if oov:
            log.warning("word %r is out of vocabulary, scored as <unk>", sentence[t])
        records.append(WordProbRecord(sentence[t], float(p_base[t - 1]), float(p_tt[t - 1]), oov))
    return records


def format_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(map(str, headers))] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for k, row in enumerate(cells):
        lines.append(" | ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if k == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def write_table(path_stem, headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Write ``<stem>.csv`` and ``<stem>.txt``; returns the text table."""
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(headers)
        writer.writerows([repr(v) if isinstance(v, float) else v for v in row] for row in rows)
    text = format_table(headers, rows)
    stem.with_suffix(".txt").write_text(text)
    return text


SENTENCE_HEADERS = ("dataset", "sentence", "ppl_orig", "ppl_tt", "delta")


def sentence_rows(scores: Sequence[SentenceScore], dataset: str) -> list[tuple]:
    return [(dataset, s.text, s.ppl_base, s.ppl_tt, s.delta) for s in scores]


def tt_label(n: int) -> str:
    return "LSTM+<T>" if n == 1 else f"LSTM+{n}<T>"


def format_probe(sentence: Sequence[str], records: Sequence[WordProbRecord], n: int) -> str:
    lines = [f"'{' '.join(sentence)}'"]
    for r in records:
        lines.append(f"Word: {r.word}" + (" (oov)" if r.oov else ""))
        lines.append(f"LSTM: {r.p_base!r}")
        lines.append(f"{tt_label(n)}: {r.p_tt!r}")
    return "\n".join(lines) + "\n"
