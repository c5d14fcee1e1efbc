"""Corpus ingestion, vocabularies and contiguous lane batching."""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError

UNK = "<unk>"
EOS = "<eos>"
THINK = "<T>"
SPECIALS = (UNK, EOS, THINK)
UNK_ID, EOS_ID, THINK_ID = 0, 1, 2


def load_corpus(path, split_name: str = "train") -> list[str]:
    """Read a whitespace-tokenized file; every line ends with ``<eos>``.

    An empty file gives an empty list, an empty line gives just ``<eos>``.
    """
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"{split_name} corpus not found: {path}") from exc
    except UnicodeDecodeError as exc:
        raise UnicodeDecodeError(
            exc.encoding, exc.object, exc.start, exc.end, f"{path}: {exc.reason}"
        ) from None
    return tokenize_lines(text.splitlines())


def tokenize_lines(lines: Iterable[str]) -> list[str]:
    tokens: list[str] = []
    for line in lines:
        tokens.extend(line.split())
        tokens.append(EOS)
    return tokens


@dataclass
class Vocabulary:
    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:3]) != SPECIALS:
            raise ConfigError(f"vocabulary must start with {SPECIALS}")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ConfigError("duplicate tokens in vocabulary")

    unk_id = UNK_ID
    eos_id = EOS_ID
    thinking_id = THINK_ID

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        get = self.token_to_id.get
        return np.fromiter((get(t, UNK_ID) for t in tokens), dtype=np.int64, count=len(tokens))

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def to_bytes(self) -> bytes:
        return "".join(tok + "\n" for tok in self.id_to_token).encode("utf-8")

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_bytes().decode("utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)

    @property
    def hash(self) -> int:
        """64-bit digest of the serialized vocabulary file."""
        return vocab_hash(self.to_bytes())


def vocab_hash(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def build_vocabulary(tokens: Iterable[str], max_size: int | None = None, min_count: int = 1) -> Vocabulary:
    """Specials first, then tokens by descending count (ties lexicographic).

    ``max_size`` caps the number of non-special entries.
    """
    if min_count < 1:
        raise ConfigError("min_count must be >= 1")
    counts = Counter(t for t in tokens if t not in SPECIALS)
    ranked = sorted((item for item in counts.items() if item[1] >= min_count), key=lambda kv: (-kv[1], kv[0]))
    if max_size is not None:
        ranked = ranked[:max_size]
    return Vocabulary(list(SPECIALS) + [tok for tok, _ in ranked])


def encode(tokens: Sequence[str], vocab: Vocabulary) -> np.ndarray:
    return vocab.encode(tokens)


@dataclass
class BatchedCorpus:
    """``data[k]`` is lane ``k``: ids ``[k*T, (k+1)*T)`` of the source stream."""

    data: np.ndarray
    window_len: int

    @property
    def lanes(self) -> int:
        return self.data.shape[0]

    @property
    def num_windows(self) -> int:
        return math.ceil((self.data.shape[1] - 1) / self.window_len)

    def windows(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield ``(inputs, targets)`` pairs of shape ``lanes x w``."""
        cols = self.data.shape[1]
        for start in range(0, cols - 1, self.window_len):
            w = min(self.window_len, cols - 1 - start)
            yield self.data[:, start:start + w], self.data[:, start + 1:start + w + 1]


def make_batches(stream: Sequence[int], lanes: int = 12, window_len: int = 70) -> BatchedCorpus:
    stream = np.asarray(stream)
    if lanes < 1 or window_len < 1:
        raise ConfigError("lanes and window_len must be positive")
    if len(stream) < 2 * lanes:
        raise ConfigError(f"stream of {len(stream)} ids is too short for {lanes} lanes (need at least {2 * lanes})")
    cols = len(stream) // lanes
    return BatchedCorpus(stream[:lanes * cols].reshape(lanes, cols), window_len)


def save_ids(ids: np.ndarray, path) -> None:
    np.save(path, np.asarray(ids, dtype="<u4"), allow_pickle=False)


def load_ids(path) -> np.ndarray:
    return np.load(path, allow_pickle=False).astype(np.int64)
