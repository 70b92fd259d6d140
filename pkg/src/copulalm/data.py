"""Corpus ingestion: vocabulary, line encoding, padded batching.

Input is UTF-8 plain text, one sentence per line, whitespace-tokenized
(PTB-style). The vocabulary file format is one token per line where the line
number is the id and the first four lines are the reserved tokens.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<s>", "</s>")


@dataclass(frozen=True)
class Vocabulary:
    token_to_id: dict
    id_to_token: tuple

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.id_to_token:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        if tuple(tokens[:4]) != RESERVED:
            raise InputError(f"vocabulary file must start with the reserved tokens {RESERVED}")
        return cls.from_tokens(tokens)

    @classmethod
    def from_tokens(cls, tokens) -> "Vocabulary":
        return cls(token_to_id={t: i for i, t in enumerate(tokens)}, id_to_token=tuple(tokens))


def build_vocab(lines, max_vocab: int) -> Vocabulary:
    """Most-frequent tokens up to ``max_vocab`` total ids (4 are reserved).

    Ties are broken by first occurrence in the corpus so the id assignment is
    deterministic for identical input.
    """
    if max_vocab <= len(RESERVED):
        raise ConfigError(f"max_vocab must exceed {len(RESERVED)}")
    counts = Counter()
    first_seen = {}
    n_lines = 0
    for line in lines:
        n_lines += 1
        for token in line.split():
            counts[token] += 1
            if token not in first_seen:
                first_seen[token] = len(first_seen)
    if n_lines == 0:
        raise InputError("cannot build a vocabulary from an empty corpus")
    ordered = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
    kept = ordered[: max_vocab - len(RESERVED)]
    return Vocabulary.from_tokens(list(RESERVED) + kept)


def encode_line(line: str, vocab: Vocabulary, max_len: int) -> list:
    """bos + token ids + eos, truncated to ``max_len`` with eos kept last."""
    ids = [BOS] + [vocab.lookup(t) for t in line.split()] + [EOS]
    if len(ids) > max_len:
        ids = ids[: max_len - 1] + [EOS]
    return ids


def decode_ids(ids, vocab: Vocabulary) -> str:
    """Tokens for the content ids (reserved markers dropped)."""
    return " ".join(vocab.id_to_token[i] for i in ids if i >= len(RESERVED) or i == UNK)


@dataclass(frozen=True)
class Batch:
    """Padded id matrix (B, T) with per-example lengths (pad only after each)."""

    ids: np.ndarray
    lengths: np.ndarray

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def batches(encoded, batch_size: int, shuffle_rng: np.random.Generator | None = None):
    """Yield padded batches; the final short batch is kept.

    Order is the corpus order, or a permutation drawn from ``shuffle_rng``
    (seed-keyed by the caller, never timing-dependent).
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(encoded))
    if shuffle_rng is not None:
        shuffle_rng.shuffle(order)
    for start in range(0, len(encoded), batch_size):
        chunk = [encoded[i] for i in order[start:start + batch_size]]
        lengths = np.array([len(seq) for seq in chunk], dtype=np.int64)
        width = int(lengths.max())
        ids = np.full((len(chunk), width), PAD, dtype=np.int64)
        for row, seq in enumerate(chunk):
            ids[row, : len(seq)] = seq
        yield Batch(ids=ids, lengths=lengths)


def read_lines(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]
