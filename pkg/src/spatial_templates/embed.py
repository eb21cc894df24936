"""Word-vector tables behind a single lookup interface.

Three variants: pretrained vectors loaded from the standard text format,
random vectors matched per-dimension to a pretrained reference, and one-hot
indicators. Tables are frozen: nothing here is ever updated by training.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import Vocabulary, _open_text

logger = logging.getLogger(__name__)

VARIANTS = ("pretrained", "random_matched", "one_hot")


class EmbeddingError(ValueError):
    """Raised for malformed vector files or lookup contract violations."""


@dataclass
class EmbeddingTable:
    """|V| x d matrix of word vectors for one vocabulary."""

    vocab: Vocabulary
    vectors: np.ndarray
    variant: str
    trainable: bool = field(default=False)

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise EmbeddingError(f"unknown variant {self.variant!r}")
        if self.vectors.shape[0] != len(self.vocab):
            raise EmbeddingError(
                f"vector count {self.vectors.shape[0]} != vocabulary size "
                f"{len(self.vocab)}")
        if self.trainable:
            raise EmbeddingError("embedding tables are frozen by design")

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def to_json_dict(self) -> dict:
        return {
            "role": self.vocab.role,
            "tokens": list(self.vocab.tokens),
            "variant": self.variant,
            "vectors": self.vectors.tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "EmbeddingTable":
        vocab = Vocabulary.build(d["role"], d["tokens"])
        return cls(vocab=vocab, vectors=np.asarray(d["vectors"], dtype=np.float64),
                   variant=d["variant"])


def load_pretrained(source, expected_dim: int, vocab: Vocabulary) -> EmbeddingTable:
    """Fill a table from a text vector file (token followed by d floats).

    Only vocabulary tokens are kept. Duplicate lines for a token keep the
    first occurrence. A dimension mismatch on any kept line is an error naming
    the line; any vocabulary token absent from the file is an error, since
    instances with out-of-file tokens are expected to be filtered upstream.
    Gzip-compressed files are accepted.
    """
    tables = load_pretrained_many(source, expected_dim, [vocab])
    return tables[0]


def load_pretrained_many(source, expected_dim: int,
                         vocabs: list[Vocabulary]) -> list[EmbeddingTable]:
    """Single-pass variant of load_pretrained for several vocabularies."""
    if expected_dim <= 0:
        raise EmbeddingError(f"expected_dim must be positive, got {expected_dim}")
    wanted: set[str] = set()
    for vocab in vocabs:
        wanted.update(vocab.tokens)
    found: dict[str, np.ndarray] = {}
    duplicates = 0
    with _open_text(source) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            token = parts[0]
            if token not in wanted:
                continue
            if token in found:
                duplicates += 1
                continue
            values = parts[1:]
            if len(values) != expected_dim:
                raise EmbeddingError(
                    f"line {lineno}: token {token!r} has {len(values)} values, "
                    f"expected {expected_dim}")
            try:
                found[token] = np.asarray([float(v) for v in values], dtype=np.float64)
            except ValueError as exc:
                raise EmbeddingError(f"line {lineno}: bad float ({exc})") from exc
    if duplicates:
        logger.info("ignored %d duplicate vector lines", duplicates)
    tables = []
    for vocab in vocabs:
        missing = [t for t in vocab.tokens if t not in found]
        if missing:
            shown = ", ".join(repr(t) for t in missing[:10])
            raise EmbeddingError(
                f"{len(missing)} {vocab.role} tokens missing from the vector "
                f"file: {shown}{'...' if len(missing) > 10 else ''}")
        vectors = np.stack([found[t] for t in vocab.tokens])
        tables.append(EmbeddingTable(vocab=vocab, vectors=vectors,
                                     variant="pretrained"))
    return tables


def available_tokens(source) -> set[str]:
    """Scan a vector file for its token column (used to filter corpora)."""
    tokens: set[str] = set()
    with _open_text(source) as fh:
        for line in fh:
            head = line.split(" ", 1)[0]
            if head:
                tokens.add(head)
    return tokens


def make_one_hot(vocab: Vocabulary) -> EmbeddingTable:
    """Identity table: d = |V|, each row the token's standard basis vector."""
    if len(vocab) < 1:
        raise EmbeddingError("vocabulary is empty")
    return EmbeddingTable(vocab=vocab, vectors=np.eye(len(vocab), dtype=np.float64),
                          variant="one_hot")


def make_random_matched(reference: EmbeddingTable, vocab: Vocabulary,
                        seed: int) -> EmbeddingTable:
    """Draw rows i.i.d. from per-dimension normals matched to a reference.

    Column means and sample standard deviations (ddof=1) come from the
    reference table's rows, so dimensionality is preserved and the generated
    table is statistically matched to what the reference model consumes.
    """
    if reference.vectors.shape[0] < 2:
        raise EmbeddingError(
            "reference table needs at least 2 rows to estimate sigma")
    mu = reference.vectors.mean(axis=0)
    sigma = reference.vectors.std(axis=0, ddof=1)
    rng = np.random.default_rng(seed)
    vectors = rng.normal(loc=mu, scale=sigma, size=(len(vocab), reference.dim))
    return EmbeddingTable(vocab=vocab, vectors=vectors, variant="random_matched")


def lookup(table: EmbeddingTable, token: str) -> np.ndarray:
    """Return a copy of the token's vector; unknown tokens are an error."""
    if token not in table.vocab:
        raise EmbeddingError(
            f"token {token!r} not in the {table.vocab.role} vocabulary")
    return table.vectors[table.vocab.index[token]].copy()
