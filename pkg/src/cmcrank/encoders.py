"""Single-vector query/candidate encoders and the embedding file format.

Two encoder kinds are supported: ``precomputed`` passes externally produced
vectors through unchanged (the primary path), while ``trainable-lookup``
embeds token ids through a lookup table and aggregates them, which is
enough to exercise end-to-end training without any pretrained model.

Embedding file layout (little-endian):

    magic   4 bytes  b"CMCE"
    version u16      currently 1
    dim     u32
    count   u64
    then count records of (id u64, dim x f32)

A line-oriented text form ("id v1,v2,..." per line) is accepted as an
import source and converted to the same in-memory representation.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (DuplicateId, FormatError, InvalidConfig, InvalidShape,
                     InvalidToken)
from .fileio import (atomic_write_bytes, expect_magic, pack_u16, pack_u32,
                     pack_u64, read_exact, read_u16, read_u32, read_u64)

EMBEDDING_MAGIC = b"CMCE"
EMBEDDING_VERSION = 1

KIND_PRECOMPUTED = "precomputed"
KIND_TRAINABLE = "trainable-lookup"
AGG_FIRST = "first-position"
AGG_MEAN = "mean"


@dataclass(frozen=True)
class TokenSequence:
    """A role-tagged sequence of vocabulary ids."""

    role: str  # "query" or "candidate"
    ids: tuple[int, ...]

    def __post_init__(self):
        if self.role not in ("query", "candidate"):
            raise InvalidConfig(f"unknown token-sequence role {self.role!r}")
        if len(self.ids) == 0:
            raise InvalidShape("token sequence must be non-empty")
        if any(t < 0 for t in self.ids):
            raise InvalidToken("token ids must be nonnegative")


@dataclass(frozen=True)
class EncoderSpec:
    """Configuration of one encoder (query- or candidate-side)."""

    kind: str
    dim: int
    vocab_size: int | None = None
    aggregation: str = AGG_FIRST
    max_len: int | None = None

    def __post_init__(self):
        if self.kind not in (KIND_PRECOMPUTED, KIND_TRAINABLE):
            raise InvalidConfig(f"unknown encoder kind {self.kind!r}")
        if self.dim < 1:
            raise InvalidConfig("encoder dim must be positive")
        if self.aggregation not in (AGG_FIRST, AGG_MEAN):
            raise InvalidConfig(f"unknown aggregation {self.aggregation!r}")
        if self.kind == KIND_TRAINABLE and (self.vocab_size is None or self.vocab_size < 1):
            raise InvalidConfig("trainable-lookup encoder needs a positive vocab_size")


class Encoder:
    """An encoder instance; trainable kinds own their lookup table.

    Query and candidate encoders are independent instances, so mutating one
    encoder's table can never change the other's outputs.
    """

    def __init__(self, spec: EncoderSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        self.table: np.ndarray | None = None
        if spec.kind == KIND_TRAINABLE:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.table = (0.02 * rng.standard_normal(
                (spec.vocab_size, spec.dim))).astype(np.float32)

    @classmethod
    def precomputed(cls, dim: int) -> "Encoder":
        return cls(EncoderSpec(kind=KIND_PRECOMPUTED, dim=dim))

    @classmethod
    def trainable_lookup(cls, dim: int, vocab_size: int,
                         aggregation: str = AGG_FIRST,
                         max_len: int | None = None,
                         seed: int = 0) -> "Encoder":
        spec = EncoderSpec(kind=KIND_TRAINABLE, dim=dim, vocab_size=vocab_size,
                           aggregation=aggregation, max_len=max_len)
        return cls(spec, rng=np.random.default_rng(seed))

    def encode(self, item) -> np.ndarray:
        return encode(self, item)


def encode(encoder: Encoder, item) -> np.ndarray:
    """Produce the single-vector embedding for one input.

    Precomputed encoders require a raw vector and pass it through
    unchanged; trainable encoders require a TokenSequence.
    """
    spec = encoder.spec
    if spec.kind == KIND_PRECOMPUTED:
        if isinstance(item, TokenSequence):
            raise InvalidShape("precomputed encoder takes a raw vector, not tokens")
        vec = np.asarray(item, dtype=np.float32)
        if vec.shape != (spec.dim,):
            raise InvalidShape(f"embedding has shape {vec.shape}, expected ({spec.dim},)")
        return vec

    if not isinstance(item, TokenSequence):
        raise InvalidShape("trainable-lookup encoder takes a TokenSequence")
    if spec.max_len is not None and len(item.ids) > spec.max_len:
        raise InvalidShape(f"sequence length {len(item.ids)} exceeds max_len {spec.max_len}")
    ids = np.asarray(item.ids, dtype=np.int64)
    if ids.max() >= spec.vocab_size:
        raise InvalidToken(
            f"token id {int(ids.max())} outside vocabulary of size {spec.vocab_size}")
    rows = encoder.table[ids]
    if spec.aggregation == AGG_FIRST:
        return rows[0].copy()
    return rows.mean(axis=0)


# ---------------------------------------------------------------------------
# Embedding persistence


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))], align=False)


def _check_ids_unique(ids: np.ndarray) -> None:
    if len(np.unique(ids)) != len(ids):
        unique, counts = np.unique(ids, return_counts=True)
        dup = unique[counts > 1][0]
        raise DuplicateId(f"candidate id {int(dup)} appears more than once")


def save_embedding_file(path: str | Path, ids: Sequence[int] | np.ndarray,
                        embeddings: np.ndarray, dim: int | None = None) -> None:
    """Write ids and their float32 vectors; bit-exact under reload."""
    ids = np.asarray(ids, dtype=np.uint64)
    matrix = np.ascontiguousarray(embeddings, dtype="<f4")
    if matrix.ndim != 2 and not (matrix.size == 0 and len(ids) == 0):
        raise InvalidShape(f"embeddings must be (count, dim), got {matrix.shape}")
    if dim is None:
        if matrix.ndim != 2:
            raise InvalidShape("dim is required when saving an empty embedding set")
        dim = matrix.shape[1]
    if matrix.size and matrix.shape != (len(ids), dim):
        raise InvalidShape(
            f"embeddings shape {matrix.shape} does not match {len(ids)} ids x dim {dim}")
    _check_ids_unique(ids)

    records = np.empty(len(ids), dtype=_record_dtype(dim))
    records["id"] = ids
    if len(ids):
        records["vec"] = matrix
    atomic_write_bytes(path, b"".join([
        EMBEDDING_MAGIC, pack_u16(EMBEDDING_VERSION),
        pack_u32(dim), pack_u64(len(ids)), records.tobytes(),
    ]))


def load_embedding_file(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Load a binary embedding file; returns (ids u64, matrix count x dim f32)."""
    with open(path, "rb") as fh:
        expect_magic(fh, EMBEDDING_MAGIC)
        version = read_u16(fh, "version")
        if version != EMBEDDING_VERSION:
            raise FormatError(f"unsupported embedding-file version {version}")
        dim = read_u32(fh, "dim")
        count = read_u64(fh, "count")
        record = 8 + 4 * dim
        raw = read_exact(fh, record * count, "embedding records")
        if fh.read(1):
            raise FormatError("trailing bytes after last embedding record")
    records = np.frombuffer(raw, dtype=_record_dtype(dim))
    ids = records["id"].astype(np.uint64)
    matrix = (records["vec"].astype(np.float32) if count
              else np.empty((0, dim), dtype=np.float32))
    _check_ids_unique(ids)
    return ids, matrix.reshape(count, dim)


def load_embedding_text(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Import the text form: one "id v1,v2,..." line per record."""
    ids: list[int] = []
    rows: list[np.ndarray] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise FormatError(f"line {lineno}: expected 'id values', got {line!r}")
            try:
                ids.append(int(parts[0]))
                rows.append(np.asarray(
                    [float(v) for v in parts[1].split(",")], dtype=np.float32))
            except ValueError as exc:
                raise FormatError(f"line {lineno}: {exc}") from exc
    if not rows:
        raise FormatError("text embedding file has no records")
    dim = rows[0].shape[0]
    for lineno, row in enumerate(rows, 1):
        if row.shape[0] != dim:
            raise FormatError(f"record {lineno} has {row.shape[0]} values, expected {dim}")
    ids_arr = np.asarray(ids, dtype=np.uint64)
    _check_ids_unique(ids_arr)
    return ids_arr, np.vstack(rows)


class EmbeddingTable:
    """Id-addressable view over (ids, matrix) used by rerankers and training."""

    def __init__(self, ids: np.ndarray | Iterable[int], matrix: np.ndarray):
        self.ids = np.asarray(ids, dtype=np.uint64)
        self.matrix = np.asarray(matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise InvalidShape(
                f"embedding matrix {self.matrix.shape} does not match {len(self.ids)} ids")
        _check_ids_unique(self.ids)
        self._row_of = {int(cid): i for i, cid in enumerate(self.ids)}

    @classmethod
    def from_file(cls, path: str | Path) -> "EmbeddingTable":
        return cls(*load_embedding_file(path))

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, candidate_id: int) -> bool:
        return int(candidate_id) in self._row_of

    def row_indices(self, candidate_ids: Iterable[int]) -> np.ndarray:
        return np.asarray([self._row_of[int(c)] for c in candidate_ids], dtype=np.int64)

    def get(self, candidate_id: int) -> np.ndarray:
        return self.matrix[self._row_of[int(candidate_id)]]

    def batch(self, candidate_ids: Iterable[int]) -> np.ndarray:
        """Rows for the given ids, in order; KeyError surfaces to callers."""
        return self.matrix[self.row_indices(candidate_ids)]
