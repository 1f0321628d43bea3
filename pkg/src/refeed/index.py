"""Exact dense index over float32 passage vectors.

Binary layout (little-endian)::

    b"RFDX" | u32 version=1 | u32 dim | u64 count
    count * dim float32, row-major
    count * (u32 byte length | UTF-8 id)
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .vecmath import as_vector, row_dots

MAGIC = b"RFDX"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_LEN = struct.Struct("<I")

PathLike = Union[str, os.PathLike]


class IndexFormatError(ValueError):
    """Raised when an index or embeddings file cannot be decoded."""


@dataclass(frozen=True)
class Candidate:
    doc_id: str
    score: float
    row: int


@dataclass(frozen=True)
class CandidateSet:
    """Ranked retrieval output for one query: score descending, doc_id ascending."""

    query_id: str
    entries: Tuple[Candidate, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Candidate]:
        return iter(self.entries)

    @property
    def doc_ids(self) -> List[str]:
        return [c.doc_id for c in self.entries]

    @property
    def scores(self) -> np.ndarray:
        return np.array([c.score for c in self.entries], dtype=np.float64)

    @property
    def rows(self) -> np.ndarray:
        return np.array([c.row for c in self.entries], dtype=np.int64)

    def head(self, k: int) -> "CandidateSet":
        return CandidateSet(self.query_id, self.entries[:k])


class DenseIndex:
    """Immutable matrix of passage vectors keyed by document id."""

    def __init__(self, vectors: np.ndarray, ids: Sequence[str]):
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        if vectors.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {vectors.shape}")
        ids = tuple(ids)
        if len(ids) != vectors.shape[0]:
            raise ValueError(
                f"{len(ids)} ids for {vectors.shape[0]} vectors"
            )
        seen = set()
        for doc_id in ids:
            if doc_id in seen:
                raise ValueError(f"duplicate document id: {doc_id!r}")
            seen.add(doc_id)
        if not np.all(np.isfinite(vectors)):
            bad = int(np.flatnonzero(~np.isfinite(vectors).all(axis=1))[0])
            raise ValueError(f"non-finite vector for id {ids[bad]!r}")
        vectors.setflags(write=False)
        self._vectors = vectors
        self._ids = ids
        self._row_of = {doc_id: i for i, doc_id in enumerate(ids)}
        # id rank used for deterministic tie-breaking in search
        order = sorted(range(len(ids)), key=ids.__getitem__)
        id_rank = np.empty(len(ids), dtype=np.int64)
        id_rank[order] = np.arange(len(ids))
        id_rank.setflags(write=False)
        self._id_rank = id_rank

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    @property
    def ids(self) -> Tuple[str, ...]:
        return self._ids

    @property
    def dim(self) -> int:
        return self._vectors.shape[1]

    @property
    def count(self) -> int:
        return self._vectors.shape[0]

    def __len__(self) -> int:
        return self.count

    def row_of(self, doc_id: str) -> int:
        return self._row_of[doc_id]

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._row_of

    def __eq__(self, other) -> bool:
        if not isinstance(other, DenseIndex):
            return NotImplemented
        return (
            self._ids == other._ids
            and self._vectors.shape == other._vectors.shape
            and self._vectors.tobytes() == other._vectors.tobytes()
        )

    def __repr__(self) -> str:
        return f"DenseIndex(count={self.count}, dim={self.dim})"

    def scores(self, q) -> np.ndarray:
        """Float64 dot product of ``q`` with every row."""
        q = np.asarray(q)
        if q.ndim != 1 or q.size != self.dim:
            raise ValueError(
                f"dimension mismatch: query has {q.size}, index has {self.dim}"
            )
        return row_dots(self._vectors, q)

    def search(self, q, k: int, query_id: str = "") -> CandidateSet:
        """Exact top-``k`` rows by dot product.

        Ties on score are broken by ascending doc id.
        """
        if k < 1:
            raise ValueError(f"k must be positive, got {k}")
        scores = self.scores(q)
        n = self.count
        k = min(k, n)
        if k == 0:
            return CandidateSet(query_id, ())
        if k < n:
            # everything scoring at least the k-th best may be in the answer
            kth = np.partition(scores, n - k)[n - k]
            pool = np.flatnonzero(scores >= kth)
        else:
            pool = np.arange(n)
        order = np.lexsort((self._id_rank[pool], -scores[pool]))[:k]
        rows = pool[order]
        entries = tuple(
            Candidate(self._ids[r], float(scores[r]), int(r)) for r in rows
        )
        return CandidateSet(query_id, entries)


def search(index: DenseIndex, q, k: int, query_id: str = "") -> CandidateSet:
    return index.search(q, k, query_id)


def build(records: Iterable[Tuple[str, Sequence[float]]]) -> DenseIndex:
    """Build an index from ``(doc_id, vector)`` pairs, keeping input order."""
    ids: List[str] = []
    rows: List[np.ndarray] = []
    dim: Optional[int] = None
    seen = set()
    for doc_id, vec in records:
        if doc_id in seen:
            raise ValueError(f"duplicate document id: {doc_id!r}")
        seen.add(doc_id)
        v = as_vector(vec, name=f"vector for {doc_id!r}")
        if dim is None:
            dim = v.size
        elif v.size != dim:
            raise ValueError(
                f"dimension mismatch for {doc_id!r}: expected {dim}, got {v.size}"
            )
        ids.append(doc_id)
        rows.append(v)
    if not rows:
        return DenseIndex(np.zeros((0, dim or 0), dtype=np.float32), ())
    return DenseIndex(np.stack(rows), ids)


def iter_jsonl_vectors(path: PathLike) -> Iterator[Tuple[str, np.ndarray]]:
    """Yield ``(id, vector)`` from a JSONL file of ``{"id", "vector"}`` objects.

    Errors cite the 1-based line number.
    """
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IndexFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise IndexFormatError(f"line {lineno}: expected a JSON object")
            if "id" not in obj:
                raise IndexFormatError(f'line {lineno}: missing "id" field')
            if "vector" not in obj:
                raise IndexFormatError(f'line {lineno}: missing "vector" field')
            if not isinstance(obj["id"], str):
                raise IndexFormatError(f'line {lineno}: "id" must be a string')
            try:
                vec = as_vector(obj["vector"])
            except (TypeError, ValueError) as exc:
                raise IndexFormatError(f"line {lineno}: bad vector ({exc})") from None
            yield obj["id"], vec


def load_jsonl(path: PathLike) -> DenseIndex:
    try:
        return build(iter_jsonl_vectors(path))
    except IndexFormatError:
        raise
    except ValueError as exc:
        raise IndexFormatError(str(exc)) from None


def format_float32(x) -> str:
    """Shortest decimal string that round-trips the float32 value."""
    return str(np.float32(x))


def write_jsonl(path: PathLike, records: Iterable[Tuple[str, np.ndarray]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for doc_id, vec in records:
            body = ", ".join(format_float32(x) for x in np.asarray(vec, dtype=np.float32))
            fh.write(f'{{"id": {json.dumps(doc_id)}, "vector": [{body}]}}\n')


def to_bytes(index: DenseIndex) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, index.dim, index.count)]
    parts.append(index.vectors.astype("<f4", copy=False).tobytes(order="C"))
    for doc_id in index.ids:
        raw = doc_id.encode("utf-8")
        parts.append(_LEN.pack(len(raw)))
        parts.append(raw)
    return b"".join(parts)


def from_bytes(buf: bytes) -> DenseIndex:
    if len(buf) < _HEADER.size:
        raise IndexFormatError(
            f"truncated header at offset 0: expected {_HEADER.size} bytes, got {len(buf)}"
        )
    magic, version, dim, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise IndexFormatError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise IndexFormatError(f"unsupported version {version} at offset 4")
    offset = _HEADER.size
    nbytes = count * dim * 4
    if len(buf) - offset < nbytes:
        raise IndexFormatError(
            f"truncated vector payload at offset {offset}: expected {nbytes} bytes, "
            f"got {len(buf) - offset}"
        )
    vectors = np.frombuffer(buf, dtype="<f4", count=count * dim, offset=offset)
    vectors = vectors.reshape(count, dim).astype(np.float32)
    offset += nbytes
    ids = []
    for _ in range(count):
        if len(buf) - offset < _LEN.size:
            raise IndexFormatError(
                f"truncated id length at offset {offset}: expected {_LEN.size} bytes, "
                f"got {len(buf) - offset}"
            )
        (length,) = _LEN.unpack_from(buf, offset)
        offset += _LEN.size
        if len(buf) - offset < length:
            raise IndexFormatError(
                f"truncated id at offset {offset}: expected {length} bytes, "
                f"got {len(buf) - offset}"
            )
        try:
            ids.append(buf[offset:offset + length].decode("utf-8"))
        except UnicodeDecodeError:
            raise IndexFormatError(f"invalid UTF-8 id at offset {offset}") from None
        offset += length
    if offset != len(buf):
        raise IndexFormatError(
            f"trailing data at offset {offset}: {len(buf) - offset} extra bytes"
        )
    try:
        return DenseIndex(vectors, ids)
    except ValueError as exc:
        raise IndexFormatError(str(exc)) from None


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save(index: DenseIndex, path: PathLike) -> None:
    atomic_write_bytes(path, to_bytes(index))


def load(path: PathLike) -> DenseIndex:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def load_any(path: PathLike) -> DenseIndex:
    """Load a binary index, or build one from JSONL if the magic is absent."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return load(path)
    return load_jsonl(path)
