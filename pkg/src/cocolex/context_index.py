"""Exact nearest-neighbour store over context hidden states.

Each entry pairs the hidden state at a context position with the token that
follows it.  At decode time the current hidden state is matched against the
store and the neighbours' next tokens are turned into a copy distribution.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import EmptyIndex, EmptyNeighbors, ShapeError, SnapshotError

Metric = Literal["euclidean", "cosine"]
METRICS = ("euclidean", "cosine")

SNAPSHOT_MAGIC = b"COCOIDX1"
_HEADER = struct.Struct("<8sII")


@dataclass(frozen=True)
class IndexEntry:
    key: np.ndarray
    value: int
    position: int


@dataclass(frozen=True)
class Neighbor:
    entry: IndexEntry
    distance: float

    @property
    def similarity(self) -> float:
        return float(np.exp(-self.distance))


class ContextIndex:
    """Append-only (key, next token, position) store with exact top-k search.

    Rows are kept as dense arrays; ``entries`` materialises ``IndexEntry``
    views on demand.
    """

    def __init__(
        self,
        keys: np.ndarray,
        values: Sequence[int],
        positions: Sequence[int],
        metric: Metric = "euclidean",
    ):
        keys = np.asarray(keys, dtype=np.float64)
        if keys.ndim != 2:
            raise ShapeError(f"keys must be a 2-D array, got shape {keys.shape}")
        values = np.asarray(values, dtype=np.int64)
        positions = np.asarray(positions, dtype=np.int64)
        if not (len(keys) == len(values) == len(positions)):
            raise ShapeError("keys, values and positions must have equal length")
        if metric not in METRICS:
            raise ValueError(f"unknown metric {metric!r}")
        self.keys = keys
        self.values = values
        self.positions = positions
        self.metric: Metric = metric
        self._unit_keys: np.ndarray | None = None

    @property
    def dimension(self) -> int:
        return self.keys.shape[1]

    def __len__(self) -> int:
        return len(self.values)

    @property
    def entries(self) -> list[IndexEntry]:
        return [self.entry(i) for i in range(len(self))]

    def entry(self, row: int) -> IndexEntry:
        return IndexEntry(self.keys[row], int(self.values[row]), int(self.positions[row]))

    def with_metric(self, metric: Metric) -> "ContextIndex":
        return ContextIndex(self.keys, self.values, self.positions, metric)

    def distances(self, query: np.ndarray) -> np.ndarray:
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.dimension,):
            raise ShapeError(
                f"query dimension {query.shape} does not match index dimension {self.dimension}"
            )
        if self.metric == "euclidean":
            return np.sqrt(((self.keys - query) ** 2).sum(axis=1))
        if self._unit_keys is None:
            norms = np.linalg.norm(self.keys, axis=1, keepdims=True)
            self._unit_keys = self.keys / np.where(norms > 0, norms, 1.0)
        qn = np.linalg.norm(query)
        cos = self._unit_keys @ (query / qn if qn > 0 else query)
        return np.clip(1.0 - cos, 0.0, 2.0)

    def query_top_k(self, query: np.ndarray, k: int) -> list[Neighbor]:
        """The ``min(k, len)`` closest entries, ascending distance, ties by position."""
        if k < 1:
            raise ValueError(f"k must be positive, got {k}")
        dist = self.distances(query)
        n = len(dist)
        if n == 0:
            return []
        if k < n:
            kth = np.partition(dist, k - 1)[k - 1]
            cand = np.flatnonzero(dist <= kth)
        else:
            cand = np.arange(n)
        order = cand[np.lexsort((self.positions[cand], dist[cand]))][:k]
        return [Neighbor(self.entry(int(r)), float(dist[r])) for r in order]

    def save(self, path: str | Path) -> None:
        write_snapshot(self, path)

    @classmethod
    def load(cls, path: str | Path, metric: Metric = "euclidean") -> "ContextIndex":
        return read_snapshot(path, metric)


def build_from_prefix(
    hidden_states: Sequence[np.ndarray] | np.ndarray,
    tokens: Sequence[int],
    metric: Metric = "euclidean",
    offset: int = 0,
) -> ContextIndex:
    """Index a context span: state ``i`` is keyed to ``tokens[i + 1]``.

    The last position has no in-span successor and is dropped.  ``offset``
    shifts the recorded positions when the span starts inside a prompt.
    """
    states = np.asarray(hidden_states, dtype=np.float64)
    if len(states) != len(tokens):
        raise ShapeError(f"{len(states)} hidden states for {len(tokens)} tokens")
    if len(tokens) < 2:
        raise EmptyIndex(f"context span of {len(tokens)} tokens yields no entries")
    return ContextIndex(
        states[:-1],
        np.asarray(tokens[1:], dtype=np.int64),
        np.arange(offset, offset + len(tokens) - 1),
        metric,
    )


def copy_distribution(neighbors: Sequence[Neighbor], vocab_size: int) -> np.ndarray:
    """Aggregate neighbour similarities by next token and normalise.

    Distances are shifted by their minimum before exponentiating; the shift
    cancels under normalisation and keeps large distances from underflowing.
    """
    if not neighbors:
        raise EmptyNeighbors("copy distribution needs at least one neighbour")
    dist = np.fromiter((n.distance for n in neighbors), dtype=np.float64)
    tokens = np.fromiter((n.entry.value for n in neighbors), dtype=np.int64)
    return _aggregate(dist, tokens, vocab_size)


def _aggregate(dist: np.ndarray, tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    weights = np.exp(-(dist - dist.min()))
    p = np.bincount(tokens, weights=weights, minlength=vocab_size).astype(np.float64)
    if len(p) != vocab_size:
        raise ShapeError(f"neighbour token id out of range for vocabulary of {vocab_size}")
    return p / p.sum()


def chunk_spans(n_tokens: int, width: int, stride: int) -> list[tuple[int, int]]:
    """Sliding windows ``[start, end)`` of ``width`` tokens every ``stride``
    tokens, stopping at the first window that reaches the end."""
    if width < 1 or stride < 1 or stride > width:
        raise ShapeError(f"need 1 <= stride <= width, got width={width} stride={stride}")
    spans = []
    start = 0
    while start < n_tokens:
        end = min(start + width, n_tokens)
        spans.append((start, end))
        if end == n_tokens:
            break
        start += stride
    return spans


@dataclass(frozen=True)
class Chunk:
    start: int
    tokens: Sequence[int]
    states: np.ndarray


def assign_chunk_positions(
    chunk_starts: Sequence[int], chunk_lengths: Sequence[int], n_tokens: int
) -> list[tuple[int, int]]:
    """For each document position, the ``(chunk, offset)`` with the largest
    in-chunk offset among the chunks that contain it."""
    best: list[tuple[int, int] | None] = [None] * n_tokens
    for c, (start, length) in enumerate(zip(chunk_starts, chunk_lengths)):
        for off in range(length):
            p = start + off
            cur = best[p]
            if cur is None or off > cur[1]:
                best[p] = (c, off)
    missing = [p for p, b in enumerate(best) if b is None]
    if missing:
        raise ShapeError(f"chunks leave {len(missing)} positions uncovered (first: {missing[0]})")
    return best  # type: ignore[return-value]


def build_from_document_chunks(
    chunks: Sequence[Chunk],
    width: int,
    stride: int,
    metric: Metric = "euclidean",
) -> ContextIndex:
    """Index a whole document from overlapping chunk encodings.

    Each position keeps the state from the chunk where it has the most
    preceding in-chunk context; pairing with the next token is then done on
    the global sequence, exactly as for a single prefix.
    """
    if not chunks:
        raise ShapeError("no chunks given")
    if width < 1 or stride < 1 or stride > width:
        raise ShapeError(f"need 1 <= stride <= width, got width={width} stride={stride}")
    n_tokens = max(c.start + len(c.tokens) for c in chunks)
    for i, c in enumerate(chunks):
        if c.start != i * stride:
            raise ShapeError(f"chunk {i} starts at {c.start}, expected {i * stride}")
        if len(c.tokens) != min(width, n_tokens - c.start):
            raise ShapeError(f"chunk {i} has {len(c.tokens)} tokens, expected {min(width, n_tokens - c.start)}")
        if len(c.states) != len(c.tokens):
            raise ShapeError(f"chunk {i} has {len(c.states)} states for {len(c.tokens)} tokens")

    tokens = np.full(n_tokens, -1, dtype=np.int64)
    for i, c in enumerate(chunks):
        seg = np.asarray(c.tokens, dtype=np.int64)
        prev = tokens[c.start : c.start + len(seg)]
        overlap = prev >= 0
        if np.any(prev[overlap] != seg[overlap]):
            raise ShapeError(f"chunk {i} disagrees with earlier chunks on overlapping tokens")
        tokens[c.start : c.start + len(seg)] = seg

    assignment = assign_chunk_positions(
        [c.start for c in chunks], [len(c.tokens) for c in chunks], n_tokens
    )
    dim = np.asarray(chunks[0].states).shape[1]
    states = np.empty((n_tokens, dim), dtype=np.float64)
    for p, (c, off) in enumerate(assignment):
        states[p] = chunks[c].states[off]
    return build_from_prefix(states, tokens.tolist(), metric)


def encode_document(model, tokens: Sequence[int], width: int, stride: int) -> list[Chunk]:
    """Run the model's prefill over each sliding-window chunk of ``tokens``."""
    chunks = []
    for start, end in chunk_spans(len(tokens), width, stride):
        seg = list(tokens[start:end])
        chunks.append(Chunk(start, seg, np.asarray(model.prefill(seg).states)))
    return chunks


def build_document_index(
    model, tokens: Sequence[int], width: int = 512, stride: int = 256, metric: Metric = "euclidean"
) -> ContextIndex:
    return build_from_document_chunks(encode_document(model, tokens, width, stride), width, stride, metric)


def merge_indexes(indexes: Sequence[ContextIndex]) -> ContextIndex:
    """Concatenate several indexes (e.g. one per document) into one store."""
    if not indexes:
        raise EmptyIndex("nothing to merge")
    metric = indexes[0].metric
    dims = {ix.dimension for ix in indexes}
    if len(dims) != 1:
        raise ShapeError(f"cannot merge indexes of dimensions {sorted(dims)}")
    # positions are made unique by offsetting each index past the previous one
    positions, shift = [], 0
    for ix in indexes:
        positions.append(ix.positions + shift)
        shift += int(ix.positions.max()) + 2 if len(ix) else 0
    return ContextIndex(
        np.concatenate([ix.keys for ix in indexes]),
        np.concatenate([ix.values for ix in indexes]),
        np.concatenate(positions),
        metric,
    )


def write_snapshot(index: ContextIndex, path: str | Path) -> None:
    """Little-endian layout: magic, uint32 dimension, uint32 count, float32
    keys (row-major), uint32 values, uint32 positions."""
    n, d = index.keys.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SNAPSHOT_MAGIC, d, n))
        fh.write(index.keys.astype("<f4").tobytes(order="C"))
        fh.write(index.values.astype("<u4").tobytes())
        fh.write(index.positions.astype("<u4").tobytes())


def read_snapshot(path: str | Path, metric: Metric = "euclidean") -> ContextIndex:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise SnapshotError("file too short for snapshot header")
    magic, d, n = _HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise SnapshotError(f"bad magic {magic!r}")
    expected = _HEADER.size + 4 * n * d + 8 * n
    if len(data) != expected:
        raise SnapshotError(f"snapshot is {len(data)} bytes, expected {expected}")
    off = _HEADER.size
    keys = np.frombuffer(data, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    off += 4 * n * d
    values = np.frombuffer(data, dtype="<u4", count=n, offset=off)
    off += 4 * n
    positions = np.frombuffer(data, dtype="<u4", count=n, offset=off)
    return ContextIndex(keys.astype(np.float64), values.astype(np.int64), positions.astype(np.int64), metric)
