"""Vocabulary and probability primitives shared by every decoding strategy.

Distributions and logit vectors are plain 1-D float64 numpy arrays; the
helpers here validate at the boundary and otherwise stay out of the way.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateVocabulary, InvalidLogits, InvalidPenalty, VocabMismatch

NORMALIZATION_TOL = 1e-9


@dataclass(frozen=True)
class Vocabulary:
    """Dense token ids ``0..size-1`` with their surface strings."""

    strings: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.strings) < 2:
            raise DegenerateVocabulary(f"vocabulary needs >= 2 tokens, got {len(self.strings)}")
        index = {s: i for i, s in enumerate(self.strings)}
        if len(index) != len(self.strings):
            raise ValueError("token strings must be unique")
        object.__setattr__(self, "_index", index)

    @classmethod
    def bytes_level(cls) -> "Vocabulary":
        return cls(tuple(f"<0x{i:02X}>" for i in range(256)))

    @property
    def size(self) -> int:
        return len(self.strings)

    def __len__(self) -> int:
        return len(self.strings)

    def token_to_string(self, token: int) -> str:
        return self.strings[token]

    def string_to_token(self, s: str) -> int:
        return self._index[s]


def as_logits(values: Iterable[float]) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidLogits(f"logits must be a non-empty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidLogits("logits contain non-finite values")
    return arr


def check_distribution(p: np.ndarray, tol: float = NORMALIZATION_TOL) -> None:
    """Raise ``ValueError`` unless ``p`` is a valid probability vector."""
    if p.ndim != 1:
        raise ValueError(f"distribution must be 1-D, got shape {p.shape}")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("distribution entries must lie in [0, 1]")
    total = float(p.sum())
    if abs(total - 1.0) > tol:
        raise ValueError(f"distribution sums to {total!r}, not 1")


def softmax(logits: Iterable[float]) -> np.ndarray:
    x = as_logits(logits)
    z = np.exp(x - x.max())
    return z / z.sum()


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats, with 0 log 0 taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    h = float(-(nz * np.log(nz)).sum())
    return max(h, 0.0)


def _kl2(p: np.ndarray, m: np.ndarray) -> float:
    mask = p > 0
    return float((p[mask] * np.log2(p[mask] / m[mask])).sum())


def jsd(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence with base-2 logs, so the result lies in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise VocabMismatch(f"distribution lengths differ: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    value = 0.5 * _kl2(p, m) + 0.5 * _kl2(q, m)
    return min(max(value, 0.0), 1.0)


def apply_repetition_penalty(
    logits: np.ndarray, seen: Iterable[int], penalty: float
) -> np.ndarray:
    """CTRL-style penalty: positive logits of seen tokens are divided by
    ``penalty``, non-positive ones multiplied by it. Returns a new array."""
    if not penalty >= 1.0:
        raise InvalidPenalty(f"repetition penalty must be >= 1, got {penalty}")
    out = np.array(logits, dtype=np.float64, copy=True)
    if penalty == 1.0:
        return out
    idx = np.fromiter(set(seen), dtype=np.int64)
    if idx.size == 0:
        return out
    vals = out[idx]
    out[idx] = np.where(vals > 0, vals / penalty, vals * penalty)
    return out


def greedy_argmax(p: np.ndarray) -> int:
    # np.argmax returns the first maximal index: ties go to the lowest id.
    return int(np.argmax(p))


def mix(p_model: np.ndarray, p_copy: np.ndarray, weight: float) -> np.ndarray:
    """Convex combination ``weight * p_model + (1 - weight) * p_copy``."""
    if p_model.shape != p_copy.shape:
        raise VocabMismatch(f"distribution lengths differ: {p_model.shape} vs {p_copy.shape}")
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"mixture weight must be in [0, 1], got {weight}")
    return weight * p_model + (1.0 - weight) * p_copy


def ensure_same_length(*arrays: Sequence) -> None:
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        raise VocabMismatch(f"vector lengths differ: {sorted(lengths)}")
