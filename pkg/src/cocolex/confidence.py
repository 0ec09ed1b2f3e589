"""Entropy-based confidence weight for the model/copy mixture."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .core import entropy
from .errors import DegenerateVocabulary, InvalidConfidence


def raw_confidence(p: np.ndarray) -> float:
    """``exp(-H / log|V|)``: 1 for a one-hot distribution, ``1/e`` for uniform."""
    size = len(p)
    if size < 2:
        raise DegenerateVocabulary(f"confidence needs |V| >= 2, got {size}")
    h_norm = min(entropy(p) / math.log(size), 1.0)
    return math.exp(-h_norm)


@dataclass
class ConfidenceState:
    """Smoothed, clamped confidence for one decode session.

    Each update blends the raw value with the mean of the last ``window``
    emitted weights (post-clamp), then clamps into ``[lower, upper]``.
    """

    smoothing: float = 0.5
    window: int = 5
    lower: float = 0.2
    upper: float = 0.8
    history: deque = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.smoothing <= 1.0:
            raise ValueError(f"smoothing must be in [0, 1], got {self.smoothing}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if not 0.0 <= self.lower <= self.upper <= 1.0:
            raise ValueError(f"invalid bounds [{self.lower}, {self.upper}]")
        self.history = deque(maxlen=self.window)

    def clamp(self, value: float) -> float:
        return min(max(value, self.lower), self.upper)

    def update(self, raw: float) -> float:
        if not 0.0 < raw <= 1.0:
            raise InvalidConfidence(f"raw confidence must be in (0, 1], got {raw}")
        if self.history:
            past = sum(self.history) / len(self.history)
            value = self.smoothing * raw + (1.0 - self.smoothing) * past
        else:
            value = raw
        lam = self.clamp(value)
        self.history.append(lam)
        return lam
