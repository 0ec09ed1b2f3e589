"""Autoregressive model contract and a deterministic m-gram reference model.

Any backend exposing ``vocab_size``, ``hidden_size``, ``prefill`` and
``step`` with the semantics below can drive the decoders.  The reference
model keeps identical local contexts mapped to identical hidden states, which
makes copy behaviour predictable in tests.

Adapter wire format (documented for out-of-process backends; only the
in-process path is implemented here): each message is a little-endian
``uint32`` byte length followed by a JSON body.  Requests are
``{"op": "prefill" | "step", "tokens": [uint32, ...]}``; responses carry
``{"logits": float32[|V|], "states": float32[n x d]}`` where ``n`` is the
prompt length for ``prefill`` and 1 for ``step``.  See ``encode_request`` /
``decode_response``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import EmptyPrompt, InvalidToken


@dataclass(frozen=True)
class ModelStep:
    logits: np.ndarray
    hidden_state: np.ndarray


@dataclass(frozen=True)
class PrefillResult:
    states: np.ndarray
    final_step: ModelStep

    @property
    def per_position_states(self) -> np.ndarray:
        return self.states


class LanguageModel(Protocol):
    vocab_size: int
    hidden_size: int

    def prefill(self, tokens: Sequence[int]) -> PrefillResult: ...

    def step(self, prefix: Sequence[int]) -> ModelStep: ...


class ReferenceNgramModel:
    """Tied-embedding toy LM whose state is the normalised mean embedding of
    the last ``order`` tokens; ``logits = E @ h / temperature``.

    ``state_norm`` rescales the hidden state the model *reports* (logits
    always use the unit state).  Real LLM last-layer states have norms far
    above 1, which makes ``exp(-distance)`` sharply peaked; unit states give a
    nearly flat copy kernel.
    """

    def __init__(
        self,
        vocab_size: int = 256,
        hidden_size: int = 32,
        order: int = 4,
        temperature: float = 0.7,
        seed: int = 0,
        state_norm: float = 1.0,
    ):
        if vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if order < 1 or hidden_size < 1 or temperature <= 0:
            raise ValueError("order and hidden_size must be >= 1, temperature > 0")
        if state_norm <= 0:
            raise ValueError("state_norm must be > 0")
        self.vocab_size = vocab_size
        self.hidden_size = hidden_size
        self.order = order
        self.temperature = temperature
        self.seed = seed
        self.state_norm = state_norm
        rng = np.random.default_rng(seed)
        table = rng.standard_normal((vocab_size, hidden_size))
        self.embedding_table = table / np.linalg.norm(table, axis=1, keepdims=True)
        self.embedding_table.setflags(write=False)

    def _check(self, tokens: Sequence[int]) -> np.ndarray:
        arr = np.asarray(tokens, dtype=np.int64)
        if arr.size and (arr.min() < 0 or arr.max() >= self.vocab_size):
            bad = arr[(arr < 0) | (arr >= self.vocab_size)][0]
            raise InvalidToken(f"token id {int(bad)} outside vocabulary of {self.vocab_size}")
        return arr

    def _window_states(self, arr: np.ndarray) -> np.ndarray:
        # Fixed summation order so a position's state depends only on its
        # last `order` tokens, bit for bit.
        emb = self.embedding_table[arr]
        sums = emb.copy()
        for lag in range(1, self.order):
            sums[lag:] += emb[:-lag]
        norms = np.linalg.norm(sums, axis=1, keepdims=True)
        return sums / np.where(norms > 0, norms, 1.0)

    def _logits(self, h: np.ndarray) -> np.ndarray:
        return self.embedding_table @ h / self.temperature

    def step(self, prefix: Sequence[int]) -> ModelStep:
        arr = self._check(prefix)
        if arr.size == 0:
            raise EmptyPrompt("step needs a non-empty prefix")
        h = self._window_states(arr[-self.order :])[-1]
        return ModelStep(self._logits(h), h * self.state_norm)

    def prefill(self, tokens: Sequence[int]) -> PrefillResult:
        arr = self._check(tokens)
        if arr.size == 0:
            raise EmptyPrompt("cannot prefill an empty prompt")
        states = self._window_states(arr)
        last = states[-1]
        return PrefillResult(states * self.state_norm, ModelStep(self._logits(last), last * self.state_norm))


def encode_request(op: str, tokens: Sequence[int]) -> bytes:
    if op not in ("prefill", "step"):
        raise ValueError(f"unknown op {op!r}")
    body = json.dumps({"op": op, "tokens": [int(t) for t in tokens]}).encode()
    return struct.pack("<I", len(body)) + body


def decode_request(frame: bytes) -> tuple[str, list[int]]:
    msg = _unframe(frame)
    return msg["op"], [int(t) for t in msg["tokens"]]


def encode_response(logits: np.ndarray, states: np.ndarray) -> bytes:
    body = json.dumps(
        {
            "logits": np.asarray(logits, dtype=np.float32).tolist(),
            "states": np.asarray(states, dtype=np.float32).tolist(),
        }
    ).encode()
    return struct.pack("<I", len(body)) + body


def decode_response(frame: bytes) -> tuple[np.ndarray, np.ndarray]:
    msg = _unframe(frame)
    return np.asarray(msg["logits"], dtype=np.float32), np.asarray(msg["states"], dtype=np.float32)


def _unframe(frame: bytes) -> dict:
    (length,) = struct.unpack_from("<I", frame)
    body = frame[4 : 4 + length]
    if len(body) != length:
        raise ValueError(f"truncated frame: header says {length} bytes, got {len(body)}")
    return json.loads(body)


def serve_in_process(model: LanguageModel, frame: bytes) -> bytes:
    """Answer one framed request against an in-process model."""
    op, tokens = decode_request(frame)
    if op == "prefill":
        res = model.prefill(tokens)
        return encode_response(res.final_step.logits, res.states)
    step = model.step(tokens)
    return encode_response(step.logits, step.hidden_state[None, :])
