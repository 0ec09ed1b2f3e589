"""Greedy decoding with regular, contrastive (CAD / AdaCAD) and copy-based
(CoLex / CoCoLex / CoCoLex+ / AdaCAD+CoCoLex) next-token distributions."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from .confidence import ConfidenceState, raw_confidence
from .context_index import METRICS, ContextIndex, build_from_prefix, copy_distribution
from .core import apply_repetition_penalty, entropy, greedy_argmax, jsd, mix, softmax
from .errors import ConfigError, EmptyIndex, VocabMismatch
from .model import LanguageModel, ModelStep

STRATEGIES = (
    "regular",
    "cad",
    "adacad",
    "colex",
    "cocolex",
    "cocolex_plus",
    "adacad_cocolex",
)
CONTRASTIVE = frozenset({"cad", "adacad", "adacad_cocolex"})
COPYING = frozenset({"colex", "cocolex", "cocolex_plus", "adacad_cocolex"})


@dataclass(frozen=True)
class StrategyConfig:
    strategy: str = "cocolex"
    alpha: float = 0.5
    alpha_min: float = 0.3
    static_lambda: float = 0.5
    lambda_min: float = 0.2
    lambda_max: float = 0.8
    smoothing: float = 0.5
    window: int = 5
    neighbors_k: int = 32
    repetition_penalty: float = 1.5
    max_new_tokens: int = 64
    metric: str = "euclidean"
    chunk_width: int = 512
    chunk_stride: int = 256

    def __post_init__(self):
        problems = []
        if self.strategy not in STRATEGIES:
            problems.append(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.alpha < 0:
            problems.append(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 <= self.alpha_min <= 1.0:
            problems.append(f"alpha_min must be in [0, 1], got {self.alpha_min}")
        if not 0.0 <= self.static_lambda <= 1.0:
            problems.append(f"static_lambda must be in [0, 1], got {self.static_lambda}")
        if not 0.0 <= self.lambda_min <= self.lambda_max <= 1.0:
            problems.append(f"need 0 <= lambda_min <= lambda_max <= 1, got ({self.lambda_min}, {self.lambda_max})")
        if not 0.0 <= self.smoothing <= 1.0:
            problems.append(f"smoothing must be in [0, 1], got {self.smoothing}")
        if self.window < 1:
            problems.append(f"window must be >= 1, got {self.window}")
        if self.neighbors_k < 1:
            problems.append(f"neighbors_k must be >= 1, got {self.neighbors_k}")
        if self.repetition_penalty < 1.0:
            problems.append(f"repetition_penalty must be >= 1, got {self.repetition_penalty}")
        if self.max_new_tokens < 1:
            problems.append(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        if self.metric not in METRICS:
            problems.append(f"metric must be one of {METRICS}, got {self.metric!r}")
        if not 1 <= self.chunk_stride <= self.chunk_width:
            problems.append(f"need 1 <= chunk_stride <= chunk_width, got ({self.chunk_stride}, {self.chunk_width})")
        if problems:
            raise ConfigError("; ".join(problems))

    def replace(self, **changes) -> "StrategyConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return StrategyConfig(**values)

    def new_confidence(self) -> ConfidenceState:
        return ConfidenceState(self.smoothing, self.window, self.lambda_min, self.lambda_max)


@dataclass(frozen=True)
class Prompt:
    """Prompt tokens plus where the context sits inside them.

    ``no_context_tokens`` is the same template with the passages removed; it
    feeds the second branch of the contrastive strategies.
    """

    tokens: tuple[int, ...]
    context_span: tuple[int, int]
    no_context_tokens: tuple[int, ...]

    @property
    def context_tokens(self) -> tuple[int, ...]:
        start, end = self.context_span
        return self.tokens[start:end]


@dataclass
class StepTrace:
    token: int
    entropy: float
    model_calls: int
    lam: float | None = None
    alpha: float | None = None
    copy_mass: float | None = None
    copy_fallback: bool = False


@dataclass
class GenerationResult:
    strategy: str
    tokens: list[int]
    trace: list[StepTrace]
    text: str = ""
    stopped_on_eos: bool = False
    decode_seconds: float = 0.0
    index_build_seconds: float = 0.0
    prefill_calls: int = 0

    @property
    def model_calls(self) -> int:
        return sum(s.model_calls for s in self.trace)

    @property
    def seconds_per_token(self) -> float:
        return self.decode_seconds / len(self.tokens) if self.tokens else 0.0

    def to_dict(self, timing: bool = True) -> dict:
        out = {
            "strategy": self.strategy,
            "tokens": list(self.tokens),
            "text": self.text,
            "stopped_on_eos": self.stopped_on_eos,
            "model_calls": self.model_calls,
            "trace": [asdict(s) for s in self.trace],
        }
        if timing:
            out["decode_seconds"] = self.decode_seconds
            out["index_build_seconds"] = self.index_build_seconds
            out["seconds_per_token"] = self.seconds_per_token
        return out


def next_distribution_regular(
    logits: np.ndarray, generated: Sequence[int], penalty: float
) -> np.ndarray:
    return softmax(apply_repetition_penalty(logits, generated, penalty))


def contrast_logits(with_ctx: np.ndarray, without_ctx: np.ndarray, alpha: float) -> np.ndarray:
    if with_ctx.shape != without_ctx.shape:
        raise VocabMismatch(f"logit lengths differ: {with_ctx.shape} vs {without_ctx.shape}")
    return (1.0 + alpha) * with_ctx - alpha * without_ctx


def next_distribution_cad(
    logits_with: np.ndarray,
    logits_without: np.ndarray,
    alpha: float,
    generated: Sequence[int] = (),
    penalty: float = 1.0,
) -> np.ndarray:
    w = apply_repetition_penalty(logits_with, generated, penalty)
    wo = apply_repetition_penalty(logits_without, generated, penalty)
    return softmax(contrast_logits(w, wo, alpha))


def next_distribution_adacad(
    logits_with: np.ndarray,
    logits_without: np.ndarray,
    alpha_min: float,
    generated: Sequence[int] = (),
    penalty: float = 1.0,
) -> tuple[np.ndarray, float]:
    """CAD with the contrast weight set to the JSD between the two branch
    distributions, floored at ``alpha_min``."""
    w = apply_repetition_penalty(logits_with, generated, penalty)
    wo = apply_repetition_penalty(logits_without, generated, penalty)
    alpha_t = max(alpha_min, jsd(softmax(wo), softmax(w)))
    return softmax(contrast_logits(w, wo, alpha_t)), alpha_t


def next_distribution_cocolex(p_model: np.ndarray, p_copy: np.ndarray, lam: float) -> np.ndarray:
    return mix(p_model, p_copy, lam)


def context_index_for(
    prompt: Prompt, states: np.ndarray, metric: str = "euclidean"
) -> ContextIndex | None:
    """Index the prompt's context span from prefill states; ``None`` when the
    span is too short to produce any entry."""
    start, end = prompt.context_span
    try:
        return build_from_prefix(states[start:end], prompt.tokens[start:end], metric, offset=start)
    except EmptyIndex:
        return None


def decode(
    model: LanguageModel,
    prompt: Prompt,
    config: StrategyConfig,
    *,
    document_index: ContextIndex | None = None,
    eos_token: int | None = None,
    detokenize: Callable[[Sequence[int]], str] | None = None,
    on_step: Callable[[int, dict[str, np.ndarray]], None] | None = None,
) -> GenerationResult:
    """Greedy decode ``prompt`` with the configured strategy.

    The first step reuses the prefill's final logits, so every strategy makes
    exactly one model call per branch per generated token.  For copy
    strategies the index comes from the prefill states of the context span
    (or ``document_index`` for ``cocolex_plus``); its construction time is
    excluded from ``decode_seconds`` and reported separately.

    ``on_step(t, dists)`` receives every distribution assembled at step ``t``
    (keys ``model``, ``copy`` when present, ``final``).
    """
    strategy = config.strategy
    contrastive = strategy in CONTRASTIVE
    copying = strategy in COPYING
    if strategy == "cocolex_plus" and document_index is None:
        raise ConfigError("cocolex_plus needs a document index")

    t_start = time.perf_counter()
    index_seconds = 0.0
    prefill_calls = 1
    seq = list(prompt.tokens)
    pre = model.prefill(seq)
    step_with: ModelStep = pre.final_step
    seq_wo: list[int] = []
    step_wo: ModelStep | None = None
    if contrastive:
        seq_wo = list(prompt.no_context_tokens)
        step_wo = model.prefill(seq_wo).final_step
        prefill_calls = 2

    index: ContextIndex | None = None
    if copying:
        t_idx = time.perf_counter()
        if strategy == "cocolex_plus":
            index = document_index
            if index is not None and index.metric != config.metric:
                index = index.with_metric(config.metric)
        else:
            index = context_index_for(prompt, pre.states, config.metric)
        if index is not None and len(index) == 0:
            index = None
        index_seconds = time.perf_counter() - t_idx
    confidence = config.new_confidence()

    generated: list[int] = []
    trace: list[StepTrace] = []
    stopped = False
    penalty = config.repetition_penalty
    for t in range(config.max_new_tokens):
        calls = 1
        if t > 0:
            step_with = model.step(seq)
            if contrastive:
                step_wo = model.step(seq_wo)
        if contrastive:
            calls = 2

        alpha_t: float | None = None
        if strategy in ("adacad", "adacad_cocolex"):
            p_model, alpha_t = next_distribution_adacad(
                step_with.logits, step_wo.logits, config.alpha_min, generated, penalty
            )
        elif strategy == "cad":
            alpha_t = config.alpha
            p_model = next_distribution_cad(
                step_with.logits, step_wo.logits, config.alpha, generated, penalty
            )
        else:
            p_model = next_distribution_regular(step_with.logits, generated, penalty)
        h_t = entropy(p_model)

        lam: float | None = None
        copy_mass: float | None = None
        fallback = False
        p = p_model
        p_copy = None
        if copying:
            if strategy == "colex":
                lam = config.static_lambda
            else:
                lam = confidence.update(raw_confidence(p_model))
            neighbors = index.query_top_k(step_with.hidden_state, config.neighbors_k) if index else []
            if neighbors:
                p_copy = copy_distribution(neighbors, len(p_model))
                p = next_distribution_cocolex(p_model, p_copy, lam)
            else:
                fallback = True
                lam = 1.0

        token = greedy_argmax(p)
        if on_step is not None:
            dists = {"model": p_model, "final": p}
            if copying and p_copy is not None:
                dists["copy"] = p_copy
            on_step(t, dists)
        if p_copy is not None:
            copy_mass = float((1.0 - lam) * p_copy[token])
        trace.append(StepTrace(token, h_t, calls, lam, alpha_t, copy_mass, fallback))
        generated.append(token)
        seq.append(token)
        if contrastive:
            seq_wo.append(token)
        if eos_token is not None and token == eos_token:
            stopped = True
            break

    elapsed = time.perf_counter() - t_start - index_seconds
    body = generated[:-1] if stopped else generated
    return GenerationResult(
        strategy=strategy,
        tokens=generated,
        trace=trace,
        text=detokenize(body) if detokenize else "",
        stopped_on_eos=stopped,
        decode_seconds=elapsed,
        index_build_seconds=index_seconds,
        prefill_calls=prefill_calls,
    )
