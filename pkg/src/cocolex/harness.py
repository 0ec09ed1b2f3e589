"""Datasets, prompt assembly, synthetic corpora and end-to-end experiments."""
from __future__ import annotations

import itertools
import json
import logging
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

from .context_index import ContextIndex, build_document_index, merge_indexes
from .decoding import STRATEGIES, Prompt, StrategyConfig, decode
from .errors import CocolexError, ConfigError, DatasetError, InsufficientData, PromptTooLong
from .evaluation import context_coverage, rouge_l_f1, summarize, timing_report, wilcoxon_signed_rank
from .model import ReferenceNgramModel
from .retrieval import Bm25Index, Passage, analyze, chunk_document

log = logging.getLogger(__name__)

PROMPT_TEMPLATE_VERSION = "qa-v1"
PASSAGE_SEPARATOR = "\n\n"
QUERY_TEMPLATE = "Question: {query}\nAnswer:"
EOS_TEXT = "\n"


class ByteTokenizer:
    """UTF-8 bytes as token ids 0..255."""

    vocab_size = 256

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, tokens: Sequence[int]) -> str:
        return bytes(tokens).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str


@dataclass(frozen=True)
class Instance:
    id: str
    query: str
    documents: tuple[Document, ...]
    reference_answer: str

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "query": self.query,
            "documents": [{"doc_id": d.doc_id, "text": d.text} for d in self.documents],
            "reference_answer": self.reference_answer,
        }


def _parse_instance(obj, line: int) -> Instance:
    if not isinstance(obj, dict):
        raise DatasetError("expected a JSON object", line)
    for key, kind in (("id", str), ("query", str), ("documents", list), ("reference_answer", str)):
        if key not in obj:
            raise DatasetError(f"missing field {key!r}", line)
        if not isinstance(obj[key], kind):
            raise DatasetError(f"field {key!r} must be {kind.__name__}", line)
    if not obj["documents"]:
        raise DatasetError("instance needs at least one document", line)
    docs = []
    for j, d in enumerate(obj["documents"]):
        if not isinstance(d, dict) or not isinstance(d.get("doc_id"), str) or not isinstance(d.get("text"), str):
            raise DatasetError(f"document {j} needs string 'doc_id' and 'text'", line)
        docs.append(Document(d["doc_id"], d["text"]))
    return Instance(obj["id"], obj["query"], tuple(docs), obj["reference_answer"])


def load_dataset(path: str | Path) -> list[Instance]:
    """Read a JSON-lines dataset; blank lines are skipped."""
    instances: list[Instance] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON ({exc.msg})", lineno) from None
            inst = _parse_instance(obj, lineno)
            if inst.id in seen:
                raise DatasetError(f"duplicate id {inst.id!r} (first on line {seen[inst.id]})", lineno)
            seen[inst.id] = lineno
            instances.append(inst)
    return instances


def write_dataset(instances: Iterable[Instance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json(), sort_keys=True, ensure_ascii=False) + "\n")


def build_prompt(
    query: str,
    passages: Sequence[Passage],
    tokenizer: ByteTokenizer | None = None,
    max_tokens: int | None = None,
) -> Prompt:
    """Passages (joined by blank lines), then the question and answer cue.

    The context span covers the passages and their separators only.
    """
    tok = tokenizer or ByteTokenizer()
    context = PASSAGE_SEPARATOR.join(p.text for p in passages)
    tail = QUERY_TEMPLATE.format(query=query)
    no_ctx = tok.encode(tail)
    if context:
        ctx_tokens = tok.encode(context)
        tokens = ctx_tokens + tok.encode(PASSAGE_SEPARATOR) + no_ctx
        span = (0, len(ctx_tokens))
    else:
        tokens = list(no_ctx)
        span = (0, 0)
    if max_tokens is not None and len(tokens) > max_tokens:
        raise PromptTooLong(f"prompt has {len(tokens)} tokens, budget is {max_tokens}")
    return Prompt(tuple(tokens), span, tuple(no_ctx))


def retrieve_passages(
    instance: Instance, top_k: int, size: int = 256, overlap: int = 32
) -> list[Passage]:
    passages = [p for d in instance.documents for p in chunk_document(d.text, size, overlap, d.doc_id)]
    if not passages or top_k <= 0:
        return []
    return [p for p, _ in Bm25Index(passages).rank(instance.query, top_k)]


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

_PARTIES = ["Acme Holdings", "Borealis Freight", "Cobalt Systems", "Delphi Analytics", "Everest Mining",
            "Fulcrum Media", "Granite Capital", "Harbor Logistics", "Ionic Biotech", "Juniper Foods"]
_AGREEMENTS = ["Master Services Agreement", "Supply Agreement", "License Agreement", "Lease Agreement",
               "Distribution Agreement", "Consulting Agreement", "Loan Agreement", "Joint Venture Agreement"]
_STATES = ["Delaware", "New York", "California", "Texas", "Nevada", "Illinois", "Ohio", "Oregon"]
_CITIES = ["Wilmington", "Albany", "Sacramento", "Austin", "Reno", "Chicago", "Columbus", "Portland"]
_FILLER = [
    "Each party shall keep confidential all information disclosed under this {agreement}.",
    "Notices under this {agreement} shall be given in writing to the addresses set out above.",
    "No amendment to this {agreement} is valid unless signed by both {a} and {b}.",
    "{a} may not assign its rights without the prior written consent of {b}.",
    "Neither party is liable for delays caused by events beyond its reasonable control.",
    "This {agreement} constitutes the entire understanding between {a} and {b}.",
    "Any waiver of a breach shall not be deemed a waiver of any later breach.",
    "If any provision is held invalid, the remaining provisions continue in full force.",
    "{b} shall maintain adequate insurance for the duration of this {agreement}.",
    "Headings are for convenience only and do not affect interpretation.",
    "{a} shall invoice {b} monthly and payment is due within {days} days of receipt.",
    "Each party shall comply with all applicable laws and regulations.",
]
_FACTS = [
    ("What law governs the {agreement} between {a} and {b}?",
     "The {agreement} between {a} and {b} is governed by",
     "the laws of the State of {state}"),
    ("How long is the initial term of the {agreement} between {a} and {b}?",
     "The initial term of the {agreement} between {a} and {b} is",
     "{years} years from the effective date"),
    ("Where must disputes under the {agreement} between {a} and {b} be resolved?",
     "Disputes under the {agreement} between {a} and {b} shall be resolved",
     "exclusively in the courts of {city}, {state}"),
    ("What notice period applies to termination of the {agreement} between {a} and {b}?",
     "Either party may terminate the {agreement} between {a} and {b} by giving",
     "{days} days prior written notice"),
    ("What is the liability cap in the {agreement} between {a} and {b}?",
     "The total liability under the {agreement} between {a} and {b} is limited to",
     "{amount} dollars in the aggregate"),
]


def _fill(template: str, slots: dict) -> str:
    return template.format(**slots)


def _qa_record(fact: tuple[str, str, str], slots: dict) -> tuple[str, str]:
    question, _, answer = fact
    answer = _fill(answer, slots)
    return f"{QUERY_TEMPLATE.format(query=_fill(question, slots))} {answer}.", answer


def _document(rng: random.Random, slots: dict, n_clauses: int, records: Sequence[str]) -> str:
    clauses = [
        _fill(rng.choice(_FILLER), dict(slots, days=rng.choice([10, 15, 30, 45, 60, 90])))
        for _ in range(n_clauses)
    ]
    for rec in records:
        clauses.insert(rng.randrange(len(clauses) + 1), rec)
    return "".join(f"{i + 1}. {c}\n" for i, c in enumerate(clauses))


def synthetic_instances(seed: int, n_instances: int, docs_per_instance: int = 2,
                        clauses_per_doc: int = 24) -> list[Instance]:
    """Contract-like documents with question/answer records embedded among
    boilerplate clauses.

    One record per instance answers the instance's query; every document also
    carries a distractor record of another fact type, so a copier anchored
    on the answer cue still has to choose between candidate answers.  The
    reference answer occurs verbatim in exactly one document.
    """
    if n_instances < 1:
        raise ValueError("n_instances must be >= 1")
    rng = random.Random(seed)
    out = []
    for i in range(n_instances):
        a, b = rng.sample(_PARTIES, 2)
        slots = {
            "a": a, "b": b,
            "agreement": rng.choice(_AGREEMENTS),
            "state": rng.choice(_STATES),
            "city": rng.choice(_CITIES),
            "years": rng.choice(["two", "three", "five", "seven", "ten"]),
            "amount": f"{rng.randint(1, 99) * 10000:,}",
            "days": rng.choice([10, 15, 30, 45, 60, 90]),
        }
        fact_id = rng.randrange(len(_FACTS))
        gold_record, answer = _qa_record(_FACTS[fact_id], slots)
        others = [f for j, f in enumerate(_FACTS) if j != fact_id]
        gold = rng.randrange(docs_per_instance)
        docs = []
        for j in range(docs_per_instance):
            records = [_qa_record(rng.choice(others), slots)[0]]
            if j == gold:
                records.append(gold_record)
            text = _document(rng, slots, clauses_per_doc, records)
            docs.append(Document(f"s{seed}-{i:05d}-d{j}", text))
        assert sum(d.text.count(answer) for d in docs) == 1
        out.append(Instance(f"s{seed}-{i:05d}", _fill(_FACTS[fact_id][0], slots), tuple(docs), answer))
    return out


def generate_synthetic_corpus(seed: int, n_instances: int, path: str | Path, **kwargs) -> list[Instance]:
    instances = synthetic_instances(seed, n_instances, **kwargs)
    write_dataset(instances, path)
    return instances


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

class ExperimentError(CocolexError):
    def __init__(self, instance_id: str, strategy: str, cause: Exception):
        self.instance_id = instance_id
        self.strategy = strategy
        self.cause = cause
        super().__init__(f"instance {instance_id!r} ({strategy}): {type(cause).__name__}: {cause}")


@dataclass
class ExperimentConfig:
    dataset: str = ""
    strategies: tuple[str, ...] = ("regular", "cocolex")
    decoding: StrategyConfig = field(default_factory=StrategyConfig)
    passages: int = 3
    passage_words: int = 256
    passage_overlap: int = 32
    seed: int = 0
    vocab_size: int = 256
    hidden_size: int = 32
    order: int = 4
    temperature: float = 0.7
    state_norm: float = 1.0
    coverage_n: int = 4
    max_prompt_tokens: int = 32768
    workers: int = 1
    out: str = ""

    def __post_init__(self):
        if not self.strategies:
            raise ConfigError("at least one strategy is required")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ConfigError(f"unknown strategies {bad}; choose from {STRATEGIES}")
        if self.vocab_size != ByteTokenizer.vocab_size:
            raise ConfigError("the byte tokenizer requires vocab_size = 256")
        if self.passages < 0 or self.workers < 1 or self.coverage_n < 1:
            raise ConfigError("passages >= 0, workers >= 1 and coverage_n >= 1 are required")

    def model(self) -> ReferenceNgramModel:
        return ReferenceNgramModel(
            self.vocab_size, self.hidden_size, self.order, self.temperature, self.seed, self.state_norm
        )

    def describe(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("decoding", "out")}
        out["strategies"] = list(self.strategies)
        out["decoding"] = {k: v for k, v in asdict(self.decoding).items() if k != "strategy"}
        out["prompt_template"] = PROMPT_TEMPLATE_VERSION
        return out


def document_index(model, instance: Instance, tokenizer: ByteTokenizer, cfg: StrategyConfig) -> ContextIndex:
    parts = [
        build_document_index(model, tokenizer.encode(d.text), cfg.chunk_width, cfg.chunk_stride, cfg.metric)
        for d in instance.documents
        if len(tokenizer.encode(d.text)) >= 2
    ]
    return merge_indexes(parts)


def run_instance(instance: Instance, config: ExperimentConfig, model, tokenizer=None) -> list[dict]:
    tok = tokenizer or ByteTokenizer()
    eos = tok.encode(EOS_TEXT)[0]
    passages = retrieve_passages(instance, config.passages, config.passage_words, config.passage_overlap)
    prompt = build_prompt(instance.query, passages, tok, config.max_prompt_tokens)
    context_terms = analyze(tok.decode(prompt.context_tokens))
    reference_terms = analyze(instance.reference_answer)
    rows = []
    for strategy in config.strategies:
        cfg = config.decoding.replace(strategy=strategy)
        try:
            doc_index, build_seconds = None, 0.0
            if strategy == "cocolex_plus":
                t0 = time.perf_counter()
                doc_index = document_index(model, instance, tok, cfg)
                build_seconds = time.perf_counter() - t0
            result = decode(model, prompt, cfg, document_index=doc_index, eos_token=eos, detokenize=tok.decode)
        except CocolexError as exc:
            raise ExperimentError(instance.id, strategy, exc) from exc
        gen_terms = analyze(result.text)
        lams = [s.lam for s in result.trace if s.lam is not None]
        rows.append({
            "id": instance.id,
            "strategy": strategy,
            "text": result.text,
            "rouge_l_f1": rouge_l_f1(gen_terms, reference_terms),
            "context_coverage": context_coverage(gen_terms, context_terms, config.coverage_n),
            "tokens_generated": len(result.tokens),
            "model_calls": result.model_calls,
            "copy_fallback_steps": sum(s.copy_fallback for s in result.trace),
            "mean_lambda": sum(lams) / len(lams) if lams else None,
            "decode_seconds": result.decode_seconds,
            "seconds_per_token": result.seconds_per_token,
            "index_build_seconds": result.index_build_seconds + build_seconds,
        })
    return rows


def _significance(by_strategy: dict[str, list[dict]], metrics: Sequence[str]) -> dict:
    out = {}
    for s1, s2 in itertools.combinations(by_strategy, 2):
        entry = {}
        for metric in metrics:
            a = [r[metric] for r in by_strategy[s1]]
            b = [r[metric] for r in by_strategy[s2]]
            try:
                entry[metric] = {"p_value": wilcoxon_signed_rank(a, b)}
            except InsufficientData as exc:
                entry[metric] = {"p_value": None, "reason": str(exc)}
        out[f"{s1} vs {s2}"] = entry
    return out


METRIC_KEYS = ("rouge_l_f1", "context_coverage")


def run_experiment(config: ExperimentConfig, instances: Sequence[Instance] | None = None) -> dict:
    """Decode every instance with every strategy and assemble the report."""
    if instances is None:
        instances = load_dataset(config.dataset)
    model = config.model()
    tok = ByteTokenizer()
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            chunks = list(pool.map(lambda inst: run_instance(inst, config, model, tok), instances))
    else:
        chunks = [run_instance(inst, config, model, tok) for inst in instances]
    rows = sorted((r for chunk in chunks for r in chunk), key=lambda r: (r["id"], config.strategies.index(r["strategy"])))

    by_strategy: dict[str, list[dict]] = {s: [] for s in config.strategies}
    for r in rows:
        by_strategy[r["strategy"]].append(r)
    aggregates = {
        s: {key: summarize([r[key] for r in rs]) for key in METRIC_KEYS + ("tokens_generated",)}
        for s, rs in by_strategy.items()
    }
    timing = timing_report(by_strategy) if "regular" in by_strategy else {"error": "regular strategy not run"}
    return {
        "config": config.describe(),
        "per_instance": rows,
        "aggregates": aggregates,
        "significance": _significance(by_strategy, METRIC_KEYS),
        "timing": timing,
    }


def run_ablation(
    config: ExperimentConfig,
    metrics: Sequence[str] = ("euclidean", "cosine"),
    passage_counts: Sequence[int] = (3, 6, 10),
    instances: Sequence[Instance] | None = None,
) -> dict:
    """Grid over similarity metric and prompt passage count."""
    if instances is None:
        instances = load_dataset(config.dataset)
    grid = []
    for metric, n_passages in itertools.product(metrics, passage_counts):
        cfg = ExperimentConfig(**{
            **{f.name: getattr(config, f.name) for f in fields(config)},
            "decoding": config.decoding.replace(metric=metric),
            "passages": n_passages,
        })
        report = run_experiment(cfg, instances)
        grid.append({
            "metric": metric,
            "passages": n_passages,
            "aggregates": report["aggregates"],
            "significance": report["significance"],
        })
    return {"config": config.describe(), "ablation": grid}


def dump_report(report: dict, path: str | Path | None = None) -> str:
    text = json.dumps(report, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    return text


def _json_default(obj):
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def strip_timing(obj):
    """Drop every wall-clock field (keys mentioning seconds) recursively."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if "seconds" not in k}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj
