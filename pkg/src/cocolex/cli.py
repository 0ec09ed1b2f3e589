"""Command-line entry point: ``cocolex generate|run|ablate|report|index``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .context_index import write_snapshot
from .decoding import STRATEGIES, StrategyConfig
from .errors import CocolexError, ConfigError, DatasetError, PromptTooLong
from .harness import (
    ByteTokenizer,
    ExperimentConfig,
    ExperimentError,
    document_index,
    dump_report,
    generate_synthetic_corpus,
    load_dataset,
    run_ablation,
    run_experiment,
)

log = logging.getLogger("cocolex")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

# flag name -> (ExperimentConfig / StrategyConfig field, type)
EXPERIMENT_KEYS = {
    "dataset": ("dataset", str),
    "passages": ("passages", int),
    "passage-words": ("passage_words", int),
    "passage-overlap": ("passage_overlap", int),
    "seed": ("seed", int),
    "hidden-size": ("hidden_size", int),
    "order": ("order", int),
    "temperature": ("temperature", float),
    "state-norm": ("state_norm", float),
    "coverage-n": ("coverage_n", int),
    "max-prompt-tokens": ("max_prompt_tokens", int),
    "workers": ("workers", int),
    "out": ("out", str),
}
DECODING_KEYS = {
    "alpha": ("alpha", float),
    "alpha-min": ("alpha_min", float),
    "lambda": ("static_lambda", float),
    "lambda-min": ("lambda_min", float),
    "lambda-max": ("lambda_max", float),
    "smoothing": ("smoothing", float),
    "window": ("window", int),
    "knn-k": ("neighbors_k", int),
    "rep-penalty": ("repetition_penalty", float),
    "metric": ("metric", str),
    "max-new-tokens": ("max_new_tokens", int),
    "chunk-width": ("chunk_width", int),
    "chunk-stride": ("chunk_stride", int),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment.  Keys use the flag
    spelling (``alpha-min``) or the underscore form (``alpha_min``)."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("_", "-")
        if key not in EXPERIMENT_KEYS and key not in DECODING_KEYS and key not in ("strategy", "strategies"):
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("dataset", nargs="?", help="JSONL dataset (or set 'dataset' in --config)")
    p.add_argument("--config", help="flat key=value configuration file; flags override it")
    p.add_argument("--strategy", action="append",
                   help=f"strategy to run; repeat or comma-separate. One of: {', '.join(STRATEGIES)}")
    for flag, (_, kind) in {**EXPERIMENT_KEYS, **DECODING_KEYS}.items():
        if flag in ("dataset",):
            continue
        p.add_argument(f"--{flag}", type=kind, default=None)


def build_experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    merged: dict[str, object] = {}
    if args.config:
        for key, raw in read_config_file(args.config).items():
            if key in ("strategy", "strategies"):
                merged["strategy"] = [s.strip() for s in raw.split(",") if s.strip()]
                continue
            kind = (EXPERIMENT_KEYS.get(key) or DECODING_KEYS[key])[1]
            try:
                merged[key] = kind(raw)
            except ValueError:
                raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None
    for flag in {**EXPERIMENT_KEYS, **DECODING_KEYS}:
        value = getattr(args, flag.replace("-", "_"), None)
        if value is not None:
            merged[flag] = value
    if args.strategy:
        merged["strategy"] = [s.strip() for item in args.strategy for s in item.split(",") if s.strip()]

    decoding = StrategyConfig(**{DECODING_KEYS[k][0]: v for k, v in merged.items() if k in DECODING_KEYS})
    exp = {EXPERIMENT_KEYS[k][0]: v for k, v in merged.items() if k in EXPERIMENT_KEYS}
    if "strategy" in merged:
        exp["strategies"] = tuple(merged["strategy"])
    if not exp.get("dataset"):
        raise UsageError("a dataset path is required")
    return ExperimentConfig(decoding=decoding, **exp)


def cmd_generate(args) -> int:
    instances = generate_synthetic_corpus(args.seed, args.n, args.out)
    log.info("wrote %d instances to %s", len(instances), args.out)
    return EXIT_OK


def _emit(report: dict, out: str | None) -> None:
    text = dump_report(report, out or None)
    if not out:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    config = build_experiment_config(args)
    report = run_experiment(config)
    _emit(report, config.out)
    if config.out:
        log.info("report written to %s", config.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = build_experiment_config(args)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    counts = [int(c) for c in args.passage_grid.split(",") if c.strip()]
    report = run_ablation(config, metrics, counts)
    _emit(report, config.out)
    return EXIT_OK


def _load_report(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: not a JSON report ({exc.msg})") from None


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def format_report(report: dict) -> str:
    lines = []
    if "ablation" in report:
        lines.append(f"{'metric':<10} {'psg':>4} {'strategy':<16} {'rouge_l':>8} {'coverage':>9}")
        for cell in report["ablation"]:
            for strategy, agg in cell["aggregates"].items():
                lines.append(
                    f"{cell['metric']:<10} {cell['passages']:>4} {strategy:<16} "
                    f"{_fmt(agg['rouge_l_f1']['mean']):>8} {_fmt(agg['context_coverage']['mean']):>9}"
                )
        return "\n".join(lines)
    lines.append(f"{'strategy':<16} {'rouge_l':>8} {'coverage':>9} {'tokens':>7} {'calls/x':>8} {'time/x':>7}")
    timing = report.get("timing", {})
    order = report.get("config", {}).get("strategies") or list(report["aggregates"])
    for strategy in order:
        agg = report["aggregates"][strategy]
        t = timing.get(strategy, {}) if isinstance(timing, dict) else {}
        lines.append(
            f"{strategy:<16} {_fmt(agg['rouge_l_f1']['mean']):>8} {_fmt(agg['context_coverage']['mean']):>9} "
            f"{agg['tokens_generated']['mean']:>7.1f} {_fmt(t.get('model_call_ratio')):>8} "
            f"{_fmt(t.get('relative_seconds_per_token')):>7}"
        )
    for pair, entry in report.get("significance", {}).items():
        ps = ", ".join(f"{m} p={_fmt(v['p_value'])}" for m, v in entry.items())
        lines.append(f"  {pair}: {ps}")
    return "\n".join(lines)


def compare_reports(a: dict, b: dict) -> str:
    lines = [f"{'strategy':<16} {'metric':<17} {'A':>8} {'B':>8} {'B-A':>8}"]
    for strategy in a.get("aggregates", {}):
        if strategy not in b.get("aggregates", {}):
            continue
        for metric in ("rouge_l_f1", "context_coverage"):
            va = a["aggregates"][strategy][metric]["mean"]
            vb = b["aggregates"][strategy][metric]["mean"]
            lines.append(f"{strategy:<16} {metric:<17} {va:>8.4f} {vb:>8.4f} {vb - va:>+8.4f}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    first = _load_report(args.report)
    if args.compare:
        print(compare_reports(first, _load_report(args.compare)))
    else:
        print(format_report(first))
    return EXIT_OK


def cmd_index(args) -> int:
    cfg = StrategyConfig(strategy="cocolex_plus", metric=args.metric,
                         chunk_width=args.chunk_width, chunk_stride=args.chunk_stride)
    exp = ExperimentConfig(dataset=args.dataset, seed=args.seed, order=args.order,
                           hidden_size=args.hidden_size, state_norm=args.state_norm)
    instances = {inst.id: inst for inst in load_dataset(args.dataset)}
    if args.instance not in instances:
        raise DatasetError(f"no instance with id {args.instance!r}")
    index = document_index(exp.model(), instances[args.instance], ByteTokenizer(), cfg)
    write_snapshot(index, args.out)
    log.info("indexed %d entries (d=%d) into %s", len(index), index.dimension, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    parser = _Parser(prog="cocolex", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic JSONL corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-n", type=int, default=200, help="number of instances")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", parents=[common], help="decode a dataset with one or more strategies")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", parents=[common], help="grid over similarity metric and passage count")
    _add_experiment_flags(p)
    p.add_argument("--metrics", default="euclidean,cosine")
    p.add_argument("--passage-grid", default="3,6,10")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", parents=[common], help="summarise a JSON report, or compare two")
    p.add_argument("report")
    p.add_argument("--compare", help="second report to diff against the first")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("index", parents=[common], help="build a whole-document index snapshot for one instance")
    p.add_argument("dataset")
    p.add_argument("--instance", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", default="euclidean")
    p.add_argument("--chunk-width", type=int, default=512)
    p.add_argument("--chunk-stride", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--order", type=int, default=4)
    p.add_argument("--hidden-size", type=int, default=32)
    p.add_argument("--state-norm", type=float, default=1.0)
    p.set_defaults(func=cmd_index)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"cocolex: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, PromptTooLong, FileNotFoundError) as exc:
        print(f"cocolex: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ExperimentError as exc:
        code = EXIT_DATA if isinstance(exc.cause, (DatasetError, PromptTooLong)) else EXIT_RUNTIME
        print(f"cocolex: error: {exc}", file=sys.stderr)
        return code
    except CocolexError as exc:
        print(f"cocolex: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
