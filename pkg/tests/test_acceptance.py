"""One test per acceptance criterion; each records a PASS/FAIL summary line."""
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from _support import brute_force, copy_prompt, corpus_prompts, criterion, random_prompt
from cocolex.context_index import Chunk, ContextIndex, build_document_index, build_from_document_chunks, chunk_spans
from cocolex.decoding import COPYING, STRATEGIES, StrategyConfig, decode
from cocolex.harness import ExperimentConfig, dump_report, run_experiment, strip_timing, synthetic_instances
from cocolex.model import ReferenceNgramModel

pytestmark = pytest.mark.acceptance

CORPUS_SEED = 0
CORPUS_SIZE = 200


def _decode(model, prompt, cfg, on_step=None):
    doc = None
    if cfg.strategy == "cocolex_plus":
        doc = build_document_index(model, list(prompt.context_tokens), cfg.chunk_width, cfg.chunk_stride)
    return decode(model, prompt, cfg, document_index=doc, on_step=on_step)


def test_c1_normalization_fuzz():
    with criterion(1, "every distribution sums to 1 within 1e-9; lambda in [0.2, 0.8]; alpha in [0.3, 1]", 60) as c:
        rng = np.random.default_rng(1)
        steps = 0
        worst = 0.0
        for s in range(8):
            model = ReferenceNgramModel(seed=s)
            prompt = random_prompt(rng) if s % 2 else corpus_prompts(seed=100 + s, n=1)[0]
            for strategy in STRATEGIES:
                cfg = StrategyConfig(strategy=strategy, max_new_tokens=20)
                dists = []
                out = _decode(model, prompt, cfg, on_step=lambda t, d: dists.append(d))
                for d in dists:
                    for p in d.values():
                        assert np.all(p >= 0)
                        worst = max(worst, abs(float(p.sum()) - 1.0))
                for st in out.trace:
                    assert not st.copy_fallback
                    if strategy in COPYING:
                        assert 0.2 <= st.lam <= 0.8, (strategy, st.lam)
                    if st.alpha is not None:
                        assert 0.3 <= st.alpha <= 1.0, (strategy, st.alpha)
                steps += len(out.trace)
        c.note(f"{steps} steps over {len(STRATEGIES)} strategies, max |sum-1| = {worst:.1e}")
        assert steps >= 1000
        assert worst <= 1e-9


def test_c2_degeneration_identities():
    with criterion(2, "cad(alpha=0), cocolex(bounds 1,1), colex(lambda=1) reproduce regular exactly", 60) as c:
        mismatches = 0
        for s in range(50):
            model = ReferenceNgramModel(seed=s)
            prompt = corpus_prompts(seed=s, n=1)[0]
            base = decode(model, prompt, StrategyConfig("regular", max_new_tokens=32)).tokens
            variants = [
                StrategyConfig("cad", alpha=0.0, max_new_tokens=32),
                StrategyConfig("cocolex", lambda_min=1.0, lambda_max=1.0, max_new_tokens=32),
                StrategyConfig("colex", static_lambda=1.0, max_new_tokens=32),
            ]
            for cfg in variants:
                mismatches += decode(model, prompt, cfg).tokens != base
        c.note(f"50 sessions x 3 variants, {mismatches} mismatches")
        assert mismatches == 0


def test_c3_knn_oracle():
    with criterion(3, "query_top_k equals exhaustive scan on 200 random indexes", 60) as c:
        rng = np.random.default_rng(3)
        for i in range(200):
            n, d, k = int(rng.integers(1, 1001)), int(rng.integers(1, 65)), int(rng.integers(1, 33))
            keys = rng.normal(size=(n, d))
            if i % 4 == 0:
                # force exact ties to exercise the position tie-break
                keys[rng.integers(0, n, n // 2)] = keys[0]
            metric = "cosine" if i % 2 else "euclidean"
            index = ContextIndex(keys, rng.integers(0, 256, n), rng.permutation(n), metric)
            q = keys[0] if i % 4 == 0 else rng.normal(size=d)
            got = index.query_top_k(q, k)
            want = brute_force(index, q, k)
            assert [(int(x.entry.position), int(x.entry.value)) for x in got] == [
                (p, int(index.values[r])) for _, p, r in want
            ], f"index {i}"
            np.testing.assert_allclose([x.distance for x in got], [dd for dd, _, _ in want], atol=1e-12)
        c.note("200/200 identical (entries and order)")


def test_c4_copy_correctness():
    with criterion(4, "cocolex with lambda bounds (0,0) emits the context continuation", 60) as c:
        rng = np.random.default_rng(4)
        model = ReferenceNgramModel(seed=0)
        cfg = StrategyConfig("cocolex", lambda_min=0.0, lambda_max=0.0, max_new_tokens=1)
        hits = cases = 0
        while cases < 100:
            prompt, continuation = copy_prompt(rng, model.order)
            if int(np.argmax(model.step(list(prompt.tokens)).logits)) == continuation:
                continue
            cases += 1
            hits += decode(model, prompt, cfg).tokens == [continuation]
        c.note(f"{hits}/{cases}")
        assert hits == 100


@pytest.fixture(scope="module")
def corpus_report():
    cfg = ExperimentConfig(strategies=("regular", "cocolex"), seed=CORPUS_SEED)
    t0 = time.perf_counter()
    report = run_experiment(cfg, synthetic_instances(CORPUS_SEED, CORPUS_SIZE))
    report["_elapsed"] = time.perf_counter() - t0
    return report


def test_c5_directional_faithfulness(corpus_report):
    with criterion(5, "mean context_coverage(n=4): cocolex > regular, Wilcoxon p < 0.05", 300) as c:
        agg = corpus_report["aggregates"]
        cov_c = agg["cocolex"]["context_coverage"]["mean"]
        cov_r = agg["regular"]["context_coverage"]["mean"]
        p = corpus_report["significance"]["regular vs cocolex"]["context_coverage"]["p_value"]
        c.note(f"cocolex {cov_c:.4f} vs regular {cov_r:.4f}, p = {p}")
        c.note(f"corpus run {corpus_report['_elapsed']:.1f}s")
        assert corpus_report["_elapsed"] < 300
        assert cov_c > cov_r
        assert p is not None and p < 0.05


def test_c6_directional_correctness(corpus_report):
    with criterion(6, "mean rouge_l_f1: cocolex >= regular (p reported)") as c:
        agg = corpus_report["aggregates"]
        r_c = agg["cocolex"]["rouge_l_f1"]["mean"]
        r_r = agg["regular"]["rouge_l_f1"]["mean"]
        p = corpus_report["significance"]["regular vs cocolex"]["rouge_l_f1"]["p_value"]
        c.note(f"cocolex {r_c:.4f} vs regular {r_r:.4f}, p = {p}")
        assert r_c >= r_r


def test_c7_cost_accounting(corpus_report):
    with criterion(7, "call ratios 2.00x / 1.00x; cocolex slower per token; cocolex_plus build time separate") as c:
        cfg = ExperimentConfig(strategies=STRATEGIES)
        rep = run_experiment(cfg, synthetic_instances(CORPUS_SEED, 20))
        ratios = {s: rep["timing"][s]["model_call_ratio"] for s in STRATEGIES}
        c.note("ratios " + ", ".join(f"{s}={r:.2f}" for s, r in ratios.items()))
        for s in ("cad", "adacad", "adacad_cocolex"):
            assert ratios[s] == 2.0
        for s in ("regular", "colex", "cocolex", "cocolex_plus"):
            assert ratios[s] == 1.0

        rel = corpus_report["timing"]["cocolex"]["relative_seconds_per_token"]
        c.note(f"cocolex time/token = {rel:.2f}x regular")
        assert rel > 1.0

        build = rep["timing"]["cocolex_plus"]["index_build_seconds"]
        c.note(f"cocolex_plus index build {build:.3f}s")
        assert build > 0
        rows = [r for r in rep["per_instance"] if r["strategy"] == "cocolex_plus"]
        assert all(r["index_build_seconds"] > 0 and "decode_seconds" in r for r in rows)


def test_c8_document_chunk_assignment():
    with criterion(8, "every token indexed once, from the chunk with the largest in-chunk offset", 60) as c:
        rng = np.random.default_rng(8)
        for doc in range(50):
            n = int(rng.integers(2, 513))
            width = int(rng.integers(1, 129))
            stride = int(rng.integers(1, width + 1))
            tokens = rng.integers(0, 256, n)
            chunks = []
            for ci, (start, end) in enumerate(chunk_spans(n, width, stride)):
                # tag each state with (chunk, offset) so the index reveals its origin
                states = np.array([[ci, off] for off in range(end - start)], dtype=float)
                chunks.append(Chunk(start, tokens[start:end].tolist(), states))
            index = build_from_document_chunks(chunks, width, stride)
            # the final token has no successor, so positions 0..n-2 carry entries
            assert sorted(index.positions.tolist()) == list(range(n - 1)), f"doc {doc}"
            for row in range(len(index)):
                p = int(index.positions[row])
                options = [(p - ch.start, ci) for ci, ch in enumerate(chunks)
                           if ch.start <= p < ch.start + len(ch.tokens)]
                best_off, best_chunk = max(options, key=lambda o: (o[0], -o[1]))
                assert tuple(index.keys[row]) == (best_chunk, best_off), f"doc {doc} position {p}"
                assert index.values[row] == tokens[p + 1]
        c.note("50/50 documents")


def _cli(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "cocolex", *args], capture_output=True, text=True, cwd=cwd)


def test_c9_ablation_runnable(tmp_path):
    with criterion(9, "one ablate command covers euclidean/cosine x passages {3, 6, 10}") as c:
        data = tmp_path / "corpus.jsonl"
        assert _cli("generate", "--seed", "9", "-n", "10", "--out", str(data)).returncode == 0
        out = tmp_path / "ablation.json"
        proc = _cli("ablate", str(data), "--metrics", "euclidean,cosine", "--passage-grid", "3,6,10",
                    "--max-new-tokens", "24", "--out", str(out))
        assert proc.returncode == 0, proc.stderr
        grid = json.loads(out.read_text())["ablation"]
        cells = {(g["metric"], g["passages"]) for g in grid}
        assert cells == {(m, k) for m in ("euclidean", "cosine") for k in (3, 6, 10)}
        shown = _cli("report", str(out))
        assert shown.returncode == 0 and "cosine" in shown.stdout
        c.note(f"{len(grid)} cells reported")


def test_c10_determinism(tmp_path):
    with criterion(10, "two run invocations give byte-identical reports modulo timing") as c:
        data = tmp_path / "corpus.jsonl"
        assert _cli("generate", "--seed", "10", "-n", "40", "--out", str(data)).returncode == 0
        texts = []
        for name in ("first.json", "second.json"):
            out = tmp_path / name
            proc = _cli("run", str(data), "--strategy", ",".join(STRATEGIES), "--seed", "10", "--out", str(out))
            assert proc.returncode == 0, proc.stderr
            texts.append(dump_report(strip_timing(json.loads(out.read_text()))))
        c.note(f"{len(texts[0])} bytes after removing timing fields")
        assert texts[0] == texts[1]
