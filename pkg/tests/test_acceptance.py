"""Acceptance criteria, one test each.

Each test prints a ``[PASS]``/``[FAIL]`` line (collected again in the pytest
terminal summary) and checks the criterion's runtime bound alongside its
numeric tolerance. The benchmark runs use the repository's fixed default
synthetic spec and the default feedback configuration unless stated.
"""

import time

import numpy as np
import pytest

from refeed.evaluation import evaluate_run, mrr_at_k, ndcg_at_k, recall_at_k
from refeed.feedback import (
    FeedbackConfig,
    batch_feedback,
    distill_to_target,
    format_run,
    format_timing_csv,
    positive_cosine,
    read_timing_csv,
    retriever_distribution,
    write_run,
)
from refeed.index import DenseIndex, from_bytes, to_bytes
from refeed.scorer import OracleScorer
from refeed.synth import SynthSpec, generate, write_benchmark
from refeed.vecmath import distillation_loss, kl_gradient

from tests import test_evaluation as metric_oracles
from tests.test_index import full_sort_oracle, random_index
from tests.test_vecmath import central_difference, random_instance

MARGIN = 10.0
DEPTH = 100


def recall(result, bench, kind):
    return evaluate_run(result.rankings(kind), bench.qrels, ("recall@100",)).aggregate["recall@100"]


@pytest.fixture(scope="module")
def oracle(default_bench):
    return OracleScorer(default_bench.qrels, MARGIN)


@pytest.fixture(scope="module")
def default_run(default_bench, oracle):
    """Default config (K=100, n=1000, alpha=0.001, T=2) on the default benchmark."""
    start = time.perf_counter()
    res = batch_feedback(default_bench.query_items(), default_bench.index(), oracle, FeedbackConfig())
    return res, time.perf_counter() - start


def test_c01_gradient_correctness(criterion):
    start = time.perf_counter()
    worst = 0.0
    for normalize, seed in ((True, 101), (False, 202)):
        rng = np.random.default_rng(seed)
        for _ in range(100):
            target, q, P = random_instance(rng, normalize)
            analytic = kl_gradient(target, q, P, 1.0, normalize)
            numeric = central_difference(
                lambda x: distillation_loss(target, x, P, 1.0, normalize), q, eps=1e-4)
            worst = max(worst, np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12))
    elapsed = time.perf_counter() - start
    criterion("C1 gradient vs central differences", worst <= 1e-4 and elapsed < 10,
              f"max relative error {worst:.2e} (tol 1e-4), {elapsed:.2f}s")


def test_c02_fixed_point(criterion, small_bench):
    start = time.perf_counter()
    idx = small_bench.index()
    cfg = FeedbackConfig()
    worst = 0.0
    for qid, q in small_bench.query_items()[:3]:
        P = idx.vectors[idx.search(q, cfg.k).rows]
        trace = distill_to_target(q, P, retriever_distribution(q, P, cfg), cfg)
        worst = max(worst, float(np.max(np.abs(trace.updated_query.astype(np.float64) - q))))
    elapsed = time.perf_counter() - start
    criterion("C2 fixed point of distillation", worst <= 1e-9 and elapsed < 1,
              f"max |dQ| = {worst:.1e} (tol 1e-9), {elapsed:.2f}s")


def test_c03_no_op_identity(criterion, small_bench, tmp_path):
    start = time.perf_counter()
    idx = small_bench.index()
    scorer = OracleScorer(small_bench.qrels, MARGIN)
    cfg = FeedbackConfig(k=20, n=0, rounds=1)
    res = batch_feedback(small_bench.query_items(), idx, scorer, cfg, threads=1)
    write_run(tmp_path / "baseline.run", res.runs("baseline"))
    write_run(tmp_path / "feedback.run", res.runs("feedback"))
    same_file = (tmp_path / "baseline.run").read_bytes() == (tmp_path / "feedback.run").read_bytes()
    merged_ok = True
    for qid, q in small_bench.query_items():
        first = idx.search(q, 20, qid)
        rr = scorer.score(qid, first.doc_ids, first.scores)
        plain = [first.doc_ids[i] for i in sorted(range(len(first)), key=lambda i: (-rr[i], first.doc_ids[i]))]
        merged_ok &= res.results[qid].merged_run.doc_ids == plain
    elapsed = time.perf_counter() - start
    criterion("C3 n=0 no-op identity", same_file and merged_ok and elapsed < 1,
              f"feedback==baseline bytes: {same_file}, merged==rerank: {merged_ok}, {elapsed:.2f}s")


def test_c04_loss_reduction(criterion, default_run):
    res, elapsed = default_run
    traces = [r.traces[0] for r in res.results.values()]
    frac = np.mean([t.final_loss <= t.initial_loss for t in traces])
    ok = not res.errors and len(traces) == 200 and frac >= 0.95 and elapsed < 120
    criterion("C4 loss reduction", ok, f"{frac:.1%} of {len(traces)} queries reduce KL (need >= 95%), {elapsed:.1f}s")


def test_c05_recall_gain(criterion, default_bench, default_run):
    res, elapsed = default_run
    base = recall(res, default_bench, "baseline")
    fb = recall(res, default_bench, "feedback")
    gain = 100 * (fb - base)
    criterion("C5 recall gain", gain >= 2.0 and elapsed < 180,
              f"Recall@100 {100 * base:.1f} -> {100 * fb:.1f} (+{gain:.1f} points, need >= 2), {elapsed:.1f}s")


def test_c06_query_movement(criterion, default_bench, default_run):
    res, _ = default_run
    idx = default_bench.index()
    before, after = [], []
    for qid, q in default_bench.query_items():
        r = res.results[qid]
        first = r.baseline_run.head(100)
        c0 = positive_cosine(q, idx, first, default_bench.qrels[qid])
        if c0 is None:
            continue
        before.append(c0)
        after.append(positive_cosine(r.updated_query, idx, first, default_bench.qrels[qid]))
    b, a = float(np.mean(before)), float(np.mean(after))
    criterion("C6 query moves toward retrieved positives", a > b,
              f"mean cosine {b:.4f} -> {a:.4f} ({100 * (a - b) / b:+.1f}%) over {len(before)} queries")


def test_c07_k_sweep(criterion, default_bench, oracle, default_run):
    start = time.perf_counter()
    idx = default_bench.index()
    recalls = {}
    for k in (10, 25, 50):
        res = batch_feedback(default_bench.query_items(), idx, oracle, FeedbackConfig(k=k, depth=DEPTH))
        recalls[k] = recall(res, default_bench, "feedback")
    recalls[100] = recall(default_run[0], default_bench, "feedback")
    elapsed = time.perf_counter() - start + default_run[1]
    ks = sorted(recalls)
    ok = all(100 * recalls[b] >= 100 * recalls[a] - 1.0 for a, b in zip(ks, ks[1:]))
    detail = ", ".join(f"K={k}: {100 * recalls[k]:.1f}" for k in ks)
    criterion("C7 K-sweep trend", ok and elapsed < 600, f"{detail} (1-point slack per step), {elapsed:.1f}s")


def test_c08_multi_round(criterion, default_bench, oracle, default_run):
    start = time.perf_counter()
    res2 = batch_feedback(default_bench.query_items(), default_bench.index(), oracle, FeedbackConfig(rounds=2))
    elapsed = time.perf_counter() - start + default_run[1]
    n0 = 100 * recall(default_run[0], default_bench, "baseline")
    n1 = 100 * recall(default_run[0], default_bench, "feedback")
    n2 = 100 * recall(res2, default_bench, "feedback")
    ok = n1 > n0 and n2 >= n1 - 0.5 and elapsed < 360
    criterion("C8 multi-round trend", ok, f"N=0 {n0:.1f}, N=1 {n1:.1f}, N=2 {n2:.1f}, {elapsed:.1f}s")


def test_c09_metric_oracles(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(909)
    mismatches = 0
    for _ in range(100):
        ranked, judged = metric_oracles.random_instance(rng)
        mismatches += recall_at_k(ranked, judged, 100) != metric_oracles.oracle_recall(ranked, judged, 100)
        mismatches += mrr_at_k(ranked, judged, 100) != metric_oracles.oracle_mrr(ranked, judged, 100)
        mismatches += abs(ndcg_at_k(ranked, judged, 10) - metric_oracles.oracle_ndcg(ranked, judged, 10)) > 1e-9
    elapsed = time.perf_counter() - start
    criterion("C9 metric oracle equivalence", mismatches == 0 and elapsed < 5,
              f"{mismatches} mismatches over 100 instances, {elapsed:.2f}s")


def test_c10_index_oracle_and_persistence(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(1010)
    bad = 0
    for trial in range(200):
        n = int(rng.integers(1, 150))
        dim = int(rng.integers(1, 16))
        V, ids = random_index(rng, n, dim, dup_fraction=0.3 if trial % 2 else 0.0)
        if trial % 4 == 0:
            V = np.round(V)
        idx = DenseIndex(V, ids)
        q = rng.standard_normal(dim).astype(np.float32)
        if trial % 4 == 0:
            q = np.round(q)
        k = int(rng.integers(1, n + 3))
        got = [(c.doc_id, c.score) for c in idx.search(q, k)]
        bad += got != full_sort_oracle(V, ids, q, k)
        back = from_bytes(to_bytes(idx))
        bad += back.vectors.tobytes() != idx.vectors.tobytes() or back.ids != idx.ids
    elapsed = time.perf_counter() - start
    criterion("C10 index search and persistence", bad == 0 and elapsed < 10,
              f"{bad} failures over 200 instances, {elapsed:.2f}s")


def test_c11_determinism(criterion, default_bench, oracle, default_run, monkeypatch, tmp_path):
    start = time.perf_counter()
    paths = [write_benchmark(generate(SynthSpec()), tmp_path / f"synth{i}") for i in range(2)]
    synth_same = all(
        open(paths[0][role], "rb").read() == open(paths[1][role], "rb").read() for role in paths[0]
    )
    texts = {}
    for threads in ("1", "3"):
        monkeypatch.setenv("REFEED_THREADS", threads)
        res = batch_feedback(default_bench.query_items(), default_bench.index(), oracle, FeedbackConfig())
        texts[threads] = [format_run(res.runs(kind)) for kind in ("baseline", "feedback", "merged")]
    texts["cached"] = [format_run(default_run[0].runs(kind)) for kind in ("baseline", "feedback", "merged")]
    runs_same = texts["1"] == texts["3"] == texts["cached"]
    elapsed = time.perf_counter() - start
    criterion("C11 determinism", synth_same and runs_same and elapsed < 300,
              f"synthetic files identical: {synth_same}, run files identical across executions "
              f"and REFEED_THREADS=1/3: {runs_same}, {elapsed:.1f}s")


def test_c12_latency_accounting(criterion, default_bench, oracle, tmp_path):
    start = time.perf_counter()
    items = default_bench.query_items()[:50]
    idx = default_bench.index()
    distill_ms = {}
    for n in (100, 1000):
        res = batch_feedback(items, idx, oracle, FeedbackConfig(n=n), threads=1)
        path = tmp_path / f"timings_n{n}.csv"
        path.write_text(format_timing_csv(res.timing_rows()))
        distill_ms[n] = read_timing_csv(path)["distill"]["mean_ms"]
    elapsed = time.perf_counter() - start
    ok = distill_ms[100] <= 0.5 * distill_ms[1000] and elapsed < 240
    criterion("C12 latency accounting", ok,
              f"distill_ms n=100: {distill_ms[100]:.2f}, n=1000: {distill_ms[1000]:.2f} "
              f"(ratio {distill_ms[100] / distill_ms[1000]:.2f}, need <= 0.5), {elapsed:.1f}s")
