"""Re-ranker relevance feedback.

The re-ranker's score distribution over the retrieved candidates is distilled
into the query vector by plain gradient descent on
``KL(teacher || softmax(retriever scores))``; the updated query is then used
for another retrieval.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .index import Candidate, CandidateSet, DenseIndex, atomic_write_bytes
from .scorer import RerankerScorer
from .vecmath import as_vector, loss_and_gradient, min_max_normalize, softmax

logger = logging.getLogger(__name__)

THREADS_ENV = "REFEED_THREADS"
STAGES = ("first_retrieval", "rerank", "distill", "second_retrieval")


class DistillationError(RuntimeError):
    pass


@dataclass(frozen=True)
class FeedbackConfig:
    """Hyperparameters of the feedback loop.

    ``depth`` is how many passages each output run holds (defaults to ``k``);
    only the top ``k`` of a retrieval are re-ranked and distilled.
    """

    k: int = 100
    n: int = 1000
    alpha: float = 0.001
    t_ce: float = 2.0
    t_ret: float = 1.0
    normalize: bool = True
    rounds: int = 1
    renormalize_each_step: bool = True
    depth: Optional[int] = None
    record_losses: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")
        if self.n < 0:
            raise ValueError(f"n must be non-negative, got {self.n}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not (self.t_ce > 0 and self.t_ret > 0):
            raise ValueError("temperatures must be positive")
        if self.rounds < 0:
            raise ValueError(f"rounds must be non-negative, got {self.rounds}")
        if self.depth is not None and self.depth < 1:
            raise ValueError(f"depth must be positive, got {self.depth}")

    @property
    def output_depth(self) -> int:
        return self.k if self.depth is None else self.depth

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "FeedbackConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class DistillTimings:
    first_retrieval_ms: float = 0.0
    rerank_ms: float = 0.0
    distill_ms: float = 0.0
    second_retrieval_ms: float = 0.0

    @property
    def total_ms(self) -> float:
        return self.first_retrieval_ms + self.rerank_ms + self.distill_ms + self.second_retrieval_ms

    def __add__(self, other: "DistillTimings") -> "DistillTimings":
        return DistillTimings(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))


@dataclass(frozen=True)
class FeedbackTrace:
    initial_loss: float
    final_loss: float
    updated_query: np.ndarray
    per_step_losses: Optional[Tuple[float, ...]] = None
    stage_timings: DistillTimings = field(default_factory=DistillTimings)


def _target_distribution(reranker_scores, cfg: FeedbackConfig) -> np.ndarray:
    s = np.asarray(reranker_scores, dtype=np.float64)
    if cfg.normalize:
        s = min_max_normalize(s)
    return softmax(s, cfg.t_ce)


def retriever_distribution(query, passages: np.ndarray, cfg: FeedbackConfig) -> np.ndarray:
    """Softmax over the retriever scores of ``passages``, as seen by the loss."""
    raw = np.asarray(passages, dtype=np.float64) @ np.asarray(query, dtype=np.float64)
    if cfg.normalize:
        raw = min_max_normalize(raw)
    return softmax(raw, cfg.t_ret)


def distill_to_target(
    query, passages: np.ndarray, target: np.ndarray, cfg: FeedbackConfig,
) -> FeedbackTrace:
    """Run ``cfg.n`` gradient steps moving ``query`` toward ``target``.

    ``passages`` is the (K, dim) candidate matrix. The query is carried in
    float64 and returned as float32.
    """
    q0 = as_vector(query, "query")
    P = np.asarray(passages, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ValueError("need at least one candidate passage")
    if P.shape[1] != q0.size:
        raise ValueError(f"dimension mismatch: query has {q0.size}, passages have {P.shape[1]}")
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (P.shape[0],):
        raise ValueError(f"target has {target.size} entries for {P.shape[0]} passages")

    start = time.perf_counter()
    q = q0.astype(np.float64)
    score_range = None
    if cfg.normalize and not cfg.renormalize_each_step:
        raw0 = P @ q
        score_range = (float(raw0.min()), float(raw0.max()))

    losses: List[float] = []
    loss = math.nan
    for step in range(cfg.n + 1):
        loss, grad = loss_and_gradient(target, q, P, cfg.t_ret, cfg.normalize, score_range)
        if not math.isfinite(loss):
            raise DistillationError(f"non-finite loss at step {step}")
        if cfg.record_losses or step == 0:
            losses.append(loss)
        if step == cfg.n:
            break
        if not np.all(np.isfinite(grad)):
            raise DistillationError(f"non-finite gradient at step {step}")
        with np.errstate(over="ignore", invalid="ignore"):
            q = q - cfg.alpha * grad
        if not np.all(np.isfinite(q)):
            raise DistillationError(f"non-finite query after step {step}")

    updated = q0 if cfg.n == 0 else q.astype(np.float32)
    elapsed = (time.perf_counter() - start) * 1000.0
    return FeedbackTrace(
        initial_loss=losses[0],
        final_loss=loss,
        updated_query=updated,
        per_step_losses=tuple(losses) if cfg.record_losses else None,
        stage_timings=DistillTimings(distill_ms=elapsed),
    )


def distill(
    query, candidates: CandidateSet, reranker_scores, cfg: FeedbackConfig, index: DenseIndex,
) -> FeedbackTrace:
    """Distill re-ranker scores over ``candidates`` into an updated query."""
    scores = np.asarray(reranker_scores, dtype=np.float64)
    if scores.shape != (len(candidates),):
        raise ValueError(f"{scores.size} re-ranker scores for {len(candidates)} candidates")
    if not np.all(np.isfinite(scores)):
        raise ValueError("re-ranker scores must be finite")
    q = np.asarray(query)
    if q.ndim != 1 or q.size != index.dim:
        raise ValueError(f"dimension mismatch: query has {q.size}, index has {index.dim}")
    passages = index.vectors[candidates.rows]
    return distill_to_target(query, passages, _target_distribution(scores, cfg), cfg)


@dataclass
class FeedbackResult:
    query_id: str
    baseline_run: CandidateSet
    feedback_run: CandidateSet
    merged_run: CandidateSet
    traces: List[FeedbackTrace]
    updated_query: np.ndarray

    @property
    def timings(self) -> DistillTimings:
        total = DistillTimings()
        for t in self.traces:
            total = total + t.stage_timings
        return total


def _ms_since(start: float) -> float:
    return (time.perf_counter() - start) * 1000.0


def merge_runs(
    query_id: str, scored: Mapping[str, Tuple[float, int]], feedback_run: CandidateSet, depth: int,
) -> CandidateSet:
    """Re-ranked candidates first, then unseen feedback-run entries.

    ``scored`` maps doc id to ``(re-ranker score, row)``. Entries the
    re-ranker never saw keep retriever order and get placeholder scores
    strictly below every re-ranker score, so the score column stays
    non-increasing with rank.
    """
    head = sorted(scored.items(), key=lambda item: (-item[1][0], item[0]))
    entries = [Candidate(doc_id, float(s), row) for doc_id, (s, row) in head[:depth]]
    if len(entries) < depth:
        floor = entries[-1].score if entries else 0.0
        rest = [c for c in feedback_run if c.doc_id not in scored]
        for i, c in enumerate(rest[: depth - len(entries)]):
            entries.append(Candidate(c.doc_id, floor - (i + 1), c.row))
    return CandidateSet(query_id, tuple(entries))


def run_feedback(
    query_id: str, query, index: DenseIndex, scorer: RerankerScorer, cfg: FeedbackConfig,
) -> FeedbackResult:
    """Retrieve, re-rank, distill and retrieve again, ``cfg.rounds`` times.

    Each later round re-ranks the previous round's second retrieval. Its
    first-retrieval time is reported as 0 because that list is reused.
    """
    q = as_vector(query, "query")
    if q.size != index.dim:
        raise ValueError(f"dimension mismatch: query has {q.size}, index has {index.dim}")
    depth = cfg.output_depth
    fetch = max(cfg.k, depth)

    start = time.perf_counter()
    current = index.search(q, fetch, query_id)
    first_ms = _ms_since(start)
    baseline = current.head(depth)

    traces: List[FeedbackTrace] = []
    scored: Dict[str, Tuple[float, int]] = {}
    for _ in range(cfg.rounds):
        candidates = current.head(cfg.k)
        start = time.perf_counter()
        rr = np.asarray(
            scorer.score(query_id, candidates.doc_ids, candidates.scores), dtype=np.float64
        )
        rerank_ms = _ms_since(start)
        if rr.shape != (len(candidates),):
            raise ValueError(f"scorer returned {rr.size} scores for {len(candidates)} candidates")
        for c, s in zip(candidates, rr):
            scored[c.doc_id] = (float(s), c.row)

        trace = distill(q, candidates, rr, cfg, index)
        q = trace.updated_query

        start = time.perf_counter()
        current = index.search(q, fetch, query_id)
        second_ms = _ms_since(start)
        timings = replace(
            trace.stage_timings,
            first_retrieval_ms=first_ms, rerank_ms=rerank_ms, second_retrieval_ms=second_ms,
        )
        traces.append(replace(trace, stage_timings=timings))
        first_ms = 0.0

    feedback_run = current.head(depth)
    if scored:
        merged = merge_runs(query_id, scored, feedback_run, depth)
    else:
        merged = feedback_run
    return FeedbackResult(query_id, baseline, feedback_run, merged, traces, q)


def resolve_threads(threads: Optional[int] = None) -> int:
    """Worker count: explicit value, else ``REFEED_THREADS``; 0 means auto."""
    if threads is None:
        raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
        try:
            threads = int(raw)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if threads < 0:
        raise ValueError(f"thread count must be non-negative, got {threads}")
    return threads or (os.cpu_count() or 1)


@dataclass
class BatchResult:
    results: Dict[str, FeedbackResult] = field(default_factory=dict)
    errors: Dict[str, str] = field(default_factory=dict)

    def runs(self, kind: str) -> List[CandidateSet]:
        """Runs of one kind (baseline, feedback, merged), sorted by query id."""
        attr = f"{kind}_run"
        return [getattr(self.results[q], attr) for q in sorted(self.results)]

    def rankings(self, kind: str) -> Dict[str, List[str]]:
        return {r.query_id: r.doc_ids for r in self.runs(kind)}

    def timing_rows(self) -> List[Tuple[str, float, float, float]]:
        per_query = [self.results[q].timings for q in sorted(self.results)]
        rows = []
        for stage in STAGES + ("total",):
            attr = "total_ms" if stage == "total" else f"{stage}_ms"
            vals = np.array([getattr(t, attr) for t in per_query], dtype=np.float64)
            if vals.size:
                rows.append((stage, float(vals.mean()), float(np.percentile(vals, 50)),
                             float(np.percentile(vals, 95))))
            else:
                rows.append((stage, 0.0, 0.0, 0.0))
        return rows


def batch_feedback(
    queries: Iterable[Tuple[str, Sequence[float]]],
    index: DenseIndex,
    scorer: RerankerScorer,
    cfg: FeedbackConfig,
    threads: Optional[int] = None,
    fail_fast: bool = False,
) -> BatchResult:
    """Apply :func:`run_feedback` to every query independently.

    Per-query failures are collected in ``errors`` unless ``fail_fast``.
    Results do not depend on the thread count.
    """
    queries = list(queries)
    seen = set()
    for qid, _ in queries:
        if qid in seen:
            raise ValueError(f"duplicate query id: {qid!r}")
        seen.add(qid)

    def work(item):
        qid, vec = item
        try:
            return qid, run_feedback(qid, vec, index, scorer, cfg), None
        except Exception as exc:  # noqa: BLE001 - reported per query
            if fail_fast:
                raise
            return qid, None, f"{type(exc).__name__}: {exc}"

    n_threads = resolve_threads(threads)
    out = BatchResult()
    if n_threads == 1 or len(queries) <= 1:
        collected = [work(item) for item in queries]
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            collected = list(pool.map(work, queries))
    for qid, result, err in sorted(collected, key=lambda x: x[0]):
        if err is not None:
            logger.warning("query %s failed: %s", qid, err)
            out.errors[qid] = err
        else:
            out.results[qid] = result
    return out


def format_run(runs: Iterable[CandidateSet], tag: str = "refeed") -> str:
    """TREC run lines ``qid Q0 doc rank score tag`` with 6-decimal scores."""
    if not tag or any(ch.isspace() for ch in tag):
        raise ValueError(f"run tag must be a non-empty token, got {tag!r}")
    buf = io.StringIO()
    for run in runs:
        for rank, c in enumerate(run, start=1):
            buf.write(f"{run.query_id} Q0 {c.doc_id} {rank} {c.score:.6f} {tag}\n")
    return buf.getvalue()


def write_run(path, runs: Iterable[CandidateSet], tag: str = "refeed") -> None:
    atomic_write_bytes(path, format_run(runs, tag).encode("utf-8"))


def format_timing_csv(rows: Sequence[Tuple[str, float, float, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["stage", "mean_ms", "p50_ms", "p95_ms"])
    for stage, mean, p50, p95 in rows:
        writer.writerow([stage, f"{mean:.6f}", f"{p50:.6f}", f"{p95:.6f}"])
    return buf.getvalue()


def read_timing_csv(path) -> Dict[str, Dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {
            row["stage"]: {k: float(v) for k, v in row.items() if k != "stage"}
            for row in csv.DictReader(fh)
        }


def positive_cosine(query, index: DenseIndex, candidates: CandidateSet, judged: Mapping[str, int]) -> Optional[float]:
    """Mean cosine between ``query`` and the judged-relevant candidates.

    Returns None when no candidate is relevant.
    """
    rows = [c.row for c in candidates if judged.get(c.doc_id, 0) >= 1]
    if not rows:
        return None
    P = index.vectors[rows].astype(np.float64)
    q = np.asarray(query, dtype=np.float64)
    qn = np.linalg.norm(q)
    pn = np.linalg.norm(P, axis=1)
    if qn == 0 or np.any(pn == 0):
        return None
    return float(np.mean((P @ q) / (pn * qn)))
