"""Ranking metrics over TREC qrels and run files."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

QrelSet = Dict[str, Dict[str, int]]
# query_id -> doc ids ordered by rank
Ranking = Dict[str, List[str]]

DEFAULT_METRICS = ("recall@100", "ndcg@10", "mrr@100", "recall@20")


class FormatError(ValueError):
    pass


def read_qrels(path) -> QrelSet:
    """Parse ``query_id iteration doc_id grade`` lines."""
    qrels: QrelSet = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise FormatError(f"{path}: line {lineno}: expected 4 fields, got {len(parts)}")
            qid, _, doc_id, grade = parts
            try:
                g = int(grade)
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: grade {grade!r} is not an integer") from None
            if g < 0:
                raise FormatError(f"{path}: line {lineno}: negative grade {g}")
            qrels.setdefault(qid, {})[doc_id] = g
    return qrels


def write_qrels(path, qrels: Mapping[str, Mapping[str, int]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in sorted(qrels):
            for doc_id in sorted(qrels[qid]):
                fh.write(f"{qid} 0 {doc_id} {qrels[qid][doc_id]}\n")


def read_run(path) -> Ranking:
    """Parse a TREC run file into rank-ordered doc lists.

    The rank column is authoritative. Duplicate ranks or doc ids within a
    query, or a score that rises as rank increases, are errors.
    """
    rows: Dict[str, List[Tuple[int, float, str, int]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise FormatError(f"{path}: line {lineno}: expected 6 fields, got {len(parts)}")
            qid, _, doc_id, rank, score, _tag = parts
            try:
                r = int(rank)
                s = float(score)
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: malformed rank or score") from None
            if r < 1:
                raise FormatError(f"{path}: line {lineno}: rank must be >= 1, got {r}")
            rows.setdefault(qid, []).append((r, s, doc_id, lineno))

    run: Ranking = {}
    for qid, entries in rows.items():
        entries.sort()
        docs = []
        seen = set()
        prev_rank, prev_score = 0, math.inf
        for r, s, doc_id, lineno in entries:
            if r == prev_rank:
                raise FormatError(f"{path}: line {lineno}: duplicate rank {r} for query {qid}")
            if s > prev_score:
                raise FormatError(
                    f"{path}: line {lineno}: score {s} at rank {r} exceeds score at a better rank"
                )
            if doc_id in seen:
                raise FormatError(f"{path}: line {lineno}: duplicate doc {doc_id} for query {qid}")
            seen.add(doc_id)
            docs.append(doc_id)
            prev_rank, prev_score = r, s
        run[qid] = docs
    return run


def _relevant(judged: Mapping[str, int]) -> set:
    return {d for d, g in judged.items() if g >= 1}


def recall_at_k(ranked: Sequence[str], judged: Mapping[str, int], k: int) -> float:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rel = _relevant(judged)
    if not rel:
        raise ValueError("query has no relevant documents")
    hits = sum(1 for d in ranked[:k] if d in rel)
    return hits / len(rel)


def ndcg_at_k(ranked: Sequence[str], judged: Mapping[str, int], k: int = 10) -> float:
    """nDCG with gain ``2**grade - 1`` and discount ``1 / log2(rank + 1)``."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not _relevant(judged):
        raise ValueError("query has no relevant documents")
    dcg = 0.0
    for i, d in enumerate(ranked[:k]):
        g = judged.get(d, 0)
        if g > 0:
            dcg += (2.0 ** g - 1.0) / math.log2(i + 2)
    ideal = sorted((g for g in judged.values() if g > 0), reverse=True)[:k]
    idcg = sum((2.0 ** g - 1.0) / math.log2(i + 2) for i, g in enumerate(ideal))
    return dcg / idcg


def mrr_at_k(ranked: Sequence[str], judged: Mapping[str, int], k: int = 100) -> float:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rel = _relevant(judged)
    if not rel:
        raise ValueError("query has no relevant documents")
    for i, d in enumerate(ranked[:k]):
        if d in rel:
            return 1.0 / (i + 1)
    return 0.0


_METRIC_FUNCS = {"recall": recall_at_k, "ndcg": ndcg_at_k, "mrr": mrr_at_k}


def parse_metric(name: str) -> Tuple[str, int]:
    try:
        base, k = name.lower().split("@")
        k_int = int(k)
    except ValueError:
        raise ValueError(f"metric must look like 'recall@100', got {name!r}") from None
    if base not in _METRIC_FUNCS:
        raise ValueError(f"unknown metric {base!r}; choose from {sorted(_METRIC_FUNCS)}")
    if k_int < 1:
        raise ValueError(f"metric cutoff must be >= 1 in {name!r}")
    return base, k_int


def compute_metric(name: str, ranked: Sequence[str], judged: Mapping[str, int]) -> float:
    base, k = parse_metric(name)
    return _METRIC_FUNCS[base](ranked, judged, k)


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """Two-sided paired t-test on ``a - b``.

    All-zero differences give ``(0.0, 1.0)``; a nonzero constant difference
    gives an infinite statistic and ``p = 0.0``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must have equal length, got {a.size} and {b.size}")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return float(t), float(p)


@dataclass
class Significance:
    metric: str
    compare_run: str
    t: float
    p: float

    @property
    def p_below_1e12(self) -> bool:
        return self.p < 1e-12


@dataclass
class EvalReport:
    metrics: Tuple[str, ...]
    per_query: Dict[str, Dict[str, float]] = field(default_factory=dict)
    aggregate: Dict[str, float] = field(default_factory=dict)
    # queries in the run that were skipped, with the reason
    excluded: Dict[str, str] = field(default_factory=dict)
    significance: Optional[Significance] = None

    @property
    def n_queries(self) -> int:
        return len(self.per_query)

    def to_dict(self) -> dict:
        out = {
            "metrics": list(self.metrics),
            "n_queries": self.n_queries,
            "aggregate": dict(self.aggregate),
            "per_query": {q: dict(v) for q, v in sorted(self.per_query.items())},
            "excluded": dict(sorted(self.excluded.items())),
        }
        if self.significance is not None:
            s = self.significance
            out["significance"] = {
                "metric": s.metric, "compare_run": s.compare_run,
                "t": s.t, "p": s.p, "p_below_1e-12": s.p_below_1e12,
            }
        return out

    def format_table(self) -> str:
        """Human-readable aggregate table; values shown in percent."""
        width = max([len(m) for m in self.metrics] + [6])
        lines = [f"{'metric':<{width}}  value", f"{'-' * width}  ------"]
        for m in self.metrics:
            lines.append(f"{m:<{width}}  {100.0 * self.aggregate.get(m, 0.0):6.2f}")
        lines.append(f"{'queries':<{width}}  {self.n_queries}")
        if self.excluded:
            lines.append(f"{'skipped':<{width}}  {len(self.excluded)}")
        if self.significance is not None:
            s = self.significance
            lines.append(f"paired t-test on {s.metric} vs {s.compare_run}: t={s.t:.4f} p={s.p:.4g}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        header = "query_id," + ",".join(self.metrics)
        rows = [header]
        for qid in sorted(self.per_query):
            vals = ",".join(f"{self.per_query[qid][m]:.6f}" for m in self.metrics)
            rows.append(f"{qid},{vals}")
        return "\n".join(rows) + "\n"


def evaluate_run(
    run: Mapping[str, Sequence[str]],
    qrels: Mapping[str, Mapping[str, int]],
    metrics: Iterable[str] = DEFAULT_METRICS,
    compare: Optional[Mapping[str, Sequence[str]]] = None,
    compare_name: str = "compare",
) -> EvalReport:
    """Score every run query that has at least one relevant judgment.

    Aggregates are means over included queries in sorted query-id order.
    With ``compare``, a paired t-test runs on the first metric; queries the
    comparison run lacks count as 0 for it.
    """
    metrics = tuple(metrics)
    if not metrics:
        raise ValueError("at least one metric is required")
    for m in metrics:
        parse_metric(m)
    report = EvalReport(metrics=metrics)
    for qid in sorted(run):
        judged = qrels.get(qid)
        if judged is None:
            report.excluded[qid] = "not in qrels"
            continue
        if not _relevant(judged):
            report.excluded[qid] = "no relevant documents"
            continue
        report.per_query[qid] = {m: compute_metric(m, run[qid], judged) for m in metrics}
    if report.excluded:
        logger.warning("%d run queries excluded from evaluation", len(report.excluded))
    qids = sorted(report.per_query)
    for m in metrics:
        vals = [report.per_query[q][m] for q in qids]
        report.aggregate[m] = float(math.fsum(vals) / len(vals)) if vals else 0.0

    if compare is not None and len(qids) >= 2:
        first = metrics[0]
        a = [report.per_query[q][first] for q in qids]
        b = [compute_metric(first, compare.get(q, []), qrels[q]) for q in qids]
        t, p = paired_t_test(a, b)
        report.significance = Significance(first, compare_name, t, p)
    return report


def evaluate(
    run_file, qrels_file, metrics: Iterable[str] = DEFAULT_METRICS,
    compare_run_file=None,
) -> EvalReport:
    qrels = read_qrels(qrels_file)
    run = read_run(run_file)
    compare = read_run(compare_run_file) if compare_run_file is not None else None
    return evaluate_run(
        run, qrels, metrics, compare,
        compare_name=str(compare_run_file) if compare_run_file is not None else "compare",
    )


def mean_metric(runs: Mapping[str, Sequence[str]], qrels, metric: str) -> float:
    """Aggregate a single metric; shorthand for experiments."""
    return evaluate_run(runs, qrels, (metric,)).aggregate[metric]
