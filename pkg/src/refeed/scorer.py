"""Re-ranker scorers.

A scorer maps ``(query_id, doc_ids, retriever_scores)`` to one float per doc,
in the same order. Neural cross-encoders run elsewhere; their scores arrive
as a TSV table, or a relevance-aware oracle stands in for them.
"""

from __future__ import annotations

import math
from typing import Dict, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from .evaluation import QrelSet
from .index import DenseIndex
from .vecmath import min_max_normalize

ScoreTable = Dict[Tuple[str, str], float]

MISSING_POLICIES = ("error", "retriever_score")


class MissingScoreError(KeyError):
    def __init__(self, query_id: str, doc_id: str):
        super().__init__(f"no re-ranker score for (query_id={query_id!r}, doc_id={doc_id!r})")
        self.query_id = query_id
        self.doc_id = doc_id

    def __str__(self) -> str:
        return self.args[0]


class RerankerScorer(Protocol):
    def score(
        self, query_id: str, doc_ids: Sequence[str],
        retriever_scores: Optional[Sequence[float]] = None,
    ) -> np.ndarray: ...


def read_score_table(path) -> ScoreTable:
    """Load ``query_id<TAB>doc_id<TAB>score`` lines; duplicate pairs are errors."""
    table: ScoreTable = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}: line {lineno}: expected 3 tab-separated fields")
            qid, doc_id, raw = parts
            try:
                value = float(raw)
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: bad score {raw!r}") from None
            if not math.isfinite(value):
                raise ValueError(f"{path}: line {lineno}: non-finite score")
            key = (qid, doc_id)
            if key in table:
                raise ValueError(f"{path}: line {lineno}: duplicate pair ({qid}, {doc_id})")
            table[key] = value
    return table


class FileScorer:
    """Lookup scorer over precomputed re-ranker scores.

    ``missing_policy="retriever_score"`` falls back to the retriever score
    passed with the request when a pair is absent from the table.
    """

    def __init__(self, table: Mapping[Tuple[str, str], float], missing_policy: str = "error"):
        if missing_policy not in MISSING_POLICIES:
            raise ValueError(f"missing_policy must be one of {MISSING_POLICIES}")
        self._table = dict(table)
        self.missing_policy = missing_policy

    def score(self, query_id, doc_ids, retriever_scores=None) -> np.ndarray:
        out = np.empty(len(doc_ids), dtype=np.float64)
        for i, doc_id in enumerate(doc_ids):
            value = self._table.get((query_id, doc_id))
            if value is None:
                if self.missing_policy == "error" or retriever_scores is None:
                    raise MissingScoreError(query_id, doc_id)
                value = retriever_scores[i]
            out[i] = value
        return out


def file_scorer(table, missing_policy: str = "error") -> FileScorer:
    return FileScorer(table, missing_policy)


class OracleScorer:
    """Synthetic teacher: normalized retriever score plus ``margin * grade``.

    With a margin above 1 every judged-relevant candidate outranks every
    unjudged one, while the retriever order survives among the rest. When no
    retriever scores are supplied, they are recomputed from ``index`` and
    ``query_vectors``.
    """

    def __init__(
        self, qrels: QrelSet, margin: float = 10.0, index: Optional[DenseIndex] = None,
        query_vectors: Optional[Mapping[str, np.ndarray]] = None,
    ):
        if margin < 0:
            raise ValueError(f"margin must be non-negative, got {margin}")
        self.qrels = qrels
        self.margin = float(margin)
        self.index = index
        self.query_vectors = query_vectors

    def score(self, query_id, doc_ids, retriever_scores=None) -> np.ndarray:
        if len(doc_ids) == 0:
            return np.zeros(0, dtype=np.float64)
        if retriever_scores is None:
            if self.index is None or self.query_vectors is None:
                raise ValueError("oracle scorer needs retriever scores or an index and query vectors")
            q = self.query_vectors[query_id]
            retriever_scores = self.index.scores(q)[[self.index.row_of(d) for d in doc_ids]]
        base = min_max_normalize(retriever_scores)
        judged = self.qrels.get(query_id, {})
        grades = np.array([judged.get(d, 0) for d in doc_ids], dtype=np.float64)
        return base + self.margin * grades


def oracle_scorer(qrels: QrelSet, margin: float = 10.0, index: Optional[DenseIndex] = None) -> OracleScorer:
    return OracleScorer(qrels, margin, index)
