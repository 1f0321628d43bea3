"""Seeded synthetic retrieval benchmark.

Passages are unit vectors scattered around cluster centers. Each query owns
a few positives placed around an anchor displaced from its cluster center,
and the query itself sits between the center and that anchor. Under
dot-product retrieval the crowd of ordinary cluster members pushes part of
the positives below the top 100, which is the gap relevance feedback can
close.

Randomness: every entity draws from its own PCG64 stream seeded with
``SeedSequence([seed, kind, index])`` (kinds: 0 centers, 1 queries,
2 background passages, 3 row permutation), so any entity can be generated
independently and the output is identical however the work is split.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .evaluation import QrelSet, evaluate_run, write_qrels
from .index import DenseIndex, atomic_write_bytes, format_float32

_CENTERS, _QUERIES, _PASSAGES, _PERMUTATION = 0, 1, 2, 3

EMBEDDINGS_FILE = "embeddings.jsonl"
QUERIES_FILE = "queries.jsonl"
QRELS_FILE = "qrels.txt"
MANIFEST_FILE = "spec.json"


class InfeasibleSpecError(ValueError):
    def __init__(self, message: str, baseline_recall: float):
        super().__init__(message)
        self.baseline_recall = baseline_recall


@dataclass(frozen=True)
class SynthSpec:
    """Generator parameters.

    ``query_mix`` places the query on the segment from cluster center (0) to
    positive anchor (1). ``recall_band`` bounds the measured baseline
    Recall@``band_depth``; ``None`` disables the check.
    """

    seed: int = 20240611
    dim: int = 64
    n_passages: int = 10000
    n_queries: int = 200
    positives_per_query: int = 5
    clusters: int = 50
    cluster_spread: float = 0.06
    query_offset: float = 1.0
    positive_spread: float = 0.25
    query_mix: float = 0.3
    recall_band: Optional[Tuple[float, float]] = (0.4, 0.8)
    band_depth: int = 100

    def __post_init__(self):
        for name in ("dim", "n_passages", "n_queries", "positives_per_query", "clusters", "band_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("cluster_spread", "query_offset", "positive_spread"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_queries * self.positives_per_query > self.n_passages:
            raise ValueError(
                f"{self.n_queries} queries x {self.positives_per_query} positives "
                f"exceed {self.n_passages} passages"
            )
        if self.recall_band is not None:
            lo, hi = self.recall_band
            if not 0 <= lo <= hi <= 1:
                raise ValueError(f"recall_band must satisfy 0 <= lo <= hi <= 1, got {self.recall_band}")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["recall_band"] is not None:
            d["recall_band"] = list(d["recall_band"])
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
        data = dict(data)
        if data.get("recall_band") is not None:
            data["recall_band"] = tuple(data["recall_band"])
        return cls(**data)


def _stream(seed: int, kind: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, kind, index])))


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


@dataclass
class SynthBenchmark:
    spec: SynthSpec
    passage_ids: List[str]
    passages: np.ndarray  # float32, (n_passages, dim)
    query_ids: List[str]
    queries: np.ndarray  # float32, (n_queries, dim)
    qrels: QrelSet
    baseline_recall: float = float("nan")

    def index(self) -> DenseIndex:
        return DenseIndex(self.passages, self.passage_ids)

    def query_items(self) -> List[Tuple[str, np.ndarray]]:
        return list(zip(self.query_ids, self.queries))


def _query_entity(spec: SynthSpec, centers: np.ndarray, i: int):
    rng = _stream(spec.seed, _QUERIES, i)
    c = centers[rng.integers(spec.clusters)]
    direction = _unit(rng.standard_normal(spec.dim))
    anchor = c + spec.query_offset * direction
    positives = np.stack([
        _unit(anchor + spec.positive_spread * _unit(rng.standard_normal(spec.dim)))
        for _ in range(spec.positives_per_query)
    ])
    query = _unit(c + spec.query_mix * (anchor - c))
    return query, positives


def _background_passage(spec: SynthSpec, centers: np.ndarray, b: int) -> np.ndarray:
    rng = _stream(spec.seed, _PASSAGES, b)
    c = centers[rng.integers(spec.clusters)]
    return _unit(c + spec.cluster_spread * rng.standard_normal(spec.dim))


def generate(spec: SynthSpec = SynthSpec()) -> SynthBenchmark:
    """Generate a benchmark and check its baseline recall against the band.

    Raises:
        InfeasibleSpecError: measured baseline recall falls outside
            ``spec.recall_band``.
    """
    centers = np.stack([
        _unit(_stream(spec.seed, _CENTERS, j).standard_normal(spec.dim))
        for j in range(spec.clusters)
    ])
    query_vecs = []
    content = []  # passage vectors before row permutation
    owner = []  # query index of each positive, -1 for background
    for i in range(spec.n_queries):
        q, pos = _query_entity(spec, centers, i)
        query_vecs.append(q)
        content.extend(pos)
        owner.extend([i] * len(pos))
    n_background = spec.n_passages - len(content)
    for b in range(n_background):
        content.append(_background_passage(spec, centers, b))
        owner.append(-1)

    perm = _stream(spec.seed, _PERMUTATION, 0).permutation(spec.n_passages)
    passages = np.stack(content)[perm].astype(np.float32)
    owner_arr = np.asarray(owner)[perm]
    width = len(str(spec.n_passages - 1))
    passage_ids = [f"d{r:0{width}d}" for r in range(spec.n_passages)]
    qwidth = len(str(spec.n_queries - 1))
    query_ids = [f"q{i:0{qwidth}d}" for i in range(spec.n_queries)]
    qrels: QrelSet = {qid: {} for qid in query_ids}
    for row, i in enumerate(owner_arr):
        if i >= 0:
            qrels[query_ids[i]][passage_ids[row]] = 1

    bench = SynthBenchmark(
        spec, passage_ids, passages, query_ids, np.stack(query_vecs).astype(np.float32), qrels,
    )
    bench.baseline_recall = measure_baseline_recall(bench, spec.band_depth)
    if spec.recall_band is not None:
        lo, hi = spec.recall_band
        if not lo <= bench.baseline_recall <= hi:
            raise InfeasibleSpecError(
                f"baseline recall@{spec.band_depth} = {bench.baseline_recall:.4f} "
                f"outside band [{lo}, {hi}]",
                bench.baseline_recall,
            )
    return bench


def measure_baseline_recall(bench: SynthBenchmark, depth: int = 100) -> float:
    index = bench.index()
    runs = {qid: index.search(q, depth, qid).doc_ids for qid, q in bench.query_items()}
    metric = f"recall@{depth}"
    return evaluate_run(runs, bench.qrels, (metric,)).aggregate[metric]


def _jsonl_bytes(ids, vectors) -> bytes:
    lines = []
    for doc_id, vec in zip(ids, vectors):
        body = ", ".join(format_float32(x) for x in vec)
        lines.append(f'{{"id": {json.dumps(doc_id)}, "vector": [{body}]}}\n')
    return "".join(lines).encode("utf-8")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_benchmark(bench: SynthBenchmark, out_dir) -> Dict[str, str]:
    """Write embeddings, queries, qrels and a ``spec.json`` manifest.

    Returns the file paths keyed by role.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "embeddings": out / EMBEDDINGS_FILE,
        "queries": out / QUERIES_FILE,
        "qrels": out / QRELS_FILE,
    }
    atomic_write_bytes(paths["embeddings"], _jsonl_bytes(bench.passage_ids, bench.passages))
    atomic_write_bytes(paths["queries"], _jsonl_bytes(bench.query_ids, bench.queries))
    tmp = paths["qrels"].with_name(f".{QRELS_FILE}.tmp{os.getpid()}")
    write_qrels(tmp, bench.qrels)
    os.replace(tmp, paths["qrels"])
    manifest = {
        "spec": bench.spec.to_dict(),
        "baseline_recall": round(bench.baseline_recall, 12),
        "baseline_depth": bench.spec.band_depth,
        "digests": {role: sha256_file(p) for role, p in paths.items()},
    }
    paths["manifest"] = out / MANIFEST_FILE
    atomic_write_bytes(paths["manifest"], (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return {role: str(p) for role, p in paths.items()}
