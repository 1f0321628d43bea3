"""Command-line entry point.

Subcommands: ``build-index``, ``feedback``, ``eval``, ``synth`` and
``export-vectors``. Exit status is 0 on success, 2 for malformed input or
usage errors, 1 for failures while running.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .evaluation import DEFAULT_METRICS, FormatError, evaluate, parse_metric, read_qrels
from .feedback import (
    FeedbackConfig,
    batch_feedback,
    format_run,
    format_timing_csv,
    resolve_threads,
)
from .index import IndexFormatError, atomic_write_bytes, iter_jsonl_vectors, load_any, to_bytes
from .scorer import MISSING_POLICIES, FileScorer, OracleScorer, read_score_table
from .synth import InfeasibleSpecError, SynthSpec, generate, sha256_file, write_benchmark

logger = logging.getLogger("refeed")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2

RUN_FILES = {"baseline": "baseline.run", "feedback": "feedback.run", "merged": "merged.run"}
TIMING_FILE = "timings.csv"
UPDATED_QUERIES_FILE = "updated_queries.jsonl"
MANIFEST_FILE = "manifest.json"


class InputError(Exception):
    """Malformed user input; maps to exit status 2."""


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _read_queries(path) -> List[tuple]:
    try:
        items = list(iter_jsonl_vectors(path))
    except IndexFormatError as exc:
        raise InputError(f"{path}: {exc}") from None
    seen = set()
    for qid, _ in items:
        if qid in seen:
            raise InputError(f"{path}: duplicate query id {qid!r}")
        seen.add(qid)
    return items


def _load_index(path):
    try:
        return load_any(path)
    except (IndexFormatError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------- build-index

def cmd_build_index(args) -> int:
    index = _load_index(args.embeddings)
    atomic_write_bytes(Path(args.out), to_bytes(index))
    print(f"wrote {args.out}: {index.count} vectors, dim {index.dim}")
    return EXIT_OK


# ---------------------------------------------------------------- feedback

_FEEDBACK_KEYS = ("k", "n", "alpha", "t_ce", "t_ret", "rounds", "normalize",
                  "renormalize_each_step", "depth")
_FEEDBACK_OTHER = ("index", "queries", "scorer", "missing_policy", "out_dir", "tag", "fail_fast")


def _resolve_config(args) -> Dict:
    """Merge defaults, an optional JSON config file, and explicit flags."""
    merged: Dict = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                merged.update(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"{args.config}: {exc}") from None
        unknown = set(merged) - set(_FEEDBACK_KEYS) - set(_FEEDBACK_OTHER)
        if unknown:
            raise InputError(f"{args.config}: unknown keys {sorted(unknown)}")
    for key in _FEEDBACK_KEYS + _FEEDBACK_OTHER:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _make_scorer(spec: str, missing_policy: str, index):
    kind, _, rest = spec.partition(":")
    if kind == "file" and rest:
        try:
            return FileScorer(read_score_table(rest), missing_policy)
        except (OSError, ValueError) as exc:
            raise InputError(str(exc)) from None
    if kind == "oracle" and rest:
        qrels_path, _, margin = rest.rpartition(",")
        if not qrels_path:
            qrels_path, margin = rest, "10"
        try:
            return OracleScorer(read_qrels(qrels_path), float(margin), index)
        except (OSError, ValueError) as exc:
            raise InputError(str(exc)) from None
    raise InputError(f"--scorer must be file:PATH or oracle:QRELS,MARGIN, got {spec!r}")


def cmd_feedback(args) -> int:
    settings = _resolve_config(args)
    for required in ("index", "queries", "scorer", "out_dir"):
        if not settings.get(required):
            raise InputError(f"--{required.replace('_', '-')} is required")
    try:
        cfg = FeedbackConfig(**{k: settings[k] for k in _FEEDBACK_KEYS if k in settings})
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from None
    tag = settings.get("tag", "refeed")
    index = _load_index(settings["index"])
    queries = _read_queries(settings["queries"])
    for qid, vec in queries:
        if vec.size != index.dim:
            raise InputError(f"query {qid!r} has dim {vec.size}, index has {index.dim}")
    scorer = _make_scorer(settings["scorer"], settings.get("missing_policy", "error"), index)
    threads = resolve_threads()

    result = batch_feedback(queries, index, scorer, cfg, threads=threads,
                            fail_fast=bool(settings.get("fail_fast", False)))

    out = Path(settings["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    for kind, name in RUN_FILES.items():
        _write_text(out / name, format_run(result.runs(kind), tag))
        written[kind] = out / name
    rows = result.timing_rows()
    _write_text(out / TIMING_FILE, format_timing_csv(rows))
    written["timings"] = out / TIMING_FILE
    lines = []
    for qid in sorted(result.results):
        vec = result.results[qid].updated_query
        body = ", ".join(str(np.float32(x)) for x in vec)
        lines.append(f'{{"id": {json.dumps(qid)}, "vector": [{body}]}}\n')
    _write_text(out / UPDATED_QUERIES_FILE, "".join(lines))
    written["updated_queries"] = out / UPDATED_QUERIES_FILE

    manifest = {
        "tool_version": __version__,
        "config": cfg.to_dict(),
        "paths": {
            "index": str(settings["index"]), "queries": str(settings["queries"]),
            "scorer": settings["scorer"], "out_dir": str(out),
        },
        "missing_policy": settings.get("missing_policy", "error"),
        "tag": tag,
        "threads": threads,
        "n_queries": len(result.results),
        "errors": dict(result.errors),
        "timings_mean_ms": {stage: mean for stage, mean, _, _ in rows},
        "digests": {kind: sha256_file(p) for kind, p in written.items()},
    }
    _write_text(out / MANIFEST_FILE, json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    print(f"{len(result.results)} queries processed, {len(result.errors)} failed; outputs in {out}")
    for qid, err in sorted(result.errors.items()):
        print(f"  {qid}: {err}", file=sys.stderr)
    return EXIT_FAIL if result.errors else EXIT_OK


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    try:
        for m in metrics:
            parse_metric(m)
        report = evaluate(args.run, args.qrels, metrics, args.compare)
    except (FormatError, ValueError) as exc:
        raise InputError(str(exc)) from None
    if args.json:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        print(report.format_table())
    if args.csv:
        if args.csv == "-":
            sys.stdout.write(report.to_csv())
        else:
            _write_text(Path(args.csv), report.to_csv())
    return EXIT_OK


# ---------------------------------------------------------------- synth

_SYNTH_FLAGS = ("seed", "dim", "n_passages", "n_queries", "positives_per_query", "clusters",
                "cluster_spread", "query_offset", "positive_spread", "query_mix", "band_depth")


def cmd_synth(args) -> int:
    data: Dict = {}
    if args.spec:
        try:
            with open(args.spec, encoding="utf-8") as fh:
                data.update(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"{args.spec}: {exc}") from None
        data = data.get("spec", data)
    for key in _SYNTH_FLAGS:
        value = getattr(args, key)
        if value is not None:
            data[key] = value
    if args.recall_band is not None:
        lo, _, hi = args.recall_band.partition(",")
        try:
            data["recall_band"] = (float(lo), float(hi))
        except ValueError:
            raise InputError(f"--recall-band must be LO,HI, got {args.recall_band!r}") from None
    if args.no_band_check:
        data["recall_band"] = None
    try:
        spec = SynthSpec.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from None
    try:
        bench = generate(spec)
    except InfeasibleSpecError as exc:
        print(f"error: {exc} (measured baseline recall {exc.baseline_recall:.4f})", file=sys.stderr)
        return EXIT_FAIL
    paths = write_benchmark(bench, args.out_dir)
    print(f"baseline recall@{spec.band_depth}: {bench.baseline_recall:.4f}")
    for role, p in paths.items():
        print(f"  {role}: {p}")
    return EXIT_OK


# ---------------------------------------------------------------- export-vectors

def export_vectors_csv(index, initial: Sequence[tuple], updated: Dict[str, np.ndarray], k: int) -> str:
    """CSV rows for every query and its top-``k`` passages before and after feedback.

    Columns: ``role, query_id, id, x0 .. x{dim-1}`` with 9 significant digits.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["role", "query_id", "id"] + [f"x{i}" for i in range(index.dim)])

    def fmt(vec):
        return [f"{float(x):.9g}" for x in np.asarray(vec, dtype=np.float32)]

    for qid, q0 in initial:
        q1 = updated.get(qid)
        rows = index.search(q0, k, qid).rows.tolist()
        if q1 is not None:
            rows += [r for r in index.search(q1, k, qid).rows.tolist() if r not in set(rows)]
        for r in rows:
            writer.writerow(["passage", qid, index.ids[r]] + fmt(index.vectors[r]))
        writer.writerow(["query_initial", qid, qid] + fmt(q0))
        if q1 is not None:
            writer.writerow(["query_updated", qid, qid] + fmt(q1))
    return buf.getvalue()


def cmd_export_vectors(args) -> int:
    index = _load_index(args.index)
    initial = _read_queries(args.queries)
    updated = dict(_read_queries(args.updated_queries)) if args.updated_queries else {}
    for qid, vec in list(initial) + list(updated.items()):
        if vec.size != index.dim:
            raise InputError(f"query {qid!r} has dim {vec.size}, index has {index.dim}")
    _write_text(Path(args.out), export_vectors_csv(index, initial, updated, args.k))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refeed",
        description="Dense retrieval with re-ranker relevance feedback.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-index", help="build a binary index from JSONL embeddings")
    p.add_argument("--embeddings", required=True, help="JSONL ({id, vector} per line) or binary index")
    p.add_argument("--out", required=True, help="output index file")
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("feedback", help="retrieve, re-rank, distill and retrieve again")
    p.add_argument("--config", help="JSON file with the same key names as the flags (flags win)")
    p.add_argument("--index", help="binary index or JSONL embeddings")
    p.add_argument("--queries", help="JSONL query vectors")
    p.add_argument("--scorer", help="file:SCORES.tsv or oracle:QRELS,MARGIN")
    p.add_argument("--missing-policy", choices=MISSING_POLICIES,
                   help="file scorer behaviour on a missing pair (default: error)")
    p.add_argument("--k", type=int, help="candidates re-ranked and distilled (default 100)")
    p.add_argument("--n", type=int, help="gradient steps per round (default 1000)")
    p.add_argument("--alpha", type=float, help="learning rate (default 0.001)")
    p.add_argument("--t-ce", dest="t_ce", type=float, help="re-ranker softmax temperature (default 2)")
    p.add_argument("--t-ret", dest="t_ret", type=float, help="retriever softmax temperature (default 1)")
    p.add_argument("--rounds", type=int, help="feedback rounds (default 1)")
    p.add_argument("--normalize", type=_bool, help="min-max normalize both score sets (default true)")
    p.add_argument("--renormalize-each-step", dest="renormalize_each_step", type=_bool,
                   help="recompute retriever min-max every step (default true)")
    p.add_argument("--depth", type=int, help="entries per output run (default: k)")
    p.add_argument("--tag", help="run tag column (default refeed)")
    p.add_argument("--fail-fast", dest="fail_fast", action="store_true", default=None,
                   help="stop at the first per-query error")
    p.add_argument("--out-dir", dest="out_dir", help="output directory")
    p.set_defaults(func=cmd_feedback)

    p = sub.add_parser("eval", help="evaluate a TREC run file against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metrics", default=",".join(DEFAULT_METRICS))
    p.add_argument("--compare", help="second run for a paired t-test on the first metric")
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    p.add_argument("--csv", help="write per-query values as CSV ('-' for stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a seeded synthetic benchmark")
    p.add_argument("--spec", help="JSON spec (or a previous spec.json manifest)")
    for key in _SYNTH_FLAGS:
        kind = float if key in ("cluster_spread", "query_offset", "positive_spread", "query_mix") else int
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind)
    p.add_argument("--recall-band", help="accepted baseline recall band LO,HI (default 0.4,0.8)")
    p.add_argument("--no-band-check", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export-vectors", help="dump query and passage vectors as CSV")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True, help="initial query vectors (JSONL)")
    p.add_argument("--updated-queries", help="updated query vectors (JSONL)")
    p.add_argument("--k", type=int, default=10, help="passages exported per query and vector (default 10)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_vectors)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
