"""Feedback on the default synthetic benchmark with an oracle re-ranker."""

import numpy as np

from refeed import FeedbackConfig, batch_feedback
from refeed.evaluation import evaluate_run
from refeed.scorer import OracleScorer
from refeed.synth import SynthSpec, generate

bench = generate(SynthSpec())
index = bench.index()
print(f"{index.count} passages, dim {index.dim}, {len(bench.query_ids)} queries")
print(f"baseline recall@100 measured at generation: {bench.baseline_recall:.3f}")

# the oracle scores judged passages far above the rest
scorer = OracleScorer(bench.qrels, margin=10.0)
result = batch_feedback(bench.query_items(), index, scorer, FeedbackConfig())

for kind in ("baseline", "feedback", "merged"):
    report = evaluate_run(result.rankings(kind), bench.qrels, ("recall@100", "ndcg@10", "mrr@100"))
    row = "  ".join(f"{m} {100 * v:6.2f}" for m, v in report.aggregate.items())
    print(f"{kind:9s} {row}")

traces = [r.traces[0] for r in result.results.values()]
drop = np.array([t.initial_loss - t.final_loss for t in traces])
print(f"KL decreased on {np.mean(drop >= 0):.0%} of queries, median drop {np.median(drop):.4f}")

for stage, mean, p50, p95 in result.timing_rows():
    print(f"{stage:17s} mean {mean:8.3f} ms  p50 {p50:8.3f}  p95 {p95:8.3f}")
