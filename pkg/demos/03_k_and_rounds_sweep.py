"""How recall@100 moves with the number of re-ranked candidates and with rounds."""

from refeed import FeedbackConfig, batch_feedback
from refeed.evaluation import evaluate_run
from refeed.scorer import OracleScorer
from refeed.synth import SynthSpec, generate

bench = generate(SynthSpec())
index = bench.index()
scorer = OracleScorer(bench.qrels, margin=10.0)


def recall(cfg, kind="feedback"):
    res = batch_feedback(bench.query_items(), index, scorer, cfg)
    return evaluate_run(res.rankings(kind), bench.qrels, ("recall@100",)).aggregate["recall@100"]


# output depth stays at 100 so every setting is scored on the same cutoff
print("baseline", round(100 * recall(FeedbackConfig(rounds=0)), 1))
for k in (10, 25, 50, 100):
    print(f"K={k:3d}", round(100 * recall(FeedbackConfig(k=k, depth=100)), 1))

for rounds in (1, 2, 3):
    print(f"rounds={rounds}", round(100 * recall(FeedbackConfig(rounds=rounds)), 1))
