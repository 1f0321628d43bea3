"""Dense retrieval with inference-time re-ranker relevance feedback."""

__version__ = "0.1.0"

from .evaluation import EvalReport, evaluate, evaluate_run, read_qrels, read_run
from .feedback import (
    DistillTimings,
    FeedbackConfig,
    FeedbackResult,
    FeedbackTrace,
    batch_feedback,
    distill,
    run_feedback,
)
from .index import CandidateSet, DenseIndex, build, load, save, search
from .scorer import FileScorer, OracleScorer, file_scorer, oracle_scorer
from .synth import SynthSpec, generate

__all__ = [
    "CandidateSet", "DenseIndex", "DistillTimings", "EvalReport", "FeedbackConfig",
    "FeedbackResult", "FeedbackTrace", "FileScorer", "OracleScorer", "SynthSpec",
    "batch_feedback", "build", "distill", "evaluate", "evaluate_run", "file_scorer",
    "generate", "load", "oracle_scorer", "read_qrels", "read_run", "run_feedback",
    "save", "search",
]
