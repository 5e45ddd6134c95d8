"""Personalized ranking on cascading multi-behavior graphs."""

__version__ = "0.1.0"

from .baselines import BaselineConfig, BaselineRanker, baseline_rank, build_unified_graph
from .errors import CascRankError, ConfigError, DenseCapError, ParseError
from .evaluation import (
    CascadingRanker,
    MetricsReport,
    SplitResult,
    bench_scalability,
    evaluate,
    leave_one_out_split,
    permute_sequences,
    prefix_ablation,
    sweep,
)
from .graph import (
    BehaviorGraph,
    CascadingGraph,
    InteractionLog,
    NormalizedGraph,
    build_behavior_graph,
    build_cascading_graph,
    ingest,
    ingest_files,
    normalize,
)
from .ranker import (
    RankingResult,
    RankParams,
    build_query_vectors,
    cascading_expansion,
    convergence_diagnostics,
    objective_value,
    rank,
    rank_closed_form,
    rank_many,
)
