"""
Single-graph bipartite ranking baselines: BiRank, CoHITS and RWR.

All three iterate

    r_U = (1 - lambda_U) * F r_I + lambda_U * q_U
    r_I = (1 - lambda_I) * B r_U + lambda_I * q_I

and differ in how F and B are normalized and in the item query:

=========  ====================  ===========================
variant    normalization          item query
=========  ====================  ===========================
birank     symmetric              user's history, uniform
cohits     column-stochastic      user's history, uniform
rwr        column-stochastic      none (restart at the user)
=========  ====================  ===========================
"""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .graph import BehaviorGraph, InteractionLog, graph_from_edges, normalize
from .ranker import DEFAULT_EPSILON, DEFAULT_MAX_ITERS, _item_query_matrix, _jacobi, _user_query_matrix

VARIANT_SCHEMES = {"birank": "symmetric", "cohits": "column", "rwr": "column"}


@dataclass(frozen=True)
class BaselineConfig:
    variant: str = "birank"
    lambda_users: float = 0.15
    lambda_items: float = 0.15
    max_iters: int = DEFAULT_MAX_ITERS
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.variant not in VARIANT_SCHEMES:
            raise ConfigError(f"unknown baseline variant {self.variant!r} (use {', '.join(VARIANT_SCHEMES)})")
        for name in ("lambda_users", "lambda_items"):
            v = float(getattr(self, name))
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1] (got {v})")
            object.__setattr__(self, name, v)
        if int(self.max_iters) < 1:
            raise ConfigError("max_iters must be at least 1")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")

    @property
    def scheme(self) -> str:
        return VARIANT_SCHEMES[self.variant]


def build_unified_graph(log: InteractionLog, label: str = "unified") -> BehaviorGraph:
    """Element-wise union of every behavior's adjacency."""
    return graph_from_edges(label, log.users, log.items, log.n_users, log.n_items)


class BaselineRanker:
    """A baseline bound to one graph; normalizes once, scores many queries."""

    def __init__(self, graph: BehaviorGraph, config: BaselineConfig):
        self.graph = graph
        self.config = config
        self.normalized = normalize(graph, config.scheme)

    @property
    def n_items(self) -> int:
        return self.graph.n_items

    def run(self, users: Sequence[int]):
        c = self.config
        users = np.asarray(users, dtype=np.int64)
        if users.size and (users.min() < 0 or users.max() >= self.graph.n_users):
            raise IndexError("query user index out of range")
        qu = _user_query_matrix(self.graph.n_users, users)
        if c.variant == "rwr":
            qi = np.zeros((self.graph.n_items, len(users)))
        else:
            qi = _item_query_matrix(self.graph.adjacency, users)
        ng = self.normalized
        return _jacobi(
            ng.forward, ng.backward, 1.0 - c.lambda_users, 1.0 - c.lambda_items,
            qu, qi, c.lambda_users * qu, c.lambda_items * qi, c.max_iters, c.epsilon,
        )

    def score_users(self, users: Sequence[int]) -> np.ndarray:
        if len(users) == 0:
            return np.zeros((0, self.n_items))
        _, ri, _, _ = self.run(users)
        return np.ascontiguousarray(ri.T)


def baseline_rank(g: BehaviorGraph, q: int, config: BaselineConfig) -> np.ndarray:
    """Item scores for query user ``q``."""
    return BaselineRanker(g, config).score_users([q])[0]


def baseline_run(g: BehaviorGraph, q: int, config: BaselineConfig):
    """User scores, item scores, iterations and final residual for one query."""
    ru, ri, iters, resid = BaselineRanker(g, config).run([q])
    return ru[:, 0], ri[:, 0], int(iters[0]), float(resid[0])
