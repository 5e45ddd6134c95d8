import numpy as np
import pytest
from pytest import approx, raises

from cascrank.baselines import BaselineConfig, baseline_rank, baseline_run, build_unified_graph
from cascrank.errors import ConfigError
from cascrank.graph import (
    build_behavior_graph,
    build_cascading_graph,
    cascading_graph_from_graphs,
    graph_from_edges,
    parse_tsv_text,
)
from cascrank.ranker import RankParams, build_query_vectors, rank

from .conftest import random_graph_chain


def test_union_of_behaviors():
    log = parse_tsv_text("u\ti1\tview\t1\nu\ti2\tbuy\t2\n")
    g = build_unified_graph(log)
    assert sorted(zip(*g.adjacency.nonzero())) == [(0, 0), (0, 1)]


def test_union_is_idempotent():
    log = parse_tsv_text("u\ti\tview\t1\nu\ti\tbuy\t2\n")
    g = build_unified_graph(log)
    assert g.n_edges == 1
    assert (g.adjacency.data == 1).all()


def test_union_upper_bound(rng):
    cg = random_graph_chain(rng, n_behaviors=3)
    users = np.concatenate([cg.graphs[b].adjacency.nonzero()[0] for b in cg.sequence])
    items = np.concatenate([cg.graphs[b].adjacency.nonzero()[1] for b in cg.sequence])
    g = graph_from_edges("u", users, items, cg.n_users, cg.n_items)
    assert g.n_edges <= cg.n_edges


@pytest.mark.parametrize("variant", ["birank", "cohits", "rwr"])
def test_full_query_weight_returns_query(small_log, variant):
    g = build_unified_graph(small_log)
    cfg = BaselineConfig(variant, 1.0, 1.0)
    ru, ri, _, _ = baseline_run(g, 0, cfg)
    assert ru.tolist() == [1.0, 0.0]
    expect = [0.0, 0.0] if variant == "rwr" else [0.5, 0.5]
    assert ri.tolist() == expect


@pytest.mark.parametrize("lam", [0.1, 0.5, 0.9])
def test_birank_single_edge_fixed_point(single_edge_log, lam):
    g = build_behavior_graph(single_edge_log, "buy")
    cfg = BaselineConfig("birank", lam, lam, max_iters=100_000, epsilon=1e-13)
    ru, ri, _, _ = baseline_run(g, 0, cfg)
    assert ru[0] == approx(1.0, abs=1e-11)
    assert ri[0] == approx(1.0, abs=1e-11)


def test_config_validation():
    with raises(ConfigError):
        BaselineConfig("pagerank")
    with raises(ConfigError):
        BaselineConfig("birank", 1.5, 0.2)
    assert BaselineConfig("cohits").scheme == "column"
    assert BaselineConfig("rwr").scheme == "column"
    assert BaselineConfig("birank").scheme == "symmetric"


def test_matches_cascading_rank_without_cascade(rng):
    for _ in range(20):
        g = random_graph_chain(rng, n_behaviors=1).graphs["buy"]
        cg = cascading_graph_from_graphs([g])
        alpha = float(rng.uniform(0.05, 0.95))
        q = int(rng.integers(g.n_users))
        p = RankParams(alpha, 0.0, max_iters=100_000, epsilon=1e-13)
        ours = rank(cg, q, p).target_scores
        theirs = baseline_rank(g, q, BaselineConfig("birank", alpha, alpha, 100_000, 1e-13))
        assert np.abs(ours - theirs).max() <= 1e-10


@pytest.mark.parametrize("variant", ["birank", "cohits", "rwr"])
def test_converges_within_epsilon(rng, variant):
    for _ in range(10):
        g = random_graph_chain(rng, n_behaviors=1).graphs["buy"]
        lu, li = rng.uniform(0.05, 0.95, size=2)
        cfg = BaselineConfig(variant, lu, li, max_iters=10_000, epsilon=1e-9)
        ru, ri, iters, resid = baseline_run(g, 0, cfg)
        assert iters < cfg.max_iters
        assert resid <= cfg.epsilon
        assert (ri >= 0).all() and np.isfinite(ri).all()


def test_rwr_restarts_only_at_user(small_log):
    g = build_unified_graph(small_log)
    ru, ri, _, _ = baseline_run(g, 1, BaselineConfig("rwr", 0.3, 0.3, 10_000, 1e-12))
    # u1 touched only i1, so the walk reaches i0 only through u0
    assert ri[1] > ri[0] > 0
