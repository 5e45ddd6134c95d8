import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pytest import approx, raises

from cascrank.errors import ConfigError, ParseError
from cascrank.graph import (
    build_behavior_graph,
    build_cascading_graph,
    graph_from_edges,
    ingest,
    ingest_files,
    normalize,
    parse_tsv_text,
    read_index_map,
    write_index_map,
    write_log,
)


def test_dedup_keeps_earliest():
    log = parse_tsv_text("u1\ti1\tview\t5\nu1\ti1\tview\t3\n")
    assert len(log) == 1
    assert log.timestamps[0] == 3


def test_dedup_is_per_behavior():
    log = parse_tsv_text("u1\ti1\tview\t1\nu1\ti1\tbuy\t2\n")
    assert len(log) == 2
    assert log.counts() == {"view": 1, "buy": 1}


def test_dedup_tie_keeps_file_order():
    log = parse_tsv_text("a\tx\tview\t7\nb\tx\tview\t1\na\tx\tview\t7\n")
    assert len(log) == 2
    assert list(log.order) == [0, 1]


def test_survivors_stay_in_file_order():
    log = parse_tsv_text("a\tx\tview\t9\nb\ty\tview\t1\na\tx\tview\t2\n")
    # the surviving a-x record is the third row
    assert list(log.order) == [1, 2]
    assert [log.user_tokens[u] for u in log.users] == ["b", "a"]


def test_first_appearance_indices():
    log = parse_tsv_text("u9\ti5\tview\t1\nu2\ti5\tview\t1\nu9\ti1\tbuy\t2\n")
    assert log.user_tokens == ("u9", "u2")
    assert log.item_tokens == ("i5", "i1")
    assert log.behavior_labels == ("view", "buy")


def test_malformed_row_reports_line():
    with raises(ParseError, match="line 2"):
        parse_tsv_text("u\ti\tview\t1\nbroken\n")


def test_bad_timestamp_reports_line():
    with raises(ParseError, match="line 1"):
        parse_tsv_text("u\ti\tview\tyesterday\n")


def test_unknown_behavior_rejected():
    with raises(ParseError, match="'like'"):
        parse_tsv_text("u\ti\tlike\t1\n", behaviors=["view", "buy"])


def test_empty_input():
    with raises(ParseError):
        parse_tsv_text("")


def test_header_skipped():
    log = parse_tsv_text("user\titem\tbehavior\ttimestamp\nu\ti\tview\t1\n", header=True)
    assert len(log) == 1


def test_custom_column_roles():
    log = parse_tsv_text("view\t3\tu\ti\n", columns=("behavior", "timestamp", "user", "item"))
    assert list(log.records()) == [("u", "i", "view", 3)]


def test_per_behavior_files(tmp_path):
    (tmp_path / "v.tsv").write_text("u1\ti1\t1\nu2\ti2\t2\n")
    (tmp_path / "b.tsv").write_text("u2\ti1\t3\n")
    log = ingest_files({"view": tmp_path / "v.tsv", "buy": tmp_path / "b.tsv"})
    assert log.behavior_labels == ("view", "buy")
    assert log.counts() == {"view": 2, "buy": 1}
    assert log.n_users == 2 and log.n_items == 2


def test_tsv_round_trip(tmp_path, small_log):
    write_log(small_log, tmp_path / "log.tsv")
    again = ingest(tmp_path / "log.tsv")
    assert list(again.records()) == list(small_log.records())
    write_index_map(small_log.user_tokens, tmp_path / "users.tsv")
    assert read_index_map(tmp_path / "users.tsv") == list(small_log.user_tokens)


def test_single_record_graph(single_edge_log):
    g = build_behavior_graph(single_edge_log, "buy")
    assert g.n_edges == 1
    assert g.user_degrees.tolist() == [1]
    assert g.item_degrees.tolist() == [1]


def test_row_degree():
    log = parse_tsv_text("u0\ti0\tview\t1\nu0\ti1\tview\t1\nu1\ti2\tbuy\t1\n")
    g = build_behavior_graph(log, "view")
    assert len(g.user_neighbors(0)) == 2
    assert g.user_degrees.tolist() == [2, 0]
    # u1 and i2 are isolated under view but keep their index
    assert g.item_degrees.tolist() == [1, 1, 0]
    assert g.shape == (2, 3)


def test_symmetric_weight():
    # user 0 has 4 items, item 0 has only user 0
    g = graph_from_edges("b", [0, 0, 0, 0], [0, 1, 2, 3], 1, 4)
    ng = normalize(g, "symmetric")
    assert ng.forward[0, 0] == approx(0.5)


def test_unit_degree_weight():
    g = graph_from_edges("b", [0], [0], 1, 1)
    for scheme in ("symmetric", "column"):
        ng = normalize(g, scheme)
        assert ng.forward[0, 0] == 1.0
        assert ng.backward[0, 0] == 1.0


def test_column_weights():
    g = graph_from_edges("b", [0, 1], [0, 0], 2, 1)
    ng = normalize(g, "column")
    assert ng.forward.toarray()[:, 0].tolist() == [0.5, 0.5]
    assert ng.forward.toarray().sum(axis=0) == approx([1.0])


def test_scheme_aliases_and_errors():
    g = graph_from_edges("b", [0], [0], 1, 1)
    assert normalize(g, "sym").scheme == "symmetric"
    assert normalize(g, "col").scheme == "column"
    with raises(ConfigError):
        normalize(g, "stochastic")


def test_cascading_graph_chain(small_log):
    cg = build_cascading_graph(small_log, ["view", "buy"])
    assert cg.sequence == ("view", "buy")
    assert cg.target == "buy"
    assert all(g.shape == (2, 2) for g in cg.graphs.values())


def test_single_behavior_chain(small_log):
    cg = build_cascading_graph(small_log, ["buy"])
    assert cg.sequence == ("buy",)


def test_sequence_errors(small_log):
    with raises(ConfigError, match="repeats"):
        build_cascading_graph(small_log, ["view", "view", "buy"])
    with raises(ConfigError, match="absent"):
        build_cascading_graph(small_log, ["cart", "buy"])
    with raises(ConfigError, match="target"):
        build_cascading_graph(small_log, ["buy", "view"], target="buy")


# property checks on random graphs

edge_lists = st.integers(1, 12).flatmap(
    lambda nu: st.integers(1, 12).flatmap(
        lambda ni: st.tuples(
            st.just(nu), st.just(ni),
            st.lists(st.tuples(st.integers(0, nu - 1), st.integers(0, ni - 1)), max_size=60),
        )
    )
)


@settings(max_examples=80, deadline=None)
@given(edge_lists)
def test_degree_recount(data):
    nu, ni, edges = data
    u = [e[0] for e in edges]
    i = [e[1] for e in edges]
    g = graph_from_edges("b", u, i, nu, ni)
    distinct = set(edges)
    assert g.n_edges == len(distinct)
    assert (g.adjacency.data == 1).all()
    for x in range(nu):
        assert g.user_degrees[x] == sum(1 for e in distinct if e[0] == x)
    for y in range(ni):
        assert g.item_degrees[y] == sum(1 for e in distinct if e[1] == y)


@settings(max_examples=80, deadline=None)
@given(edge_lists)
def test_normalized_invariants(data):
    nu, ni, edges = data
    g = graph_from_edges("b", [e[0] for e in edges], [e[1] for e in edges], nu, ni)
    sym = normalize(g, "symmetric")
    f, b = sym.forward.toarray(), sym.backward.toarray()
    assert np.array_equal(f, b.T)
    for (x, y) in set(edges):
        assert f[x, y] == approx(1 / (np.sqrt(g.user_degrees[x]) * np.sqrt(g.item_degrees[y])), rel=1e-15)
    assert np.count_nonzero(f) == g.n_edges

    col = normalize(g, "column")
    fc, bc = col.forward.toarray(), col.backward.toarray()
    for mat in (fc, bc):
        sums = mat.sum(axis=0)
        nz = sums != 0
        assert np.allclose(sums[nz], 1.0, atol=1e-12)
    # backward-after-forward is column-stochastic on its support
    prod = bc @ fc
    s = prod.sum(axis=0)
    assert np.allclose(s[s != 0], 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(edge_lists, st.randoms(use_true_random=False))
def test_symmetric_weights_permutation_invariant(data, rnd):
    nu, ni, edges = data
    pu = list(range(nu))
    pi = list(range(ni))
    rnd.shuffle(pu)
    rnd.shuffle(pi)
    g = graph_from_edges("b", [e[0] for e in edges], [e[1] for e in edges], nu, ni)
    h = graph_from_edges("b", [pu[e[0]] for e in edges], [pi[e[1]] for e in edges], nu, ni)
    f = normalize(g).forward.toarray()
    fp = normalize(h).forward.toarray()
    expect = np.zeros_like(f)
    expect[np.ix_(pu, pi)] = f
    assert np.array_equal(fp, expect)
