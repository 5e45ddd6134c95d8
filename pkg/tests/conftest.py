import numpy as np
from pytest import fixture

from cascrank.graph import cascading_graph_from_graphs, graph_from_edges, parse_tsv_text

BEHAVIORS = ("view", "cart", "buy")


def random_graph_chain(rng, n_behaviors=None, max_nodes=50, scheme="symmetric"):
    """Random cascading graph with at most ``max_nodes`` users plus items."""
    nu = int(rng.integers(2, max_nodes // 2 + 1))
    ni = int(rng.integers(2, max_nodes - nu + 1))
    if n_behaviors is None:
        n_behaviors = int(rng.integers(1, 4))
    graphs = []
    for b in BEHAVIORS[3 - n_behaviors:]:
        density = rng.uniform(0.05, 0.6)
        mask = rng.random((nu, ni)) < density
        u, i = np.nonzero(mask)
        graphs.append(graph_from_edges(b, u, i, nu, ni))
    return cascading_graph_from_graphs(graphs, scheme)


def random_params(rng, min_gamma=0.0, max_gamma=0.95):
    """Uniform draw of (alpha, beta) with gamma in [min_gamma, max_gamma]."""
    while True:
        a, b = rng.uniform(0, 1, size=2)
        g = 1 - a - b
        if min_gamma <= g <= max_gamma:
            return float(a), float(b)


@fixture
def rng():
    return np.random.default_rng(20240917)


@fixture
def small_log():
    """Two users, two items; view (u0,i0),(u0,i1),(u1,i1) and buy (u0,i0)."""
    return parse_tsv_text(
        "u0\ti0\tview\t1\n"
        "u0\ti1\tview\t2\n"
        "u1\ti1\tview\t3\n"
        "u0\ti0\tbuy\t4\n"
    )


@fixture
def single_edge_log():
    return parse_tsv_text("u0\ti0\tbuy\t1\n")
