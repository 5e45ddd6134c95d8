"""
CascadingRank: personalized ranking along a cascading behavior graph.

Each behavior in the chain is ranked by smoothing scores over its normalized
bipartite graph, fitting the querying user's vectors for that behavior, and
aligning with the scores carried over from the previous behavior:

    r_U = gamma * A r_I + alpha * q_U + beta * r_U_prev
    r_I = gamma * A^T r_U + alpha * q_I + beta * r_I_prev

with ``gamma = 1 - alpha - beta``.  :func:`rank` solves this by power
iteration; :func:`rank_closed_form` and :func:`cascading_expansion` solve it
densely and exist to check the iterative path on small graphs.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DenseCapError
from .graph import CascadingGraph, NormalizedGraph, canonical_scheme

_log = logging.getLogger(__name__)

DEFAULT_MAX_ITERS = 200
DEFAULT_EPSILON = 1e-5
DEFAULT_DENSE_CAP = 2000


@dataclass(frozen=True)
class RankParams:
    """
    Strengths of query fitting (``alpha``) and cascading alignment (``beta``).

    ``alpha + beta`` must lie in (0, 1]; the smoothing strength ``gamma`` is
    what remains.
    """

    alpha: float
    beta: float
    max_iters: int = DEFAULT_MAX_ITERS
    epsilon: float = DEFAULT_EPSILON
    scheme: str = "symmetric"

    def __post_init__(self):
        a, b = float(self.alpha), float(self.beta)
        if not (0.0 <= a <= 1.0 and 0.0 <= b <= 1.0):
            raise ConfigError(f"alpha and beta must lie in [0, 1] (got {a}, {b})")
        if a + b <= 0.0:
            raise ConfigError("alpha + beta must be positive")
        if a + b > 1.0 + 1e-12:
            raise ConfigError(f"alpha + beta must not exceed 1 (got {a + b})")
        if int(self.max_iters) < 1:
            raise ConfigError("max_iters must be at least 1")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "max_iters", int(self.max_iters))
        object.__setattr__(self, "epsilon", float(self.epsilon))
        object.__setattr__(self, "scheme", canonical_scheme(self.scheme))

    @property
    def gamma(self) -> float:
        g = 1.0 - self.alpha - self.beta
        return 0.0 if g < 1e-15 else g

    @property
    def theta(self) -> float | None:
        """Query-fit weight of the equivalent objective (None when gamma is 0)."""
        return self.alpha / self.gamma if self.gamma > 0 else None

    @property
    def omega(self) -> float | None:
        """Cascade-fit weight of the equivalent objective (None when gamma is 0)."""
        return self.beta / self.gamma if self.gamma > 0 else None


@dataclass(frozen=True, eq=False)
class QueryVectors:
    behavior: str
    users: np.ndarray
    items: np.ndarray

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.users, self.items])


@dataclass(eq=False)
class BehaviorScores:
    behavior: str
    users: np.ndarray
    items: np.ndarray
    iterations: int
    residual: float

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.users, self.items])


@dataclass(eq=False)
class RankingResult:
    """Per-behavior scores in chain order; the last entry is the target."""

    query: int
    behaviors: list[BehaviorScores] = field(default_factory=list)

    def __getitem__(self, behavior: str) -> BehaviorScores:
        for s in self.behaviors:
            if s.behavior == behavior:
                return s
        raise KeyError(behavior)

    @property
    def target(self) -> BehaviorScores:
        return self.behaviors[-1]

    @property
    def target_scores(self) -> np.ndarray:
        return self.behaviors[-1].items


class IterationState(NamedTuple):
    """What a trace callback sees after each power-iteration sweep."""

    behavior: str
    iteration: int
    users: np.ndarray
    items: np.ndarray
    residual: float
    query: QueryVectors
    prev_users: np.ndarray
    prev_items: np.ndarray


def _user_query_matrix(n_users: int, users: np.ndarray) -> np.ndarray:
    q = np.zeros((n_users, len(users)))
    q[users, np.arange(len(users))] = 1.0
    return q


def _item_query_matrix(adjacency: sp.csr_matrix, users: np.ndarray) -> np.ndarray:
    rows = adjacency[users]
    deg = np.diff(rows.indptr).astype(np.float64)
    scale = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return (sp.diags(scale) @ rows).T.toarray()


def build_query_vectors(cg: CascadingGraph, behavior: str, q: int) -> QueryVectors:
    """Indicator of ``q`` over users; uniform mass over q's items under ``behavior``."""
    if not 0 <= q < cg.n_users:
        raise IndexError(f"user index {q} out of range [0, {cg.n_users})")
    users = np.array([q])
    qu = _user_query_matrix(cg.n_users, users)[:, 0]
    qi = _item_query_matrix(cg.graphs[behavior].adjacency, users)[:, 0]
    return QueryVectors(behavior, qu, qi)


def _jacobi(
    fwd: sp.csr_matrix,
    bwd: sp.csr_matrix,
    smooth_users: float,
    smooth_items: float,
    init_users: np.ndarray,
    init_items: np.ndarray,
    const_users: np.ndarray,
    const_items: np.ndarray,
    max_iters: int,
    epsilon: float,
    on_sweep: Callable | None = None,
):
    """
    Coupled sweep ``r_U <- s_U F r_I' + c_U``, ``r_I <- s_I B r_U' + c_I``.

    Both halves read the previous iterate pair.  Columns are independent
    queries; each stops on its own once its summed L1 change is within
    ``epsilon``, so a column's result does not depend on its batch mates.
    """
    n_cols = init_users.shape[1]
    r_users = init_users.copy()
    r_items = init_items.copy()
    iters = np.full(n_cols, max_iters, dtype=np.int64)
    resid = np.full(n_cols, np.inf)
    active = np.arange(n_cols)
    full = True

    for k in range(1, max_iters + 1):
        if full:
            ru_old, ri_old = r_users, r_items
            cu, ci = const_users, const_items
        else:
            ru_old, ri_old = r_users[:, active], r_items[:, active]
            cu, ci = const_users[:, active], const_items[:, active]
        ru = fwd @ ri_old
        ru *= smooth_users
        ru += cu
        ri = bwd @ ru_old
        ri *= smooth_items
        ri += ci
        res = np.abs(ru - ru_old).sum(axis=0) + np.abs(ri - ri_old).sum(axis=0)

        if full:
            r_users, r_items = ru, ri
        else:
            r_users[:, active] = ru
            r_items[:, active] = ri
        resid[active] = res
        if on_sweep is not None:
            on_sweep(k, ru, ri, res)

        done = res <= epsilon
        if done.any():
            iters[active[done]] = k
            active = active[~done]
            full = False
            if len(active) == 0:
                break

    return r_users, r_items, iters, resid


def _check_scheme(cg: CascadingGraph, p: RankParams):
    if cg.scheme != p.scheme:
        raise ConfigError(f"graph normalized with {cg.scheme!r} but parameters ask for {p.scheme!r}")


def _cascade(cg: CascadingGraph, users: np.ndarray, p: RankParams, trace: Callable | None = None):
    """Run the chain for a batch of query users; yields per-behavior arrays."""
    _check_scheme(cg, p)
    users = np.asarray(users, dtype=np.int64)
    if users.size and (users.min() < 0 or users.max() >= cg.n_users):
        raise IndexError("query user index out of range")
    gamma, alpha, beta = p.gamma, p.alpha, p.beta

    q_users = _user_query_matrix(cg.n_users, users)
    first = cg.graphs[cg.sequence[0]].adjacency
    prev_users = q_users
    prev_items = _item_query_matrix(first, users)

    out = []
    for b in cg.sequence:
        ng = cg.normalized[b]
        q_items = _item_query_matrix(cg.graphs[b].adjacency, users)
        cu = alpha * q_users + beta * prev_users
        ci = alpha * q_items + beta * prev_items

        hook = None
        if trace is not None:
            qv = QueryVectors(b, q_users[:, 0], q_items[:, 0])
            pu, pi = prev_users[:, 0], prev_items[:, 0]

            def hook(k, ru, ri, res, b=b, qv=qv, pu=pu, pi=pi):
                trace(IterationState(b, k, ru[:, 0], ri[:, 0], float(res[0]), qv, pu, pi))

        ru, ri, iters, resid = _jacobi(
            ng.forward, ng.backward, gamma, gamma, q_users, q_items, cu, ci,
            p.max_iters, p.epsilon, hook,
        )
        if (iters >= p.max_iters).any() and (resid > p.epsilon).any():
            _log.debug("behavior %s: %d queries hit the iteration cap", b, int((resid > p.epsilon).sum()))
        out.append((b, ru, ri, iters, resid))
        prev_users, prev_items = ru, ri
    return out


def rank(
    cg: CascadingGraph,
    q: int,
    p: RankParams,
    trace: Callable[[IterationState], None] | None = None,
) -> RankingResult:
    """
    Score every user and item for querying user ``q`` along the chain.

    ``trace``, when given, is called after every sweep with an
    :class:`IterationState`.
    """
    result = RankingResult(int(q))
    for b, ru, ri, iters, resid in _cascade(cg, np.array([q]), p, trace):
        result.behaviors.append(BehaviorScores(b, ru[:, 0].copy(), ri[:, 0].copy(), int(iters[0]), float(resid[0])))
    return result


def rank_many(cg: CascadingGraph, users: Sequence[int], p: RankParams) -> np.ndarray:
    """Target-behavior item scores for several users, one row per user."""
    users = np.asarray(users, dtype=np.int64)
    if users.size == 0:
        return np.zeros((0, cg.n_items))
    *_, (_, _, ri, _, _) = _cascade(cg, users, p)
    return np.ascontiguousarray(ri.T)


# ---------------------------------------------------------------------------
# dense verification paths


def _check_dense(cg: CascadingGraph, cap: int):
    if cg.n_nodes > cap:
        raise DenseCapError(
            f"dense solve refused: {cg.n_nodes} nodes exceeds the cap of {cap}; use rank() instead"
        )


def block_operator(ng: NormalizedGraph) -> np.ndarray:
    """Dense ``[[0, A], [A^T, 0]]`` over stacked users then items."""
    nu, ni = ng.forward.shape
    m = np.zeros((nu + ni, nu + ni))
    m[:nu, nu:] = ng.forward.toarray()
    m[nu:, :nu] = ng.backward.toarray()
    return m


def system_matrix(ng: NormalizedGraph, gamma: float) -> np.ndarray:
    m = block_operator(ng)
    return np.eye(m.shape[0]) - gamma * m


def rank_closed_form(
    cg: CascadingGraph, q: int, p: RankParams, dense_cap: int = DEFAULT_DENSE_CAP
) -> RankingResult:
    """Solve each behavior's linear system exactly, in chain order."""
    _check_dense(cg, dense_cap)
    _check_scheme(cg, p)
    nu = cg.n_users
    prev = build_query_vectors(cg, cg.sequence[0], q).stacked
    result = RankingResult(int(q))
    for b in cg.sequence:
        qb = build_query_vectors(cg, b, q).stacked
        r = np.linalg.solve(system_matrix(cg.normalized[b], p.gamma), p.alpha * qb + p.beta * prev)
        result.behaviors.append(BehaviorScores(b, r[:nu].copy(), r[nu:].copy(), 0, 0.0))
        prev = r
    return result


@dataclass(eq=False)
class Expansion:
    """
    Target scores split by the behavior each contribution originates from.

    ``terms[i]`` is the share propagated from ``sequence[-1 - i]`` and equals
    ``beta**i * base_terms[i]``; ``tail`` is the initial-vector share.
    """

    sequence: tuple[str, ...]
    n_users: int
    terms: list[np.ndarray]
    base_terms: list[np.ndarray]
    tail: np.ndarray
    base_tail: np.ndarray
    beta: float

    @property
    def total(self) -> np.ndarray:
        return sum(self.terms, np.zeros_like(self.tail)) + self.tail

    @property
    def target_scores(self) -> np.ndarray:
        return self.total[self.n_users:]

    def term_norms(self) -> list[float]:
        return [float(np.linalg.norm(t)) for t in self.terms]


def cascading_expansion(
    cg: CascadingGraph, q: int, p: RankParams, dense_cap: int = DEFAULT_DENSE_CAP
) -> Expansion:
    """
    Decompose the target scores into per-behavior contributions.

    Contribution ``i`` carries the query of the behavior ``i`` steps before
    the target through every later system solve, scaled by ``beta**i``.
    """
    _check_dense(cg, dense_cap)
    _check_scheme(cg, p)
    seq = cg.sequence
    t = len(seq)
    systems = [system_matrix(cg.normalized[b], p.gamma) for b in seq]

    def propagate(v, start):
        # apply the inverse systems of seq[start], ..., seq[-1] in order
        for j in range(start, t):
            v = np.linalg.solve(systems[j], v)
        return v

    base_terms = []
    for i in range(t):
        src = t - 1 - i
        qhat = p.alpha * build_query_vectors(cg, seq[src], q).stacked
        base_terms.append(propagate(qhat, src))
    r0 = build_query_vectors(cg, seq[0], q).stacked
    base_tail = propagate(r0, 0)

    terms = [p.beta ** i * v for i, v in enumerate(base_terms)]
    tail = p.beta ** t * base_tail
    return Expansion(seq, cg.n_users, terms, base_terms, tail, base_tail, p.beta)


# ---------------------------------------------------------------------------
# optimization view


class ObjectiveTerms(NamedTuple):
    smoothness: float
    query_fit: float | None
    cascade_fit: float | None
    total: float | None


def _as_stacked(v) -> np.ndarray:
    if isinstance(v, tuple):
        return np.concatenate([np.asarray(v[0], float), np.asarray(v[1], float)])
    if isinstance(v, (QueryVectors, BehaviorScores)):
        return v.stacked
    return np.asarray(v, dtype=float)


def smoothness(cg: CascadingGraph, behavior: str, r) -> float:
    """
    Laplacian smoothing penalty ``r^T (I - block(A)) r``.

    Under the symmetric scheme this is evaluated edge by edge as
    ``sum (r_u / sqrt(d_u) - r_i / sqrt(d_i))**2`` plus ``r**2`` of the
    isolated nodes, which keeps it visibly nonnegative.
    """
    r = _as_stacked(r)
    nu = cg.n_users
    ru, ri = r[:nu], r[nu:]
    ng = cg.normalized[behavior]
    if ng.scheme == "symmetric":
        g = cg.graphs[behavior]
        a = g.adjacency
        rows = np.repeat(np.arange(g.n_users), np.diff(a.indptr))
        cols = a.indices
        diff = ru[rows] / np.sqrt(g.user_degrees[rows]) - ri[cols] / np.sqrt(g.item_degrees[cols])
        iso = np.sum(ru[g.user_degrees == 0] ** 2) + np.sum(ri[g.item_degrees == 0] ** 2)
        return float(np.dot(diff, diff) + iso)
    return float(r @ r - ru @ (ng.forward @ ri) - ri @ (ng.backward @ ru))


def objective_value(cg: CascadingGraph, behavior: str, r, q, r_prev, p: RankParams) -> ObjectiveTerms:
    """
    Terms of the objective whose minimizer is the behavior's score vector.

    The fit weights are ``alpha / gamma`` and ``beta / gamma``; with
    ``gamma == 0`` they are undefined and reported as None.
    """
    r = _as_stacked(r)
    s = smoothness(cg, behavior, r)
    if p.gamma == 0:
        return ObjectiveTerms(s, None, None, None)
    dq = r - _as_stacked(q)
    dp = r - _as_stacked(r_prev)
    qf = p.theta * float(dq @ dq)
    cf = p.omega * float(dp @ dp)
    return ObjectiveTerms(s, qf, cf, s + qf + cf)


def objective_trajectory(cg: CascadingGraph, q: int, p: RankParams) -> list[dict]:
    """Per-sweep residual and objective terms for every behavior of one query."""
    rows: list[dict] = []

    def record(st: IterationState):
        terms = objective_value(cg, st.behavior, (st.users, st.items), st.query, (st.prev_users, st.prev_items), p)
        rows.append({
            "behavior": st.behavior,
            "iteration": st.iteration,
            "residual": st.residual,
            "smoothness": terms.smoothness,
            "query_fit": terms.query_fit,
            "cascade_fit": terms.cascade_fit,
            "objective": terms.total,
        })

    rank(cg, q, p, trace=record)
    return rows


# ---------------------------------------------------------------------------
# convergence


class SpectralDiagnostics(NamedTuple):
    behavior: str
    gamma: float
    bound: float
    measured: float
    power_iterations: int


def convergence_diagnostics(
    cg: CascadingGraph,
    behavior: str,
    p: RankParams,
    dense_cap: int = DEFAULT_DENSE_CAP,
    max_iters: int = 20000,
    tol: float = 1e-15,
) -> SpectralDiagnostics:
    """
    Compare the analytic bound ``gamma**2`` with the measured top eigenvalue
    of the item-to-item operator ``S = gamma**2 * B F`` (power method).
    """
    _check_dense(cg, dense_cap)
    ng = cg.normalized[behavior]
    g2 = p.gamma ** 2
    fwd, bwd = ng.forward, ng.backward
    symmetric = ng.scheme == "symmetric"

    x = np.ones(cg.n_items)
    lam = 0.0
    it = 0
    for it in range(1, max_iters + 1):
        y = g2 * (bwd @ (fwd @ x))
        if symmetric:
            # Rayleigh quotient; S is symmetric PSD so this never overshoots
            new = float(x @ y) / float(x @ x)
            norm = np.linalg.norm(y)
        else:
            # x stays nonnegative and S has column sums <= gamma^2
            new = float(y.sum()) / float(x.sum())
            norm = y.sum()
        if norm == 0:
            lam = 0.0
            break
        x = y / norm
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            lam = new
            break
        lam = new
    return SpectralDiagnostics(behavior, p.gamma, g2, lam, it)


@dataclass(eq=False)
class ContractionProfile:
    """
    Successive-difference norms of one behavior's power iteration.

    ``sweep_ratios`` compare consecutive sweeps of the stacked pair (bounded by
    gamma).  ``item_ratios`` compare item differences two sweeps apart, which
    is one application of ``S`` (bounded by gamma squared).  Differences at
    or below ``floor`` are skipped since cancellation noise dominates there.
    """

    behavior: str
    gamma: float
    residuals: list[float]
    pair_norms: list[float]
    item_norms: list[float]

    def sweep_ratios(self, burn_in: int = 3, floor: float = 1e-8) -> np.ndarray:
        n = np.asarray(self.pair_norms)
        keep = [k for k in range(burn_in, len(n) - 1) if n[k] > floor]
        return np.array([n[k + 1] / n[k] for k in keep])

    def item_ratios(self, burn_in: int = 3, floor: float = 1e-8) -> np.ndarray:
        n = np.asarray(self.item_norms)
        keep = [k for k in range(burn_in, len(n) - 2) if n[k] > floor]
        return np.array([n[k + 2] / n[k] for k in keep])


def contraction_profile(cg: CascadingGraph, q: int, p: RankParams, behavior: str | None = None) -> ContractionProfile:
    """Record the iterate differences of ``behavior`` (default: the target)."""
    behavior = behavior or cg.target
    prev_items: list[np.ndarray] = []
    prev_users: list[np.ndarray] = []
    residuals: list[float] = []

    def record(st: IterationState):
        if st.behavior != behavior:
            return
        if not prev_items:
            prev_users.append(st.query.users.copy())
            prev_items.append(st.query.items.copy())
        prev_users.append(st.users.copy())
        prev_items.append(st.items.copy())
        residuals.append(st.residual)

    rank(cg, q, p, trace=record)
    du = [prev_users[k + 1] - prev_users[k] for k in range(len(prev_users) - 1)]
    di = [prev_items[k + 1] - prev_items[k] for k in range(len(prev_items) - 1)]
    pair = [math.sqrt(float(a @ a + b @ b)) for a, b in zip(du, di)]
    item = [float(np.linalg.norm(b)) for b in di]
    return ContractionProfile(behavior, p.gamma, residuals, pair, item)
