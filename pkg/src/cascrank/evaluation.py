"""
Leave-one-out evaluation: splitting, HR/NDCG, sweeps, sequence studies, scaling.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
import time
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import stats

from .errors import CascRankError, ConfigError
from .graph import (
    CascadingGraph,
    InteractionLog,
    cascading_graph_from_graphs,
    graph_from_edges,
)
from .ranker import RankParams, rank_many

_log = logging.getLogger(__name__)

DEFAULT_K = (10, 30, 50, 100, 200)


@dataclass(eq=False)
class SplitResult:
    """
    Per-user holdouts of the target behavior.

    ``test`` holds each user's latest target interaction, ``validation`` the
    second latest (only for users with at least two).  Neither is present in
    ``train_log``; all other records are.
    """

    train_log: InteractionLog
    target: str
    test: dict[int, int]
    validation: dict[int, int]

    @property
    def eligible_users(self) -> list[int]:
        """Users with both a validation and a test item."""
        return sorted(self.validation)

    def holdout(self, which: str) -> dict[int, int]:
        if which == "test":
            return self.test
        if which == "validation":
            return self.validation
        raise ConfigError(f"unknown holdout {which!r} (use test or validation)")


def leave_one_out_split(log: InteractionLog, target: str) -> SplitResult:
    code = log.behavior_code(target)
    idx = np.flatnonzero(log.behaviors == code)
    users = log.users[idx]
    # later file position counts as later when timestamps tie
    srt = idx[np.lexsort((log.order[idx], log.timestamps[idx], users))]
    su = log.users[srt]
    last = np.ones(len(srt), dtype=bool)
    last[:-1] = su[:-1] != su[1:]
    second = np.zeros(len(srt), dtype=bool)
    second[:-1] = last[1:] & (su[:-1] == su[1:])

    test = {int(log.users[r]): int(log.items[r]) for r in srt[last]}
    validation = {int(log.users[r]): int(log.items[r]) for r in srt[second]}
    removed = np.zeros(len(log), dtype=bool)
    removed[srt[last | second]] = True
    _log.info("split on %s: %d test users, %d with validation", target, len(test), len(validation))
    return SplitResult(log.select(~removed), target, test, validation)


@dataclass(eq=False)
class MetricsReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    evaluated_user_count: int
    wall_clock: float = 0.0
    users: np.ndarray | None = field(default=None, repr=False)
    ranks: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self, per_user: bool = False, timing: bool = False) -> dict:
        d = {
            "evaluated_user_count": self.evaluated_user_count,
            "hr": {str(k): v for k, v in self.hr.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
        }
        if timing:
            d["wall_clock"] = self.wall_clock
        if per_user and self.ranks is not None:
            d["per_user"] = [{"user": int(u), "rank": int(r)} for u, r in zip(self.users, self.ranks)]
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(**kw), indent=2)

    def tsv_rows(self) -> list[str]:
        rows = ["k\thr\tndcg"]
        rows += [f"{k}\t{self.hr[k]:.6f}\t{self.ndcg[k]:.6f}" for k in self.hr]
        return rows


def check_k_list(k_list: Iterable[int]) -> list[int]:
    ks = [int(k) for k in k_list]
    if not ks:
        raise ConfigError("k list is empty")
    if any(k <= 0 for k in ks):
        raise ConfigError(f"every k must be positive (got {ks})")
    return ks


def metrics_from_ranks(ranks: np.ndarray, k_list: Iterable[int]) -> tuple[dict[int, float], dict[int, float]]:
    """HR@k and NDCG@k for one relevant item per user, given its 1-based rank."""
    ranks = np.asarray(ranks, dtype=np.float64)
    hr, ndcg = {}, {}
    for k in check_k_list(k_list):
        hit = ranks <= k
        hr[k] = float(hit.mean())
        ndcg[k] = float(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0).mean())
    return hr, ndcg


def holdout_ranks(scores: np.ndarray, held: np.ndarray, exclude: sp.csr_matrix | None = None) -> np.ndarray:
    """
    1-based rank of ``held[j]`` within row ``j`` of ``scores``.

    Items stored in row ``j`` of ``exclude`` are removed from the candidates.
    Ties go to the lower item index.
    """
    s = np.array(scores, dtype=np.float64, copy=True)
    if exclude is not None:
        rows = np.repeat(np.arange(exclude.shape[0]), np.diff(exclude.indptr))
        s[rows, exclude.indices] = -np.inf
    n = len(held)
    ref = s[np.arange(n), held][:, None]
    above = (s > ref).sum(axis=1)
    tied = ((s == ref) & (np.arange(s.shape[1])[None, :] < held[:, None])).sum(axis=1)
    return 1 + above + tied


class CascadingRanker:
    """Scores users with CascadingRank on a fixed graph and parameter set."""

    def __init__(self, cg: CascadingGraph, params: RankParams):
        self.cg = cg
        self.params = params

    @property
    def n_items(self) -> int:
        return self.cg.n_items

    def score_users(self, users: Sequence[int]) -> np.ndarray:
        return rank_many(self.cg, users, self.params)


def _batches(seq: np.ndarray, size: int) -> list[np.ndarray]:
    return [seq[i:i + size] for i in range(0, len(seq), size)]


def evaluate(
    scorer,
    split: SplitResult,
    k_list: Iterable[int] = DEFAULT_K,
    *,
    holdout: str = "test",
    jobs: int = 1,
    batch_size: int = 256,
    users: Sequence[int] | None = None,
) -> MetricsReport:
    """
    Rank every candidate item for each held-out user and score the holdout.

    ``scorer`` needs ``score_users(users) -> (len(users), n_items)`` and must
    have been built from ``split.train_log``.  Candidates are all items the
    user has not interacted with under the target behavior in training.
    """
    ks = check_k_list(k_list)
    held_map = split.holdout(holdout)
    if users is None:
        users = np.array(sorted(held_map), dtype=np.int64)
    else:
        users = np.array([u for u in users if u in held_map], dtype=np.int64)
    if len(users) == 0:
        raise CascRankError(f"no users to evaluate in the {holdout} set")
    held = np.array([held_map[int(u)] for u in users], dtype=np.int64)

    tlog = split.train_log
    tu, ti = tlog.edges(split.target)
    seen = graph_from_edges(split.target, tu, ti, tlog.n_users, tlog.n_items).adjacency

    t0 = time.perf_counter()
    parts = list(zip(_batches(users, batch_size), _batches(held, batch_size)))

    def work(part):
        bu, bh = part
        return holdout_ranks(scorer.score_users(bu), bh, seen[bu])

    if jobs > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            ranks = list(pool.map(work, parts))
    else:
        ranks = [work(p) for p in parts]
    ranks = np.concatenate(ranks)
    elapsed = time.perf_counter() - t0

    hr, ndcg = metrics_from_ranks(ranks, ks)
    _log.info("evaluated %d users in %.2fs: %s", len(users), elapsed,
              ", ".join(f"HR@{k}={hr[k]:.4f}" for k in ks))
    return MetricsReport(hr, ndcg, len(users), elapsed, users, ranks)


# ---------------------------------------------------------------------------
# hyperparameter sweep


def valid_grid(step: float = 0.1) -> list[tuple[float, float]]:
    """(alpha, beta) pairs on a regular grid with 0 < alpha + beta <= 1."""
    n = round(1.0 / step)
    if n < 1 or not math.isclose(n * step, 1.0, rel_tol=1e-9):
        raise ConfigError(f"grid step must divide 1 evenly (got {step})")
    return [(i / n, j / n) for i in range(n + 1) for j in range(n + 1 - i) if i + j > 0]


@dataclass(eq=False)
class SweepTable:
    rows: list[tuple[float, float, MetricsReport]]
    k_list: list[int]

    def value(self, report: MetricsReport, metric: str, k: int) -> float:
        return getattr(report, metric)[k]

    def best(self, metric: str = "hr", k: int = 10) -> tuple[float, float, MetricsReport]:
        # first cell wins ties, in grid order
        return max(self.rows, key=lambda r: self.value(r[2], metric, k))

    def maxima(self, by: str, metric: str = "hr", k: int = 10) -> dict[float, float]:
        """Best metric per value of ``by`` ('alpha' or 'beta'), maximized over the other."""
        pos = {"alpha": 0, "beta": 1}[by]
        out: dict[float, float] = {}
        for row in self.rows:
            v = self.value(row[2], metric, k)
            key = row[pos]
            out[key] = max(out.get(key, -math.inf), v)
        return dict(sorted(out.items()))

    def tsv_rows(self) -> list[str]:
        head = ["alpha", "beta", "gamma"] + [f"hr@{k}" for k in self.k_list] + [f"ndcg@{k}" for k in self.k_list]
        lines = ["\t".join(head)]
        for a, b, rep in self.rows:
            g = max(0.0, 1.0 - a - b)
            vals = [f"{a:.2f}", f"{b:.2f}", f"{g:.2f}"]
            vals += [f"{rep.hr[k]:.6f}" for k in self.k_list] + [f"{rep.ndcg[k]:.6f}" for k in self.k_list]
            lines.append("\t".join(vals))
        return lines


def sweep(
    cg: CascadingGraph,
    split: SplitResult,
    k_list: Iterable[int] = DEFAULT_K,
    *,
    step: float = 0.1,
    grid: Sequence[tuple[float, float]] | None = None,
    holdout: str = "validation",
    max_iters: int = 200,
    epsilon: float = 1e-5,
    jobs: int = 1,
    users: Sequence[int] | None = None,
) -> SweepTable:
    """Evaluate every (alpha, beta) cell; tuning runs against the validation holdout."""
    ks = check_k_list(k_list)
    cells = list(grid) if grid is not None else valid_grid(step)
    rows = []
    for a, b in cells:
        p = RankParams(a, b, max_iters=max_iters, epsilon=epsilon, scheme=cg.scheme)
        rep = evaluate(CascadingRanker(cg, p), split, ks, holdout=holdout, jobs=jobs, users=users)
        rows.append((a, b, rep))
    return SweepTable(rows, ks)


# ---------------------------------------------------------------------------
# cascading-sequence studies


def sequence_permutations(sequence: Sequence[str]) -> list[tuple[str, ...]]:
    """All orders of the auxiliary behaviors, target kept last."""
    *aux, target = sequence
    return [tuple(p) + (target,) for p in itertools.permutations(aux)]


def sequence_prefixes(sequence: Sequence[str]) -> list[tuple[str, ...]]:
    """The full chain, then the chain with its earliest behaviors dropped one at a time."""
    return [tuple(sequence[i:]) for i in range(len(sequence))]


def _by_sequence(cg, sequences, split, params, k_list, jobs, holdout):
    out = {}
    for seq in sequences:
        sub = cg.reordered(seq)
        out[seq] = evaluate(CascadingRanker(sub, params), split, k_list, holdout=holdout, jobs=jobs)
    return out


def permute_sequences(
    cg: CascadingGraph, split: SplitResult, params: RankParams, k_list: Iterable[int] = DEFAULT_K,
    *, jobs: int = 1, holdout: str = "test",
) -> dict[tuple[str, ...], MetricsReport]:
    return _by_sequence(cg, sequence_permutations(cg.sequence), split, params, check_k_list(k_list), jobs, holdout)


def prefix_ablation(
    cg: CascadingGraph, split: SplitResult, params: RankParams, k_list: Iterable[int] = DEFAULT_K,
    *, jobs: int = 1, holdout: str = "test",
) -> dict[tuple[str, ...], MetricsReport]:
    return _by_sequence(cg, sequence_prefixes(cg.sequence), split, params, check_k_list(k_list), jobs, holdout)


def sequence_table_rows(results: dict[tuple[str, ...], MetricsReport], k_list: Sequence[int]) -> list[str]:
    head = ["sequence"] + [f"hr@{k}" for k in k_list] + [f"ndcg@{k}" for k in k_list]
    lines = ["\t".join(head)]
    for seq, rep in results.items():
        vals = [f"{rep.hr[k]:.6f}" for k in k_list] + [f"{rep.ndcg[k]:.6f}" for k in k_list]
        lines.append("\t".join(["->".join(seq)] + vals))
    return lines


# ---------------------------------------------------------------------------
# scalability


@dataclass(eq=False)
class BenchTable:
    rows: list[dict]

    @property
    def edges(self) -> np.ndarray:
        return np.array([r["edges"] for r in self.rows], dtype=float)

    @property
    def seconds(self) -> np.ndarray:
        return np.array([r["seconds"] for r in self.rows], dtype=float)

    def fit(self):
        """Least-squares line of seconds against edge count."""
        res = stats.linregress(self.edges, self.seconds)
        return {"slope": float(res.slope), "intercept": float(res.intercept), "r2": float(res.rvalue ** 2)}

    def tsv_rows(self) -> list[str]:
        lines = ["fraction\tusers\titems\tedges\tseconds"]
        for r in self.rows:
            lines.append(f"{r['fraction']:.6f}\t{r['users']}\t{r['items']}\t{r['edges']}\t{r['seconds']:.6f}")
        return lines


def slice_graph(log: InteractionLog, sequence: Sequence[str], fraction: float, user_pos: np.ndarray,
                item_pos: np.ndarray, scheme: str = "symmetric") -> CascadingGraph:
    """
    Upper-left principal block of every behavior after relabeling.

    ``user_pos[u]`` / ``item_pos[i]`` give the relabeled index; the same
    relabeling is applied to every behavior.
    """
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must lie in (0, 1] (got {fraction})")
    nu = max(1, math.ceil(fraction * log.n_users))
    ni = max(1, math.ceil(fraction * log.n_items))
    graphs = []
    for b in sequence:
        u, i = log.edges(b)
        u, i = user_pos[u], item_pos[i]
        keep = (u < nu) & (i < ni)
        graphs.append(graph_from_edges(b, u[keep], i[keep], nu, ni))
    return cascading_graph_from_graphs(graphs, scheme)


def bench_scalability(
    log: InteractionLog,
    params: RankParams,
    fractions: Sequence[float],
    *,
    sequence: Sequence[str] | None = None,
    seed: int = 0,
    n_queries: int = 32,
    repeats: int = 3,
) -> BenchTable:
    """Time a fixed batch of queries on growing principal slices of the data."""
    sequence = tuple(sequence or log.behavior_labels)
    rng = np.random.default_rng(seed)
    user_pos = rng.permutation(log.n_users)
    item_pos = rng.permutation(log.n_items)
    rows = []
    for f in fractions:
        cg = slice_graph(log, sequence, f, user_pos, item_pos, params.scheme)
        queries = np.arange(min(n_queries, cg.n_users))
        best = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            rank_many(cg, queries, params)
            best = min(best, time.perf_counter() - t0)
        rows.append({"fraction": float(f), "users": cg.n_users, "items": cg.n_items,
                     "edges": cg.n_edges, "seconds": best})
        _log.info("bench fraction %.3f: %d edges, %.4fs", f, cg.n_edges, best)
    return BenchTable(rows)


def synthetic_log(n_users: int, n_items: int, edges_per_behavior: Sequence[int],
                  labels: Sequence[str] = ("view", "cart", "buy"), seed: int = 0) -> InteractionLog:
    """Uniform random multi-behavior log (for scaling runs and tests)."""
    rng = np.random.default_rng(seed)
    us, its, bs = [], [], []
    for code, m in enumerate(edges_per_behavior):
        flat = rng.choice(n_users * n_items, size=m, replace=False)
        us.append(flat // n_items)
        its.append(flat % n_items)
        bs.append(np.full(m, code))
    users = np.concatenate(us)
    items = np.concatenate(its)
    codes = np.concatenate(bs)
    n = len(users)
    return InteractionLog(
        users=users.astype(np.int64), items=items.astype(np.int64), behaviors=codes.astype(np.int64),
        timestamps=np.arange(n, dtype=np.int64), order=np.arange(n, dtype=np.int64),
        user_tokens=tuple(f"u{k}" for k in range(n_users)),
        item_tokens=tuple(f"i{k}" for k in range(n_items)),
        behavior_labels=tuple(labels[:len(edges_per_behavior)]),
    )
