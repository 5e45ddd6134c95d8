"""
Interaction logs, per-behavior bipartite graphs and the cascading behavior graph.

Users and items live in one shared index space across every behavior, assigned
in order of first appearance in the input.  A node that never occurs under a
behavior is simply isolated in that behavior's graph.
"""
from __future__ import annotations

import csv
import io
import logging
import os
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal, TextIO

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ParseError

_log = logging.getLogger(__name__)

Scheme = Literal["symmetric", "column"]

DEFAULT_COLUMNS = ("user", "item", "behavior", "timestamp")
_SCHEME_ALIASES = {"symmetric": "symmetric", "sym": "symmetric", "column": "column", "col": "column"}


def canonical_scheme(scheme: str) -> Scheme:
    try:
        return _SCHEME_ALIASES[scheme]  # type: ignore[return-value]
    except KeyError:
        raise ConfigError(f"unknown normalization scheme {scheme!r} (use symmetric or column)") from None


@dataclass(frozen=True, eq=False)
class InteractionLog:
    """
    Deduplicated (user, item, behavior, timestamp) records with dense indices.

    Records are kept in input-file order.  ``order`` holds each record's
    original row position and is the tie-breaker wherever timestamps collide.
    """

    users: np.ndarray
    items: np.ndarray
    behaviors: np.ndarray
    timestamps: np.ndarray
    order: np.ndarray
    user_tokens: tuple[str, ...]
    item_tokens: tuple[str, ...]
    behavior_labels: tuple[str, ...]

    def __len__(self):
        return len(self.users)

    @property
    def n_users(self) -> int:
        return len(self.user_tokens)

    @property
    def n_items(self) -> int:
        return len(self.item_tokens)

    @cached_property
    def user_index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.user_tokens)}

    @cached_property
    def item_index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.item_tokens)}

    def behavior_code(self, label: str) -> int:
        try:
            return self.behavior_labels.index(label)
        except ValueError:
            raise ConfigError(
                f"behavior {label!r} not in log (have {', '.join(self.behavior_labels)})"
            ) from None

    def counts(self) -> dict[str, int]:
        """Number of records per behavior label."""
        c = np.bincount(self.behaviors, minlength=len(self.behavior_labels))
        return {b: int(n) for b, n in zip(self.behavior_labels, c)}

    def select(self, mask: np.ndarray) -> InteractionLog:
        """Subset of the records, keeping the full index spaces."""
        return InteractionLog(
            users=self.users[mask],
            items=self.items[mask],
            behaviors=self.behaviors[mask],
            timestamps=self.timestamps[mask],
            order=self.order[mask],
            user_tokens=self.user_tokens,
            item_tokens=self.item_tokens,
            behavior_labels=self.behavior_labels,
        )

    def edges(self, label: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.behaviors == self.behavior_code(label)
        return self.users[mask], self.items[mask]

    def records(self) -> Iterator[tuple[str, str, str, int]]:
        for u, i, b, t in zip(self.users, self.items, self.behaviors, self.timestamps):
            yield self.user_tokens[u], self.item_tokens[i], self.behavior_labels[b], int(t)


def _open_text(source) -> tuple[TextIO, bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline=""), True
    return source, False


def _read_rows(
    source, columns: Sequence[str], behavior: str | None, header: bool
) -> Iterator[tuple[int, str, str, str, str]]:
    roles = list(columns)
    for role in ("user", "item", "timestamp"):
        if role not in roles:
            raise ConfigError(f"column roles must include {role!r}")
    if behavior is None and "behavior" not in roles:
        raise ConfigError("column roles need a 'behavior' column unless a behavior label is given")
    pos = {r: k for k, r in enumerate(roles)}

    fh, close = _open_text(source)
    try:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        for lineno, row in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < len(roles):
                raise ParseError(f"expected {len(roles)} fields, got {len(row)}", lineno)
            b = behavior if behavior is not None else row[pos["behavior"]]
            yield lineno, row[pos["user"]], row[pos["item"]], b, row[pos["timestamp"]]
    finally:
        if close:
            fh.close()


def _build_log(rows: Iterable[tuple[int, str, str, str, str]], behaviors: Sequence[str] | None):
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    if behaviors is not None:
        labels = list(dict.fromkeys(behaviors))
        declared = True
    else:
        labels = []
        declared = False
    b_index = {b: k for k, b in enumerate(labels)}

    us, its, bs, ts = [], [], [], []
    for lineno, u, i, b, t in rows:
        u = u.strip()
        i = i.strip()
        b = b.strip()
        if not u or not i:
            raise ParseError("empty user or item token", lineno)
        try:
            stamp = int(t)
        except ValueError:
            raise ParseError(f"timestamp {t!r} is not an integer", lineno) from None
        code = b_index.get(b)
        if code is None:
            if declared:
                raise ParseError(f"unknown behavior label {b!r}", lineno)
            code = b_index[b] = len(labels)
            labels.append(b)
        us.append(user_index.setdefault(u, len(user_index)))
        its.append(item_index.setdefault(i, len(item_index)))
        bs.append(code)
        ts.append(stamp)

    if not us:
        raise ParseError("no interactions in input")

    users = np.asarray(us, dtype=np.int64)
    items = np.asarray(its, dtype=np.int64)
    codes = np.asarray(bs, dtype=np.int64)
    stamps = np.asarray(ts, dtype=np.int64)
    order = np.arange(len(users), dtype=np.int64)

    # earliest timestamp wins within a (user, item, behavior) group; file order breaks ties
    perm = np.lexsort((order, stamps, codes, items, users))
    su, si, sb = users[perm], items[perm], codes[perm]
    first = np.ones(len(perm), dtype=bool)
    first[1:] = (su[1:] != su[:-1]) | (si[1:] != si[:-1]) | (sb[1:] != sb[:-1])
    keep = np.sort(perm[first])

    log = InteractionLog(
        users=users[keep],
        items=items[keep],
        behaviors=codes[keep],
        timestamps=stamps[keep],
        order=order[keep],
        user_tokens=tuple(user_index),
        item_tokens=tuple(item_index),
        behavior_labels=tuple(labels),
    )
    dropped = len(users) - len(keep)
    _log.info(
        "ingested %d records (%d duplicates dropped): %d users, %d items, %s",
        len(keep), dropped, log.n_users, log.n_items,
        ", ".join(f"{b}={n}" for b, n in log.counts().items()),
    )
    return log


def ingest(
    source,
    *,
    columns: Sequence[str] = DEFAULT_COLUMNS,
    behaviors: Sequence[str] | None = None,
    behavior: str | None = None,
    header: bool = False,
) -> InteractionLog:
    """
    Read a tab-separated interaction file into a deduplicated log.

    Args:
        source: path or open text stream.
        columns: role of each column, in order.
        behaviors: declared behavior labels; rows with any other label are
            rejected.  When omitted, labels are accepted in first-seen order.
        behavior: fixed label for files holding a single behavior (then
            ``columns`` needs no behavior column).
        header: skip the first line.
    """
    if behavior is not None and "behavior" in columns:
        columns = [c for c in columns if c != "behavior"]
    return _build_log(_read_rows(source, columns, behavior, header), behaviors)


def ingest_files(
    files: Mapping[str, object],
    *,
    columns: Sequence[str] = ("user", "item", "timestamp"),
    header: bool = False,
) -> InteractionLog:
    """Read one ``user<TAB>item<TAB>timestamp`` file per behavior, in mapping order."""
    def rows():
        for b, src in files.items():
            yield from _read_rows(src, columns, b, header)

    return _build_log(rows(), list(files))


def write_log(log: InteractionLog, dest) -> None:
    """Write records as ``user<TAB>item<TAB>behavior<TAB>timestamp``; ``ingest`` reads it back."""
    fh, close = (open(dest, "w", encoding="utf-8", newline=""), True) if isinstance(dest, (str, os.PathLike)) else (dest, False)
    try:
        for u, i, b, t in log.records():
            fh.write(f"{u}\t{i}\t{b}\t{t}\n")
    finally:
        if close:
            fh.close()


def write_index_map(tokens: Sequence[str], dest) -> None:
    """Sidecar ``token<TAB>dense_index`` file."""
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        for k, t in enumerate(tokens):
            fh.write(f"{t}\t{k}\n")


def read_index_map(source) -> list[str]:
    fh, close = _open_text(source)
    try:
        pairs = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    finally:
        if close:
            fh.close()
    tokens = [""] * len(pairs)
    for t, k in pairs:
        tokens[int(k)] = t
    return tokens


@dataclass(frozen=True, eq=False)
class BehaviorGraph:
    """Binary user-item bi-adjacency for one behavior, with degree vectors."""

    behavior: str
    adjacency: sp.csr_matrix
    user_degrees: np.ndarray
    item_degrees: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.adjacency.shape

    @property
    def n_users(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_items(self) -> int:
        return self.adjacency.shape[1]

    @property
    def n_edges(self) -> int:
        return self.adjacency.nnz

    @cached_property
    def by_item(self) -> sp.csc_matrix:
        """Column-compressed copy for item-wise traversal."""
        return self.adjacency.tocsc()

    def user_neighbors(self, u: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[u]:a.indptr[u + 1]]

    def item_neighbors(self, i: int) -> np.ndarray:
        a = self.by_item
        return a.indices[a.indptr[i]:a.indptr[i + 1]]


def graph_from_edges(behavior: str, users, items, n_users: int, n_items: int) -> BehaviorGraph:
    """Binary graph from (possibly repeated) edge lists; repeats collapse to one edge."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    data = np.ones(len(users), dtype=np.float64)
    adj = sp.csr_matrix((data, (users, items)), shape=(n_users, n_items))
    adj.sum_duplicates()
    adj.data[:] = 1.0
    adj.sort_indices()
    user_deg = np.diff(adj.indptr).astype(np.int64)
    item_deg = np.bincount(adj.indices, minlength=n_items).astype(np.int64)
    return BehaviorGraph(behavior, adj, user_deg, item_deg)


def build_behavior_graph(log: InteractionLog, behavior: str) -> BehaviorGraph:
    u, i = log.edges(behavior)
    return graph_from_edges(behavior, u, i, log.n_users, log.n_items)


@dataclass(frozen=True, eq=False)
class NormalizedGraph:
    """
    Weighted forward (users x items) and backward (items x users) operators.

    With the symmetric scheme the two are exact transposes.  With the column
    scheme both are column-stochastic on their nonzero columns.
    """

    behavior: str
    scheme: Scheme
    forward: sp.csr_matrix
    backward: sp.csr_matrix


def normalize(g: BehaviorGraph, scheme: str = "symmetric") -> NormalizedGraph:
    scheme = canonical_scheme(scheme)
    a = g.adjacency
    rows = np.repeat(np.arange(g.n_users), np.diff(a.indptr))
    cols = a.indices
    # only stored edges are touched, so every degree seen here is >= 1
    du = g.user_degrees[rows].astype(np.float64)
    di = g.item_degrees[cols].astype(np.float64)
    if scheme == "symmetric":
        w = 1.0 / (np.sqrt(du) * np.sqrt(di))
        fwd = sp.csr_matrix((w, cols.copy(), a.indptr.copy()), shape=a.shape)
        bwd = fwd.T.tocsr()
    else:
        fwd = sp.csr_matrix((1.0 / di, cols.copy(), a.indptr.copy()), shape=a.shape)
        bwd = sp.csr_matrix((1.0 / du, cols.copy(), a.indptr.copy()), shape=a.shape).T.tocsr()
    bwd.sort_indices()
    return NormalizedGraph(g.behavior, scheme, fwd, bwd)


@dataclass(frozen=True, eq=False)
class CascadingGraph:
    """
    Ordered chain of behavior graphs over shared user and item index spaces.

    The forward links between consecutive behaviors are node-wise identities,
    so they are carried by ``sequence`` alone; rankers walk the chain in order.
    """

    sequence: tuple[str, ...]
    graphs: dict[str, BehaviorGraph]
    normalized: dict[str, NormalizedGraph]
    scheme: Scheme
    n_users: int
    n_items: int
    user_tokens: tuple[str, ...] = field(default=(), repr=False)
    item_tokens: tuple[str, ...] = field(default=(), repr=False)

    @property
    def target(self) -> str:
        return self.sequence[-1]

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    @property
    def n_edges(self) -> int:
        return sum(self.graphs[b].n_edges for b in self.sequence)

    def reordered(self, sequence: Sequence[str]) -> CascadingGraph:
        """Same graphs chained in a different order (or a sub-chain)."""
        sequence = _check_sequence(sequence, self.graphs)
        return CascadingGraph(
            sequence, {b: self.graphs[b] for b in sequence},
            {b: self.normalized[b] for b in sequence}, self.scheme,
            self.n_users, self.n_items, self.user_tokens, self.item_tokens,
        )


def _check_sequence(sequence: Sequence[str], available) -> tuple[str, ...]:
    seq = tuple(sequence)
    if not seq:
        raise ConfigError("cascading sequence is empty")
    if len(set(seq)) != len(seq):
        raise ConfigError(f"cascading sequence repeats a behavior: {' -> '.join(seq)}")
    for b in seq:
        if b not in available:
            raise ConfigError(f"behavior {b!r} of the sequence is absent from the data")
    return seq


def build_cascading_graph(
    log: InteractionLog,
    sequence: Sequence[str],
    scheme: str = "symmetric",
    target: str | None = None,
) -> CascadingGraph:
    seq = _check_sequence(sequence, log.behavior_labels)
    if target is not None and seq[-1] != target:
        raise ConfigError(f"sequence must end with the target behavior {target!r}")
    scheme = canonical_scheme(scheme)
    graphs = {b: build_behavior_graph(log, b) for b in seq}
    normed = {b: normalize(g, scheme) for b, g in graphs.items()}
    return CascadingGraph(
        seq, graphs, normed, scheme, log.n_users, log.n_items, log.user_tokens, log.item_tokens
    )


def cascading_graph_from_graphs(graphs: Sequence[BehaviorGraph], scheme: str = "symmetric") -> CascadingGraph:
    """Chain prebuilt graphs (all of one shape) in the given order."""
    shapes = {g.shape for g in graphs}
    if len(shapes) != 1:
        raise ConfigError(f"behavior graphs disagree on shape: {sorted(shapes)}")
    gmap = {g.behavior: g for g in graphs}
    seq = _check_sequence([g.behavior for g in graphs], gmap)
    scheme = canonical_scheme(scheme)
    n_users, n_items = shapes.pop()
    return CascadingGraph(
        seq, gmap, {b: normalize(g, scheme) for b, g in gmap.items()}, scheme, n_users, n_items
    )


def parse_tsv_text(text: str, **kwargs) -> InteractionLog:
    """Convenience for tests and small fixtures."""
    return ingest(io.StringIO(text), **kwargs)
