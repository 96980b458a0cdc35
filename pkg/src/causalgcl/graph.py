"""Interaction ingestion, bipartite graph construction and adjacency normalization."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, EmptyGraphError, ParseError
from .numerics import SparseMatrix

FORMATS = ("movielens-dat", "tsv")


@dataclass(frozen=True)
class Interaction:
    user: int | str
    item: int | str
    rating: float | None
    timestamp: int


def _parse_id(token: str):
    token = token.strip()
    if not token:
        raise ValueError("empty id")
    try:
        return int(token)
    except ValueError:
        return token


def id_key(x):
    """Total order over mixed int/str ids: ints first, numerically."""
    return (0, x, "") if isinstance(x, int) else (1, 0, str(x))


def _parse_ts(token: str) -> int:
    ts = int(token)
    if ts < 0:
        raise ValueError(f"negative timestamp {ts}")
    return ts


def ingest_interactions(path, format: str = "movielens-dat", header: bool = False,
                        min_rating: float | None = None) -> list[Interaction]:
    """Read one ``Interaction`` per non-blank line.

    ``movielens-dat``: ``user::item::rating::timestamp`` with integer ids.
    ``tsv``: ``user<TAB>item<TAB>rating<TAB>timestamp``; ``header=True`` skips the
    first line. Rating may be empty in tsv. Rows with rating below
    ``min_rating`` are dropped when the filter is set.
    """
    if format not in FORMATS:
        raise ConfigError(f"unknown interaction format {format!r}; expected one of {FORMATS}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if format == "tsv" and header and lineno == 1:
                continue
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("::") if format == "movielens-dat" else line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"expected 4 fields, got {len(parts)}", line=lineno, path=path)
            try:
                if format == "movielens-dat":
                    user, item = int(parts[0]), int(parts[1])
                    rating = float(parts[2])
                else:
                    user, item = _parse_id(parts[0]), _parse_id(parts[1])
                    rating = float(parts[2]) if parts[2].strip() else None
                ts = _parse_ts(parts[3])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno, path=path) from None
            if min_rating is not None and (rating is None or rating < min_rating):
                continue
            out.append(Interaction(user, item, rating, ts))
    return out


def write_interactions_tsv(rows: Iterable[Interaction], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            rating = "" if r.rating is None else repr(float(r.rating))
            fh.write(f"{r.user}\t{r.item}\t{rating}\t{r.timestamp}\n")


@dataclass(frozen=True)
class IdIndex:
    """Dense re-indexing of raw ids by first appearance."""

    users: tuple
    items: tuple
    _user_pos: dict = field(repr=False, compare=False, default_factory=dict)
    _item_pos: dict = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        if len(self._user_pos) != len(self.users):
            object.__setattr__(self, "_user_pos", {u: k for k, u in enumerate(self.users)})
        if len(self._item_pos) != len(self.items):
            object.__setattr__(self, "_item_pos", {i: k for k, i in enumerate(self.items)})

    @classmethod
    def from_interactions(cls, interactions: Iterable[Interaction]) -> "IdIndex":
        users: dict = {}
        items: dict = {}
        for x in interactions:
            users.setdefault(x.user, len(users))
            items.setdefault(x.item, len(items))
        return cls(tuple(users), tuple(items), users, items)

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def num_items(self) -> int:
        return len(self.items)

    def user(self, raw) -> int:
        return self._user_pos[raw]

    def item(self, raw) -> int:
        return self._item_pos[raw]

    def node_id(self, node: int):
        """Raw id for a node index (items offset by ``num_users``)."""
        if node < self.num_users:
            return ("user", self.users[node])
        return ("item", self.items[node - self.num_users])


@dataclass(frozen=True)
class BipartiteGraph:
    """Users occupy node indices ``[0, U)``, items ``[U, U + I)``.

    ``edges`` rows are ``(user_index, item_index, timestamp)`` with the item
    index local to the item range; duplicates are not allowed.
    """

    num_users: int
    num_items: int
    edges: np.ndarray
    index: IdIndex | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "edges", e)
        if e.size:
            if e[:, 0].min() < 0 or e[:, 0].max() >= self.num_users:
                raise ValueError("user index out of range")
            if e[:, 1].min() < 0 or e[:, 1].max() >= self.num_items:
                raise ValueError("item index out of range")
            keys = e[:, 0] * self.num_items + e[:, 1]
            if np.unique(keys).size != keys.size:
                raise ValueError("duplicate (user, item) edge")

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    def pairs(self) -> list[tuple[int, int]]:
        return [(int(u), int(i)) for u, i in self.edges[:, :2]]

    def pair_set(self) -> set[tuple[int, int]]:
        return set(self.pairs())

    def adjacency(self) -> SparseMatrix:
        """Symmetric 0/1 adjacency over all nodes."""
        u = self.edges[:, 0]
        i = self.edges[:, 1] + self.num_users
        rows = np.concatenate([u, i])
        cols = np.concatenate([i, u])
        n = self.num_nodes
        return SparseMatrix.from_entries((n, n), rows, cols, np.ones(rows.size))

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        np.add.at(deg, self.edges[:, 0], 1)
        np.add.at(deg, self.edges[:, 1] + self.num_users, 1)
        return deg

    def user_items(self) -> list[set[int]]:
        out = [set() for _ in range(self.num_users)]
        for u, i in self.edges[:, :2].tolist():
            out[u].add(i)
        return out

    def subgraph(self, pairs: Iterable[tuple[int, int]]) -> "BipartiteGraph":
        """Graph on the same node space restricted to the given existing edges."""
        ts = {(int(u), int(i)): int(t) for u, i, t in self.edges}
        rows = [(u, i, ts[(u, i)]) for u, i in pairs]
        return self.with_edges(rows)

    def with_edges(self, rows) -> "BipartiteGraph":
        arr = np.asarray(list(rows), dtype=np.int64).reshape(-1, 3)
        return BipartiteGraph(self.num_users, self.num_items, arr, self.index)


def build_graph(interactions: Sequence[Interaction], index: IdIndex | None = None) -> BipartiteGraph:
    """Dense-reindex and deduplicate interactions into a bipartite graph.

    ``index`` fixes the node space (e.g. built over train and test together so
    cold-start test nodes exist); by default it is built from ``interactions``.
    Repeated (user, item) pairs keep the latest timestamp; edge order follows
    first appearance of each pair.
    """
    if not interactions:
        raise EmptyGraphError("cannot build a graph from zero interactions")
    if index is None:
        index = IdIndex.from_interactions(interactions)
    latest: dict[tuple[int, int], int] = {}
    for x in interactions:
        key = (index.user(x.user), index.item(x.item))
        prev = latest.get(key)
        if prev is None or x.timestamp > prev:
            latest[key] = x.timestamp
    rows = [(u, i, t) for (u, i), t in latest.items()]
    return BipartiteGraph(index.num_users, index.num_items, np.asarray(rows, dtype=np.int64), index)


def normalize_adjacency(g: BipartiteGraph) -> SparseMatrix:
    """Symmetric normalization: weight(u, i) = 1 / sqrt(deg(u) * deg(i))."""
    deg = g.degrees().astype(np.float64)
    u = g.edges[:, 0]
    i = g.edges[:, 1] + g.num_users
    w = 1.0 / np.sqrt(deg[u] * deg[i])
    rows = np.concatenate([u, i])
    cols = np.concatenate([i, u])
    n = g.num_nodes
    return SparseMatrix.from_entries((n, n), rows, cols, np.concatenate([w, w]))


def load_catalog(path) -> dict:
    """Optional item-title catalog: ``item<TAB>title`` per line."""
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        raw, _, title = line.partition("\t")
        out[_parse_id(raw)] = title.strip()
    return out


def frac_count(frac: float, n: int, mode: str) -> int:
    """floor/ceil of ``frac * n`` robust to binary rounding (0.7 * 10 -> 7)."""
    x = round(frac * n, 9)
    return math.ceil(x) if mode == "ceil" else math.floor(x)
