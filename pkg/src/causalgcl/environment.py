"""Edge soft-mask scoring, invariant/variant decomposition and environment inference."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .encoder import propagate, propagate_backward
from .errors import CausalGCLError, EmptyGraphError
from .graph import BipartiteGraph, frac_count, normalize_adjacency
from .numerics import ParameterSet, block_gradient, sigmoid

log = logging.getLogger(__name__)

SCORE_CLAMP = 1e-6
MASK_LAYERS = 1


class NoVariantEdgesError(CausalGCLError):
    """Raised when the variant edge set is empty; callers fall back to one environment."""


@dataclass
class EdgeScores:
    """Score per observed edge; ``pairs[k]`` is (user_index, item_index)."""

    pairs: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.pairs.shape[0] != self.values.size:
            raise ValueError("pairs and values differ in length")

    def __len__(self):
        return self.values.size

    def as_dict(self) -> dict:
        return {(int(u), int(i)): float(s) for (u, i), s in zip(self.pairs, self.values)}

    def to_tsv(self, path, index=None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for (u, i), s in zip(self.pairs.tolist(), self.values.tolist()):
                if index is not None:
                    u, i = index.users[u], index.items[i]
                fh.write(f"{u}\t{i}\t{s!r}\n")

    @classmethod
    def from_tsv(cls, path, index=None) -> "EdgeScores":
        pairs, vals = [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                u, i, s = line.rstrip("\n").split("\t")
                if index is not None:
                    pairs.append((index.user(_raw(u)), index.item(_raw(i))))
                else:
                    pairs.append((int(u), int(i)))
                vals.append(float(s))
        return cls(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), np.asarray(vals))


def _raw(token: str):
    try:
        return int(token)
    except ValueError:
        return token


@dataclass
class ScorerCache:
    adj: object
    layers: int
    pairs: np.ndarray
    h: np.ndarray
    feats: np.ndarray
    a1: np.ndarray
    raw: np.ndarray
    values: np.ndarray


def _score_pairs(params: ParameterSet, adj, layers: int, pairs: np.ndarray, num_users: int) -> ScorerCache:
    h = propagate(adj, params.mask_embedding, layers)
    feats = np.concatenate([h[pairs[:, 0]], h[pairs[:, 1] + num_users]], axis=1)
    a1 = np.tanh(feats @ params.mlp_w1 + params.mlp_b1)
    raw = sigmoid(a1 @ params.mlp_w2 + params.mlp_b2[0])
    values = np.clip(raw, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    return ScorerCache(adj, layers, pairs, h, feats, a1, raw, values)


def score_forward(g: BipartiteGraph, params: ParameterSet, layers: int = MASK_LAYERS, adj=None) -> ScorerCache:
    """Mask-GNN + MLP forward pass over the observed edges of ``g``."""
    adj = normalize_adjacency(g) if adj is None else adj
    return _score_pairs(params, adj, layers, g.edges[:, :2], g.num_users)


def score_backward(cache: ScorerCache, params: ParameterSet, d_scores, num_users: int) -> np.ndarray:
    """Flat gradient of a loss given its derivative w.r.t. the (clamped) scores."""
    d_scores = np.asarray(d_scores, dtype=np.float64)
    live = (cache.raw > SCORE_CLAMP) & (cache.raw < 1.0 - SCORE_CLAMP)
    d_logit = d_scores * cache.raw * (1.0 - cache.raw) * live
    d_w2 = cache.a1.T @ d_logit
    d_b2 = np.array([d_logit.sum()])
    d_z1 = np.outer(d_logit, params.mlp_w2) * (1.0 - cache.a1 ** 2)
    d_w1 = cache.feats.T @ d_z1
    d_b1 = d_z1.sum(axis=0)
    d_feats = d_z1 @ params.mlp_w1.T
    d = params.dim
    d_h = np.zeros_like(cache.h)
    np.add.at(d_h, cache.pairs[:, 0], d_feats[:, :d])
    np.add.at(d_h, cache.pairs[:, 1] + num_users, d_feats[:, d:])
    d_x = propagate_backward(cache.adj, cache.layers, d_h)
    return block_gradient(params, mask_embedding=d_x, mlp_w1=d_w1, mlp_b1=d_b1, mlp_w2=d_w2, mlp_b2=d_b2)


def score_edges(g: BipartiteGraph, params: ParameterSet, layers: int = MASK_LAYERS) -> EdgeScores:
    """s(u, i) = sigmoid(MLP(h_mask[u] ++ h_mask[i])), clamped to [1e-6, 1 - 1e-6]."""
    cache = score_forward(g, params, layers)
    return EdgeScores(cache.pairs.copy(), cache.values)


def score_unobserved(g: BipartiteGraph, params: ParameterSet, pairs, layers: int = MASK_LAYERS) -> np.ndarray:
    """Score arbitrary (user, item) pairs with the edge scorer trained on ``g``."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return _score_pairs(params, normalize_adjacency(g), layers, pairs, g.num_users).values


@dataclass
class Decomposition:
    """Boolean ``invariant`` flag per edge of the source graph (edge order)."""

    pairs: np.ndarray
    invariant: np.ndarray
    tau: float

    @property
    def invariant_edges(self) -> set:
        return {(int(u), int(i)) for u, i in self.pairs[self.invariant]}

    @property
    def variant_edges(self) -> set:
        return {(int(u), int(i)) for u, i in self.pairs[~self.invariant]}


def decompose(g: BipartiteGraph, scores: EdgeScores, tau: float = 0.7) -> Decomposition:
    """Top ceil(tau * |E|) scored edges are invariant, the rest variant.

    Ties are broken by (user, item) ascending.
    """
    if not 0 < tau <= 1:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if len(scores) == 0:
        raise EmptyGraphError("cannot decompose an empty edge set")
    pairs = scores.pairs
    n_inv = frac_count(tau, len(scores), "ceil")
    order = np.lexsort((pairs[:, 1], pairs[:, 0], -scores.values))
    inv = np.zeros(len(scores), dtype=bool)
    inv[order[:n_inv]] = True
    return Decomposition(pairs.copy(), inv, tau)


def variant_embeddings(g: BipartiteGraph, decomposition: Decomposition, x, layers: int = 3,
                       all_edges: bool = False) -> np.ndarray:
    """z(u, i) = H_V[u] ++ H_V[i] with H_V propagated over the variant subgraph only.

    Rows follow the variant edges in edge order, or every edge when
    ``all_edges`` is set (used to place edges that turn variant later).
    """
    variant = decomposition.pairs[~decomposition.invariant]
    if variant.shape[0] == 0:
        raise NoVariantEdgesError("variant edge set is empty; use a single environment")
    sub = g.subgraph(map(tuple, variant.tolist()))
    x = x.mask_embedding if isinstance(x, ParameterSet) else np.asarray(x, dtype=np.float64)
    h = propagate(normalize_adjacency(sub), x, layers)
    rows = decomposition.pairs if all_edges else variant
    return np.concatenate([h[rows[:, 0]], h[rows[:, 1] + g.num_users]], axis=1)


@dataclass
class EnvironmentPartition:
    k: int
    labels: np.ndarray
    centroids: np.ndarray
    objective: float
    history: list = field(default_factory=list)
    pairs: np.ndarray | None = None

    def assign(self, points) -> np.ndarray:
        points = np.ascontiguousarray(points, dtype=np.float64)
        labels, _ = kernels.kmeans_assign(points, np.ascontiguousarray(self.centroids))
        return labels

    def to_tsv(self, path, index=None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for (u, i), e in zip(self.pairs.tolist(), self.labels.tolist()):
                if index is not None:
                    u, i = index.users[u], index.items[i]
                fh.write(f"{u}\t{i}\t{e}\n")


def kmeans_objective(points: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    diff = points - centroids[labels]
    return float(np.sum(diff * diff))


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = [int(rng.integers(n))]
    _, d2 = kernels.kmeans_assign(points, points[centers])
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a center; pick any unused index
            unused = np.setdiff1d(np.arange(n), centers)
            nxt = int(unused[rng.integers(unused.size)])
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        _, d2 = kernels.kmeans_assign(points, points[centers])
    return points[centers].copy()


def kmeans(points, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-8) -> EnvironmentPartition:
    """k-means++ seeding then Lloyd iterations.

    Stops when the objective improves by less than ``tol`` or after
    ``max_iter`` iterations. An empty cluster is re-seeded with the point
    farthest from its current centroid. ``history`` holds the objective after
    every iteration.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    if n == 0:
        raise ValueError("kmeans needs at least one point")
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        warnings.warn(f"only {n} points for k={k}; reducing k to {n}", RuntimeWarning, stacklevel=2)
        k = n
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(points, k, rng)
    history = []
    prev = np.inf
    labels = None
    for _ in range(max_iter):
        labels, d2 = kernels.kmeans_assign(points, centroids)
        counts = np.bincount(labels, minlength=k)
        for c in np.flatnonzero(counts == 0):
            # take the worst-served point from a cluster that can spare it
            donors = counts[labels] > 1
            far = int(np.argmax(np.where(donors, d2, -1.0)))
            counts[labels[far]] -= 1
            labels[far] = c
            counts[c] = 1
            d2[far] = 0.0
            centroids[c] = points[far]
        for c in range(k):
            centroids[c] = points[labels == c].mean(axis=0)
        obj = kmeans_objective(points, labels, centroids)
        history.append(obj)
        if prev - obj < tol:
            break
        prev = obj
    return EnvironmentPartition(k, labels, centroids, history[-1], history)
