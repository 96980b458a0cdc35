"""Top-K ranking metrics, the evaluation protocol and a 2-D projection export."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .encoder import propagate
from .graph import BipartiteGraph, normalize_adjacency
from .numerics import ParameterSet

log = logging.getLogger(__name__)

DEFAULT_K = 10


def rank_items(u: int, h: np.ndarray, num_users: int, exclude=()) -> np.ndarray:
    """Item indices by descending h_u . h_i, excluded items removed, ties by index."""
    items = h[num_users:]
    scores = items @ h[u]
    order = np.lexsort((np.arange(scores.size), -scores))
    if exclude:
        ex = np.zeros(scores.size, dtype=bool)
        ex[list(exclude)] = True
        order = order[~ex[order]]
    return order


@dataclass(frozen=True)
class UserMetrics:
    ndcg: float
    precision: float
    recall: float


def metrics_at_k(ranked, relevant, k: int = DEFAULT_K) -> UserMetrics | None:
    """NDCG/Precision/Recall@K for binary relevance; ``None`` if nothing is relevant."""
    if k < 1:
        raise ValueError("K must be >= 1")
    relevant = set(relevant)
    if not relevant:
        return None
    top = list(ranked)[:k]
    hits = [1.0 if r in relevant else 0.0 for r in top]
    dcg = sum(rel / math.log2(pos + 2) for pos, rel in enumerate(hits))
    idcg = sum(1.0 / math.log2(pos + 2) for pos in range(min(len(relevant), k)))
    n_hit = sum(hits)
    return UserMetrics(dcg / idcg, n_hit / k, n_hit / len(relevant))


@dataclass
class MetricsReport:
    ndcg: float
    precision: float
    recall: float
    k: int
    users: list = field(default_factory=list)  # (user_index, UserMetrics)
    skipped: int = 0

    def table(self) -> str:
        lines = [
            f"{'metric':<12} {'value':>10}",
            f"{'NDCG@' + str(self.k):<12} {self.ndcg:>10.6f}",
            f"{'Precision@' + str(self.k):<12} {self.precision:>10.6f}",
            f"{'Recall@' + str(self.k):<12} {self.recall:>10.6f}",
            f"{'users':<12} {len(self.users):>10d}",
            f"{'skipped':<12} {self.skipped:>10d}",
        ]
        return "\n".join(lines) + "\n"

    def to_csv(self, path, per_user_path=None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "ndcg", "precision", "recall", "users", "skipped"])
            w.writerow([self.k, repr(self.ndcg), repr(self.precision), repr(self.recall), len(self.users),
                        self.skipped])
        if per_user_path is not None:
            with open(per_user_path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["user", "ndcg", "precision", "recall"])
                for u, m in self.users:
                    w.writerow([u, repr(m.ndcg), repr(m.precision), repr(m.recall)])


def evaluate_embeddings(h: np.ndarray, g_train: BipartiteGraph, test_pairs, k: int = DEFAULT_K) -> MetricsReport:
    """Macro-average of per-user metrics over users with at least one test item."""
    relevant: dict[int, set] = {}
    for u, i in test_pairs:
        relevant.setdefault(int(u), set()).add(int(i))
    if not relevant:
        raise ValueError("test split is empty")
    train_items = g_train.user_items()
    rows = []
    skipped = 0
    for u in sorted(relevant):
        ranked = rank_items(u, h, g_train.num_users, train_items[u])
        m = metrics_at_k(ranked, relevant[u], k)
        if m is None:
            skipped += 1
            continue
        rows.append((u, m))
    if not rows:
        raise ValueError("no evaluable users")
    n = len(rows)
    return MetricsReport(
        ndcg=sum(m.ndcg for _, m in rows) / n,
        precision=sum(m.precision for _, m in rows) / n,
        recall=sum(m.recall for _, m in rows) / n,
        k=k,
        users=rows,
        skipped=skipped,
    )


def evaluate(params: ParameterSet, g_train: BipartiteGraph, test_pairs, k: int = DEFAULT_K,
             layers: int = 3) -> MetricsReport:
    """Score with main-view embeddings propagated over the training graph."""
    h = propagate(normalize_adjacency(g_train), params.embedding, layers)
    return evaluate_embeddings(h, g_train, test_pairs, k)


def project_2d(h) -> np.ndarray:
    """Coordinates on the top-2 principal directions of the centered rows.

    Sign convention: each direction's largest-magnitude loading is positive.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] < 2:
        raise ValueError("projection needs at least 2 embedding dimensions")
    centered = h - h.mean(axis=0)
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2].copy()
    for c in comps:
        k = int(np.argmax(np.abs(c)))
        if c[k] < 0:
            c *= -1
    coords = centered @ comps.T
    tol = max(h.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    if sv.size < 2 or sv[1] <= tol:
        warnings.warn("embeddings have rank < 2; second coordinate set to zero", RuntimeWarning, stacklevel=2)
        coords[:, 1] = 0.0
        if sv.size == 0 or sv[0] <= tol:
            coords[:, 0] = 0.0
    return coords


def export_projection(h, labels, path, names=None) -> np.ndarray:
    """Write ``node,x,y,label`` rows; returns the coordinates."""
    coords = project_2d(h)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "x", "y", "label"])
        for n, ((x, y), lab) in enumerate(zip(coords, labels)):
            w.writerow([names[n] if names is not None else n, repr(float(x)), repr(float(y)), lab])
    return coords
