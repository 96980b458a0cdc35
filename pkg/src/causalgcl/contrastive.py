"""Joint training stage: causal-informed contrastive loss plus BPR."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from .encoder import ViewAdjacency, ViewEmbeddings, encode_views, propagate, propagate_backward
from .errors import ConfigError, TrainingDivergedError
from .graph import BipartiteGraph, normalize_adjacency
from .numerics import ZERO_NORM, ParameterSet, block_gradient, save_checkpoint, sigmoid
from .sampling import sample_negative, sample_negatives

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig", "cicl_loss", "cicl_terms", "bpr_loss", "total_loss", "sample_negative",
    "sample_negatives", "train", "train_backbone",
]


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.05
    temperature: float = 0.2
    batch_size: int = 256
    epochs: int = 100
    lr: float = 1e-4
    seed: int = 0
    layers: int = 3
    dim: int = 64
    negatives: str = "batch"  # "batch": every other anchor; "typed": same node type only

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ConfigError("lambda must be finite and >= 0")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if self.batch_size < 1 or self.epochs < 1 or self.layers < 0:
            raise ConfigError("batch_size and epochs must be >= 1, layers >= 0")
        if self.negatives not in ("batch", "typed"):
            raise ConfigError(f"negatives must be 'batch' or 'typed', got {self.negatives!r}")


def _normalize_rows(x):
    norm = np.linalg.norm(x, axis=1)
    inv = np.where(norm < ZERO_NORM, 0.0, 1.0 / np.where(norm < ZERO_NORM, 1.0, norm))
    return x * inv[:, None], inv


def _unnormalize_grad(d_hat, x_hat, inv):
    return (d_hat - np.sum(d_hat * x_hat, axis=1, keepdims=True) * x_hat) * inv[:, None]


def cicl_terms(views: ViewEmbeddings, anchors, temperature: float, self_negative=None, groups=None):
    """Contrastive loss and its gradients w.r.t. the three view matrices.

    For anchor u the positive is (h_u, h_{u,c}); negatives are the other
    anchors' main embeddings and, where ``self_negative[u]`` holds, the
    anchor's own spurious embedding. Loss is summed over anchors.
    ``groups`` (one label per anchor) restricts in-batch negatives to anchors
    with the same label, e.g. users against users and items against items.
    Returns ``(loss, d_main, d_causal, d_spurious)``.
    """
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    anchors = np.asarray(anchors, dtype=np.int64)
    b = anchors.size
    if self_negative is None:
        self_negative = np.ones(b, dtype=bool)
    self_negative = np.asarray(self_negative, dtype=bool)
    a, a_inv = _normalize_rows(views.main[anchors])
    p, p_inv = _normalize_rows(views.causal[anchors])
    s, s_inv = _normalize_rows(views.spurious[anchors])
    pos = np.sum(a * p, axis=1) / temperature
    neg = (a @ a.T) / temperature
    np.fill_diagonal(neg, -np.inf)
    if groups is not None:
        groups = np.asarray(groups)
        neg[groups[:, None] != groups[None, :]] = -np.inf
    slf = np.where(self_negative, np.sum(a * s, axis=1) / temperature, -np.inf)
    logits = np.concatenate([pos[:, None], neg, slf[:, None]], axis=1)
    top = logits.max(axis=1, keepdims=True)
    q = np.exp(logits - top)
    z = q.sum(axis=1, keepdims=True)
    log_z = np.log(z[:, 0]) + top[:, 0]
    loss = float(np.sum(log_z - pos))
    q /= z
    q_pos, q_neg, q_self = q[:, 0], q[:, 1:b + 1], q[:, b + 1]
    d_a = ((q_pos - 1.0)[:, None] * p + q_neg @ a + q_neg.T @ a + q_self[:, None] * s) / temperature
    d_p = ((q_pos - 1.0)[:, None] * a) / temperature
    d_s = (q_self[:, None] * a) / temperature
    out = []
    for d_hat, x_hat, inv in ((d_a, a, a_inv), (d_p, p, p_inv), (d_s, s, s_inv)):
        full = np.zeros_like(views.main)
        np.add.at(full, anchors, _unnormalize_grad(d_hat, x_hat, inv))
        out.append(full)
    return loss, out[0], out[1], out[2]


def cicl_loss(views: ViewEmbeddings, anchors, temperature: float, adj: ViewAdjacency, params: ParameterSet,
              layers: int, groups=None):
    """``(loss, flat gradient)`` back through all three propagations.

    The self-negative term is dropped for anchors isolated in the spurious view.
    """
    anchors = np.asarray(anchors, dtype=np.int64)
    self_neg = adj.spurious_degree[anchors] > 0
    loss, d_m, d_c, d_s = cicl_terms(views, anchors, temperature, self_neg, groups)
    d_x = (propagate_backward(adj.main, layers, d_m) + propagate_backward(adj.causal, layers, d_c)
           + propagate_backward(adj.spurious, layers, d_s))
    return loss, block_gradient(params, embedding=d_x)


def bpr_terms(triples, h: np.ndarray, num_users: int):
    """Summed BPR loss over (u, i, j) and its gradient w.r.t. ``h``."""
    t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    u = t[:, 0]
    i = t[:, 1] + num_users
    j = t[:, 2] + num_users
    diff = h[i] - h[j]
    x = np.einsum("nd,nd->n", h[u], diff)
    loss = float(np.sum(np.logaddexp(0.0, -x)))
    c = -sigmoid(-x)
    d_h = np.zeros_like(h)
    np.add.at(d_h, u, c[:, None] * diff)
    np.add.at(d_h, i, c[:, None] * h[u])
    np.add.at(d_h, j, -c[:, None] * h[u])
    return loss, d_h


def bpr_loss(triples, h: np.ndarray, num_users: int, adj=None, params: ParameterSet | None = None,
             layers: int = 3):
    """-sum ln sigmoid(h_u.h_i - h_u.h_j) on main-view embeddings.

    Without ``adj``/``params`` returns ``(loss, d_h)``; with them the gradient is
    pulled back to a flat parameter gradient.
    """
    loss, d_h = bpr_terms(triples, h, num_users)
    if adj is None:
        return loss, d_h
    return loss, block_gradient(params, embedding=propagate_backward(adj, layers, d_h))


def total_loss(cicl: float, bpr: float, lam: float) -> float:
    return cicl + lam * bpr


def _anchors(triples, num_users):
    return np.unique(np.concatenate([triples[:, 0], triples[:, 1] + num_users]))


class JointObjective:
    """Loss of one mini-batch as a function of the parameters (used by gradient checks)."""

    def __init__(self, adj: ViewAdjacency, triples, num_users: int, config: TrainConfig, use_cicl: bool = True):
        self.adj = adj
        self.triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        self.nu = num_users
        self.cfg = config
        self.use_cicl = use_cicl
        self.anchors = _anchors(self.triples, num_users)
        self.groups = (self.anchors >= num_users) if config.negatives == "typed" else None

    def evaluate(self, params: ParameterSet):
        cfg = self.cfg
        x = params.embedding
        if self.use_cicl:
            views = encode_views(self.adj, None, None, x, cfg.layers)
            self_neg = self.adj.spurious_degree[self.anchors] > 0
            cicl, d_m, d_c, d_s = cicl_terms(views, self.anchors, cfg.temperature, self_neg, self.groups)
            bpr, d_h = bpr_terms(self.triples, views.main, self.nu)
            d_m = d_m + cfg.lam * d_h
            d_x = (propagate_backward(self.adj.main, cfg.layers, d_m)
                   + propagate_backward(self.adj.causal, cfg.layers, d_c)
                   + propagate_backward(self.adj.spurious, cfg.layers, d_s))
            total = total_loss(cicl, bpr, cfg.lam)
        else:
            h = propagate(self.adj.main, x, cfg.layers)
            bpr, d_h = bpr_terms(self.triples, h, self.nu)
            cicl = 0.0
            total = bpr
            d_x = propagate_backward(self.adj.main, cfg.layers, d_h)
        return total, cicl, bpr, block_gradient(params, embedding=d_x)

    def value(self, params: ParameterSet) -> float:
        return self.evaluate(params)[0]


def train(g: BipartiteGraph, views, config: TrainConfig, params: ParameterSet | None = None,
          log_path=None, checkpoint_path=None, use_cicl: bool = True, record_time: bool = False):
    """Mini-batch gradient descent on L_CICL + lambda * L_BPR.

    ``views`` is a ``(g_c, g_s)`` pair or a ``ViewAdjacency``. BPR positives
    are the observed edges of ``g``. With ``use_cicl=False`` the objective is
    plain L_BPR on the main graph (the backbone baseline). The log gains a
    ``wall_time`` column only with ``record_time``, since it breaks
    byte-for-byte reproducibility. Returns ``(params, log_rows)``.
    """
    if params is None:
        params = ParameterSet.init(g.num_nodes, config.dim, seed=config.seed)
    params = params.copy()
    if isinstance(views, ViewAdjacency):
        adj = views
    elif views is None:
        a = normalize_adjacency(g)
        adj = ViewAdjacency(a, a, normalize_adjacency(g.with_edges([])), np.zeros(g.num_nodes, dtype=np.int64))
    else:
        adj = ViewAdjacency.from_graphs(g, views[0], views[1])
    user_items = g.user_items()
    pairs = g.edges[:, :2]
    rows = []
    step = 0
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(pairs.shape[0])
        sums = {"cicl": 0.0, "bpr": 0.0, "total": 0.0}
        for lo in range(0, order.size, config.batch_size):
            batch = pairs[order[lo:lo + config.batch_size]]
            neg = sample_negatives(batch[:, 0], user_items, g.num_items, rng)
            keep = neg >= 0
            if not keep.any():
                continue
            triples = np.column_stack([batch[keep], neg[keep]])
            step += 1
            obj = JointObjective(adj, triples, g.num_users, config, use_cicl)
            total, cicl, bpr, grad = obj.evaluate(params)
            if not (math.isfinite(total) and np.all(np.isfinite(grad))):
                hint = f"; restore from {checkpoint_path}" if checkpoint_path else ""
                raise TrainingDivergedError(f"non-finite loss at step {step} (epoch {epoch}){hint}",
                                            step=step, epoch=epoch)
            params.embedding = params.embedding - config.lr * grad[params.offsets()["embedding"]].reshape(
                params.embedding.shape)
            sums["cicl"] += cicl
            sums["bpr"] += bpr
            sums["total"] += total
        row = {"epoch": epoch, "cicl": sums["cicl"], "bpr": sums["bpr"], "total": sums["total"]}
        if record_time:
            row["wall_time"] = time.perf_counter() - start
        rows.append(row)
        if checkpoint_path is not None:
            save_checkpoint(params, checkpoint_path)
    if log_path is not None:
        _write_rows(rows, log_path)
    return params, rows


def train_backbone(g: BipartiteGraph, config: TrainConfig, params: ParameterSet | None = None, **kw):
    """LightGCN trained with BPR only: the baseline the full method is compared against."""
    return train(g, None, config, params, use_cicl=False, **kw)


def _write_rows(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
