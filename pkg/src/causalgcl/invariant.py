"""Invariant-learning stage: train the edge scorer against environment risks.

Objective per epoch::

    mean_e R^e + alpha * Var_e(grad R^e) + beta * L_score

R^e is the mean BPR loss over the invariant edges plus environment e's
variant edges, with embeddings propagated over the invariant subgraph from
the scorer's own embedding table. The variance penalty needs the gradient of
a gradient; it is computed with closed-form Hessian-vector products of the
BPR risk (the propagation is linear, so only the BPR curvature matters).
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .encoder import propagate, propagate_backward
from .environment import (
    MASK_LAYERS,
    Decomposition,
    EdgeScores,
    NoVariantEdgesError,
    decompose,
    kmeans,
    score_backward,
    score_forward,
    variant_embeddings,
)
from .errors import ConfigError, TrainingDivergedError
from .graph import BipartiteGraph, normalize_adjacency
from .numerics import ParameterSet, block_gradient, sigmoid
from .sampling import sample_negatives

log = logging.getLogger(__name__)

PRED_CLAMP = 1e-7


@dataclass(frozen=True)
class Stage1Config:
    alpha: float = 0.1
    beta: float = 1.0
    epochs: int = 100
    lr: float = 1e-4
    tau: float = 0.7
    num_envs: int = 4
    layers: int = 3
    mask_layers: int = MASK_LAYERS
    dim: int = 64
    seed: int = 0
    env_refresh: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"stage-1 epochs must be >= 1, got {self.epochs}")
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise ConfigError("alpha must be finite and >= 0")
        if not (math.isfinite(self.beta) and self.beta >= 0):
            raise ConfigError("beta must be finite and >= 0")
        if not 0 < self.tau <= 1:
            raise ConfigError("tau must lie in (0, 1]")
        if self.num_envs < 1:
            raise ConfigError("num_envs must be >= 1")


@dataclass
class Environment:
    env_id: int
    pos: np.ndarray  # (n, 2) user, item
    neg: np.ndarray  # (n,) negative item per positive


@dataclass
class EnvironmentRisk:
    env_id: int
    risk: float
    grad: np.ndarray


class RiskModel:
    """BPR risk over the invariant subgraph for a fixed decomposition."""

    def __init__(self, g: BipartiteGraph, decomposition: Decomposition, layers: int):
        self.g = g
        self.layers = layers
        inv = decomposition.pairs[decomposition.invariant]
        self.adj = normalize_adjacency(g.subgraph(map(tuple, inv.tolist())))
        self.nu = g.num_users

    def embed(self, params: ParameterSet) -> np.ndarray:
        return propagate(self.adj, params.mask_embedding, self.layers)

    def _bpr(self, h, env: Environment):
        u = env.pos[:, 0]
        i = env.pos[:, 1] + self.nu
        j = env.neg + self.nu
        diff = h[i] - h[j]
        x = np.einsum("nd,nd->n", h[u], diff)
        return u, i, j, diff, x

    def risk(self, params: ParameterSet, env: Environment, h=None) -> EnvironmentRisk:
        h = self.embed(params) if h is None else h
        u, i, j, diff, x = self._bpr(h, env)
        n = x.size
        value = float(np.logaddexp(0.0, -x).mean())
        c = -sigmoid(-x) / n
        gh = np.zeros_like(h)
        np.add.at(gh, u, c[:, None] * diff)
        np.add.at(gh, i, c[:, None] * h[u])
        np.add.at(gh, j, -c[:, None] * h[u])
        gx = propagate_backward(self.adj, self.layers, gh)
        return EnvironmentRisk(env.env_id, value, block_gradient(params, mask_embedding=gx))

    def hvp(self, params: ParameterSet, env: Environment, direction, h=None) -> np.ndarray:
        """Hessian of R^e (w.r.t. the scorer embedding table) times ``direction``."""
        h = self.embed(params) if h is None else h
        v = direction[params.offsets()["mask_embedding"]].reshape(h.shape)
        w = propagate(self.adj, v, self.layers)
        u, i, j, diff, x = self._bpr(h, env)
        n = x.size
        c = -sigmoid(-x) / n
        dc = sigmoid(x) * sigmoid(-x) / n
        dx = np.einsum("nd,nd->n", w[u], diff) + np.einsum("nd,nd->n", h[u], w[i] - w[j])
        k = (dc * dx)[:, None]
        gh = np.zeros_like(h)
        np.add.at(gh, u, k * diff + c[:, None] * (w[i] - w[j]))
        np.add.at(gh, i, k * h[u] + c[:, None] * w[u])
        np.add.at(gh, j, -(k * h[u] + c[:, None] * w[u]))
        return block_gradient(params, mask_embedding=propagate_backward(self.adj, self.layers, gh))


def env_risk(env: Environment, params: ParameterSet, model: RiskModel) -> EnvironmentRisk:
    if env.pos.shape[0] == 0:
        raise ValueError(f"environment {env.env_id} has no edges")
    return model.risk(params, env)


def grad_variance(risks) -> float:
    """(1/K) * sum_e ||g_e - mean_g||^2."""
    grads = [np.asarray(r.grad if isinstance(r, EnvironmentRisk) else r, dtype=np.float64) for r in risks]
    if not grads:
        raise ValueError("need at least one environment")
    if len({g.size for g in grads}) != 1:
        raise ValueError("environment gradients differ in length")
    stack = np.stack(grads)
    dev = stack - stack.mean(axis=0)
    return float(np.sum(dev * dev) / len(grads))


def score_loss(scores, predictions) -> float:
    """Binary cross-entropy of clamped predictions against soft targets ``scores``."""
    s = np.asarray(scores, dtype=np.float64)
    p = np.clip(np.asarray(predictions, dtype=np.float64), PRED_CLAMP, 1 - PRED_CLAMP)
    return float(-np.mean(s * np.log(p) + (1 - s) * np.log(1 - p)))


@dataclass
class ObjectiveParts:
    total: float
    mean_risk: float
    penalty: float
    score: float
    grad: np.ndarray
    risks: list = field(default_factory=list)


class Stage1Objective:
    """Full invariant objective with the Top-tau set and negatives held fixed."""

    def __init__(self, g: BipartiteGraph, decomposition: Decomposition, envs: list[Environment],
                 alpha: float, beta: float, layers: int = 3, mask_layers: int = MASK_LAYERS):
        self.g = g
        self.envs = [e for e in envs if e.pos.shape[0] > 0]
        for e in envs:
            if e.pos.shape[0] == 0:
                warnings.warn(f"environment {e.env_id} has no edges; excluded", RuntimeWarning, stacklevel=2)
        if not self.envs:
            raise ValueError("no non-empty environments")
        self.alpha = alpha
        self.beta = beta
        self.mask_layers = mask_layers
        self.model = RiskModel(g, decomposition, layers)
        self.full_adj = normalize_adjacency(g)

    def score_term(self, params: ParameterSet, h=None):
        """(L_score, flat gradient) through both the scorer and the predictions."""
        g = self.g
        h = self.model.embed(params) if h is None else h
        cache = score_forward(g, params, self.mask_layers, adj=self.full_adj)
        s = cache.values
        u = g.edges[:, 0]
        i = g.edges[:, 1] + g.num_users
        y = np.einsum("nd,nd->n", h[u], h[i])
        raw = sigmoid(y)
        p = np.clip(raw, PRED_CLAMP, 1 - PRED_CLAMP)
        n = s.size
        value = float(-np.mean(s * np.log(p) + (1 - s) * np.log(1 - p)))
        d_s = -(np.log(p) - np.log(1 - p)) / n
        live = (raw > PRED_CLAMP) & (raw < 1 - PRED_CLAMP)
        d_y = (p - s) / n * live
        gh = np.zeros_like(h)
        np.add.at(gh, u, d_y[:, None] * h[i])
        np.add.at(gh, i, d_y[:, None] * h[u])
        grad = score_backward(cache, params, d_s, g.num_users)
        grad += block_gradient(params, mask_embedding=propagate_backward(self.model.adj, self.model.layers, gh))
        return value, grad

    def evaluate(self, params: ParameterSet) -> ObjectiveParts:
        h = self.model.embed(params)
        risks = [self.model.risk(params, e, h) for e in self.envs]
        k = len(risks)
        mean_risk = sum(r.risk for r in risks) / k
        grad = sum(r.grad for r in risks) / k
        penalty = grad_variance(risks)
        if self.alpha > 0 and k > 1:
            gbar = sum(r.grad for r in risks) / k
            pen_grad = params.zeros_like_flat()
            for env, r in zip(self.envs, risks):
                pen_grad += self.model.hvp(params, env, r.grad - gbar, h)
            grad = grad + self.alpha * (2.0 / k) * pen_grad
        score = 0.0
        if self.beta > 0:
            score, sgrad = self.score_term(params, h)
            grad = grad + self.beta * sgrad
        total = mean_risk + self.alpha * penalty + self.beta * score
        return ObjectiveParts(total, mean_risk, penalty, score, grad, risks)

    def value(self, params: ParameterSet) -> float:
        return self.evaluate(params).total


def infer_environment_labels(g: BipartiteGraph, params: ParameterSet, decomposition: Decomposition,
                             num_envs: int, layers: int, seed: int) -> np.ndarray:
    """Environment id per edge (edge order).

    Variant edges take their k-means cluster; invariant edges get the nearest
    centroid so they have a label if they turn variant in a later epoch.
    """
    try:
        z_all = variant_embeddings(g, decomposition, params.mask_embedding, layers, all_edges=True)
    except NoVariantEdgesError:
        log.warning("no variant edges; falling back to a single environment")
        return np.zeros(g.num_edges, dtype=np.int64)
    var = ~decomposition.invariant
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        part = kmeans(z_all[var], num_envs, seed=seed)
    labels = part.assign(z_all)
    labels[var] = part.labels
    return labels


def build_environments(g: BipartiteGraph, decomposition: Decomposition, env_labels: np.ndarray,
                       user_items, rng) -> list[Environment]:
    inv = decomposition.invariant
    envs = []
    for e in np.unique(env_labels[~inv]) if (~inv).any() else [0]:
        members = inv | ((~inv) & (env_labels == e))
        pos = g.edges[members, :2]
        neg = sample_negatives(pos[:, 0], user_items, g.num_items, rng)
        keep = neg >= 0
        envs.append(Environment(int(e), pos[keep], neg[keep]))
    return envs


def train_scores(g: BipartiteGraph, config: Stage1Config, params: ParameterSet | None = None,
                 log_path=None):
    """Run the invariant stage; returns ``(params, EdgeScores, log_rows)``.

    Environments are inferred once up front (and every ``env_refresh``
    epochs when set). The Top-tau split is recomputed at the start of each
    epoch and held fixed for that epoch's gradient step.
    """
    if params is None:
        params = ParameterSet.init(g.num_nodes, config.dim, seed=config.seed)
    params = params.copy()
    user_items = g.user_items()
    full_adj = normalize_adjacency(g)

    def current_decomposition():
        cache = score_forward(g, params, config.mask_layers, adj=full_adj)
        return decompose(g, EdgeScores(g.edges[:, :2], cache.values), config.tau)

    env_labels = infer_environment_labels(g, params, current_decomposition(), config.num_envs,
                                          config.layers, config.seed)
    rows = []
    for epoch in range(1, config.epochs + 1):
        dec = current_decomposition()
        if config.env_refresh and epoch > 1 and (epoch - 1) % config.env_refresh == 0:
            env_labels = infer_environment_labels(g, params, dec, config.num_envs, config.layers,
                                                  config.seed + epoch)
        rng = np.random.default_rng([config.seed, epoch])
        envs = build_environments(g, dec, env_labels, user_items, rng)
        objective = Stage1Objective(g, dec, envs, config.alpha, config.beta, config.layers, config.mask_layers)
        parts = objective.evaluate(params)
        if not (math.isfinite(parts.total) and np.all(np.isfinite(parts.grad))):
            raise TrainingDivergedError(f"stage-1 objective is not finite at epoch {epoch}", epoch=epoch)
        params = params.unflatten(params.flatten() - config.lr * parts.grad)
        rows.append({"epoch": epoch, "objective": parts.total, "mean_risk": parts.mean_risk,
                     "penalty": parts.penalty, "score_loss": parts.score, "num_envs": len(objective.envs)})
    if log_path is not None:
        write_log(rows, log_path)
    final = score_forward(g, params, config.mask_layers, adj=full_adj)
    return params, EdgeScores(g.edges[:, :2].copy(), final.values), rows


def write_log(rows, path) -> None:
    if not rows:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
