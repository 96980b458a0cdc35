"""LightGCN propagation with layer-mean readout, and its adjoint."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .graph import BipartiteGraph, normalize_adjacency
from .numerics import ParameterSet, SparseMatrix, spmm

DEFAULT_LAYERS = 3


def _check(adj: SparseMatrix, x: np.ndarray, layers: int):
    if layers < 0:
        raise ValueError(f"layer count must be >= 0, got {layers}")
    if x.ndim != 2 or adj.shape != (x.shape[0], x.shape[0]):
        raise ShapeError(f"adjacency {adj.shape} does not match embeddings {x.shape}")


def propagate(adj: SparseMatrix, x, layers: int = DEFAULT_LAYERS) -> np.ndarray:
    """mean(Z0..ZL) with Z0 = X and Zl = adj @ Z(l-1).

    ``x`` may be a ParameterSet (its main embedding table is used) or an array.
    """
    if isinstance(x, ParameterSet):
        x = x.embedding
    x = np.asarray(x, dtype=np.float64)
    _check(adj, x, layers)
    z = x
    acc = x.copy()
    for _ in range(layers):
        z = spmm(adj, z)
        acc += z
    return acc / (layers + 1)


def propagate_backward(adj: SparseMatrix, layers: int, upstream) -> np.ndarray:
    """Gradient w.r.t. X of <upstream, propagate(adj, X, layers)>.

    Propagation is linear in X, so no forward state is needed:
    sum_l (adj^T)^l upstream / (L + 1).
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    _check(adj, upstream, layers)
    return propagate(adj.T, upstream, layers)


@dataclass(frozen=True)
class ViewEmbeddings:
    main: np.ndarray
    causal: np.ndarray
    spurious: np.ndarray


@dataclass(frozen=True)
class ViewAdjacency:
    main: SparseMatrix
    causal: SparseMatrix
    spurious: SparseMatrix
    spurious_degree: np.ndarray

    @classmethod
    def from_graphs(cls, g: BipartiteGraph, g_c: BipartiteGraph, g_s: BipartiteGraph) -> "ViewAdjacency":
        for other in (g_c, g_s):
            if (other.num_users, other.num_items) != (g.num_users, g.num_items):
                raise ShapeError("graph views must share the node index space")
        return cls(normalize_adjacency(g), normalize_adjacency(g_c), normalize_adjacency(g_s), g_s.degrees())


def encode_views(g, g_c, g_s, params, layers: int = DEFAULT_LAYERS) -> ViewEmbeddings:
    """Main, causal and spurious embeddings from one shared table.

    Accepts graphs or a prebuilt ``ViewAdjacency`` as ``g`` (``g_c``/``g_s`` then ignored).
    Each view is normalized with its own degrees.
    """
    adj = g if isinstance(g, ViewAdjacency) else ViewAdjacency.from_graphs(g, g_c, g_s)
    x = params.embedding if isinstance(params, ParameterSet) else params
    return ViewEmbeddings(
        main=propagate(adj.main, x, layers),
        causal=propagate(adj.causal, x, layers),
        spurious=propagate(adj.spurious, x, layers),
    )


def export_embeddings(h: np.ndarray, path, index=None) -> None:
    """TSV: node id then one column per dimension."""
    with open(path, "w", encoding="utf-8") as fh:
        for node, row in enumerate(h):
            if index is not None:
                kind, raw = index.node_id(node)
                name = f"{kind[0]}:{raw}"
            else:
                name = str(node)
            fh.write(name + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
