"""Numeric building blocks: sparse matrices, the trainable parameter set,
checkpoint I/O and a central finite-difference gradient checker.

Dense matrices are plain ``float64`` numpy arrays (row-major).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels
from .errors import GradientCheckError, ShapeError

ZERO_NORM = 1e-12


class SparseMatrix:
    """Row-major sorted (CSR) sparse matrix with unique, non-zero entries."""

    def __init__(self, shape, indptr, indices, data):
        self.shape = (int(shape[0]), int(shape[1]))
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self._transpose = None

    @classmethod
    def from_entries(cls, shape, rows, cols, weights) -> "SparseMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float64)
        if rows.size:
            if rows.min() < 0 or rows.max() >= shape[0] or cols.min() < 0 or cols.max() >= shape[1]:
                raise ShapeError(f"entry index out of bounds for shape {shape}")
            if not np.all(np.isfinite(weights)):
                raise ValueError("sparse weights must be finite")
        order = np.lexsort((cols, rows))
        rows, cols, weights = rows[order], cols[order], weights[order]
        if rows.size > 1:
            dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if dup.any():
                k = int(np.flatnonzero(dup)[0])
                raise ValueError(f"duplicate entry ({rows[k]}, {cols[k]})")
        keep = weights != 0.0
        rows, cols, weights = rows[keep], cols[keep], weights[keep]
        indptr = np.zeros(shape[0] + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        return cls(shape, np.cumsum(indptr), cols, weights)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        idx = np.arange(n)
        return cls.from_entries((n, n), idx, idx, np.ones(n))

    @property
    def nnz(self) -> int:
        return int(self.data.size)

    def rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.shape[0], dtype=np.int64), np.diff(self.indptr))

    def entries(self):
        """Iterate ``(row, col, weight)`` in sorted row-major order."""
        for r, c, w in zip(self.rows().tolist(), self.indices.tolist(), self.data.tolist()):
            yield r, c, w

    @property
    def T(self) -> "SparseMatrix":
        if self._transpose is None:
            self._transpose = SparseMatrix.from_entries(
                (self.shape[1], self.shape[0]), self.indices, self.rows(), self.data
            )
        return self._transpose

    def toarray(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.rows(), self.indices] = self.data
        return out


def spmm(a: SparseMatrix, b: np.ndarray) -> np.ndarray:
    """Sparse x dense product, accumulated in sorted entry order."""
    b = np.ascontiguousarray(b, dtype=np.float64)
    if b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"spmm shape mismatch: {a.shape} x {b.shape}")
    return kernels.spmm_csr(a.indptr, a.indices, a.data, b)


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < ZERO_NORM or nv < ZERO_NORM:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# Flat ordering of ParameterSet blocks; also the checkpoint block order.
PARAM_BLOCKS = ("embedding", "mask_embedding", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")


@dataclass
class ParameterSet:
    """All trainable values.

    ``embedding`` is the main ID-embedding table X used by the recommendation
    encoder; ``mask_embedding`` and the ``mlp_*`` blocks form the edge scorer
    (mask GNN + MLP) trained in the invariant stage. The flat view
    concatenates the blocks in ``PARAM_BLOCKS`` order, each row-major.
    """

    embedding: np.ndarray
    mask_embedding: np.ndarray
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, num_nodes: int, dim: int, hidden: int | None = None, seed: int = 0, **meta):
        hidden = dim if hidden is None else hidden
        rng = np.random.default_rng(seed)
        std1 = 0.1 / math.sqrt(2 * dim)
        std2 = 0.1 / math.sqrt(hidden)
        return cls(
            embedding=rng.normal(0.0, 0.1, (num_nodes, dim)),
            mask_embedding=rng.normal(0.0, 0.1, (num_nodes, dim)),
            mlp_w1=rng.normal(0.0, std1, (2 * dim, hidden)),
            mlp_b1=np.zeros(hidden),
            mlp_w2=rng.normal(0.0, std2, hidden),
            mlp_b2=np.zeros(1),
            meta={"d": dim, "hidden": hidden, "seed": seed, **meta},
        )

    @property
    def dim(self) -> int:
        return int(self.embedding.shape[1])

    @property
    def num_nodes(self) -> int:
        return int(self.embedding.shape[0])

    def blocks(self):
        return [(name, getattr(self, name)) for name in PARAM_BLOCKS]

    def shapes(self):
        return {name: arr.shape for name, arr in self.blocks()}

    def offsets(self) -> dict[str, slice]:
        out, pos = {}, 0
        for name, arr in self.blocks():
            out[name] = slice(pos, pos + arr.size)
            pos += arr.size
        return out

    @property
    def size(self) -> int:
        return sum(arr.size for _, arr in self.blocks())

    def flatten(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, arr in self.blocks()])

    def unflatten(self, flat) -> "ParameterSet":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise ShapeError(f"flat vector has {flat.size} values, expected {self.size}")
        kw = {name: flat[sl].reshape(getattr(self, name).shape).copy() for name, sl in self.offsets().items()}
        return ParameterSet(**kw, meta=dict(self.meta))

    def zeros_like_flat(self) -> np.ndarray:
        return np.zeros(self.size)

    def copy(self) -> "ParameterSet":
        return self.unflatten(self.flatten())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(arr)) for _, arr in self.blocks())


def block_gradient(params: ParameterSet, **blocks) -> np.ndarray:
    """Build a flat gradient from per-block arrays; missing blocks are zero."""
    flat = params.zeros_like_flat()
    offs = params.offsets()
    for name, g in blocks.items():
        flat[offs[name]] = np.asarray(g, dtype=np.float64).ravel()
    return flat


def finite_diff_check(loss: Callable[[ParameterSet], float], params: ParameterSet, grad, eps: float = 1e-5,
                      coords=None) -> float:
    """Max relative error between ``grad`` and central differences of ``loss``.

    Per coordinate the error is ``|a - f| / max(1e-8, |a| + |f|)``.
    ``coords`` restricts the check to a subset of flat indices.
    """
    base = params.flatten()
    grad = np.asarray(grad, dtype=np.float64)
    if grad.size != base.size:
        raise ShapeError(f"gradient has {grad.size} entries, parameters have {base.size}")
    idx = range(base.size) if coords is None else coords
    worst = 0.0
    for k in idx:
        plus = base.copy()
        plus[k] += eps
        minus = base.copy()
        minus[k] -= eps
        lp = loss(params.unflatten(plus))
        lm = loss(params.unflatten(minus))
        if not (math.isfinite(lp) and math.isfinite(lm)):
            raise GradientCheckError(f"non-finite loss at coordinate {k}", coordinate=k)
        fd = (lp - lm) / (2 * eps)
        a = grad[k]
        err = abs(a - fd) / max(1e-8, abs(a) + abs(fd))
        worst = max(worst, err)
    return worst


CHECKPOINT_MAGIC = "CAUSALGCL-PARAMS"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ParameterSet, path) -> None:
    """Versioned text header describing shapes, then little-endian float64 values."""
    lines = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}"]
    for key in sorted(params.meta):
        lines.append(f"meta {key} {params.meta[key]}")
    for name, arr in params.blocks():
        lines.append(f"block {name} " + " ".join(str(s) for s in arr.shape))
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    flat = params.flatten()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(flat.astype("<f8").tobytes())


def load_checkpoint(path) -> ParameterSet:
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if cut < 0:
        raise ValueError(f"{path}: missing checkpoint header terminator")
    header = raw[:cut].decode("ascii").splitlines()
    body = raw[cut + len(marker):]
    if header[0] != f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}":
        raise ValueError(f"{path}: unsupported checkpoint header {header[0]!r}")
    meta, shapes = {}, {}
    for line in header[1:]:
        parts = line.split(" ")
        if parts[0] == "meta":
            meta[parts[1]] = _parse_meta(" ".join(parts[2:]))
        elif parts[0] == "block":
            shapes[parts[1]] = tuple(int(s) for s in parts[2:])
    if tuple(shapes) != PARAM_BLOCKS:
        raise ValueError(f"{path}: unexpected block layout {tuple(shapes)}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    pos, kw = 0, {}
    for name in PARAM_BLOCKS:
        n = int(np.prod(shapes[name])) if shapes[name] else 1
        kw[name] = flat[pos:pos + n].reshape(shapes[name]).copy()
        pos += n
    if pos != flat.size:
        raise ValueError(f"{path}: payload has {flat.size} values, header describes {pos}")
    return ParameterSet(**kw, meta=meta)


def _parse_meta(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text
