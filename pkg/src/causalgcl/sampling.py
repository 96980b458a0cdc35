"""Uniform negative sampling over items a user has not interacted with."""
from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)


def sample_negatives(users, user_items: list[set[int]], num_items: int, rng) -> np.ndarray:
    """One negative item per entry of ``users``; -1 where the user has no free item.

    Rejection sampling from ``rng`` (a ``numpy.random.Generator`` or an int seed),
    so the sequence is reproducible for a fixed seed.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    users = np.asarray(users, dtype=np.int64)
    out = np.full(users.size, -1, dtype=np.int64)
    full = np.array([len(user_items[u]) >= num_items for u in users.tolist()], dtype=bool)
    if full.any():
        log.warning("%d users interacted with every item; their triples are skipped", int(full.sum()))
    todo = np.flatnonzero(~full)
    while todo.size:
        draw = rng.integers(0, num_items, size=todo.size)
        ok = np.array([d not in user_items[u] for u, d in zip(users[todo].tolist(), draw.tolist())], dtype=bool)
        out[todo[ok]] = draw[ok]
        todo = todo[~ok]
    return out


def sample_negative(u: int, user_items: list[set[int]], num_items: int, seed) -> int | None:
    """Single-draw convenience wrapper; ``None`` if ``u`` has interacted with every item."""
    j = int(sample_negatives([u], user_items, num_items, seed)[0])
    return None if j < 0 else j
