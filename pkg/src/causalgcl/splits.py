"""Out-of-distribution train/test partitions: temporal, popularity, exposure."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import SplitError
from .graph import Interaction, frac_count, id_key, ingest_interactions, write_interactions_tsv

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitSpec:
    kind: str
    train_frac: float = 0.6
    test_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("temporal", "popularity", "exposure"):
            raise SplitError(f"unknown split kind {self.kind!r}")
        if not (0 < self.train_frac < 1 and 0 < self.test_frac < 1):
            raise SplitError("train_frac and test_frac must lie in (0, 1)")
        if self.train_frac + self.test_frac > 1 + 1e-12:
            raise SplitError("train_frac + test_frac must not exceed 1")


@dataclass
class DataSplit:
    train: list[Interaction]
    test: list[Interaction]
    held_out: list[Interaction] = field(default_factory=list)
    # exposure only: raw ids in test that never occur in train
    coverage: dict = field(default_factory=dict)
    cap: int | None = None


def _row_key(x: Interaction):
    return (x.timestamp, id_key(x.user), id_key(x.item))


def temporal_split(xs: Sequence[Interaction], train_frac: float = 0.6, test_frac: float = 0.2) -> DataSplit:
    """Earliest ``train_frac`` to train, latest ``test_frac`` to test, middle held out.

    Rows are ordered by (timestamp, user, item) so equal timestamps at a
    boundary resolve deterministically.
    """
    n = len(xs)
    if n < 5:
        raise SplitError(f"temporal split needs at least 5 interactions, got {n}")
    rows = sorted(xs, key=_row_key)
    n_train = frac_count(train_frac, n, "floor")
    n_test = frac_count(test_frac, n, "ceil")
    if n_train + n_test > n:
        raise SplitError("train and test fractions overlap")
    return DataSplit(train=rows[:n_train], test=rows[n - n_test:], held_out=rows[n_train:n - n_test])


def popularity_cap(counts: Sequence[int], target: int) -> int:
    """Smallest per-item cap c with sum(min(n_i, c)) >= target."""
    counts = np.asarray(counts, dtype=np.int64)
    if target > counts.sum():
        raise SplitError(f"test target {target} exceeds {counts.sum()} interactions")
    lo, hi = 0, int(counts.max(initial=0))
    while lo < hi:
        mid = (lo + hi) // 2
        if np.minimum(counts, mid).sum() >= target:
            hi = mid
        else:
            lo = mid + 1
    return lo


def popularity_split(xs: Sequence[Interaction], test_frac: float = 0.2, seed: int = 0) -> DataSplit:
    """Test set with near-uniform item popularity.

    Finds the cap ``c`` (see ``popularity_cap``) for ``target = ceil(test_frac * n)``,
    takes ``min(n_i, c - 1)`` interactions from every item, then tops up to exactly
    ``target`` with one more interaction from randomly chosen items that still have
    rows left. Every item contributes at most ``c`` test rows.
    """
    n = len(xs)
    if test_frac <= 0 or test_frac * n > n:
        raise SplitError(f"test_frac {test_frac} is outside (0, 1]")
    by_item: dict = {}
    for k, x in enumerate(xs):
        by_item.setdefault(x.item, []).append(k)
    if len(by_item) < 2:
        raise SplitError("popularity split needs at least 2 items")
    items = sorted(by_item, key=id_key)
    counts = [len(by_item[i]) for i in items]
    target = frac_count(test_frac, n, "ceil")
    cap = popularity_cap(counts, target)
    rng = np.random.default_rng(seed)

    # each item's rows in a seeded random order; test takes a prefix
    orders = {i: rng.permutation(by_item[i]) for i in items}
    take = {i: min(len(by_item[i]), cap - 1) for i in items}
    short = target - sum(take.values())
    eligible = [i for i in items if len(by_item[i]) >= cap]
    if short > 0:
        chosen = rng.choice(len(eligible), size=short, replace=False)
        for k in sorted(chosen.tolist()):
            take[eligible[k]] += 1
    test_idx = set()
    for i in items:
        test_idx.update(orders[i][: take[i]].tolist())
    train = [x for k, x in enumerate(xs) if k not in test_idx]
    test = [x for k, x in enumerate(xs) if k in test_idx]
    return DataSplit(train=train, test=test, held_out=[], cap=cap)


def exposure_split(train_path, test_path, format: str = "tsv", header: bool = False) -> DataSplit:
    """Load a system-logged train file and a randomly exposed test file as-is."""
    train = ingest_interactions(train_path, format=format, header=header)
    test = ingest_interactions(test_path, format=format, header=header)
    train_users = {x.user for x in train}
    train_items = {x.item for x in train}
    train_pairs = {(x.user, x.item) for x in train}
    overlap = sorted({(x.user, x.item) for x in test} & train_pairs, key=lambda p: (id_key(p[0]), id_key(p[1])))
    if overlap:
        log.warning("%d (user, item) pairs occur in both train and test; kept in both", len(overlap))
    coverage = {
        "cold_users": sorted({x.user for x in test} - train_users, key=id_key),
        "cold_items": sorted({x.item for x in test} - train_items, key=id_key),
        "overlapping_pairs": overlap,
    }
    if coverage["cold_users"] or coverage["cold_items"]:
        log.warning("test has %d users and %d items absent from train (retained)",
                    len(coverage["cold_users"]), len(coverage["cold_items"]))
    return DataSplit(train=train, test=test, held_out=[], coverage=coverage)


def make_split(xs: Sequence[Interaction], spec: SplitSpec) -> DataSplit:
    if spec.kind == "temporal":
        return temporal_split(xs, spec.train_frac, spec.test_frac)
    if spec.kind == "popularity":
        return popularity_split(xs, spec.test_frac, spec.seed)
    raise SplitError("exposure splits are loaded from two files; use exposure_split")


def split_report(split: DataSplit) -> str:
    """Plain-text summary: counts and the per-item test-popularity histogram."""
    lines = [
        f"{'partition':<10} {'rows':>8}",
        f"{'train':<10} {len(split.train):>8}",
        f"{'test':<10} {len(split.test):>8}",
        f"{'held_out':<10} {len(split.held_out):>8}",
    ]
    if split.cap is not None:
        lines.append(f"popularity cap: {split.cap}")
    hist = Counter(Counter(x.item for x in split.test).values())
    lines.append("")
    lines.append(f"{'test rows/item':<15} {'items':>8}")
    for k in sorted(hist):
        lines.append(f"{k:<15} {hist[k]:>8}")
    if split.coverage:
        lines.append("")
        lines.append(f"cold test users: {len(split.coverage.get('cold_users', []))}")
        lines.append(f"cold test items: {len(split.coverage.get('cold_items', []))}")
        for u in split.coverage.get("cold_users", []):
            lines.append(f"  cold user {u}")
        lines.append(f"pairs in both train and test: {len(split.coverage.get('overlapping_pairs', []))}")
    return "\n".join(lines) + "\n"


def write_split(split: DataSplit, outdir) -> dict:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {name: outdir / f"{name}.tsv" for name in ("train", "test", "held_out")}
    write_interactions_tsv(split.train, paths["train"])
    write_interactions_tsv(split.test, paths["test"])
    write_interactions_tsv(split.held_out, paths["held_out"])
    paths["report"] = outdir / "split_report.txt"
    paths["report"].write_text(split_report(split), encoding="utf-8")
    return paths
