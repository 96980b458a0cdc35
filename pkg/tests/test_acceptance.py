"""End-to-end acceptance checks; each prints one PASS/FAIL line in the summary.

Run alone with ``python tests/test_acceptance.py`` or ``pytest tests/test_acceptance.py``.
"""
import contextlib
import itertools
import json
import math
import socket
import sys
import time
import zlib
from pathlib import Path

import httpx
import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import causalgcl.pipeline as pipeline  # noqa: E402
from causalgcl.config import defaults, load_config  # noqa: E402
from causalgcl.contrastive import bpr_loss, cicl_terms  # noqa: E402
from causalgcl.editing import KEEP, REMOVE, AdjudicationDecision, HttpChatBackend, build_views, select_candidates  # noqa: E402,E501
from causalgcl.encoder import ViewEmbeddings  # noqa: E402
from causalgcl.environment import EdgeScores, decompose, kmeans  # noqa: E402
from causalgcl.evaluation import metrics_at_k, rank_items  # noqa: E402
from causalgcl.graph import BipartiteGraph  # noqa: E402
from causalgcl.invariant import grad_variance  # noqa: E402
from causalgcl.numerics import finite_diff_check  # noqa: E402
from causalgcl.pipeline import STAGES, file_hash, read_metrics, run_pipeline, run_stage  # noqa: E402

from conftest import RESULTS, write_synthetic  # noqa: E402
from helpers import gradient_cases  # noqa: E402


@pytest.fixture
def check():
    @contextlib.contextmanager
    def run(name):
        detail = {}
        try:
            yield detail
        except BaseException:
            RESULTS.append(f"FAIL  {name}  {detail.get('msg', '')}".rstrip())
            raise
        RESULTS.append(f"PASS  {name}  {detail.get('msg', '')}".rstrip())
    return run


def test_hand_derived_gradients_match_finite_differences(check):
    with check("gradients match central differences") as d:
        start = time.perf_counter()
        worst: dict[str, float] = {}
        for seed in range(20):
            for name, fn, params, grad in gradient_cases(seed):
                assert params.num_nodes <= 20 and params.dim <= 8
                worst[name] = max(worst.get(name, 0.0), finite_diff_check(fn, params, grad))
        elapsed = time.perf_counter() - start
        d["msg"] = f"max rel err {max(worst.values()):.2e} over 20 instances x {len(worst)} losses, {elapsed:.1f}s"
        assert set(worst) == {"bpr", "cicl", "cicl+bpr", "score", "risk", "stage1"}
        assert max(worst.values()) < 1e-4, worst
        assert elapsed < 30


def test_decomposition_is_lossless(check):
    with check("invariant/variant split is a partition") as d:
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 60))
            pairs = np.column_stack([rng.integers(0, 10, n), np.arange(n)])
            # coarse values force plenty of ties
            values = rng.integers(0, 4, n) / 4 if rng.random() < 0.5 else rng.random(n)
            tau = float(rng.uniform(1e-3, 1.0))
            dec = decompose(None, EdgeScores(pairs, values), tau)
            edges = {(int(u), int(i)) for u, i in pairs}
            assert dec.invariant_edges | dec.variant_edges == edges
            assert not dec.invariant_edges & dec.variant_edges
            assert len(dec.invariant_edges) == math.ceil(round(tau * n, 9))
        d["msg"] = "1000 instances"


def oracle_metrics(scores, relevant, k):
    """Brute force: rank by sorting, best DCG by trying every placement of the relevant items."""
    n = len(scores)
    ranking = sorted(range(n), key=lambda i: (-scores[i], i))
    gains = [1 / math.log2(r + 2) for r in range(n)]
    dcg = sum(gains[r] for r in range(min(k, n)) if ranking[r] in relevant)
    best = max(sum(gains[r] for r in pos if r < k) for pos in itertools.combinations(range(n), len(relevant)))
    hits = sum(1 for r in range(min(k, n)) if ranking[r] in relevant)
    return dcg / best, hits / k, hits / len(relevant)


def test_metrics_match_brute_force(check):
    with check("ranking metrics match brute force") as d:
        rng = np.random.default_rng(1)
        worst = 0.0
        for t in range(200):
            n = int(rng.integers(1, 13))
            n_rel = int(rng.integers(1, min(5, n) + 1))
            relevant = set(rng.choice(n, n_rel, replace=False).tolist())
            k = (1, 3, 10)[t % 3]
            scores = rng.integers(0, 5, n).astype(float)
            h = np.vstack([[1.0, 0.0], np.column_stack([scores, np.zeros(n)])])
            m = metrics_at_k(rank_items(0, h, 1), relevant, k)
            ref = oracle_metrics(scores.tolist(), relevant, k)
            worst = max(worst, *(abs(a - b) for a, b in zip((m.ndcg, m.precision, m.recall), ref)))
        d["msg"] = f"200 instances, max abs diff {worst:.1e}"
        assert worst < 1e-9


def test_kmeans_monotone_and_recovers_blobs(check):
    with check("k-means objective monotone, blobs recovered") as d:
        rng = np.random.default_rng(2)
        for run in range(50):
            pts = rng.standard_normal((int(rng.integers(5, 80)), int(rng.integers(1, 6))))
            h = kmeans(pts, int(rng.integers(1, 6)), seed=run).history
            assert all(b <= a for a, b in zip(h, h[1:])), h
        for seed in range(5):
            r = np.random.default_rng(100 + seed)
            pts = np.vstack([r.standard_normal((40, 2)), r.standard_normal((40, 2)) + [10.0, 0.0]])
            labels = kmeans(pts, 2, seed=seed).labels
            assert len(set(labels[:40])) == 1 and len(set(labels[40:])) == 1 and labels[0] != labels[40]
        d["msg"] = "50 monotone runs, 5/5 blob seeds exact"


def test_closed_form_losses(check):
    with check("closed-form loss values") as d:
        h = np.array([[0.3, -0.2], [1.0, 1.0], [1.0, 1.0]])
        assert abs(bpr_loss([(0, 0, 1)], h, 1)[0] - math.log(2)) < 1e-9
        for b in (2, 8, 32):
            x = np.tile([0.5, -1.0, 2.0], (b, 1))
            views = ViewEmbeddings(x, x.copy(), x.copy())
            per_anchor = cicl_terms(views, np.arange(b), 0.2)[0] / b
            assert abs(per_anchor - math.log(b + 1)) < 1e-9
            no_self = cicl_terms(views, np.arange(b), 0.2, self_negative=np.zeros(b, bool))[0] / b
            assert abs(no_self - math.log(b)) < 1e-9
        d["msg"] = "BPR ln 2; contrastive ln(B+1) and ln B for B = 2, 8, 32"


def test_gradient_variance_penalty(check):
    with check("gradient-variance penalty values") as d:
        g = np.random.default_rng(3).standard_normal(7)
        assert grad_variance([g, g.copy(), g.copy()]) < 1e-12
        assert abs(grad_variance([[1.0, 0.0], [0.0, 1.0]]) - 0.5) < 1e-12
        d["msg"] = "duplicates 0, two-env example 0.5"


def test_editing_invariants(check):
    with check("graph editing invariants") as d:
        rng = np.random.default_rng(4)
        for t in range(500):
            nu, ni = int(rng.integers(1, 7)), int(rng.integers(1, 7))
            cells = rng.random(nu * ni) < 0.5
            cells[int(rng.integers(nu * ni))] = True
            flat = np.flatnonzero(cells)
            g = BipartiteGraph(nu, ni, np.column_stack([flat // ni, flat % ni, rng.integers(0, 9, flat.size)]))
            cand = select_candidates(EdgeScores(g.edges[:, :2], rng.random(g.num_edges)),
                                     int(rng.integers(1, g.num_edges + 1)))
            all_keep = t % 5 == 0
            decisions = [AdjudicationDecision(e, KEEP if all_keep or rng.random() < 0.5 else REMOVE, "", "mock", kind)
                         for kind, side in (("remove", cand.spurious), ("verify", cand.causal)) for e in side]
            v = build_views(g, decisions, cand)
            assert v.removed <= set(cand.spurious)
            assert not v.removed & v.causal.pair_set()
            assert v.spurious.pair_set() == v.removed
            if all_keep:
                assert v.causal.pair_set() == g.pair_set()
                assert np.array_equal(v.causal.edges, g.edges)
        d["msg"] = "500 decision patterns"


def test_full_method_beats_backbone_on_shifted_synthetic_data(check, tmp_path):
    with check("synthetic OOD: full method beats BPR backbone") as d:
        start = time.perf_counter()
        wins, rows = 0, []
        for seed in range(5):
            cfg = load_config(write_synthetic(tmp_path / f"seed{seed}", seed=seed, users=60, items=40))
            assert cfg["train"]["backbone"] and cfg["edit"]["backend"] == "mock"
            run_pipeline(cfg)
            full = read_metrics(cfg.output / "evaluate" / "metrics.csv")["ndcg"]
            base = read_metrics(cfg.output / "evaluate" / "backbone_metrics.csv")["ndcg"]
            wins += full > base
            rows.append(f"{full:.3f}/{base:.3f}")
        elapsed = time.perf_counter() - start
        d["msg"] = f"{wins}/5 wins (NDCG@10 full/backbone {' '.join(rows)}), {elapsed:.1f}s"
        assert wins >= 4
        assert elapsed < 600


def hashes(root: Path):
    return {p.relative_to(root).as_posix(): file_hash(p) for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "decision_cache.jsonl"}


def test_every_stage_rerun_is_bit_identical(check, tmp_path):
    with check("stage reruns are bit-identical") as d:
        cfg = load_config(write_synthetic(tmp_path / "data", seed=3, stage1={"epochs": 5}, train={"epochs": 5}))
        run_pipeline(cfg)
        reference = hashes(cfg.output)
        for stage in STAGES:
            before = {k: v for k, v in reference.items() if k.startswith(stage + "/")}
            run_stage(cfg, stage)
            after = {k: v for k, v in hashes(cfg.output).items() if k.startswith(stage + "/")}
            assert after == before, stage
        other = cfg.override("run", output=tmp_path / "fresh")
        run_pipeline(other)
        assert hashes(other.output) == reference
        d["msg"] = f"{len(reference)} files over {len(STAGES)} stages, same dir and fresh dir"


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_adjudicator_failures_never_abort(check, tmp_path, monkeypatch, caplog):
    with check("adjudicator failures fall back to KEEP") as d:
        calls = []

        def handler(req):
            calls.append(1)
            prompt = json.loads(req.content)["messages"][0]["content"]
            mode = zlib.crc32(prompt.encode()) % 4
            if mode == 0:
                return httpx.Response(200, json={"choices": [{"message": {"content": "REMOVE"}}]})
            if mode == 1:
                return httpx.Response(200, text="{not json")
            if mode == 2:
                return httpx.Response(503)
            raise httpx.ConnectError("connection refused")

        class Scripted(HttpChatBackend):
            def __init__(self, *a, **kw):
                super().__init__(*a, transport=httpx.MockTransport(handler), **kw)

        monkeypatch.setattr(pipeline, "HttpChatBackend", Scripted)
        path = write_synthetic(tmp_path / "data", stage1={"epochs": 3}, train={"epochs": 3},
                               edit={"backend": "http", "base_url": "http://llm.test/v1", "retries": 1,
                                     "backoff": 0.0})
        cfg = load_config(path)
        caplog.set_level("WARNING", logger="causalgcl")
        run_pipeline(cfg)
        assert "fallback KEEP for edge" in caplog.text
        out = cfg.output / "adjudicate"
        rows = [r.split("\t") for r in (out / "decisions.tsv").read_text().splitlines()[1:]]
        fallbacks = sum(r[5] == "fallback" for r in rows)
        assert fallbacks > 0 and all(r[4] == KEEP for r in rows if r[5] == "fallback")
        assert f"fallback verdicts: {fallbacks}\n" in (out / "summary.txt").read_text()
        assert (cfg.output / "evaluate" / "metrics.csv").is_file()
        first_calls = len(calls)
        before = hashes(out)

        calls.clear()
        run_stage(cfg, "adjudicate")
        assert calls == [] and hashes(out) == before

        # a real socket with nothing listening
        dead = cfg.override("edit", base_url=f"http://127.0.0.1:{free_port()}/v1", retries=0, timeout=2.0,
                            cache=tmp_path / "dead_cache.jsonl")
        dead = dead.override("run", output=tmp_path / "dead")
        monkeypatch.setattr(pipeline, "HttpChatBackend", HttpChatBackend)
        run_pipeline(dead)
        text = (dead.output / "adjudicate" / "summary.txt").read_text()
        n_req = len((dead.output / "adjudicate" / "decisions.tsv").read_text().splitlines()) - 1
        assert f"fallback verdicts: {n_req}\n" in text
        d["msg"] = (f"{fallbacks}/{len(rows)} scripted fallbacks after {first_calls} calls, warm rerun 0 calls, "
                    f"closed port {n_req}/{n_req} fallbacks")


def test_config_defaults_snapshot(check):
    with check("config defaults") as d:
        v = defaults()
        snapshot = {
            "train.epochs": v["train"]["epochs"], "train.batch_size": v["train"]["batch_size"],
            "train.lr": v["train"]["lr"], "stage1.lr": v["stage1"]["lr"], "model.layers": v["model"]["layers"],
            "train.lam": v["train"]["lam"], "eval.k": v["eval"]["k"],
        }
        assert snapshot == {"train.epochs": 100, "train.batch_size": 256, "train.lr": 1e-4, "stage1.lr": 1e-4,
                            "model.layers": 3, "train.lam": 0.05, "eval.k": 10}
        d["msg"] = ", ".join(f"{k}={x}" for k, x in snapshot.items())


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
