"""Stage runner: split -> scores -> adjudicate -> train -> evaluate.

Each stage reads files written by earlier stages and writes its own into
``<output>/<stage>/`` together with ``manifest.json``. The manifest records
a key derived from the stage's config sections, the seed and the content
hash of every input file, plus the hash of every output. A stage whose key
and outputs still match is skipped on the next run unless forced.
"""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from .config import STAGE_SECTIONS, PipelineConfig, check_paths
from .contrastive import train, train_backbone
from .editing import (DecisionCache, HttpChatBackend, MockOracle, adjudicate, build_views, default_edit_k,
                      logical_clock, make_requests, propose_additions, select_candidates, user_histories,
                      write_decisions)
from .environment import EdgeScores, decompose
from .errors import CausalGCLError, ConfigError, StageError
from .evaluation import evaluate, export_projection
from .encoder import propagate
from .graph import (BipartiteGraph, Interaction, build_graph, ingest_interactions, load_catalog,
                    normalize_adjacency, write_interactions_tsv)
from .invariant import infer_environment_labels, train_scores
from .numerics import load_checkpoint, save_checkpoint
from .splits import exposure_split, make_split, write_split

log = logging.getLogger(__name__)

STAGES = ("split", "scores", "adjudicate", "train", "evaluate")
MANIFEST = "manifest.json"


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def stage_dir(cfg: PipelineConfig, stage: str) -> Path:
    return cfg.output / stage


def _load_train_graph(cfg):
    rows = ingest_interactions(stage_dir(cfg, "split") / "train.tsv", "tsv")
    return build_graph(rows)


def _edges_from_file(g: BipartiteGraph, path):
    """Rows of an interaction TSV mapped onto ``g``'s index, as (u, i, ts)."""
    out = []
    for x in ingest_interactions(path, "tsv"):
        out.append((g.index.user(x.user), g.index.item(x.item), x.timestamp))
    return out


# ---------------------------------------------------------------- stages

def _inputs_split(cfg):
    d = cfg["data"]
    keys = ("train", "test") if cfg["split"]["kind"] == "exposure" else ("interactions",)
    return {k: Path(d[k]) for k in keys}


def run_split(cfg: PipelineConfig, out: Path) -> list[Path]:
    d = cfg["data"]
    if cfg["split"]["kind"] == "exposure":
        split = exposure_split(d["train"], d["test"], d["format"], d["header"])
    else:
        rows = ingest_interactions(d["interactions"], d["format"], d["header"])
        split = make_split(rows, cfg.split_spec())
    paths = write_split(split, out)
    return [paths[k] for k in ("train", "test", "held_out", "report")]


def _inputs_scores(cfg):
    return {"train": stage_dir(cfg, "split") / "train.tsv"}


def run_scores(cfg: PipelineConfig, out: Path) -> list[Path]:
    g = _load_train_graph(cfg)
    s1 = cfg.stage1_config()
    log_path = out / "stage1_log.csv"
    params, scores, _ = train_scores(g, s1, log_path=log_path)
    score_path, env_path, ckpt = out / "scores.tsv", out / "environments.tsv", out / "stage1.ckpt"
    scores.to_tsv(score_path, g.index)
    dec = decompose(g, scores, s1.tau)
    labels = infer_environment_labels(g, params, dec, s1.num_envs, s1.layers, s1.seed)
    with open(env_path, "w", encoding="utf-8") as fh:
        for (u, i, _), var, e in zip(g.edges.tolist(), ~dec.invariant, labels.tolist()):
            if var:
                fh.write(f"{g.index.users[u]}\t{g.index.items[i]}\t{e}\n")
    save_checkpoint(params, ckpt)
    return [score_path, env_path, log_path, ckpt]


def _inputs_adjudicate(cfg):
    d = cfg["data"]
    ins = {"train": stage_dir(cfg, "split") / "train.tsv", "scores": stage_dir(cfg, "scores") / "scores.tsv",
           "stage1": stage_dir(cfg, "scores") / "stage1.ckpt"}
    for key in ("catalog", "labels", "factors"):
        if d[key] is not None:
            ins[key] = Path(d[key])
    return ins


def make_backend(cfg: PipelineConfig):
    e = cfg["edit"]
    if e["backend"] == "mock":
        if cfg["data"]["labels"] is None:
            raise ConfigError("missing required field [data] labels (needed by the mock backend)")
        return MockOracle.from_label_file(cfg["data"]["labels"], cfg["data"]["factors"])
    return HttpChatBackend(e["base_url"], e["model"], e["api_key_env"], timeout=e["timeout"], retries=e["retries"],
                           backoff=e["backoff"])


def run_adjudicate(cfg: PipelineConfig, out: Path) -> list[Path]:
    e = cfg["edit"]
    g = _load_train_graph(cfg)
    scores = EdgeScores.from_tsv(stage_dir(cfg, "scores") / "scores.tsv", g.index)
    catalog = load_catalog(cfg["data"]["catalog"]) if cfg["data"]["catalog"] is not None else None
    k = e["k"] or default_edit_k(g.num_edges, e["frac"])
    cand = select_candidates(scores, k)
    sd = scores.as_dict()
    hist = user_histories(g)
    requests = (make_requests(g, cand.spurious, sd, "remove", catalog, hist)
                + make_requests(g, cand.causal, sd, "verify", catalog, hist))
    cache_path = Path(e["cache"]) if e["cache"] is not None else cfg.output / "decision_cache.jsonl"
    cache = DecisionCache(cache_path, logical_clock() if cfg["run"]["deterministic"] else None)
    backend = make_backend(cfg)
    try:
        decisions, stats = adjudicate(requests, backend, cache, e["max_workers"])
        additions, add_decisions = set(), []
        if e["propose_additions"]:
            params = load_checkpoint(stage_dir(cfg, "scores") / "stage1.ckpt")
            additions, add_decisions = propose_additions(g, params, e["per_user_limit"], backend, cache,
                                                         enabled=True, catalog=catalog,
                                                         max_workers=e["max_workers"])
    finally:
        if hasattr(backend, "close"):
            backend.close()
    log.info("adjudication: %d requests, %d backend calls, %d cache hits, %d fallbacks", stats.requests,
             stats.backend_calls, stats.cache_hits, stats.fallbacks)
    views = build_views(g, decisions, cand, additions)
    paths = {name: out / f"{name}.tsv" for name in ("decisions", "causal_view", "spurious_view", "additions")}
    write_decisions(decisions, requests, paths["decisions"])

    def dump(graph, path):
        write_interactions_tsv([Interaction(g.index.users[u], g.index.items[i], 1.0, int(t))
                                for u, i, t in graph.edges.tolist()], path)

    dump(views.causal, paths["causal_view"])
    dump(views.spurious, paths["spurious_view"])
    with open(paths["additions"], "w", encoding="utf-8") as fh:
        for u, i in sorted(views.added):
            fh.write(f"{g.index.users[u]}\t{g.index.items[i]}\n")
    origins = [d.origin for d in decisions + list(add_decisions)]
    summary = out / "summary.txt"
    summary.write_text(
        f"candidates per side: {k}\n"
        f"remove requests: {len(cand.spurious)}\n"
        f"verify requests: {len(cand.causal)}\n"
        f"removed edges: {len(views.removed)}\n"
        f"top-K REMOVE verdicts ignored: {len(views.ignored_top_removals)}\n"
        f"added edges: {len(views.added)}\n"
        f"fallback verdicts: {origins.count('fallback')}\n",
        encoding="utf-8",
    )
    return [paths["decisions"], paths["causal_view"], paths["spurious_view"], paths["additions"], summary]


def _inputs_train(cfg):
    a = stage_dir(cfg, "adjudicate")
    return {"train": stage_dir(cfg, "split") / "train.tsv", "causal_view": a / "causal_view.tsv",
            "spurious_view": a / "spurious_view.tsv"}


def run_train(cfg: PipelineConfig, out: Path) -> list[Path]:
    g = _load_train_graph(cfg)
    a = stage_dir(cfg, "adjudicate")
    g_c = g.with_edges(_edges_from_file(g, a / "causal_view.tsv"))
    g_s = g.with_edges(_edges_from_file(g, a / "spurious_view.tsv"))
    tc = cfg.train_config()
    timed = not cfg["run"]["deterministic"]
    ckpt, log_path = out / "model.ckpt", out / "train_log.csv"
    train(g, (g_c, g_s), tc, log_path=log_path, checkpoint_path=ckpt, record_time=timed)
    written = [ckpt, log_path]
    if cfg["train"]["backbone"]:
        b_ckpt, b_log = out / "backbone.ckpt", out / "backbone_log.csv"
        train_backbone(g, tc, log_path=b_log, checkpoint_path=b_ckpt, record_time=timed)
        written += [b_ckpt, b_log]
    return written


def _inputs_evaluate(cfg):
    t = stage_dir(cfg, "train")
    ins = {"train": stage_dir(cfg, "split") / "train.tsv", "test": stage_dir(cfg, "split") / "test.tsv",
           "model": t / "model.ckpt"}
    if cfg["train"]["backbone"]:
        ins["backbone"] = t / "backbone.ckpt"
    return ins


def map_test_pairs(g: BipartiteGraph, rows):
    """Map test rows onto ``g``; unknown ids and pairs already in train are dropped."""
    pairs, cold, seen = [], 0, 0
    observed = g.pair_set()
    for x in rows:
        try:
            p = (g.index.user(x.user), g.index.item(x.item))
        except KeyError:
            cold += 1
            continue
        if p in observed:
            seen += 1
            continue
        pairs.append(p)
    if cold or seen:
        log.warning("evaluation drops %d test rows with unseen ids and %d already in train", cold, seen)
    return sorted(set(pairs))


def run_evaluate(cfg: PipelineConfig, out: Path) -> list[Path]:
    g = _load_train_graph(cfg)
    test = map_test_pairs(g, ingest_interactions(stage_dir(cfg, "split") / "test.tsv", "tsv"))
    k, layers = cfg["eval"]["k"], cfg["model"]["layers"]
    written = []
    models = [("", stage_dir(cfg, "train") / "model.ckpt")]
    if cfg["train"]["backbone"]:
        models.append(("backbone_", stage_dir(cfg, "train") / "backbone.ckpt"))
    for prefix, ckpt in models:
        params = load_checkpoint(ckpt)
        report = evaluate(params, g, test, k, layers)
        csv_path, per_user, table = (out / f"{prefix}metrics.csv", out / f"{prefix}per_user.csv",
                                     out / f"{prefix}metrics.txt")
        report.to_csv(csv_path, per_user)
        table.write_text(report.table(), encoding="utf-8")
        written += [csv_path, per_user, table]
        if not prefix and cfg["eval"]["projection"]:
            h = propagate(normalize_adjacency(g), params.embedding, layers)
            in_test = {i for _, i in test}
            labels = ["test" if i in in_test else "train" for i in range(g.num_items)]
            proj = out / "projection.csv"
            export_projection(h[g.num_users:], labels, proj, names=list(g.index.items))
            written.append(proj)
    return written


RUNNERS = {
    "split": (_inputs_split, run_split),
    "scores": (_inputs_scores, run_scores),
    "adjudicate": (_inputs_adjudicate, run_adjudicate),
    "train": (_inputs_train, run_train),
    "evaluate": (_inputs_evaluate, run_evaluate),
}


# ---------------------------------------------------------------- manifests

def stage_key(cfg: PipelineConfig, stage: str, inputs: dict) -> tuple[str, dict]:
    hashes = {name: file_hash(p) for name, p in sorted(inputs.items())}
    payload = {"stage": stage, "config": cfg.section_hash(STAGE_SECTIONS[stage]), "inputs": hashes,
               "deterministic": cfg["run"]["deterministic"]}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest(), hashes


def read_manifest(cfg: PipelineConfig, stage: str):
    path = stage_dir(cfg, stage) / MANIFEST
    if not path.is_file():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def is_fresh(cfg: PipelineConfig, stage: str) -> bool:
    m = read_manifest(cfg, stage)
    if m is None:
        return False
    inputs_fn, _ = RUNNERS[stage]
    inputs = inputs_fn(cfg)
    if not all(p.is_file() for p in inputs.values()):
        return False
    key, _ = stage_key(cfg, stage, inputs)
    if m.get("key") != key:
        return False
    out = stage_dir(cfg, stage)
    return all((out / name).is_file() and file_hash(out / name) == h for name, h in m["outputs"].items())


def run_stage(cfg: PipelineConfig, stage: str) -> dict:
    """Run one stage unconditionally; returns its manifest."""
    if stage not in RUNNERS:
        raise ConfigError(f"unknown stage {stage!r}; choose from {', '.join(STAGES + ('all',))}")
    inputs_fn, runner = RUNNERS[stage]
    out = stage_dir(cfg, stage)
    inputs = inputs_fn(cfg)
    missing = [str(p) for p in inputs.values() if not p.is_file()]
    if missing:
        raise StageError(stage, "missing inputs; run the earlier stages first", missing)
    key, in_hashes = stage_key(cfg, stage, inputs)
    out.mkdir(parents=True, exist_ok=True)
    try:
        written = runner(cfg, out)
    except CausalGCLError as exc:
        if isinstance(exc, StageError):
            raise
        raise StageError(stage, str(exc), sorted(str(p) for p in out.iterdir())) from exc
    except (OSError, ValueError, KeyError) as exc:
        raise StageError(stage, f"{type(exc).__name__}: {exc}", sorted(str(p) for p in out.iterdir())) from exc
    manifest = {
        "stage": stage,
        "key": key,
        "config_hash": cfg.section_hash(STAGE_SECTIONS[stage]),
        "seed": cfg.seed,
        "inputs": in_hashes,
        "outputs": {p.name: file_hash(p) for p in written},
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("stage %s done: %s", stage, ", ".join(p.name for p in written))
    return manifest


def run_pipeline(cfg: PipelineConfig, stages=STAGES, force: bool = False) -> dict:
    """Run ``stages`` in order, skipping up-to-date ones unless ``force``."""
    check_paths(cfg)
    cfg.output.mkdir(parents=True, exist_ok=True)
    done = {}
    for stage in stages:
        # upstream changes alter input hashes, so freshness cascades through the keys
        if not force and is_fresh(cfg, stage):
            log.info("stage %s up to date; skipped", stage)
            done[stage] = read_manifest(cfg, stage)
            continue
        done[stage] = run_stage(cfg, stage)
    return done


def read_metrics(path) -> dict:
    """The single data row of a metrics CSV as floats (``k`` and counts as ints)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head, row = lines[0].split(","), lines[1].split(",")
    out = {}
    for key, val in zip(head, row):
        out[key] = int(val) if key in ("k", "users", "skipped") else float(np.float64(val))
    return out
