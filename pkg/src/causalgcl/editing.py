"""Adjudicated graph editing: candidate edges, prompts, backends, views.

Low-scored candidate edges are sent to an adjudicator (an OpenAI-compatible
chat endpoint or an offline mock oracle) which answers KEEP or REMOVE. Edges
confirmed as spurious are pruned from the causal view and form the spurious
view on their own.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np

from .environment import EdgeScores, score_unobserved
from .graph import BipartiteGraph, frac_count

log = logging.getLogger(__name__)

KEEP, REMOVE, ADD, SKIP = "KEEP", "REMOVE", "ADD", "SKIP"
VERDICTS = {"remove": (KEEP, REMOVE), "verify": (KEEP, REMOVE), "add": (SKIP, ADD)}
HISTORY_LIMIT = 20
NO_HISTORY = "no prior interactions"


@dataclass(frozen=True)
class CandidateSets:
    causal: list  # top-K by score, highest first
    spurious: list  # bottom-K by score, lowest first


def select_candidates(scores: EdgeScores, k: int) -> CandidateSets:
    """Top-K and bottom-K edges by score; ties ordered by (user, item).

    When 2K exceeds the edge count the overlap stays in the bottom set.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    if len(scores) == 0:
        raise ValueError("empty score map")
    p = scores.pairs
    order = np.lexsort((p[:, 1], p[:, 0], scores.values))
    ranked = [(int(p[n, 0]), int(p[n, 1])) for n in order]
    bottom = ranked[:k]
    taken = set(bottom)
    top = [e for e in reversed(ranked[-k:]) if e not in taken]
    return CandidateSets(causal=top, spurious=bottom)


def default_edit_k(num_edges: int, frac: float = 0.05) -> int:
    return max(1, frac_count(frac, num_edges, "ceil"))


def format_score(score: float) -> str:
    return f"{score:.4g}"


def build_prompt(edge, score: float, user_history, catalog=None, kind: str = "remove") -> str:
    """Deterministic adjudication prompt for one (user, item) pair.

    ``edge`` is ``(user_id, item_id)`` in raw ids; ``user_history`` lists the
    user's item ids, most recent first. Titles come from ``catalog`` when present.
    """
    catalog = catalog or {}
    user, item = edge

    def title(i):
        return catalog.get(i) or f"item {i}"

    history = [title(i) for i in user_history if i != item][:HISTORY_LIMIT]
    lines = [f"User {user} has recently interacted with:"]
    lines += [f"- {t}" for t in history] if history else [f"- ({NO_HISTORY})"]
    lines.append(f"Candidate item: {title(item)}")
    lines.append(f"causal score: {format_score(score)}")
    if kind == "remove":
        lines.append("The score is low: this interaction may be a spurious correlation driven by exposure "
                     "or popularity rather than the user's stable preference.")
        lines.append("If it is spurious answer REMOVE, otherwise answer KEEP.")
        lines.append("Answer with exactly one word: KEEP or REMOVE.")
    elif kind == "verify":
        lines.append("The score is high: check whether this interaction reflects the user's stable preference.")
        lines.append("If it does answer KEEP, if it is spurious answer REMOVE.")
        lines.append("Answer with exactly one word: KEEP or REMOVE.")
    elif kind == "add":
        lines.append("The user has not interacted with this item. Would it be a causally consistent link "
                     "given the history above?")
        lines.append("Answer with exactly one word: ADD or SKIP.")
    else:
        raise ValueError(f"unknown prompt kind {kind!r}")
    return "\n".join(lines) + "\n"


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def parse_verdict(text: str, kind: str = "remove") -> str | None:
    """Exact upper-case token scan; ``None`` when neither or both verdict tokens occur."""
    negative, positive = VERDICTS[kind]
    tokens = set(re.findall(r"[A-Za-z]+", text or ""))
    has_neg, has_pos = negative in tokens, positive in tokens
    if has_neg == has_pos:
        return None
    return positive if has_pos else negative


@dataclass(frozen=True)
class AdjudicationRequest:
    user: int  # dense index
    item: int
    raw_user: object
    raw_item: object
    score: float
    prompt: str
    kind: str = "remove"

    @property
    def key(self) -> str:
        return prompt_hash(self.prompt)


@dataclass(frozen=True)
class AdjudicationDecision:
    edge: tuple
    verdict: str
    raw_response: str
    source: str  # llm | mock | cache | fallback
    kind: str = "remove"
    origin: str = ""  # source of the first answer; equals ``source`` unless served from cache

    def __post_init__(self):
        if not self.origin:
            object.__setattr__(self, "origin", self.source)


class BackendUnavailable(RuntimeError):
    pass


class MockOracle:
    """Offline adjudicator driven by ground-truth tables.

    ``spurious`` holds raw (user, item) pairs that must be removed;
    ``consistent`` is an optional predicate (raw user, raw item) -> bool used
    for ADD prompts.
    """

    source = "mock"

    def __init__(self, spurious=(), consistent=None):
        self.spurious = set(spurious)
        self.consistent = consistent
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, request: AdjudicationRequest) -> str:
        with self._lock:
            self.calls += 1
        pair = (request.raw_user, request.raw_item)
        if request.kind == "add":
            ok = self.consistent is not None and self.consistent(*pair)
            return ADD if ok else SKIP
        return REMOVE if pair in self.spurious else KEEP

    @classmethod
    def from_label_file(cls, path, factors_path=None) -> "MockOracle":
        """``user<TAB>item<TAB>label`` with label causal/spurious; optional factor table."""
        spurious = set()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            u, i, lab = line.split("\t")
            if lab.strip() == "spurious":
                spurious.add((_raw(u), _raw(i)))
        consistent = None
        if factors_path is not None:
            factors = {}
            for line in Path(factors_path).read_text(encoding="utf-8").splitlines():
                if line.strip():
                    kind, raw, f = line.split("\t")
                    factors[(kind, _raw(raw))] = f.strip()

            def consistent(u, i):
                fu, fi = factors.get(("user", u)), factors.get(("item", i))
                return fu is not None and fu == fi

        return cls(spurious, consistent)


def _raw(token: str):
    token = token.strip()
    try:
        return int(token)
    except ValueError:
        return token


class HttpChatBackend:
    """OpenAI-compatible ``/chat/completions`` client.

    Temperature 0; the API key is read from the environment variable named by
    ``api_key_env``. Transport errors, 429 and 5xx responses are retried
    ``retries`` times with exponential backoff before ``BackendUnavailable``.
    """

    source = "llm"

    def __init__(self, base_url: str, model: str = "default", api_key_env: str = "OPENAI_API_KEY",
                 timeout: float = 30.0, retries: int = 3, backoff: float = 1.0, transport=None):
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.api_key_env = api_key_env
        self.retries = retries
        self.backoff = backoff
        self.client = httpx.Client(timeout=timeout, transport=transport)
        self.calls = 0
        self._lock = threading.Lock()

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, request: AdjudicationRequest) -> str:
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": 0,
        }
        last = None
        for attempt in range(self.retries + 1):
            with self._lock:
                self.calls += 1
            try:
                resp = self.client.post(self.url, json=body, headers=self._headers())
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise httpx.HTTPStatusError(f"status {resp.status_code}", request=resp.request, response=resp)
                resp.raise_for_status()
            except httpx.HTTPError as exc:
                last = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * 2 ** attempt)
                continue
            try:
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError):
                # malformed body: hand the raw text to the parser, which falls back
                return resp.text
        raise BackendUnavailable(f"{self.url} unreachable after {self.retries + 1} attempts: {last}")

    def close(self):
        self.client.close()


class DecisionCache:
    """JSON-lines decision store keyed by prompt hash; appends are serialized by the caller."""

    def __init__(self, path=None, clock=None):
        self.path = Path(path) if path is not None else None
        self.records: dict[str, dict] = {}
        self._clock = clock or time.time
        if self.path is not None and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self.records[rec["prompt_hash"]] = rec

    def get(self, key: str):
        return self.records.get(key)

    def put(self, request: AdjudicationRequest, decision: AdjudicationDecision) -> None:
        rec = {
            "prompt_hash": request.key,
            "user": request.raw_user,
            "item": request.raw_item,
            "kind": request.kind,
            "verdict": decision.verdict,
            "source": decision.source,
            "timestamp": self._clock(),
        }
        self.records[request.key] = rec
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def logical_clock():
    """Monotone counter standing in for wall time when outputs must be reproducible."""
    counter = itertools.count(1)
    return lambda: next(counter)


@dataclass
class AdjudicationStats:
    requests: int = 0
    backend_calls: int = 0
    cache_hits: int = 0
    fallbacks: int = 0
    failures: int = 0


def adjudicate(requests, backend, cache: DecisionCache | None = None, max_workers: int = 4):
    """Verdict per request, in request order; returns ``(decisions, stats)``.

    Cached prompts are answered without touching the backend. Unparseable
    answers and unreachable backends yield the conservative verdict (KEEP,
    or SKIP for additions) with ``source="fallback"``; the run never aborts.
    """
    requests = list(requests)
    cache = cache if cache is not None else DecisionCache()
    stats = AdjudicationStats(requests=len(requests))
    decisions: list = [None] * len(requests)
    pending = []
    for n, req in enumerate(requests):
        hit = cache.get(req.key)
        if hit is not None:
            decisions[n] = AdjudicationDecision((req.user, req.item), hit["verdict"], "", "cache", req.kind,
                                                hit.get("source", "cache"))
            stats.cache_hits += 1
        else:
            pending.append(n)

    def call(n):
        try:
            return backend.complete(requests[n]), None
        except BackendUnavailable as exc:
            return "", exc

    before = getattr(backend, "calls", 0)
    if pending:
        workers = max(1, min(max_workers, len(pending)))
        if workers == 1:
            answers = [call(n) for n in pending]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                answers = list(pool.map(call, pending))
        for n, (text, err) in zip(pending, answers):
            req = requests[n]
            verdict = None if err is not None else parse_verdict(text, req.kind)
            if err is not None:
                stats.failures += 1
            if verdict is None:
                stats.fallbacks += 1
                log.warning("fallback %s for edge (%s, %s): %s", VERDICTS[req.kind][0], req.raw_user,
                            req.raw_item, err if err is not None else f"unparseable response {text[:80]!r}")
                dec = AdjudicationDecision((req.user, req.item), VERDICTS[req.kind][0], text, "fallback", req.kind)
            else:
                dec = AdjudicationDecision((req.user, req.item), verdict, text, backend.source, req.kind)
            decisions[n] = dec
            cache.put(req, dec)
    stats.backend_calls = getattr(backend, "calls", 0) - before
    if stats.failures:
        log.warning("%d adjudication requests failed; kept their edges", stats.failures)
    return decisions, stats


def user_histories(g: BipartiteGraph) -> list[list[int]]:
    """Item indices per user, most recent first (ties by item index)."""
    out = [[] for _ in range(g.num_users)]
    for u, i, t in sorted(g.edges.tolist(), key=lambda r: (r[0], -r[2], r[1])):
        out[u].append(i)
    return out


def make_requests(g: BipartiteGraph, edges, scores: dict, kind: str, catalog=None, histories=None):
    index = g.index
    histories = user_histories(g) if histories is None else histories
    raw_u = (lambda u: index.users[u]) if index is not None else (lambda u: u)
    raw_i = (lambda i: index.items[i]) if index is not None else (lambda i: i)
    out = []
    for u, i in edges:
        hist = [raw_i(x) for x in histories[u]]
        prompt = build_prompt((raw_u(u), raw_i(i)), scores[(u, i)], hist, catalog, kind)
        out.append(AdjudicationRequest(u, i, raw_u(u), raw_i(i), float(scores[(u, i)]), prompt, kind))
    return out


@dataclass
class GraphViews:
    original: BipartiteGraph
    causal: BipartiteGraph
    spurious: BipartiteGraph
    removed: set
    added: set
    rejected_additions: list = field(default_factory=list)
    ignored_top_removals: list = field(default_factory=list)


def build_views(g: BipartiteGraph, decisions, candidates: CandidateSets, additions=()) -> GraphViews:
    """Causal view = (E - E_remove) + E_add; spurious view = E_remove.

    Only bottom-K candidates can be removed; REMOVE verdicts on top-K edges
    are recorded in ``ignored_top_removals`` and otherwise ignored.
    """
    bottom = set(candidates.spurious)
    top = set(candidates.causal)
    verdicts = {d.edge: d.verdict for d in decisions if d.kind in ("remove", "verify")}
    removed = {e for e in bottom if verdicts.get(e) == REMOVE}
    ignored = sorted(e for e in top if verdicts.get(e) == REMOVE)
    observed = g.pair_set()
    added, rejected = set(), []
    for e in additions:
        e = (int(e[0]), int(e[1]))
        if e in observed:
            rejected.append(e)
        else:
            added.add(e)
    if rejected:
        log.warning("%d proposed additions are already observed edges; rejected", len(rejected))
    kept = [tuple(r) for r in g.edges.tolist() if (r[0], r[1]) not in removed]
    causal = g.with_edges(kept + [(u, i, 0) for u, i in sorted(added)])
    spurious = g.with_edges([tuple(r) for r in g.edges.tolist() if (r[0], r[1]) in removed])
    return GraphViews(g, causal, spurious, removed, added, rejected, ignored)


def propose_additions(g: BipartiteGraph, params, per_user_limit: int, backend, cache=None, enabled: bool = False,
                      catalog=None, max_workers: int = 4, mask_layers: int = 1):
    """Top-M unobserved items per user by edge score, kept when the adjudicator says ADD.

    Returns ``(additions, decisions)``; disabled or M = 0 gives nothing.
    """
    if not enabled or per_user_limit <= 0:
        return set(), []
    items_of = g.user_items()
    cand_edges, cand_scores = [], {}
    for u in range(g.num_users):
        free = np.array([i for i in range(g.num_items) if i not in items_of[u]], dtype=np.int64)
        if free.size == 0:
            continue
        pairs = np.column_stack([np.full(free.size, u), free])
        s = score_unobserved(g, params, pairs, mask_layers)
        order = np.lexsort((free, -s))[:per_user_limit]
        for k in order:
            e = (u, int(free[k]))
            cand_edges.append(e)
            cand_scores[e] = float(s[k])
    requests = make_requests(g, cand_edges, cand_scores, "add", catalog)
    decisions, _ = adjudicate(requests, backend, cache, max_workers)
    added = {d.edge for d in decisions if d.verdict == ADD}
    return added, decisions


def write_decisions(decisions, requests, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user\titem\tkind\tscore\tverdict\torigin\n")
        for d, r in zip(decisions, requests):
            fh.write(f"{r.raw_user}\t{r.raw_item}\t{r.kind}\t{r.score!r}\t{d.verdict}\t{d.origin}\n")
