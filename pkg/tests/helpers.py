"""Random instance builders shared by the unit and acceptance tests."""
import numpy as np

from causalgcl.contrastive import JointObjective, TrainConfig, _anchors, bpr_terms, cicl_loss
from causalgcl.encoder import ViewAdjacency, encode_views, propagate, propagate_backward
from causalgcl.environment import EdgeScores, decompose, score_forward
from causalgcl.graph import BipartiteGraph
from causalgcl.invariant import RiskModel, Stage1Objective, build_environments, infer_environment_labels
from causalgcl.numerics import ParameterSet, block_gradient


def random_graph(rng, max_nodes=20, min_edges=4):
    """Bipartite graph with at most ``max_nodes`` nodes and random timestamps."""
    nu = int(rng.integers(2, max_nodes // 2 + 1))
    ni = int(rng.integers(2, max_nodes - nu + 1))
    # at most ~60% dense so users keep unobserved items to sample negatives from
    hi = max(min(min_edges, nu * ni), int(0.6 * nu * ni))
    n_edges = int(rng.integers(min(min_edges, hi), hi + 1))
    flat = rng.choice(nu * ni, size=n_edges, replace=False)
    rows = [(int(k // ni), int(k % ni), int(rng.integers(1000))) for k in flat]
    return BipartiteGraph(nu, ni, np.asarray(rows, dtype=np.int64))


def spread_params(g, d, seed, scale=5.0):
    """Parameters with a scorer spread out enough that scores are not all ~0.5."""
    p = ParameterSet.init(g.num_nodes, d, seed=seed)
    p.mask_embedding *= scale
    p.mlp_w1 *= 4 * scale
    p.mlp_w2 *= 4 * scale
    p.embedding *= scale
    return p


def stage1_instance(rng):
    """(graph, params, decomposition, environments, layers) with >= 2 environments when possible."""
    while True:
        g = random_graph(rng, min_edges=8)
        if g.num_edges < 6:
            continue
        d = int(rng.integers(2, 9))
        layers = int(rng.integers(1, 4))
        p = spread_params(g, d, int(rng.integers(1 << 30)))
        cache = score_forward(g, p)
        dec = decompose(g, EdgeScores(g.edges[:, :2], cache.values), float(rng.choice([0.5, 0.6, 0.7])))
        labels = infer_environment_labels(g, p, dec, 2, layers, 0)
        envs = build_environments(g, dec, labels, g.user_items(), np.random.default_rng(int(rng.integers(1000))))
        envs = [e for e in envs if e.pos.shape[0] > 0]
        if envs:
            return g, p, dec, envs, layers


def view_instance(rng):
    """Graph, causal/spurious views, parameters, BPR triples and a config."""
    while True:
        g = random_graph(rng, min_edges=6)
        full = [u for u, items in enumerate(g.user_items()) if len(items) == g.num_items]
        if g.num_edges >= 4 and len(full) < g.num_users:
            break
    removed = rng.random(g.num_edges) < 0.3
    g_c = g.with_edges(g.edges[~removed])
    g_s = g.with_edges(g.edges[removed])
    d = int(rng.integers(2, 9))
    layers = int(rng.integers(1, 4))
    p = spread_params(g, d, int(rng.integers(1 << 30)), scale=3.0)
    ui = g.user_items()
    triples = []
    for u, i, _ in g.edges.tolist():
        free = [j for j in range(g.num_items) if j not in ui[u]]
        if free:
            triples.append((u, i, int(rng.choice(free))))
    cfg = TrainConfig(lam=float(rng.uniform(0.05, 2.0)), temperature=float(rng.uniform(0.2, 1.0)),
                      layers=layers, dim=d)
    return g, g_c, g_s, p, np.asarray(triples, dtype=np.int64), cfg


def gradient_cases(seed):
    """Yield ``(name, loss_fn, params, grad)`` for every hand-derived gradient on one random instance."""
    rng = np.random.default_rng(seed)

    g, g_c, g_s, p, triples, cfg = view_instance(rng)
    adj = ViewAdjacency.from_graphs(g, g_c, g_s)
    L = cfg.layers

    def bpr_value(q):
        return bpr_terms(triples, propagate(adj.main, q.embedding, L), g.num_users)[0]

    _, d_h = bpr_terms(triples, propagate(adj.main, p.embedding, L), g.num_users)
    yield "bpr", bpr_value, p, block_gradient(p, embedding=propagate_backward(adj.main, L, d_h))

    anchors = _anchors(triples, g.num_users)

    def cicl_value(q):
        return cicl_loss(encode_views(adj, None, None, q, L), anchors, cfg.temperature, adj, q, L)[0]

    _, grad = cicl_loss(encode_views(adj, None, None, p, L), anchors, cfg.temperature, adj, p, L)
    yield "cicl", cicl_value, p, grad

    joint = JointObjective(adj, triples, g.num_users, cfg)
    yield "cicl+bpr", joint.value, p, joint.evaluate(p)[3]

    g, p, dec, envs, layers = stage1_instance(rng)
    alpha, beta = float(rng.uniform(0.1, 2.0)), float(rng.uniform(0.1, 2.0))
    obj = Stage1Objective(g, dec, envs, alpha, beta, layers)
    yield "score", lambda q: obj.score_term(q)[0], p, obj.score_term(p)[1]

    model = RiskModel(g, dec, layers)
    env = envs[0]
    yield "risk", lambda q: model.risk(q, env).risk, p, model.risk(p, env).grad

    yield "stage1", obj.value, p, obj.evaluate(p).grad
