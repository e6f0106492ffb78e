"""Built-in oracle suite behind the `verify` command.

Every check pits a production code path against an independently coded
oracle: cumulative transition matrices against explicit matrix products,
the reverse-step posterior against exhaustive Bayes enumeration, tape
gradients against central finite differences, and the Betti counts against
breadth-first search and spanning-forest construction.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .edgediff import (EdgeNoiseModel, corrupt_edge_batch, degree_loss_batch,
                       edge_posterior, edge_total_loss_given, one_hot)
from .graphs import SpatialGraph
from .metrics import betti0, betti1
from .nets import EdgeDenoiser, EdgeNetConfig, NodeDenoiser, NodeNetConfig
from .nodediff import NodeBatch, node_loss_given
from .schedule import NoiseSchedule, make_cosine_schedule


def random_schedule(T: int, rng: np.random.Generator) -> NoiseSchedule:
    """A syntactically valid schedule with arbitrary retention steps."""
    alphas = rng.uniform(0.05, 0.999, size=T)
    return NoiseSchedule(T=T, alphas=alphas,
                         alpha_bars=np.concatenate([[1.0], np.cumprod(alphas)]),
                         family="random")


def check_cumulative_closed_form(rng: np.random.Generator,
                                 class_counts=(2, 3, 4, 14),
                                 t_max: int = 50) -> dict:
    """Closed-form Q_bar vs the explicit product Q^1 ... Q^t, all t <= t_max."""
    max_err = 0.0
    max_row_err = 0.0
    for c in class_counts:
        sched = random_schedule(t_max, rng)
        m = rng.dirichlet(np.ones(c))
        noise = EdgeNoiseModel(m=m, schedule=sched)
        prod = np.eye(c)
        for t in range(1, t_max + 1):
            prod = prod @ noise.build_transition(t)
            closed = noise.build_cumulative(t)
            max_err = max(max_err, float(np.abs(prod - closed).max()))
            max_row_err = max(max_row_err,
                              float(np.abs(closed.sum(axis=1) - 1.0).max()),
                              float(np.abs(noise.build_transition(t).sum(axis=1) - 1.0).max()))
    return {"max_err": max_err, "max_row_sum_err": max_row_err}


def posterior_bayes_oracle(obs: int, e0_hat: np.ndarray, t: int,
                           Q: list[np.ndarray]) -> np.ndarray:
    """Exhaustive enumeration of p(e_{t-1} = k | e_t = obs) for the chain
    e0 ~ e0_hat -> e_{t-1} -> e_t, using explicitly multiplied products."""
    c = e0_hat.size
    qbar_tm1 = np.eye(c)
    for s in range(t - 1):
        qbar_tm1 = qbar_tm1 @ Q[s]
    joint = np.zeros((c, c))
    for j in range(c):
        for k in range(c):
            joint[j, k] = e0_hat[j] * qbar_tm1[j, k] * Q[t - 1][k, obs]
    return joint.sum(axis=0) / joint.sum()


def check_posterior_bayes(rng: np.random.Generator, trials: int = 10000,
                          t_max: int = 20, break_posterior: bool = False) -> dict:
    max_err = 0.0
    for _ in range(trials):
        c = int(rng.integers(2, 5))
        sched = random_schedule(t_max, rng)
        noise = EdgeNoiseModel(m=rng.dirichlet(np.ones(c)), schedule=sched)
        t = int(rng.integers(1, t_max + 1))
        obs = int(rng.integers(c))
        e0_hat = rng.dirichlet(np.ones(c))
        got = edge_posterior(one_hot(np.array(obs), c), e0_hat, t, noise)
        if break_posterior:
            got = np.roll(got, 1)
        want = posterior_bayes_oracle(obs, e0_hat, t, list(noise.Q))
        max_err = max(max_err, float(np.abs(got - want).max()))
    return {"max_err": max_err, "trials": trials}


def check_grad_primitives(rng: np.random.Generator) -> dict:
    """Finite-difference check for every primitive operation."""
    a2 = rng.uniform(-1.0, 1.0, (3, 4))
    b2 = rng.uniform(-1.0, 1.0, (3, 4))
    w = rng.uniform(-1.0, 1.0, (4, 5))
    probe = rng.uniform(0.5, 1.5, (3, 4))
    gain = rng.uniform(0.5, 1.5, 4)
    bias = rng.uniform(-0.5, 0.5, 4)
    kv = rng.uniform(-1.0, 1.0, (2, 3, 4))
    table_idx = rng.integers(0, 3, size=(2, 3))
    weights2 = rng.uniform(-1.0, 1.0, (3, 4))
    weights3 = rng.uniform(-1.0, 1.0, (4, 3))
    attn_w = rng.uniform(-1.0, 1.0, (2, 3, 4))
    w35 = rng.uniform(-1.0, 1.0, (3, 5))
    w26 = rng.uniform(-1.0, 1.0, (2, 6))
    w324 = rng.uniform(-1.0, 1.0, (3, 2, 4))
    w38 = rng.uniform(-1.0, 1.0, (3, 8))
    w32 = rng.uniform(-1.0, 1.0, (3, 2))
    w4 = rng.uniform(-1.0, 1.0, 4)
    w3 = rng.uniform(-1.0, 1.0, 3)
    w234 = rng.uniform(-1.0, 1.0, (2, 3, 4))

    cases = {
        "add": lambda x: ad.tsum(ad.mul(ad.add(x, Tensor(b2)), Tensor(weights2))),
        "sub": lambda x: ad.tsum(ad.mul(ad.sub(x, Tensor(b2)), Tensor(weights2))),
        "mul": lambda x: ad.tsum(ad.mul(ad.mul(x, Tensor(b2)), Tensor(weights2))),
        "div": lambda x: ad.tsum(ad.mul(ad.div(Tensor(b2), ad.add(x, 3.0)), Tensor(weights2))),
        "matmul": lambda x: ad.tsum(ad.mul(ad.matmul(x, Tensor(w)), Tensor(w35))),
        "transpose": lambda x: ad.tsum(ad.mul(ad.transpose(x), Tensor(weights3))),
        "reshape": lambda x: ad.tsum(ad.mul(ad.reshape(x, (2, 6)), Tensor(w26))),
        "expand": lambda x: ad.tsum(ad.mul(ad.expand(ad.reshape(x, (3, 1, 4)), (3, 2, 4)),
                                           Tensor(w324))),
        "concat": lambda x: ad.tsum(ad.mul(ad.concat([x, Tensor(b2)], axis=1),
                                           Tensor(w38))),
        "slice": lambda x: ad.tsum(ad.mul(ad.slice_axis(x, 1, 1, 3), Tensor(w32))),
        "sum": lambda x: ad.tsum(ad.mul(ad.tsum(x, axis=0), Tensor(w4))),
        "mean": lambda x: ad.tsum(ad.mul(ad.tmean(x, axis=1), Tensor(w3))),
        "relu": lambda x: ad.tsum(ad.mul(ad.relu(x), Tensor(weights2))),
        "gelu": lambda x: ad.tsum(ad.mul(ad.gelu(x), Tensor(weights2))),
        "softmax": lambda x: ad.tsum(ad.mul(ad.softmax(x), Tensor(weights2))),
        "log": lambda x: ad.tsum(ad.mul(ad.tlog(ad.add(x, 3.0)), Tensor(weights2))),
        "clamp_min": lambda x: ad.tsum(ad.mul(ad.clamp_min(x, 0.2), Tensor(weights2))),
        "layer_norm": lambda x: ad.tsum(ad.mul(ad.layer_norm(x, Tensor(gain), Tensor(bias)),
                                               Tensor(weights2))),
        "embedding_lookup": lambda x: ad.tsum(ad.mul(ad.embedding_lookup(x, table_idx),
                                                     Tensor(w234))),
        "scaled_dot_attention": lambda x: ad.tsum(ad.mul(
            ad.scaled_dot_attention(x, Tensor(kv), Tensor(kv)), Tensor(attn_w))),
    }
    errs = {}
    for name, f in cases.items():
        x0 = probe if name in ("relu", "clamp_min") else a2
        x0 = attn_w.copy() if name == "scaled_dot_attention" else x0
        errs[name] = grad_check(f, x0)
    return {"per_op": errs, "max_err": max(errs.values())}


def tiny_node_model(rng: np.random.Generator) -> NodeDenoiser:
    return NodeDenoiser.create(NodeNetConfig(hidden=8, blocks=2, heads=2,
                                             time_dim=8), rng)


def tiny_edge_model(rng: np.random.Generator, num_classes: int = 3) -> EdgeDenoiser:
    return EdgeDenoiser.create(EdgeNetConfig(num_classes=num_classes, node_dim=8,
                                             edge_dim=4, blocks=1, heads=2,
                                             time_dim=8, film_hidden=8,
                                             mlp_hidden=8, head_hidden=8), rng)


def _loss_grad_errors(make_loss, store) -> float:
    worst = 0.0
    for name in store.arrays:
        def f(pt, name=name):
            bound = {k: (pt if k == name else Tensor(v))
                     for k, v in store.arrays.items()}
            return make_loss(bound)
        worst = max(worst, grad_check(f, store.arrays[name]))
    return worst


def check_grad_node_loss(rng: np.random.Generator) -> dict:
    """End-to-end finite-difference check of the node objective, 5-node graph."""
    model = tiny_node_model(rng)
    sched = make_cosine_schedule(10)
    batch = NodeBatch(rng.uniform(-1, 1, (1, 5, 3)), np.ones((1, 5), dtype=bool))
    t = np.array([4])
    eps = rng.standard_normal((1, 5, 3))

    def make_loss(bound):
        return node_loss_given(model, bound, batch, t, eps, sched)

    return {"max_err": _loss_grad_errors(make_loss, model.store)}


def check_grad_edge_loss(rng: np.random.Generator) -> dict:
    """End-to-end check of CE plus degree loss on a 5-node, 3-class graph.

    Uses the relaxed (hard=False) Gumbel path with frozen noise so the
    objective is smooth and comparable against finite differences.
    """
    c = 3
    model = tiny_edge_model(rng, c)
    sched = make_cosine_schedule(10)
    noise = EdgeNoiseModel(m=np.array([0.6, 0.25, 0.15]), schedule=sched)
    n = 5
    edges0 = np.zeros((n, n), dtype=np.int64)
    for (i, j, lab) in [(0, 1, 1), (1, 2, 2), (2, 3, 1), (3, 4, 2), (0, 4, 1)]:
        edges0[i, j] = lab
        edges0[j, i] = lab
    coords = rng.uniform(-1, 1, (1, n, 3))
    mask = np.ones((1, n), dtype=bool)
    t = np.array([3])
    e_t = corrupt_edge_batch(edges0[None], mask, t, noise, rng)
    gnoise = rng.gumbel(size=(1, n, n, c))

    def make_loss(bound):
        return edge_total_loss_given(model, bound, edges0[None], e_t, coords,
                                     t, mask, gumbel_noise=gnoise,
                                     temperature=1.0, degree_weight=1.0,
                                     hard=False)

    return {"max_err": _loss_grad_errors(make_loss, model.store)}


def betti0_bfs_oracle(g: SpatialGraph) -> int:
    adj = {i: [] for i in range(g.n)}
    for i, j, _ in g.edge_list():
        adj[i].append(j)
        adj[j].append(i)
    seen = [False] * g.n
    comps = 0
    for s in range(g.n):
        if seen[s]:
            continue
        comps += 1
        frontier = [s]
        seen[s] = True
        while frontier:
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if not seen[v]:
                        seen[v] = True
                        nxt.append(v)
            frontier = nxt
    return comps


def betti1_forest_oracle(g: SpatialGraph) -> int:
    """Count non-forest edges while growing a spanning forest edge by edge."""
    parent = list(range(g.n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    extra = 0
    for i, j, _ in g.edge_list():
        ri, rj = find(i), find(j)
        if ri == rj:
            extra += 1
        else:
            parent[ri] = rj
    return extra


def random_graph(rng: np.random.Generator, n_max: int = 20) -> SpatialGraph:
    n = int(rng.integers(1, n_max + 1))
    c = int(rng.integers(2, 6))
    coords = rng.uniform(0, 1, (n, 3))
    edges = np.zeros((n, n), dtype=np.int64)
    p = rng.uniform(0.05, 0.5)
    iu = np.triu_indices(n, k=1)
    labels = np.where(rng.random(iu[0].size) < p, rng.integers(1, c, size=iu[0].size), 0)
    edges[iu] = labels
    edges[(iu[1], iu[0])] = labels
    return SpatialGraph(coords=coords, edges=edges, num_classes=c)


def check_betti(rng: np.random.Generator, graphs: int = 1000) -> dict:
    mismatches = 0
    for _ in range(graphs):
        g = random_graph(rng)
        if betti0(g) != betti0_bfs_oracle(g):
            mismatches += 1
        if betti1(g) != betti1_forest_oracle(g):
            mismatches += 1
    return {"mismatches": mismatches, "graphs": graphs}


def run_all(seed: int = 0, break_posterior: bool = False) -> list[tuple[str, bool, str]]:
    """Every check with its pass verdict and a one-line detail."""
    results = []
    rng = np.random.default_rng(seed)
    r = check_cumulative_closed_form(rng)
    results.append(("transition-cumulative",
                    r["max_err"] < 1e-9 and r["max_row_sum_err"] < 1e-12,
                    f"max_err={r['max_err']:.3g} row_sum_err={r['max_row_sum_err']:.3g}"))
    r = check_posterior_bayes(rng, trials=2000, break_posterior=break_posterior)
    results.append(("posterior-bayes", r["max_err"] < 1e-10,
                    f"max_err={r['max_err']:.3g} over {r['trials']} triples"))
    r = check_grad_primitives(rng)
    results.append(("grad-primitives", r["max_err"] < 1e-6,
                    f"max_err={r['max_err']:.3g}"))
    r = check_grad_node_loss(rng)
    results.append(("grad-node-loss", r["max_err"] < 1e-4,
                    f"max_err={r['max_err']:.3g}"))
    r = check_grad_edge_loss(rng)
    results.append(("grad-edge-loss", r["max_err"] < 1e-4,
                    f"max_err={r['max_err']:.3g}"))
    r = check_betti(rng)
    results.append(("betti-oracles", r["mismatches"] == 0,
                    f"{r['mismatches']} mismatches over {r['graphs']} graphs"))
    return results
