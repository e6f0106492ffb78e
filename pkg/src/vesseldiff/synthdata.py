"""Procedural desk-scale vessel datasets.

Two families: "capillary" patches (random geometric graphs with cycles,
degree-2 chains contracted away, thickness classes from length terciles)
and "cow" graphs (a fixed labeled ring-plus-branches template with jittered
node positions and a deliberate orientation bias).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graphs import (DatasetMeta, NodeCountDistribution, SpatialGraph,
                     fit_normalization)

MAX_ATTEMPTS = 64


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    family: str = "capillary"            # "capillary" | "cow"
    n_range: tuple = (8, 16)
    cycle_range: tuple = (1, 6)
    num_classes: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        lo, hi = self.n_range
        if not (4 <= lo <= hi <= 64):
            raise ValueError(f"n_range must sit inside [4, 64], got {self.n_range}")
        if self.family not in ("capillary", "cow"):
            raise ValueError(f"unknown family {self.family!r}")


def _prim_mst(dist: np.ndarray) -> list[tuple[int, int]]:
    n = dist.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = dist[0].copy()
    best_from = np.zeros(n, dtype=np.int64)
    edges = []
    for _ in range(n - 1):
        cand = np.where(in_tree, np.inf, best)
        j = int(cand.argmin())
        edges.append((int(best_from[j]), j))
        in_tree[j] = True
        closer = dist[j] < best
        best_from[closer] = j
        best = np.minimum(best, dist[j])
    return edges


def _contract_degree2(adj: dict[int, set], keep_running: bool = True) -> None:
    """Repeatedly splice out degree-2 nodes, merging their incident edges."""
    changed = True
    while changed:
        changed = False
        for v in list(adj):
            if len(adj[v]) != 2:
                continue
            a, b = sorted(adj[v])
            adj[a].discard(v)
            adj[b].discard(v)
            del adj[v]
            if b not in adj[a]:
                adj[a].add(b)
                adj[b].add(a)
            changed = True


def _length_classes(coords: np.ndarray, pairs: list[tuple[int, int]],
                    num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Class 1..(c-1) per edge from equal-quantile length bands."""
    lengths = np.array([np.linalg.norm(coords[i] - coords[j]) for i, j in pairs])
    bands = num_classes - 1
    qs = np.quantile(lengths, [k / bands for k in range(1, bands)]) if bands > 1 else []
    classes = np.ones(len(pairs), dtype=np.int64)
    for q in qs:
        classes += lengths > q
    return classes


def gen_capillary_patch(cfg: SynthConfig) -> SpatialGraph:
    """Random geometric patch: scattered points, MST plus nearest extra edges
    to hit a target cycle count, then degree-2 contraction. Retries until the
    surviving node count lands in cfg.n_range."""
    if cfg.family != "capillary":
        raise ValueError("config family must be 'capillary'")
    rng = np.random.default_rng(np.random.SeedSequence((0x0CA9, cfg.seed)))
    lo, hi = cfg.n_range
    for _ in range(MAX_ATTEMPTS):
        n0 = int(rng.integers(2 * lo, 3 * hi + 1))
        pts = rng.uniform(0.0, 1.0, size=(n0, 3))
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diff * diff).sum(-1))
        np.fill_diagonal(dist, np.inf)

        adj: dict[int, set] = {i: set() for i in range(n0)}
        for i, j in _prim_mst(dist):
            adj[i].add(j)
            adj[j].add(i)

        k = min(4, n0 - 1)
        order = np.argsort(dist, axis=1)[:, :k]
        candidates = sorted(
            {(min(i, int(j)), max(i, int(j))) for i in range(n0) for j in order[i]
             if int(j) not in adj[i]},
            key=lambda p: dist[p[0], p[1]])
        target = int(rng.integers(cfg.cycle_range[0], cfg.cycle_range[1] + 1))
        for i, j in candidates[:target]:
            adj[i].add(j)
            adj[j].add(i)

        _contract_degree2(adj)
        nodes = sorted(adj)
        if not (lo <= len(nodes) <= hi):
            continue
        relabel = {v: k for k, v in enumerate(nodes)}
        coords = pts[nodes]
        pairs = sorted({(min(relabel[a], relabel[b]), max(relabel[a], relabel[b]))
                        for a in adj for b in adj[a]})
        # Contraction can merge a cycle into a parallel edge; keep retrying
        # until at least one survives (the graph stays connected throughout,
        # so the cycle count is |E| - |V| + 1).
        if not pairs or len(pairs) - len(nodes) + 1 < 1:
            continue
        classes = _length_classes(coords, pairs, cfg.num_classes, rng)
        edges = np.zeros((len(nodes), len(nodes)), dtype=np.int64)
        for (i, j), c in zip(pairs, classes):
            edges[i, j] = c
            edges[j, i] = c
        return SpatialGraph(coords=coords, edges=edges, num_classes=cfg.num_classes)
    raise GenerationError(f"capillary generation failed after {MAX_ATTEMPTS} "
                          f"attempts (seed {cfg.seed}, n_range {cfg.n_range})")


# Circle-of-Willis-like template: a 7-node ring in a near-axial plane with
# six 2-segment branch chains. Segment classes are fixed; classes 1..7 are
# the ring, 8..13 the branches (each twice).
_RING_RADIUS = 0.22
_RING_CENTER = np.array([0.5, 0.5, 0.55])
_BRANCHES = (
    # (ring anchor, first offset, second offset, class)
    (0, (0.00, 0.18, 0.02), (0.00, 0.16, 0.10), 8),
    (1, (0.12, 0.14, 0.00), (0.10, 0.12, 0.06), 9),
    (3, (-0.06, -0.16, 0.04), (-0.04, -0.14, 0.12), 10),
    (4, (0.04, -0.17, 0.05), (0.02, -0.15, 0.13), 11),
    (5, (0.02, -0.02, 0.18), (0.00, 0.00, 0.16), 12),
    (6, (-0.12, 0.04, 0.14), (-0.10, 0.02, 0.14), 13),
)
COW_CLASSES = 14
COW_JITTER = 0.05


def cow_template() -> SpatialGraph:
    """The unperturbed labeled template (single ring, beta1 == 1)."""
    ring_n = 7
    ang = 2.0 * np.pi * np.arange(ring_n) / ring_n
    ring = _RING_CENTER + _RING_RADIUS * np.stack(
        [np.cos(ang), np.sin(ang), np.zeros(ring_n)], axis=1)
    coords = [ring[i] for i in range(ring_n)]
    edge_list = [(i, (i + 1) % ring_n, i + 1) for i in range(ring_n)]
    for anchor, d1, d2, cls in _BRANCHES:
        a = len(coords)
        coords.append(ring[anchor] + np.asarray(d1))
        b = len(coords)
        coords.append(coords[a] + np.asarray(d2))
        edge_list.append((anchor, a, cls))
        edge_list.append((a, b, cls))
    n = len(coords)
    edges = np.zeros((n, n), dtype=np.int64)
    for i, j, c in edge_list:
        edges[i, j] = c
        edges[j, i] = c
    return SpatialGraph(coords=np.array(coords), edges=edges, num_classes=COW_CLASSES)


def gen_cow_like(cfg: SynthConfig) -> SpatialGraph:
    """Template with jittered node positions; labels and topology are fixed,
    and the orientation is never randomized."""
    if cfg.family != "cow":
        raise ValueError("config family must be 'cow'")
    if cfg.num_classes != COW_CLASSES:
        raise ValueError(f"cow family uses {COW_CLASSES} classes, got {cfg.num_classes}")
    base = cow_template()
    lo, hi = cfg.n_range
    if not (lo <= base.n <= hi):
        raise ValueError(f"template has {base.n} nodes, outside n_range {cfg.n_range}")
    rng = np.random.default_rng(np.random.SeedSequence((0x0C0B, cfg.seed)))
    coords = base.coords + rng.normal(0.0, COW_JITTER, size=base.coords.shape)
    return base.with_coords(coords)


def generate(cfg: SynthConfig) -> SpatialGraph:
    if cfg.family == "capillary":
        return gen_capillary_patch(cfg)
    return gen_cow_like(cfg)


def default_config(family: str, seed: int = 0) -> SynthConfig:
    if family == "capillary":
        return SynthConfig(family="capillary", n_range=(8, 16), cycle_range=(1, 6),
                           num_classes=4, seed=seed)
    if family == "cow":
        return SynthConfig(family="cow", n_range=(4, 64), cycle_range=(1, 1),
                           num_classes=COW_CLASSES, seed=seed)
    raise ValueError(f"unknown family {family!r}")


def build_dataset(cfg: SynthConfig, count: int) -> tuple[list[SpatialGraph], DatasetMeta]:
    """count graphs with per-graph seeds derived from cfg.seed, plus a meta
    holding the fitted normalization and node-count histogram."""
    if count < 1:
        raise ValueError("count must be >= 1")
    graphs = [generate(dataclasses.replace(cfg, seed=cfg.seed * 100003 + k))
              for k in range(count)]
    meta = DatasetMeta(
        num_classes=cfg.num_classes,
        normalization=fit_normalization(graphs),
        node_counts=NodeCountDistribution.from_graphs(graphs),
        family=cfg.family,
    )
    return graphs, meta
