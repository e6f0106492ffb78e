"""Distributional comparison of graph sets: per-statistic histograms and
KL divergences (reference first), plus the Betti topology counts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .graphs import BACKGROUND, SpatialGraph

SMOOTH_EPS = 1e-6
CONTINUOUS_BINS = 50
REPORT_COLUMNS = ("xyz", "deg", "E", "len", "angle", "orient", "b0", "b1")

CONTINUOUS_STATS = {"x", "y", "z", "len", "angle", "theta", "phi", "psi"}
DISCRETE_STATS = {"deg", "E", "b0", "b1"}


def betti0(g: SpatialGraph) -> int:
    """Connected components (isolated nodes count) via union-find."""
    parent = list(range(g.n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j, _ in g.edge_list():
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
    return len({find(i) for i in range(g.n)})


def betti1(g: SpatialGraph) -> int:
    """Independent cycles: |E| - |V| + components."""
    return g.num_edges() - g.n + betti0(g)


@dataclass(frozen=True)
class EdgeStatistics:
    lengths: np.ndarray
    inter_edge_angles: np.ndarray       # degrees, [0, 180]
    orientation: np.ndarray             # (k, 3) degrees to x/y/z axes, [0, 90]
    degenerate_edges: int = 0


def edge_statistics(g: SpatialGraph) -> EdgeStatistics:
    """Per-edge lengths, angles between coincident edges, and axis angles.

    Zero-length edges are tallied and excluded from both angle statistics.
    """
    edges = g.edge_list()
    lengths = []
    orient = []
    degenerate = 0
    vec_by_node: dict[int, list[np.ndarray]] = {}
    for i, j, _ in edges:
        d = g.coords[j] - g.coords[i]
        norm = float(np.linalg.norm(d))
        lengths.append(norm)
        if norm == 0.0:
            degenerate += 1
            continue
        u = d / norm
        orient.append(np.degrees(np.arccos(np.clip(np.abs(u), 0.0, 1.0))))
        vec_by_node.setdefault(i, []).append(u)
        vec_by_node.setdefault(j, []).append(-u)
    angles = []
    for vecs in vec_by_node.values():
        for a in range(len(vecs)):
            for b in range(a + 1, len(vecs)):
                cosv = float(np.clip(np.dot(vecs[a], vecs[b]), -1.0, 1.0))
                angles.append(math.degrees(math.acos(cosv)))
    return EdgeStatistics(
        lengths=np.array(lengths, dtype=np.float64),
        inter_edge_angles=np.array(angles, dtype=np.float64),
        orientation=(np.array(orient, dtype=np.float64).reshape(-1, 3)),
        degenerate_edges=degenerate,
    )


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray       # bin edges, length bins+1 (discrete: left edges)
    ref_mass: np.ndarray
    gen_mass: np.ndarray
    discrete: bool = False


def _smooth(mass: np.ndarray, eps: float = SMOOTH_EPS) -> np.ndarray:
    return (mass + eps) / (1.0 + mass.size * eps)


def _kl(ref: np.ndarray, gen: np.ndarray) -> float:
    r, q = _smooth(ref), _smooth(gen)
    return float(np.sum(r * (np.log(r) - np.log(q))))


def histogram_pair(reference: np.ndarray, generated: np.ndarray,
                   bins: int = CONTINUOUS_BINS, discrete: bool = False
                   ) -> Histogram:
    """Matched histograms of two sample sets.

    Continuous data uses `bins` uniform bins spanning the pooled range of
    both sample sets; discrete data uses exact integer support (pooled) with
    an overflow bucket above the pooled maximum.
    """
    reference = np.asarray(reference, dtype=np.float64).reshape(-1)
    generated = np.asarray(generated, dtype=np.float64).reshape(-1)
    if reference.size == 0 or generated.size == 0:
        raise ValueError("histogram: empty sample set")
    if discrete:
        lo = int(min(reference.min(), generated.min()))
        hi = int(max(reference.max(), generated.max()))
        support = np.arange(lo, hi + 2)  # extra slot is the overflow bucket
        ref_c = np.bincount(np.clip(reference.astype(np.int64) - lo, 0, len(support) - 1),
                            minlength=len(support)).astype(np.float64)
        gen_c = np.bincount(np.clip(generated.astype(np.int64) - lo, 0, len(support) - 1),
                            minlength=len(support)).astype(np.float64)
        hist = Histogram(edges=support, ref_mass=ref_c / ref_c.sum(),
                         gen_mass=gen_c / gen_c.sum(), discrete=True)
    else:
        if bins < 2:
            raise ValueError("histogram_kl: need bins >= 2 for continuous data")
        lo = min(reference.min(), generated.min())
        hi = max(reference.max(), generated.max())
        if hi == lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, bins + 1)
        ref_c, _ = np.histogram(reference, bins=edges)
        gen_c, _ = np.histogram(generated, bins=edges)
        hist = Histogram(edges=edges, ref_mass=ref_c / ref_c.sum(),
                         gen_mass=gen_c / gen_c.sum(), discrete=False)
    return hist


def histogram_kl(reference: np.ndarray, generated: np.ndarray,
                 bins: int = CONTINUOUS_BINS, discrete: bool = False) -> float:
    """KL(reference || generated) over smoothed, matched histograms."""
    hist = histogram_pair(reference, generated, bins=bins, discrete=discrete)
    return _kl(hist.ref_mass, hist.gen_mass)


@dataclass(frozen=True)
class GraphStatsReport:
    """KLs for the eight report columns plus the underlying histograms."""

    kl: dict
    histograms: dict
    ref_count: int
    gen_count: int

    def row(self) -> list[float]:
        return [self.kl[c] for c in REPORT_COLUMNS]


def _collect(graphs: Sequence[SpatialGraph]) -> dict[str, np.ndarray]:
    coords = np.concatenate([g.coords for g in graphs], axis=0)
    samples = {
        "x": coords[:, 0], "y": coords[:, 1], "z": coords[:, 2],
        "deg": np.concatenate([g.degrees() for g in graphs]),
        "E": np.array([g.num_edges() for g in graphs], dtype=np.float64),
        "b0": np.array([betti0(g) for g in graphs], dtype=np.float64),
        "b1": np.array([betti1(g) for g in graphs], dtype=np.float64),
    }
    lengths, angles, orient = [], [], []
    for g in graphs:
        st = edge_statistics(g)
        lengths.append(st.lengths)
        angles.append(st.inter_edge_angles)
        orient.append(st.orientation)
    samples["len"] = np.concatenate(lengths) if lengths else np.array([])
    samples["angle"] = np.concatenate(angles) if angles else np.array([])
    ori = np.concatenate(orient, axis=0) if orient else np.zeros((0, 3))
    samples["theta"], samples["phi"], samples["psi"] = ori[:, 0], ori[:, 1], ori[:, 2]
    return samples


def evaluate_sets(reference: Sequence[SpatialGraph],
                  generated: Sequence[SpatialGraph],
                  bins: int = CONTINUOUS_BINS) -> GraphStatsReport:
    """All statistics and their KLs for two graph sets.

    The coords column averages the three per-axis KLs; orientation averages
    the three axis-angle KLs. Statistics with no samples on either side
    (for instance angles when one set has no edges) score the KL against an
    empty-set placeholder of a single out-of-range value.
    """
    if not reference or not generated:
        raise ValueError("evaluate_sets: both sets must be non-empty")
    ref_s = _collect(reference)
    gen_s = _collect(generated)
    kls: dict[str, float] = {}
    hists: dict[str, Histogram] = {}
    for stat in ("x", "y", "z", "deg", "E", "len", "angle",
                 "theta", "phi", "psi", "b0", "b1"):
        r, g = ref_s[stat], gen_s[stat]
        discrete = stat in DISCRETE_STATS
        if r.size == 0 and g.size == 0:
            kls[stat] = 0.0
            hists[stat] = Histogram(np.array([0.0, 1.0]), np.array([1.0]),
                                    np.array([1.0]), discrete)
            continue
        # One empty side: substitute a point far outside the other side's
        # range so the divergence is large rather than undefined.
        if r.size == 0:
            r = np.array([g.max() + max(abs(g.max()), 1.0)])
        if g.size == 0:
            g = np.array([r.max() + max(abs(r.max()), 1.0)])
        hist = histogram_pair(r, g, bins=bins, discrete=discrete)
        kls[stat] = _kl(hist.ref_mass, hist.gen_mass)
        hists[stat] = hist
    report_kl = {
        "xyz": (kls["x"] + kls["y"] + kls["z"]) / 3.0,
        "deg": kls["deg"],
        "E": kls["E"],
        "len": kls["len"],
        "angle": kls["angle"],
        "orient": (kls["theta"] + kls["phi"] + kls["psi"]) / 3.0,
        "b0": kls["b0"],
        "b1": kls["b1"],
    }
    return GraphStatsReport(kl=report_kl, histograms=hists,
                            ref_count=len(reference), gen_count=len(generated))


def write_report_csv(path: str, reports: dict) -> None:
    """reports: method name -> GraphStatsReport; one row per method."""
    lines = ["method,ref_count,gen_count," + ",".join(REPORT_COLUMNS)]
    for name, rep in reports.items():
        vals = ",".join(f"{v:.6g}" for v in rep.row())
        lines.append(f"{name},{rep.ref_count},{rep.gen_count},{vals}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_histogram_csvs(directory: str, report: GraphStatsReport) -> list[str]:
    import os
    os.makedirs(directory, exist_ok=True)
    written = []
    for stat, hist in report.histograms.items():
        p = os.path.join(directory, f"hist_{stat}.csv")
        lines = ["bin_left,bin_right,ref_mass,gen_mass"]
        if hist.discrete:
            lefts = hist.edges
            rights = hist.edges + 1
        else:
            lefts = hist.edges[:-1]
            rights = hist.edges[1:]
        for left, right, rm, gm in zip(lefts, rights, hist.ref_mass, hist.gen_mass):
            lines.append(f"{left:.9g},{right:.9g},{rm:.9g},{gm:.9g}")
        with open(p, "w") as f:
            f.write("\n".join(lines) + "\n")
        written.append(p)
    return written
