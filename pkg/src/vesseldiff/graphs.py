"""Spatial-graph data model, validation, normalization, and CSV I/O.

A graph is a set of 3D node coordinates plus a symmetric integer matrix of
edge class labels where class 0 means "no edge". On disk a graph is a
directory holding ``nodes.csv`` (id,x,y,z) and ``edges.csv`` (src,dst,class,
non-background undirected edges listed once with src < dst). Datasets are
``root/<split>/<graph_id>/`` with a single ``root/meta.json`` recording the
class count, coordinate normalization, and the node-count histogram.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

BACKGROUND = 0
META_NAME = "meta.json"


class GraphFormatError(ValueError):
    """Malformed graph file; message carries the file and line number."""


@dataclass(frozen=True)
class Violation:
    kind: str            # "symmetry" | "diagonal" | "label_range" | "node_count" | "class_count"
    where: tuple
    message: str

    def __str__(self) -> str:
        return self.message


@dataclass(frozen=True)
class SpatialGraph:
    """Node coordinates (n,3) and symmetric edge class labels (n,n)."""

    coords: np.ndarray
    edges: np.ndarray
    num_classes: int

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        edges = np.asarray(self.edges, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError(f"coords must be (n, 3), got {coords.shape}")
        n = coords.shape[0]
        if edges.shape != (n, n):
            raise ValueError(f"edges must be ({n}, {n}), got {edges.shape}")
        coords.setflags(write=False)
        edges.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "edges", edges)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def edge_list(self) -> list[tuple[int, int, int]]:
        """Non-background undirected edges, each once with src < dst."""
        src, dst = np.nonzero(np.triu(self.edges, k=1))
        return [(int(i), int(j), int(self.edges[i, j])) for i, j in zip(src, dst)]

    def num_edges(self) -> int:
        return int(np.count_nonzero(np.triu(self.edges, k=1)))

    def degrees(self) -> np.ndarray:
        """Per-node count of incident non-background edges."""
        off_diag = (self.edges != BACKGROUND) & ~np.eye(self.n, dtype=bool)
        return off_diag.sum(axis=1)

    def with_coords(self, coords: np.ndarray) -> "SpatialGraph":
        return SpatialGraph(coords=coords, edges=self.edges, num_classes=self.num_classes)


def validate(g: SpatialGraph) -> list[Violation]:
    """Every invariant violation, with locations; empty list iff valid."""
    out: list[Violation] = []
    if g.n < 1:
        out.append(Violation("node_count", (), "n >= 1 violated: graph has no nodes"))
    if g.num_classes < 2:
        out.append(Violation("class_count", (), f"num_classes must be >= 2, got {g.num_classes}"))
    e = g.edges
    bad_sym = np.argwhere(np.triu(e != e.T, k=1))
    for i, j in bad_sym:
        out.append(Violation("symmetry", (int(i), int(j)),
                             f"edges not symmetric at ({i}, {j}): {e[i, j]} != {e[j, i]}"))
    for i in np.nonzero(np.diagonal(e) != BACKGROUND)[0]:
        out.append(Violation("diagonal", (int(i),),
                             f"diagonal must be background at node {i}, got {e[i, i]}"))
    bad_label = np.argwhere((e < 0) | (e >= g.num_classes))
    seen = set()
    for i, j in bad_label:
        key = (min(i, j), max(i, j)) if i != j else (int(i), int(i))
        if key in seen:
            continue
        seen.add(key)
        out.append(Violation("label_range", (int(i), int(j)),
                             f"label {e[i, j]} at ({i}, {j}) outside [0, {g.num_classes - 1}]"))
    return out


@dataclass(frozen=True)
class DatasetNormalization:
    """Per-axis affine map: normalized = (raw - shift) / scale."""

    shift: np.ndarray
    scale: np.ndarray
    degenerate: tuple = (False, False, False)

    def __post_init__(self):
        shift = np.asarray(self.shift, dtype=np.float64).reshape(3)
        scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        if np.any(scale <= 0.0):
            raise ValueError(f"scale must be strictly positive, got {scale}")
        object.__setattr__(self, "shift", shift)
        object.__setattr__(self, "scale", scale)

    def normalize(self, coords: np.ndarray) -> np.ndarray:
        return (np.asarray(coords, dtype=np.float64) - self.shift) / self.scale

    def denormalize(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords, dtype=np.float64) * self.scale + self.shift

    def to_json(self) -> dict:
        return {"shift": self.shift.tolist(), "scale": self.scale.tolist(),
                "degenerate": list(self.degenerate)}

    @staticmethod
    def from_json(d: dict) -> "DatasetNormalization":
        return DatasetNormalization(np.array(d["shift"]), np.array(d["scale"]),
                                    tuple(bool(x) for x in d["degenerate"]))


def fit_normalization(graphs: Iterable[SpatialGraph]) -> DatasetNormalization:
    """Per-axis min-max map sending the fitting set into [-1, 1]^3.

    An axis where every coordinate is equal gets scale 1 and is flagged
    degenerate.
    """
    coords = [g.coords for g in graphs if g.n > 0]
    if not coords:
        raise ValueError("fit_normalization needs at least one node")
    allp = np.concatenate(coords, axis=0)
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    shift = (lo + hi) / 2.0
    half = (hi - lo) / 2.0
    degenerate = half == 0.0
    scale = np.where(degenerate, 1.0, half)
    return DatasetNormalization(shift, scale, tuple(bool(d) for d in degenerate))


@dataclass(frozen=True)
class NodeCountDistribution:
    """Empirical distribution of graph sizes, used to draw n at sampling time."""

    probs: dict  # node count -> probability

    def __post_init__(self):
        p = {int(k): float(v) for k, v in self.probs.items()}
        if any(v < 0 for v in p.values()):
            raise ValueError("node-count probabilities must be nonnegative")
        total = sum(p.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"node-count probabilities sum to {total}, expected 1")
        object.__setattr__(self, "probs", p)

    @staticmethod
    def from_graphs(graphs: Sequence[SpatialGraph]) -> "NodeCountDistribution":
        counts: dict[int, int] = {}
        for g in graphs:
            counts[g.n] = counts.get(g.n, 0) + 1
        total = sum(counts.values())
        return NodeCountDistribution({k: v / total for k, v in sorted(counts.items())})

    def sample(self, rng: np.random.Generator) -> int:
        ns = sorted(self.probs)
        p = np.array([self.probs[k] for k in ns])
        return int(rng.choice(ns, p=p / p.sum()))

    def to_json(self) -> dict:
        return {str(k): v for k, v in self.probs.items()}

    @staticmethod
    def from_json(d: dict) -> "NodeCountDistribution":
        return NodeCountDistribution({int(k): float(v) for k, v in d.items()})


@dataclass
class DatasetMeta:
    num_classes: int
    normalization: Optional[DatasetNormalization] = None
    node_counts: Optional[NodeCountDistribution] = None
    family: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {"num_classes": self.num_classes}
        if self.normalization is not None:
            d["normalization"] = self.normalization.to_json()
        if self.node_counts is not None:
            d["node_count_histogram"] = self.node_counts.to_json()
        if self.family is not None:
            d["family"] = self.family
        d.update(self.extra)
        return d

    @staticmethod
    def from_json(d: dict) -> "DatasetMeta":
        known = {"num_classes", "normalization", "node_count_histogram", "family"}
        return DatasetMeta(
            num_classes=int(d["num_classes"]),
            normalization=(DatasetNormalization.from_json(d["normalization"])
                           if "normalization" in d else None),
            node_counts=(NodeCountDistribution.from_json(d["node_count_histogram"])
                         if "node_count_histogram" in d else None),
            family=d.get("family"),
            extra={k: v for k, v in d.items() if k not in known},
        )


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_meta(directory: str, meta: DatasetMeta) -> None:
    os.makedirs(directory, exist_ok=True)
    _atomic_write(os.path.join(directory, META_NAME),
                  json.dumps(meta.to_json(), indent=1) + "\n")


def find_meta(directory: str, max_up: int = 2) -> Optional[DatasetMeta]:
    """Look for meta.json in the directory or up to max_up ancestors."""
    d = os.path.abspath(directory)
    for _ in range(max_up + 1):
        p = os.path.join(d, META_NAME)
        if os.path.isfile(p):
            with open(p) as f:
                return DatasetMeta.from_json(json.load(f))
        parent = os.path.dirname(d)
        if parent == d:
            break
        d = parent
    return None


def save_graph(g: SpatialGraph, directory: str, write_class_meta: bool = True) -> None:
    """Write nodes.csv + edges.csv; optionally a meta.json carrying num_classes.

    Dataset writers pass write_class_meta=False and keep one meta.json at the
    dataset root instead.
    """
    os.makedirs(directory, exist_ok=True)
    lines = ["id,x,y,z"]
    for i, (x, y, z) in enumerate(g.coords):
        lines.append(f"{i},{x:.17g},{y:.17g},{z:.17g}")
    _atomic_write(os.path.join(directory, "nodes.csv"), "\n".join(lines) + "\n")
    lines = ["src,dst,class"]
    for i, j, c in g.edge_list():
        lines.append(f"{i},{j},{c}")
    _atomic_write(os.path.join(directory, "edges.csv"), "\n".join(lines) + "\n")
    if write_class_meta:
        write_meta(directory, DatasetMeta(num_classes=g.num_classes))


def load_graph(directory: str, num_classes: Optional[int] = None) -> SpatialGraph:
    """Read a graph directory back; num_classes resolves from the argument,
    then a meta.json found in the directory or its ancestors."""
    nodes_path = os.path.join(directory, "nodes.csv")
    edges_path = os.path.join(directory, "edges.csv")
    coords = _read_nodes(nodes_path)
    n = coords.shape[0]
    if n < 1:
        raise GraphFormatError(f"{nodes_path}: n >= 1 violated (no node rows)")
    if num_classes is None:
        meta = find_meta(directory)
        if meta is None:
            raise GraphFormatError(f"{directory}: no num_classes given and no {META_NAME} found")
        num_classes = meta.num_classes
    edges = _read_edges(edges_path, n, num_classes)
    return SpatialGraph(coords=coords, edges=edges, num_classes=num_classes)


def _read_nodes(path: str) -> np.ndarray:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "id,x,y,z":
        raise GraphFormatError(f"{path}:1: expected header 'id,x,y,z'")
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise GraphFormatError(f"{path}:{ln}: expected 4 fields, got {len(parts)}")
        try:
            idx = int(parts[0])
            xyz = [float(p) for p in parts[1:]]
        except ValueError as e:
            raise GraphFormatError(f"{path}:{ln}: {e}") from None
        if idx != len(rows):
            raise GraphFormatError(f"{path}:{ln}: node ids must be 0..n-1 in order, got {idx}")
        rows.append(xyz)
    return np.array(rows, dtype=np.float64).reshape(len(rows), 3)


def _read_edges(path: str, n: int, num_classes: int) -> np.ndarray:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "src,dst,class":
        raise GraphFormatError(f"{path}:1: expected header 'src,dst,class'")
    edges = np.zeros((n, n), dtype=np.int64)
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise GraphFormatError(f"{path}:{ln}: expected 3 fields, got {len(parts)}")
        try:
            i, j, c = (int(p) for p in parts)
        except ValueError as e:
            raise GraphFormatError(f"{path}:{ln}: {e}") from None
        if not (0 <= i < n and 0 <= j < n):
            raise GraphFormatError(f"{path}:{ln}: index out of bounds ({i}, {j}) for n={n}")
        if i >= j:
            raise GraphFormatError(f"{path}:{ln}: edges must satisfy src < dst, got ({i}, {j})")
        if not (1 <= c < num_classes):
            raise GraphFormatError(
                f"{path}:{ln}: class {c} outside [1, {num_classes - 1}] (validation error)")
        edges[i, j] = c
        edges[j, i] = c
    return edges


def save_dataset(graphs: Sequence[SpatialGraph], root: str, meta: DatasetMeta,
                 split: str = "train") -> list[str]:
    """Write graphs as root/<split>/<graph_id>/ plus one root/meta.json."""
    paths = []
    for k, g in enumerate(graphs):
        d = os.path.join(root, split, f"g{k:04d}")
        save_graph(g, d, write_class_meta=False)
        paths.append(d)
    write_meta(root, meta)
    return paths


def find_graph_dirs(root: str) -> list[str]:
    """All directories under root (any depth <= 2) holding a nodes.csv."""
    found = []
    root = os.path.abspath(root)
    for dirpath, dirnames, filenames in os.walk(root):
        depth = os.path.relpath(dirpath, root).count(os.sep)
        if depth > 2:
            dirnames.clear()
            continue
        if "nodes.csv" in filenames:
            found.append(dirpath)
            dirnames.clear()
    return sorted(found)


def load_dataset(root: str) -> tuple[list[SpatialGraph], Optional[DatasetMeta]]:
    meta = find_meta(root, max_up=0)
    dirs = find_graph_dirs(root)
    nc = meta.num_classes if meta is not None else None
    graphs = [load_graph(d, num_classes=nc) for d in dirs]
    return graphs, meta
