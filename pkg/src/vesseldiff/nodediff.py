"""Continuous diffusion over node coordinates: forward noising, the
noise-prediction loss, and ancestral sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tape, Tensor, mul, sub, tsum
from .graphs import SpatialGraph, DatasetNormalization
from .nets import NodeDenoiser
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class NodeBatch:
    """Padded coordinate batch: coords (B, n_max, 3), mask (B, n_max),
    optional per-element timestep t (B,). Masked slots hold exact zeros."""

    coords: np.ndarray
    mask: np.ndarray
    t: Optional[np.ndarray] = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if coords.ndim != 3 or coords.shape[2] != 3:
            raise ValueError(f"coords must be (B, n, 3), got {coords.shape}")
        if mask.shape != coords.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} mismatches coords {coords.shape}")
        coords = coords * mask[:, :, None]
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "mask", mask)

    @property
    def batch_size(self) -> int:
        return self.coords.shape[0]

    @staticmethod
    def from_graphs(graphs: Sequence[SpatialGraph],
                    norm: Optional[DatasetNormalization] = None) -> "NodeBatch":
        n_max = max(g.n for g in graphs)
        b = len(graphs)
        coords = np.zeros((b, n_max, 3))
        mask = np.zeros((b, n_max), dtype=bool)
        for k, g in enumerate(graphs):
            c = norm.normalize(g.coords) if norm is not None else g.coords
            coords[k, :g.n] = c
            mask[k, :g.n] = True
        return NodeBatch(coords, mask)


def forward_noise_nodes(x0: NodeBatch, t: np.ndarray, eps: np.ndarray,
                        schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form corruption: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    t is per batch element; masked slots stay exactly zero.
    """
    t = np.asarray(t)
    abar = schedule.alpha_bar(t)[:, None, None]
    x_t = np.sqrt(abar) * x0.coords + np.sqrt(1.0 - abar) * eps
    return x_t * x0.mask[:, :, None]


def node_loss_given(model: NodeDenoiser, params: dict, x0: NodeBatch,
                    t: np.ndarray, eps: np.ndarray,
                    schedule: NoiseSchedule) -> Tensor:
    """Mean squared error between eps and the model prediction over unmasked
    coordinates, for caller-chosen (t, eps). Deterministic."""
    x_t = forward_noise_nodes(x0, t, eps, schedule)
    pred = model.forward(params, x_t, t, x0.mask.astype(np.float64))
    m3 = np.broadcast_to(x0.mask[:, :, None], x0.coords.shape).astype(np.float64)
    resid = sub(mul(pred, Tensor(m3)), Tensor(eps * m3))
    denom = 3.0 * max(float(x0.mask.sum()), 1.0)
    return mul(tsum(mul(resid, resid)), 1.0 / denom)


def draw_loss_variates(x0: NodeBatch, schedule: NoiseSchedule,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-element uniform timestep in [1, T] and standard-normal noise."""
    t = rng.integers(1, schedule.T + 1, size=x0.batch_size)
    eps = rng.standard_normal(x0.coords.shape) * x0.mask[:, :, None]
    return t, eps


def node_loss(model: NodeDenoiser, params: dict, x0: NodeBatch,
              schedule: NoiseSchedule, rng: np.random.Generator) -> Tensor:
    t, eps = draw_loss_variates(x0, schedule, rng)
    return node_loss_given(model, params, x0, t, eps, schedule)


def sample_nodes_batch(model: NodeDenoiser, ns: Sequence[int],
                       schedule: NoiseSchedule, rng: np.random.Generator,
                       x_init: Optional[np.ndarray] = None) -> list[np.ndarray]:
    """Ancestral sampling for a batch of graphs with the given node counts.

    Runs X^{t-1} = (X^t - (1-a_t)/sqrt(1-abar_t) * eps_hat) / sqrt(a_t)
    + sqrt(1-a_t) * eps from t = T down to 1, with no noise injected at t=1.
    Returns one (n_i, 3) array per requested count, in normalized units.
    """
    if any(n < 1 for n in ns):
        raise ValueError("node counts must be >= 1")
    b, n_max = len(ns), max(ns)
    mask = np.zeros((b, n_max), dtype=bool)
    for k, n in enumerate(ns):
        mask[k, :n] = True
    m3 = mask[:, :, None]
    x = rng.standard_normal((b, n_max, 3)) if x_init is None else np.array(x_init, dtype=np.float64)
    x = x * m3
    for t in range(schedule.T, 0, -1):
        tb = np.full(b, t)
        eps_hat = model.predict(x, tb, mask.astype(np.float64))
        a = schedule.alpha(t)
        abar = schedule.alpha_bar(t)
        mean = (x - ((1.0 - a) / np.sqrt(1.0 - abar)) * eps_hat) / np.sqrt(a)
        if t > 1:
            noise = rng.standard_normal(x.shape)
            x = mean + np.sqrt(1.0 - a) * noise
        else:
            x = mean
        x = x * m3
    return [x[k, :n].copy() for k, n in enumerate(ns)]


def sample_nodes(model: NodeDenoiser, n: int, schedule: NoiseSchedule,
                 rng: np.random.Generator,
                 x_init: Optional[np.ndarray] = None) -> np.ndarray:
    """Single-graph convenience wrapper; returns (n, 3) normalized coords."""
    init = None if x_init is None else np.asarray(x_init)[None]
    return sample_nodes_batch(model, [n], schedule, rng, x_init=init)[0]
