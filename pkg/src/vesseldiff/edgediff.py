"""Categorical diffusion over edge labels, conditioned on fixed coordinates.

The forward process multiplies one-hot edge states by marginal transition
matrices Q^t = a_t I + (1 - a_t) 1 m'; their cumulative products have the
same form with a_t replaced by the cumulative retention, which is what makes
single-shot corruption and the reverse-step posterior cheap. Edges live on
the upper triangle and are mirrored, so symmetry holds by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import (Tensor, add, clamp_min, concat, expand, gumbel_softmax,
                       log_softmax, mul, reshape, slice_axis, softmax, sub,
                       tlog, transpose, tsum)
from .graphs import BACKGROUND, SpatialGraph
from .nets import EdgeDenoiser, pair_mask
from .schedule import NoiseSchedule

DEGREE_CAP = 8          # histogram support 0..DEGREE_CAP plus one overflow bucket
DEGREE_SMOOTH = 1e-6
CE_PROB_FLOOR = 1e-12


class PosteriorError(ValueError):
    """Zero normalizer in the reverse-step posterior."""


@dataclass(frozen=True)
class EdgeNoiseModel:
    """Marginal class distribution plus cached transition matrices."""

    m: np.ndarray
    schedule: NoiseSchedule
    Q: np.ndarray = field(init=False)        # (T, c, c), Q[t-1] is step t
    Q_bar: np.ndarray = field(init=False)    # (T+1, c, c), Q_bar[0] = I

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.ndim != 1 or m.size < 2:
            raise ValueError(f"marginal must be a 1-axis distribution over >= 2 classes, got {m.shape}")
        if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-9:
            raise ValueError("marginal entries must be nonnegative and sum to 1")
        object.__setattr__(self, "m", m)
        c = m.size
        eye = np.eye(c)
        ones_m = np.outer(np.ones(c), m)
        alphas = self.schedule.alphas[:, None, None]
        abars = self.schedule.alpha_bars[:, None, None]
        object.__setattr__(self, "Q", alphas * eye + (1.0 - alphas) * ones_m)
        object.__setattr__(self, "Q_bar", abars * eye + (1.0 - abars) * ones_m)

    @property
    def num_classes(self) -> int:
        return self.m.size

    def build_transition(self, t: int) -> np.ndarray:
        """Q^t = a_t I + (1 - a_t) 1 m' (row-stochastic)."""
        if not 1 <= t <= self.schedule.T:
            raise ValueError(f"step {t} outside [1, {self.schedule.T}]")
        return self.Q[t - 1]

    def build_cumulative(self, t: int) -> np.ndarray:
        """Q_bar^t = Q^1 ... Q^t, via the closed form; Q_bar^0 = I."""
        if not 0 <= t <= self.schedule.T:
            raise ValueError(f"step {t} outside [0, {self.schedule.T}]")
        return self.Q_bar[t]


def edge_marginal_from_graphs(graphs: Sequence[SpatialGraph],
                              num_classes: int) -> np.ndarray:
    """Class frequencies over all unordered node pairs, background included."""
    counts = np.zeros(num_classes)
    for g in graphs:
        iu = np.triu_indices(g.n, k=1)
        labels = g.edges[iu]
        counts += np.bincount(labels, minlength=num_classes)
    total = counts.sum()
    if total == 0:
        raise ValueError("no node pairs in the training set")
    return counts / total


def _upper_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(n, k=1)


def _sample_rows(prob_rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of a (k, c) probability matrix."""
    cdf = prob_rows.cumsum(axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(prob_rows.shape[0])
    return (u[:, None] > cdf).sum(axis=1)


def forward_noise_edges(edges: np.ndarray, t: int, noise: EdgeNoiseModel,
                        rng: np.random.Generator) -> np.ndarray:
    """Corrupt a symmetric label matrix in one shot through Q_bar^t.

    Each upper-triangle pair is drawn from the Q_bar row of its clean label,
    mirrored; the diagonal stays background.
    """
    if not 1 <= t <= noise.schedule.T:
        raise ValueError(f"step {t} outside [1, {noise.schedule.T}]")
    edges = np.asarray(edges)
    n = edges.shape[0]
    out = np.zeros_like(edges)
    if n > 1:
        iu = _upper_indices(n)
        rows = noise.build_cumulative(t)[edges[iu]]
        labels = _sample_rows(rows, rng)
        out[iu] = labels
        out[(iu[1], iu[0])] = labels
    return out


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[np.asarray(labels)]


def edge_posterior(e_t_onehot: np.ndarray, e0_hat: np.ndarray, t: int,
                   noise: EdgeNoiseModel) -> np.ndarray:
    """Reverse-step class distribution for one pair.

    p(e_{t-1} | e_t) prop_to (e_t Q^t') * (e0_hat Q_bar^{t-1}), whose
    normalizer is exactly e0_hat Q_bar^t e_t'.
    """
    if not 1 <= t <= noise.schedule.T:
        raise ValueError(f"step {t} outside [1, {noise.schedule.T}]")
    e_t_onehot = np.asarray(e_t_onehot, dtype=np.float64)
    e0_hat = np.asarray(e0_hat, dtype=np.float64)
    num = (e_t_onehot @ noise.build_transition(t).T) * (e0_hat @ noise.build_cumulative(t - 1))
    z = num.sum()
    if z <= 0.0:
        raise PosteriorError(f"zero posterior normalizer at step {t} for pair with "
                             f"observation {e_t_onehot.argmax()}")
    return num / z


def _posterior_rows(obs_labels: np.ndarray, e0_hat_rows: np.ndarray, t: int,
                    noise: EdgeNoiseModel) -> np.ndarray:
    """Vectorized posterior across pairs: obs (k,), e0_hat (k, c) -> (k, c)."""
    lik = noise.build_transition(t).T[obs_labels]            # (k, c): Q[: , obs]'
    prior = e0_hat_rows @ noise.build_cumulative(t - 1)      # (k, c)
    num = lik * prior
    z = num.sum(axis=1, keepdims=True)
    bad = np.nonzero(z[:, 0] <= 0.0)[0]
    if bad.size:
        raise PosteriorError(f"zero posterior normalizer at step {t} for pair index {bad[0]}")
    return num / z


@dataclass(frozen=True)
class EdgeProbBatch:
    """Per-pair class distributions (B, n, n, c) with a node mask (B, n).

    Only the upper triangle is meaningful; the stored tensor mirrors it.
    """

    probs: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if probs.ndim != 4:
            raise ValueError(f"probs must be (B, n, n, c), got {probs.shape}")
        pm = pair_mask(mask.astype(np.float64)).astype(bool)
        sums = probs.sum(axis=-1)
        if np.any(np.abs(sums[pm] - 1.0) > 1e-9):
            raise ValueError("pair distributions must sum to 1 on valid pairs")
        iu = np.triu_indices(probs.shape[1], k=1)
        sym = probs.copy()
        sym[:, iu[1], iu[0]] = probs[:, iu[0], iu[1]]
        object.__setattr__(self, "probs", sym)
        object.__setattr__(self, "mask", mask)


def batch_edges(graphs: Sequence[SpatialGraph]) -> tuple[np.ndarray, np.ndarray]:
    """Pad label matrices to (B, n_max, n_max) plus node mask (B, n_max)."""
    n_max = max(g.n for g in graphs)
    b = len(graphs)
    edges = np.zeros((b, n_max, n_max), dtype=np.int64)
    mask = np.zeros((b, n_max), dtype=bool)
    for k, g in enumerate(graphs):
        edges[k, :g.n, :g.n] = g.edges
        mask[k, :g.n] = True
    return edges, mask


def corrupt_edge_batch(edges: np.ndarray, mask: np.ndarray, t: np.ndarray,
                       noise: EdgeNoiseModel,
                       rng: np.random.Generator) -> np.ndarray:
    """Per-graph one-shot corruption for a padded batch; padding stays 0."""
    out = np.zeros_like(edges)
    for k in range(edges.shape[0]):
        n = int(mask[k].sum())
        out[k, :n, :n] = forward_noise_edges(edges[k, :n, :n], int(t[k]), noise, rng)
    return out


def edge_ce_loss_given(model: EdgeDenoiser, params: dict, edges0: np.ndarray,
                       e_t: np.ndarray, coords: np.ndarray, t: np.ndarray,
                       mask: np.ndarray, reduction: str = "mean") -> Tensor:
    """Cross-entropy between clean one-hot labels and predicted distributions
    over valid upper-triangle pairs, for fixed corruption. Deterministic."""
    c = model.cfg.num_classes
    n = edges0.shape[1]
    logits = model.forward(params, one_hot(e_t, c), coords, t,
                           mask.astype(np.float64))
    target = one_hot(edges0, c)
    upper = np.triu(np.ones((n, n)), k=1)[None]
    weights = pair_mask(mask.astype(np.float64)) * upper
    # log-softmax keeps the gradient equal to (softmax - target) even when
    # the probabilities saturate.
    ce_map = mul(tsum(mul(log_softmax(logits), Tensor(target)), axis=-1), -1.0)
    total = tsum(mul(ce_map, Tensor(weights)))
    if reduction == "sum":
        return total
    if reduction == "mean":
        return mul(total, 1.0 / max(float(weights.sum()), 1.0))
    raise ValueError(f"unknown reduction {reduction!r}")


def edge_ce_loss(model: EdgeDenoiser, params: dict, g: SpatialGraph,
                 coords_normalized: np.ndarray, noise: EdgeNoiseModel,
                 rng: np.random.Generator, t: Optional[int] = None,
                 reduction: str = "mean") -> Tensor:
    """Single-graph wrapper: draws t, corrupts, and scores the prediction."""
    if t is None:
        t = int(rng.integers(1, noise.schedule.T + 1))
    e_t = forward_noise_edges(g.edges, t, noise, rng)
    mask = np.ones((1, g.n), dtype=bool)
    return edge_ce_loss_given(model, params, g.edges[None],
                              e_t[None], coords_normalized[None],
                              np.array([t]), mask, reduction=reduction)


def degree_histogram(degrees: np.ndarray, d_max: int = DEGREE_CAP) -> np.ndarray:
    """Normalized histogram over 0..d_max plus an overflow bucket."""
    clipped = np.minimum(np.asarray(degrees, dtype=np.int64), d_max + 1)
    counts = np.bincount(clipped, minlength=d_max + 2).astype(np.float64)
    return counts / max(counts.sum(), 1.0)


def _smooth(h: np.ndarray, eps: float) -> np.ndarray:
    return (h + eps) / (1.0 + h.size * eps)


def degree_loss_batch(logits: Tensor, target_edges: np.ndarray,
                      mask: np.ndarray, temperature: float,
                      rng: Optional[np.random.Generator] = None,
                      noise: Optional[np.ndarray] = None, hard: bool = True,
                      d_max: int = DEGREE_CAP,
                      smooth_eps: float = DEGREE_SMOOTH) -> Tensor:
    """KL between the batch degree histogram of the target edges and the
    histogram induced by Gumbel-softmax samples of the predicted logits.

    Degrees of the sampled edges are accumulated exactly through a
    Poisson-binomial recursion over partners, so the forward value with hard
    samples is the true histogram while gradients flow through the relaxed
    sample. Histograms are pooled over the mini-batch, capped at d_max with
    an overflow bucket, and smoothed before the divergence.
    """
    if temperature <= 0.0:
        raise ValueError("degree_loss: temperature must be positive")
    b, n = mask.shape
    k_bins = d_max + 2
    node_mask = mask.astype(np.float64)
    pm = pair_mask(node_mask)
    upper = np.triu(np.ones((n, n)), k=1)[None] * pm

    y = gumbel_softmax(logits, temperature, hard=hard, rng=rng, noise=noise)
    nonbg = sub(1.0, reshape(slice_axis(y, -1, BACKGROUND, BACKGROUND + 1),
                             (b, n, n)))
    half = mul(nonbg, Tensor(upper))
    bprob = add(half, transpose(half, (0, 2, 1)))

    state = Tensor(np.broadcast_to(np.eye(1, k_bins)[0], (b, n, k_bins)).copy())
    last_sel = np.zeros(k_bins)
    last_sel[-1] = 1.0
    zero_col = Tensor(np.zeros((b, n, 1)))
    for j in range(n):
        bj = expand(slice_axis(bprob, 2, j, j + 1), (b, n, k_bins))
        shifted = concat([zero_col, slice_axis(state, 2, 0, k_bins - 1)], axis=2)
        keep = mul(state, sub(1.0, bj))
        move = mul(shifted, bj)
        stay_over = mul(mul(state, bj), Tensor(last_sel))
        state = add(add(keep, move), stay_over)

    n_nodes = max(float(node_mask.sum()), 1.0)
    nm = np.broadcast_to(node_mask[:, :, None], (b, n, k_bins)).copy()
    pooled = tsum(tsum(mul(state, Tensor(nm)), axis=0), axis=0)
    pred_hist = mul(add(pooled, smooth_eps * n_nodes),
                    1.0 / (n_nodes * (1.0 + k_bins * smooth_eps)))

    tgt_deg = ((target_edges != BACKGROUND) & pm.astype(bool)).sum(axis=2)
    tgt_hist = _smooth(degree_histogram(tgt_deg[mask], d_max), smooth_eps)
    log_t = np.log(tgt_hist)
    return tsum(mul(Tensor(tgt_hist), sub(Tensor(log_t), tlog(clamp_min(pred_hist, 1e-300)))))


def degree_loss(predicted: EdgeProbBatch, target_edges: np.ndarray,
                temperature: float, rng: Optional[np.random.Generator] = None,
                noise: Optional[np.ndarray] = None, hard: bool = True) -> Tensor:
    """Spec-level entry point taking per-pair probability distributions."""
    logits = Tensor(np.log(np.maximum(predicted.probs, CE_PROB_FLOOR)))
    return degree_loss_batch(logits, target_edges, predicted.mask, temperature,
                             rng=rng, noise=noise, hard=hard)


def edge_total_loss_given(model: EdgeDenoiser, params: dict, edges0: np.ndarray,
                          e_t: np.ndarray, coords: np.ndarray, t: np.ndarray,
                          mask: np.ndarray, gumbel_noise: np.ndarray,
                          temperature: float = 1.0, degree_weight: float = 1.0,
                          hard: bool = True,
                          dropout_rng: Optional[np.random.Generator] = None) -> Tensor:
    """CE plus weighted degree loss sharing one network forward pass."""
    c = model.cfg.num_classes
    n = edges0.shape[1]
    logits = model.forward(params, one_hot(e_t, c), coords, t,
                           mask.astype(np.float64), dropout_rng=dropout_rng)
    target = one_hot(edges0, c)
    upper = np.triu(np.ones((n, n)), k=1)[None]
    weights = pair_mask(mask.astype(np.float64)) * upper
    ce_map = mul(tsum(mul(log_softmax(logits), Tensor(target)), axis=-1), -1.0)
    ce = mul(tsum(mul(ce_map, Tensor(weights))), 1.0 / max(float(weights.sum()), 1.0))
    if degree_weight == 0.0:
        return ce
    deg = degree_loss_batch(logits, edges0, mask, temperature,
                            noise=gumbel_noise, hard=hard)
    return add(ce, mul(deg, degree_weight))


def sample_edges_batch(model: EdgeDenoiser, coords_list: Sequence[np.ndarray],
                       noise: EdgeNoiseModel,
                       rng: np.random.Generator) -> list[np.ndarray]:
    """Ancestral edge sampling for a batch of coordinate sets.

    Upper-triangle labels start from the marginal, and each reverse step
    resamples them from the per-pair posterior built from the model's clean
    prediction. Returns one symmetric (n, n) label matrix per input.
    """
    c = noise.num_classes
    b = len(coords_list)
    ns = [cc.shape[0] for cc in coords_list]
    n_max = max(ns)
    mask = np.zeros((b, n_max), dtype=bool)
    coords = np.zeros((b, n_max, 3))
    for k, cc in enumerate(coords_list):
        mask[k, :ns[k]] = True
        coords[k, :ns[k]] = cc
    labels = np.zeros((b, n_max, n_max), dtype=np.int64)
    pair_idx = [(_upper_indices(n)) for n in ns]
    for k, n in enumerate(ns):
        if n > 1:
            iu = pair_idx[k]
            init = _sample_rows(np.broadcast_to(noise.m, (iu[0].size, c)).copy(), rng)
            labels[k][iu] = init
            labels[k][(iu[1], iu[0])] = init
    if all(n <= 1 for n in ns):
        return [labels[k, :n, :n].copy() for k, n in enumerate(ns)]

    for t in range(noise.schedule.T, 0, -1):
        tb = np.full(b, t)
        logits = model.predict_logits(one_hot(labels, c), coords, tb,
                                      mask.astype(np.float64))
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        e0_hat = e / e.sum(axis=-1, keepdims=True)
        for k, n in enumerate(ns):
            if n <= 1:
                continue
            iu = pair_idx[k]
            post = _posterior_rows(labels[k][iu], e0_hat[k][iu], t, noise)
            new = _sample_rows(post, rng)
            labels[k][iu] = new
            labels[k][(iu[1], iu[0])] = new
    return [labels[k, :n, :n].copy() for k, n in enumerate(ns)]


def sample_edges(model: EdgeDenoiser, coords: np.ndarray, noise: EdgeNoiseModel,
                 rng: np.random.Generator) -> np.ndarray:
    """Single-graph wrapper around sample_edges_batch."""
    return sample_edges_batch(model, [np.asarray(coords, dtype=np.float64)],
                              noise, rng)[0]
