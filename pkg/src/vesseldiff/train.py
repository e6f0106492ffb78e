"""Optimization harness: AdamW, the two stage loops, and checkpoints.

Both stages are independent models trained sequentially; checkpoints carry
parameters, optimizer moments, the schedule, dataset normalization, and the
generator state, so an interrupted run resumes bit-exactly under the same
seed.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tape
from .edgediff import (EdgeNoiseModel, batch_edges, corrupt_edge_batch,
                       edge_marginal_from_graphs, edge_total_loss_given)
from .graphs import (DatasetMeta, DatasetNormalization, NodeCountDistribution,
                     SpatialGraph, _atomic_write)
from .nets import EdgeDenoiser, EdgeNetConfig, NodeDenoiser, NodeNetConfig, ParamStore
from .nodediff import NodeBatch, draw_loss_variates, node_loss_given
from .rng import restore_rng, rng_state, substream
from .schedule import NoiseSchedule, make_cosine_schedule

CKPT_FORMAT = "vesseldiff-ckpt-v1"


class NumericError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    stage: str = "nodes"                  # "nodes" | "edges"
    learning_rate: float = 3e-4
    batch_size: int = 64
    epochs: int = 1000
    weight_decay: float = 0.01
    seed: int = 0
    T: int = 1000
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    degree_loss_weight: float = 1.0
    gumbel_temperature: float = 1.0
    clip_norm: float = 1.0          # global gradient-norm ceiling; 0 disables
    dropout: float = 0.0            # edge-net residual dropout while training
    checkpoint_every: int = 50
    preset: str = "paper"
    node_hidden: int = 256
    node_blocks: int = 2
    node_heads: int = 4
    node_time_dim: int = 256
    edge_node_dim: int = 128
    edge_edge_dim: int = 64
    edge_blocks: int = 8
    edge_heads: int = 8
    edge_time_dim: int = 128

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.stage not in ("nodes", "edges"):
            raise ValueError(f"unknown stage {self.stage!r}")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @staticmethod
    def from_json(d: dict) -> "TrainConfig":
        d = dict(d)
        d["betas"] = tuple(d.get("betas", (0.9, 0.999)))
        return TrainConfig(**d)


# The two presets: "paper" keeps the published hyper-parameters; "desk"
# shrinks steps and widths so both stages train in minutes on CPU. Epoch
# budgets for "desk" come from pilot calibration and differ per stage.
PRESETS = {
    "paper": {},
    "desk": {
        "T": 200,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "epochs": {"nodes": 400, "edges": 900},
        "checkpoint_every": 100,
        "node_hidden": 64,
        "node_heads": 4,
        "node_time_dim": 64,
        "edge_node_dim": 64,
        "edge_edge_dim": 32,
        "edge_blocks": 4,
        "edge_heads": 4,
        "edge_time_dim": 64,
    },
}


def make_config(preset: str = "paper", **overrides) -> TrainConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[preset])
    values.update(overrides)
    values["preset"] = preset
    if isinstance(values.get("epochs"), dict):
        values["epochs"] = values["epochs"][values.get("stage", "nodes")]
    return TrainConfig(**values)


def node_net_config(cfg: TrainConfig) -> NodeNetConfig:
    return NodeNetConfig(hidden=cfg.node_hidden, blocks=cfg.node_blocks,
                         heads=cfg.node_heads, time_dim=cfg.node_time_dim)


def edge_net_config(cfg: TrainConfig, num_classes: int) -> EdgeNetConfig:
    return EdgeNetConfig(num_classes=num_classes, node_dim=cfg.edge_node_dim,
                         edge_dim=cfg.edge_edge_dim, blocks=cfg.edge_blocks,
                         heads=cfg.edge_heads, time_dim=cfg.edge_time_dim,
                         film_hidden=cfg.edge_node_dim,
                         mlp_hidden=2 * cfg.edge_node_dim,
                         head_hidden=cfg.edge_node_dim,
                         dropout=cfg.dropout)


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @staticmethod
    def for_params(params: dict) -> "AdamWState":
        return AdamWState(step=0,
                          m={k: np.zeros_like(a) for k, a in params.items()},
                          v={k: np.zeros_like(a) for k, a in params.items()})


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if max_norm > 0.0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float,
               betas: tuple = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> AdamWState:
    """One decoupled-weight-decay Adam update, in place.

    Decay is applied to the parameter before the adaptive step; moments use
    the usual bias correction.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        if weight_decay:
            p -= lr * weight_decay * p
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def _params_to_json(arrays: dict) -> dict:
    return {k: {"shape": list(a.shape), "data": a.reshape(-1).tolist()}
            for k, a in arrays.items()}


def _params_from_json(d: dict) -> dict:
    return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
            for k, v in d.items()}


@dataclass
class Checkpoint:
    stage: str
    epoch: int
    train_config: TrainConfig
    schedule: NoiseSchedule
    params: dict
    adam: AdamWState
    num_classes: int
    normalization: Optional[DatasetNormalization]
    node_counts: Optional[NodeCountDistribution]
    edge_marginal: Optional[np.ndarray]
    rng_state: Optional[dict]

    def save(self, path: str) -> None:
        doc = {
            "format": CKPT_FORMAT,
            "stage": self.stage,
            "epoch": self.epoch,
            "train_config": self.train_config.to_json(),
            "schedule": self.schedule.to_config(),
            "num_classes": self.num_classes,
            "normalization": (self.normalization.to_json()
                              if self.normalization is not None else None),
            "node_count_histogram": (self.node_counts.to_json()
                                     if self.node_counts is not None else None),
            "edge_marginal": (self.edge_marginal.tolist()
                              if self.edge_marginal is not None else None),
            "params": _params_to_json(self.params),
            "adam": {"step": self.adam.step,
                     "m": _params_to_json(self.adam.m),
                     "v": _params_to_json(self.adam.v)},
            "rng_state": self.rng_state,
        }
        _atomic_write(path, json.dumps(doc))

    @staticmethod
    def load(path: str) -> "Checkpoint":
        with open(path) as f:
            doc = json.load(f)
        if doc.get("format") != CKPT_FORMAT:
            raise ValueError(f"{path}: not a {CKPT_FORMAT} checkpoint")
        adam = doc["adam"]
        return Checkpoint(
            stage=doc["stage"],
            epoch=doc["epoch"],
            train_config=TrainConfig.from_json(doc["train_config"]),
            schedule=NoiseSchedule.from_config(doc["schedule"]),
            params=_params_from_json(doc["params"]),
            adam=AdamWState(step=adam["step"], m=_params_from_json(adam["m"]),
                            v=_params_from_json(adam["v"])),
            num_classes=doc["num_classes"],
            normalization=(DatasetNormalization.from_json(doc["normalization"])
                           if doc.get("normalization") else None),
            node_counts=(NodeCountDistribution.from_json(doc["node_count_histogram"])
                         if doc.get("node_count_histogram") else None),
            edge_marginal=(np.array(doc["edge_marginal"])
                           if doc.get("edge_marginal") else None),
            rng_state=doc.get("rng_state"),
        )

    def build_node_model(self) -> NodeDenoiser:
        store = ParamStore()
        store.arrays = {k: v.copy() for k, v in self.params.items()}
        return NodeDenoiser(node_net_config(self.train_config), store)

    def build_edge_model(self) -> tuple[EdgeDenoiser, EdgeNoiseModel]:
        store = ParamStore()
        store.arrays = {k: v.copy() for k, v in self.params.items()}
        model = EdgeDenoiser(edge_net_config(self.train_config, self.num_classes), store)
        noise = EdgeNoiseModel(m=self.edge_marginal, schedule=self.schedule)
        return model, noise


def _node_step(model, schedule, batch_graphs, norm, rng):
    batch = NodeBatch.from_graphs(batch_graphs, norm)
    t, eps = draw_loss_variates(batch, schedule, rng)
    tape = Tape()
    bound = model.store.bind(tape)
    loss = node_loss_given(model, bound, batch, t, eps, schedule)
    tape.backward(loss)
    grads = {k: bound[k].grad for k in model.store.arrays}
    return float(loss.data), grads


def _edge_step(model, noise, cfg, batch_graphs, norm, rng):
    edges, mask = batch_edges(batch_graphs)
    coords = NodeBatch.from_graphs(batch_graphs, norm).coords
    t = rng.integers(1, noise.schedule.T + 1, size=len(batch_graphs))
    e_t = corrupt_edge_batch(edges, mask, t, noise, rng)
    gnoise = rng.gumbel(size=edges.shape + (noise.num_classes,))
    tape = Tape()
    bound = model.store.bind(tape)
    loss = edge_total_loss_given(model, bound, edges, e_t, coords, t, mask,
                                 gumbel_noise=gnoise,
                                 temperature=cfg.gumbel_temperature,
                                 degree_weight=cfg.degree_loss_weight,
                                 dropout_rng=rng if cfg.dropout > 0 else None)
    tape.backward(loss)
    grads = {k: bound[k].grad for k in model.store.arrays}
    return float(loss.data), grads


def train_stage(graphs: Sequence[SpatialGraph], meta: DatasetMeta,
                cfg: TrainConfig, out_path: str,
                resume_from: Optional[str] = None,
                log_path: Optional[str] = None) -> Checkpoint:
    """Run one stage over shuffled mini-batches and save the checkpoint.

    Writes a per-epoch loss log (epoch, stage, mean_loss, wallclock) and a
    checkpoint every cfg.checkpoint_every epochs plus at the end. A NaN loss
    aborts with a diagnostic dump of the offending batch.
    """
    if not graphs:
        raise ValueError("train_stage: dataset is empty")
    if meta.normalization is None:
        raise ValueError("train_stage: dataset meta lacks a normalization")
    norm = meta.normalization
    schedule = make_cosine_schedule(cfg.T)

    if resume_from is not None:
        ck = Checkpoint.load(resume_from)
        if ck.stage != cfg.stage:
            raise ValueError(f"checkpoint stage {ck.stage!r} != config stage {cfg.stage!r}")
        # Everything except the epoch budget comes from the checkpoint, so a
        # resumed trajectory is bit-identical to an uninterrupted one.
        cfg = dataclasses.replace(ck.train_config, epochs=cfg.epochs)
        schedule = ck.schedule
        rng = restore_rng(ck.rng_state)
        start_epoch = ck.epoch
        if cfg.stage == "nodes":
            model = ck.build_node_model()
            noise = None
        else:
            model, noise = ck.build_edge_model()
        adam = ck.adam
    else:
        start_epoch = 0
        init_rng = substream(cfg.seed, f"{cfg.stage}-init")
        rng = substream(cfg.seed, "node-train" if cfg.stage == "nodes" else "edge-train")
        if cfg.stage == "nodes":
            model = NodeDenoiser.create(node_net_config(cfg), init_rng)
            noise = None
        else:
            m = edge_marginal_from_graphs(graphs, meta.num_classes)
            noise = EdgeNoiseModel(m=m, schedule=schedule)
            model = EdgeDenoiser.create(edge_net_config(cfg, meta.num_classes), init_rng)
        adam = AdamWState.for_params(model.store.arrays)

    if log_path is None:
        log_path = os.path.splitext(out_path)[0] + ".log.csv"
    log_exists = resume_from is not None and os.path.exists(log_path)
    log_lines = [] if log_exists else ["epoch,stage,mean_loss,wallclock"]

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(
            stage=cfg.stage, epoch=epoch, train_config=cfg, schedule=schedule,
            params=model.store.arrays, adam=adam, num_classes=meta.num_classes,
            normalization=norm, node_counts=meta.node_counts,
            edge_marginal=None if noise is None else noise.m,
            rng_state=rng_state(rng))

    t_start = time.time()
    order = np.arange(len(graphs))
    ck = snapshot(start_epoch)
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        perm = rng.permutation(len(order))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            batch_graphs = [graphs[i] for i in idx]
            if cfg.stage == "nodes":
                loss, grads = _node_step(model, schedule, batch_graphs, norm, rng)
            else:
                loss, grads = _edge_step(model, noise, cfg, batch_graphs, norm, rng)
            if not np.isfinite(loss):
                dump = out_path + ".nan_batch.json"
                _atomic_write(dump, json.dumps(
                    {"epoch": epoch, "batch_indices": idx.tolist(), "loss": repr(loss)}))
                raise NumericError(f"non-finite loss at epoch {epoch}; batch dumped to {dump}")
            clip_gradients(grads, cfg.clip_norm)
            adamw_step(model.store.arrays, grads, adam, cfg.learning_rate,
                       betas=cfg.betas, eps=cfg.adam_eps,
                       weight_decay=cfg.weight_decay)
            losses.append(loss)
        log_lines.append(f"{epoch},{cfg.stage},{np.mean(losses):.10g},{time.time() - t_start:.3f}")
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            ck = snapshot(epoch)
            ck.save(out_path)
            mode = "a" if log_exists else "w"
            with open(log_path, mode) as f:
                f.write("\n".join(log_lines) + "\n")
            log_lines = []
            log_exists = True
    return ck
