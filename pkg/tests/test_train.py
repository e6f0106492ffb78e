import json
import os

import numpy as np
import pytest

from vesseldiff.graphs import DatasetMeta
from vesseldiff.synthdata import build_dataset, default_config
from vesseldiff.train import (AdamWState, Checkpoint, NumericError, TrainConfig,
                              adamw_step, make_config, train_stage)


class TestAdamW:
    def test_zero_gradient_leaves_params_unchanged(self):
        params = {"w": np.array([1.0, -2.0, 3.0])}
        state = AdamWState.for_params(params)
        adamw_step(params, {"w": np.zeros(3)}, state, lr=0.1, weight_decay=0.0)
        assert np.array_equal(params["w"], [1.0, -2.0, 3.0])

    def test_constant_gradient_step_approaches_lr(self):
        params = {"w": np.array([0.0])}
        state = AdamWState.for_params(params)
        g = {"w": np.array([0.37])}
        lr = 0.01
        prev = params["w"].copy()
        for k in range(500):
            prev = params["w"].copy()
            adamw_step(params, g, state, lr=lr, weight_decay=0.0)
        step = abs(params["w"][0] - prev[0])
        assert abs(step - lr) / lr < 0.01

    def test_decoupled_decay_is_geometric(self):
        lr, wd = 0.05, 0.2
        params = {"w": np.array([2.0])}
        state = AdamWState.for_params(params)
        for k in range(1, 11):
            adamw_step(params, {"w": np.zeros(1)}, state, lr=lr, weight_decay=wd)
            assert np.isclose(params["w"][0], 2.0 * (1 - lr * wd) ** k, rtol=1e-12)

    def test_nonfinite_gradient_names_parameter(self):
        params = {"good": np.ones(2), "bad": np.ones(2)}
        state = AdamWState.for_params(params)
        grads = {"good": np.zeros(2), "bad": np.array([1.0, np.nan])}
        with pytest.raises(NumericError, match="bad"):
            adamw_step(params, grads, state, lr=0.1)


@pytest.fixture(scope="module")
def tiny_dataset():
    return build_dataset(default_config("capillary", seed=5), 8)


def tiny_cfg(stage, **kw):
    base = dict(stage=stage, epochs=2, batch_size=4, T=10, seed=3,
                checkpoint_every=1,
                node_hidden=16, node_heads=2, node_time_dim=16,
                edge_node_dim=16, edge_edge_dim=8, edge_blocks=1,
                edge_heads=2, edge_time_dim=16)
    base.update(kw)
    return make_config("desk", **base)


class TestTrainStage:
    def test_smoke_two_epochs_writes_log(self, tiny_dataset, tmp_path):
        graphs, meta = tiny_dataset
        out = str(tmp_path / "nodes.json")
        ck = train_stage(graphs, meta, tiny_cfg("nodes"), out)
        assert ck.epoch == 2
        log = (tmp_path / "nodes.log.csv").read_text().strip().split("\n")
        assert log[0] == "epoch,stage,mean_loss,wallclock"
        assert len(log) == 3

    def test_resume_is_bit_exact(self, tiny_dataset, tmp_path):
        graphs, meta = tiny_dataset
        full = train_stage(graphs, meta, tiny_cfg("nodes", epochs=4),
                           str(tmp_path / "full.json"))
        train_stage(graphs, meta, tiny_cfg("nodes", epochs=2),
                    str(tmp_path / "part.json"))
        resumed = train_stage(graphs, meta, tiny_cfg("nodes", epochs=4),
                              str(tmp_path / "res.json"),
                              resume_from=str(tmp_path / "part.json"))
        assert resumed.epoch == 4
        for k in full.params:
            assert np.array_equal(full.params[k], resumed.params[k]), k
        for k in full.params:
            assert np.array_equal(full.adam.m[k], resumed.adam.m[k]), k
        assert full.rng_state == resumed.rng_state

    def test_edge_stage_smoke(self, tiny_dataset, tmp_path):
        graphs, meta = tiny_dataset
        out = str(tmp_path / "edges.json")
        ck = train_stage(graphs, meta, tiny_cfg("edges"), out)
        assert ck.stage == "edges"
        assert ck.edge_marginal is not None
        assert abs(ck.edge_marginal.sum() - 1.0) < 1e-12

    def test_empty_dataset_rejected(self, tiny_dataset, tmp_path):
        _, meta = tiny_dataset
        with pytest.raises(ValueError, match="empty"):
            train_stage([], meta, tiny_cfg("nodes"), str(tmp_path / "x.json"))

    def test_nan_loss_aborts_with_dump(self, tiny_dataset, tmp_path):
        graphs, meta = tiny_dataset
        out = str(tmp_path / "nodes.json")
        ck = train_stage(graphs, meta, tiny_cfg("nodes"), out)
        # poison the checkpoint and resume: loss goes NaN immediately
        ck.params["node_net.lift.w"][:] = np.nan
        poisoned_cfg = tiny_cfg("nodes", epochs=3)
        ck.train_config = poisoned_cfg
        ck.save(str(tmp_path / "bad.json"))
        with pytest.raises(NumericError, match="non-finite loss"):
            train_stage(graphs, meta, poisoned_cfg, str(tmp_path / "y.json"),
                        resume_from=str(tmp_path / "bad.json"))
        assert os.path.exists(str(tmp_path / "y.json") + ".nan_batch.json")

    def test_loss_decreases_on_capillary_set(self):
        graphs, meta = build_dataset(default_config("capillary", seed=9), 16)
        cfg = make_config("desk", stage="nodes", epochs=50, batch_size=8,
                          T=200, seed=1, node_hidden=32, node_heads=2,
                          node_time_dim=32, checkpoint_every=50,
                          learning_rate=1e-3)
        import tempfile
        with tempfile.TemporaryDirectory() as d:
            out = os.path.join(d, "ck.json")
            train_stage(graphs, meta, cfg, out)
            rows = open(os.path.join(d, "ck.log.csv")).read().strip().split("\n")[1:]
        losses = [float(r.split(",")[2]) for r in rows]
        assert losses[49] <= 0.7 * losses[0]


class TestCheckpoint:
    def test_round_trip_is_exact(self, tiny_dataset, tmp_path):
        graphs, meta = tiny_dataset
        out = str(tmp_path / "ck.json")
        ck = train_stage(graphs, meta, tiny_cfg("edges"), out)
        back = Checkpoint.load(out)
        assert back.stage == ck.stage and back.epoch == ck.epoch
        for k in ck.params:
            assert np.array_equal(back.params[k], ck.params[k])
            assert np.array_equal(back.adam.m[k], ck.adam.m[k])
            assert np.array_equal(back.adam.v[k], ck.adam.v[k])
        assert back.adam.step == ck.adam.step
        assert np.array_equal(back.schedule.alphas, ck.schedule.alphas)
        assert np.array_equal(back.normalization.shift, ck.normalization.shift)
        assert np.array_equal(back.edge_marginal, ck.edge_marginal)
        assert back.node_counts.probs == ck.node_counts.probs
        assert back.rng_state == ck.rng_state

    def test_format_guard(self, tmp_path):
        p = tmp_path / "bogus.json"
        p.write_text(json.dumps({"format": "other"}))
        with pytest.raises(ValueError, match="checkpoint"):
            Checkpoint.load(str(p))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(stage="both")
    with pytest.raises(ValueError, match="preset"):
        make_config("gpu")


def test_paper_preset_defaults():
    cfg = make_config("paper", stage="nodes")
    assert cfg.T == 1000
    assert cfg.learning_rate == 0.0003
    assert cfg.batch_size == 64
    assert cfg.epochs == 1000
    assert cfg.node_hidden == 256 and cfg.node_blocks == 2 and cfg.node_heads == 4
    assert cfg.edge_blocks == 8 and cfg.edge_heads == 8
    assert cfg.edge_node_dim == 128 and cfg.edge_edge_dim == 64


def test_desk_preset_pins():
    cfg = make_config("desk", stage="nodes")
    assert cfg.T == 200
    assert cfg.node_hidden == 64
    assert cfg.edge_blocks == 4
