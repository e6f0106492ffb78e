"""Acceptance gate: every criterion runs at its stated tolerance and prints
one ACCEPTANCE line. Criteria 7-9 share one end-to-end desk-scale run."""

import json
import os
import time
import warnings

import numpy as np
import pytest
from scipy import stats

from vesseldiff import selfcheck
from vesseldiff.cli import main as cli_main
from vesseldiff.graphs import SpatialGraph, load_dataset, validate
from vesseldiff.metrics import evaluate_sets
from vesseldiff.synthdata import default_config, gen_capillary_patch

PILOT_PATH = os.path.join(os.path.dirname(__file__), "..", "pilot_metrics.json")

TIGHT = ("deg", "E", "b0")                      # KL <= 0.15
LOOSE = ("len", "angle", "orient", "xyz", "b1")  # KL <= 0.30


def report(num: int, name: str, checks: dict) -> None:
    ok = all(checks.values())
    detail = ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items())
    print(f"\nACCEPTANCE {num} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num} failed: {detail}"


def test_c1_transition_matrix_oracle():
    rng = np.random.default_rng(101)
    t0 = time.time()
    r = selfcheck.check_cumulative_closed_form(rng, class_counts=(2, 3, 4, 14),
                                               t_max=50)
    dt = time.time() - t0
    report(1, "transition-matrix oracle", {
        "closed_form_1e-9": r["max_err"] < 1e-9,
        "row_sums_1e-12": r["max_row_sum_err"] < 1e-12,
        "runtime_5s": dt < 5.0,
    })


def test_c2_posterior_oracle():
    rng = np.random.default_rng(202)
    t0 = time.time()
    r = selfcheck.check_posterior_bayes(rng, trials=10_000)
    dt = time.time() - t0
    report(2, "posterior oracle", {
        "bayes_1e-10": r["max_err"] < 1e-10,
        "trials_1e4": r["trials"] == 10_000,
        "runtime_10s": dt < 10.0,
    })


def test_c3_gradient_suite():
    rng = np.random.default_rng(303)
    t0 = time.time()
    prim = selfcheck.check_grad_primitives(rng)
    node = selfcheck.check_grad_node_loss(rng)
    edge = selfcheck.check_grad_edge_loss(rng)
    dt = time.time() - t0
    report(3, "gradient suite", {
        "primitives_1e-6": prim["max_err"] < 1e-6,
        "node_loss_1e-4": node["max_err"] < 1e-4,
        "edge_loss_1e-4": edge["max_err"] < 1e-4,
        "runtime_60s": dt < 60.0,
    })


def test_c4_forward_process_statistics():
    from vesseldiff.edgediff import EdgeNoiseModel, forward_noise_edges
    from vesseldiff.nodediff import NodeBatch, forward_noise_nodes
    from vesseldiff.schedule import make_cosine_schedule

    t0 = time.time()
    rng = np.random.default_rng(404)
    sched = make_cosine_schedule(100)
    t_mid = 60
    x0 = np.full((1, 4, 3), 1.5)
    draws = np.empty((100_000, 4, 3))
    for k in range(0, 100_000, 10_000):
        big = NodeBatch(np.broadcast_to(x0[0], (10_000, 4, 3)).copy(),
                        np.ones((10_000, 4), dtype=bool))
        eps = rng.standard_normal((10_000, 4, 3))
        draws[k:k + 10_000] = forward_noise_nodes(big, np.full(10_000, t_mid),
                                                  eps, sched)
    abar = sched.alpha_bar(t_mid)
    mean_ok = np.abs(draws.mean(axis=0) - np.sqrt(abar) * 1.5).max() \
        / (np.sqrt(abar) * 1.5) < 0.01
    var_ok = abs(draws.var() - (1 - abar)) / (1 - abar) < 0.01

    m = np.array([0.6, 0.2, 0.15, 0.05])
    noise = EdgeNoiseModel(m=m, schedule=make_cosine_schedule(50))
    n = 120
    corrupted = forward_noise_edges(np.zeros((n, n), dtype=np.int64), 50,
                                    noise, rng)
    iu = np.triu_indices(n, k=1)
    counts = np.bincount(corrupted[iu], minlength=4)
    total = iu[0].size
    sigma_ok = all(
        abs(counts[c] / total - m[c]) < 3 * np.sqrt(m[c] * (1 - m[c]) / total) + 1e-9
        for c in range(4))
    dt = time.time() - t0
    report(4, "forward-process statistics", {
        "mc_mean_1pct": mean_ok,
        "mc_var_1pct": var_ok,
        "terminal_marginal_3sigma": sigma_ok,
        "runtime_30s": dt < 30.0,
    })


def test_c5_topology_oracle():
    rng = np.random.default_rng(505)
    t0 = time.time()
    r = selfcheck.check_betti(rng, graphs=1000)
    dt = time.time() - t0
    report(5, "topology oracle", {
        "exact_on_1000": r["mismatches"] == 0,
        "runtime_5s": dt < 5.0,
    })


def test_c6_metrics_sanity():
    graphs = [gen_capillary_patch(default_config("capillary", seed=s))
              for s in range(30)]
    self_rep = evaluate_sets(graphs, list(graphs))
    stripped = [SpatialGraph(coords=g.coords, edges=np.zeros_like(g.edges),
                             num_classes=g.num_classes) for g in graphs]
    contrast = evaluate_sets(graphs, stripped)
    report(6, "metrics sanity", {
        "self_kl_1e-9": all(v <= 1e-9 for v in self_rep.kl.values()),
        "contrast_topology_0.5": all(contrast.kl[c] > 0.5
                                     for c in ("deg", "E", "b0", "b1")),
        "contrast_coords_unchanged": contrast.kl["xyz"] <= 1e-9,
    })


def _run_cli(*argv):
    rc = cli_main(list(argv))
    assert rc == 0, f"command {argv} exited {rc}"


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Criterion-7 pipeline: synth 200 -> train both desk stages -> sample 200
    -> eval. Shared by criteria 7, 8, and 9."""
    wd = tmp_path_factory.mktemp("desk_e2e")
    data = str(wd / "data")
    nodes = str(wd / "nodes.ckpt.json")
    edges = str(wd / "edges.ckpt.json")
    gen = str(wd / "gen")
    rep = str(wd / "report.csv")

    _run_cli("synth", "--family", "capillary", "--count", "200",
             "--out", data, "--seed", "0")
    t0 = time.time()
    _run_cli("train", "--stage", "nodes", "--data", data, "--out", nodes,
             "--preset", "desk", "--seed", "0")
    _run_cli("train", "--stage", "edges", "--data", data, "--out", edges,
             "--preset", "desk", "--seed", "0")
    train_seconds = time.time() - t0
    _run_cli("sample", "--nodes", nodes, "--edges", edges, "--count", "200",
             "--out", gen, "--seed", "0")
    _run_cli("eval", "--ref", data, "--gen", gen, "--out", rep)
    header, row = open(rep).read().strip().split("\n")
    cols, vals = header.split(","), row.split(",")
    kl = {c: float(v) for c, v in zip(cols[3:], vals[3:])}
    return {"wd": wd, "data": data, "nodes": nodes, "edges": edges,
            "gen": gen, "kl": kl, "train_seconds": train_seconds}


def test_c7_end_to_end_desk_run(desk_run):
    kl = desk_run["kl"]
    checks = {"train_budget_30min": desk_run["train_seconds"] < 1800.0}
    for col in TIGHT:
        checks[f"{col}<=0.15"] = kl[col] <= 0.15
    for col in LOOSE:
        checks[f"{col}<=0.30"] = kl[col] <= 0.30
    if os.path.exists(PILOT_PATH):
        pilot = json.load(open(PILOT_PATH))["kl"]
        for col, v in pilot.items():
            checks[f"{col}<=2x_pilot"] = kl[col] <= 2.0 * v + 1e-9
    print("\nACCEPTANCE 7 achieved KL:",
          {k: round(v, 4) for k, v in kl.items()},
          f"train={desk_run['train_seconds']:.0f}s")
    report(7, "end-to-end desk run", checks)


def test_c8_degree_loss_ablation(desk_run):
    wd = desk_run["wd"]
    edges_off = str(wd / "edges_nodeg.ckpt.json")
    gen_off = str(wd / "gen_nodeg")
    rep_off = str(wd / "report_nodeg.csv")
    _run_cli("train", "--stage", "edges", "--data", desk_run["data"],
             "--out", edges_off, "--preset", "desk", "--seed", "0",
             "--set", "degree_loss_weight=0")
    _run_cli("sample", "--nodes", desk_run["nodes"], "--edges", edges_off,
             "--count", "200", "--out", gen_off, "--seed", "0")
    _run_cli("eval", "--ref", desk_run["data"], "--gen", gen_off,
             "--out", rep_off)
    header, row = open(rep_off).read().strip().split("\n")
    cols, vals = header.split(","), row.split(",")
    kl_off = {c: float(v) for c, v in zip(cols[3:], vals[3:])}
    kl_on = desk_run["kl"]
    not_improved = kl_off["deg"] >= kl_on["deg"] and kl_off["E"] >= kl_on["E"]
    print(f"\nACCEPTANCE 8 degree-loss ablation: with deg={kl_on['deg']:.4f} "
          f"E={kl_on['E']:.4f}; without deg={kl_off['deg']:.4f} "
          f"E={kl_off['E']:.4f} -> {'PASS' if not_improved else 'INVESTIGATE'}")
    if not not_improved:
        # Tracked comparison: desk-scale variance may dominate, so this is
        # flagged for investigation rather than failed outright.
        warnings.warn("degree-loss ablation improved deg/E KL; investigate "
                      f"(with={kl_on}, without={kl_off})")


def test_c9_structural_validity_and_determinism(desk_run):
    wd = desk_run["wd"]
    big = str(wd / "gen500")
    _run_cli("sample", "--nodes", desk_run["nodes"], "--edges",
             desk_run["edges"], "--count", "500", "--out", big,
             "--seed", "123")
    graphs, meta = load_dataset(big)
    all_valid = len(graphs) == 500 and all(validate(g) == [] for g in graphs)

    # node-count histogram matches the training meta (chi-square)
    from vesseldiff.train import Checkpoint
    node_ck = Checkpoint.load(desk_run["nodes"])
    probs = node_ck.node_counts.probs
    ns = np.array([g.n for g in graphs])
    support = sorted(probs)
    observed = np.array([(ns == k).sum() for k in support], dtype=float)
    expected = np.array([probs[k] * len(ns) for k in support])
    chi2, p = stats.chisquare(observed, expected)
    count_match = p > 0.01

    a, b = str(wd / "det_a"), str(wd / "det_b")
    for out in (a, b):
        _run_cli("sample", "--nodes", desk_run["nodes"], "--edges",
                 desk_run["edges"], "--count", "5", "--out", out,
                 "--seed", "77")
    ga, _ = load_dataset(a)
    gb, _ = load_dataset(b)
    deterministic = all(
        np.array_equal(x.coords, y.coords) and np.array_equal(x.edges, y.edges)
        for x, y in zip(ga, gb))
    report(9, "structural validity and determinism", {
        "500_all_valid": all_valid,
        "node_count_chi_square": count_match,
        "bit_exact_sampling": deterministic,
    })
