#!/usr/bin/env python3
"""End-to-end desk-scale pipeline: synth -> train both stages -> sample -> eval.

Used for pilot calibration; writes achieved KL values to a JSON summary so
regressions can be compared against the recorded pilot.
"""

import argparse
import json
import os
import sys
import time

from vesseldiff.cli import main as cli_main


def run(argv) -> dict:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--workdir", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--sample-count", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--node-epochs", type=int, default=None)
    p.add_argument("--edge-epochs", type=int, default=None)
    p.add_argument("--degree-loss-weight", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--summary", default=None)
    args = p.parse_args(argv)

    wd = args.workdir
    os.makedirs(wd, exist_ok=True)
    data = os.path.join(wd, "data")
    node_ck = os.path.join(wd, "nodes.ckpt.json")
    edge_ck = os.path.join(wd, "edges.ckpt.json")
    gen = os.path.join(wd, "gen")
    report = os.path.join(wd, "report.csv")

    timings = {}

    def step(name, argv_):
        t0 = time.time()
        rc = cli_main(argv_)
        timings[name] = time.time() - t0
        if rc != 0:
            raise SystemExit(f"step {name} failed with exit code {rc}")

    step("synth", ["synth", "--family", "capillary", "--count", str(args.count),
                   "--out", data, "--seed", str(args.seed)])
    train_nodes = ["train", "--stage", "nodes", "--data", data, "--out", node_ck,
                   "--preset", "desk", "--seed", str(args.seed)]
    if args.node_epochs:
        train_nodes += ["--epochs", str(args.node_epochs)]
    if args.lr is not None:
        train_nodes += ["--set", f"learning_rate={args.lr}"]
    step("train_nodes", train_nodes)
    train_edges = ["train", "--stage", "edges", "--data", data, "--out", edge_ck,
                   "--preset", "desk", "--seed", str(args.seed)]
    if args.edge_epochs:
        train_edges += ["--epochs", str(args.edge_epochs)]
    if args.degree_loss_weight is not None:
        train_edges += ["--set", f"degree_loss_weight={args.degree_loss_weight}"]
    if args.lr is not None:
        train_edges += ["--set", f"learning_rate={args.lr}"]
    step("train_edges", train_edges)
    step("sample", ["sample", "--nodes", node_ck, "--edges", edge_ck,
                    "--count", str(args.sample_count), "--out", gen,
                    "--seed", str(args.seed)])
    step("eval", ["eval", "--ref", data, "--gen", gen, "--out", report])

    with open(report) as f:
        header, row = f.read().strip().split("\n")
    cols = header.split(",")
    vals = row.split(",")
    kls = {c: float(v) for c, v in zip(cols[3:], vals[3:])}
    summary = {"kl": kls, "timings": timings,
               "train_seconds": timings["train_nodes"] + timings["train_edges"],
               "args": vars(args)}
    out = args.summary or os.path.join(wd, "summary.json")
    with open(out, "w") as f:
        json.dump(summary, f, indent=1)
    print(json.dumps(summary, indent=1))
    return summary


if __name__ == "__main__":
    run(sys.argv[1:])
