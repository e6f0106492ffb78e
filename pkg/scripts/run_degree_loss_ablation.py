#!/usr/bin/env python3
"""Degree-loss ablation: retrain the edge stage with the degree loss off
(matched seed and data), resample, and compare the degree / edge-count KLs
against the run with the loss enabled."""

import argparse
import json
import os
import sys
import time

from vesseldiff.cli import main as cli_main


def run(argv) -> dict:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--workdir", required=True,
                   help="a completed run_desk_pipeline.py working directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--edge-epochs", type=int, default=None)
    p.add_argument("--sample-count", type=int, default=200)
    p.add_argument("--lr", type=float, default=None)
    args = p.parse_args(argv)

    wd = args.workdir
    data = os.path.join(wd, "data")
    node_ck = os.path.join(wd, "nodes.ckpt.json")
    edge_off = os.path.join(wd, "edges_nodeg.ckpt.json")
    gen_off = os.path.join(wd, "gen_nodeg")
    report_off = os.path.join(wd, "report_nodeg.csv")

    train = ["train", "--stage", "edges", "--data", data, "--out", edge_off,
             "--preset", "desk", "--seed", str(args.seed),
             "--set", "degree_loss_weight=0"]
    if args.edge_epochs:
        train += ["--epochs", str(args.edge_epochs)]
    if args.lr is not None:
        train += ["--set", f"learning_rate={args.lr}"]
    for name, argv_ in [
        ("train", train),
        ("sample", ["sample", "--nodes", node_ck, "--edges", edge_off,
                    "--count", str(args.sample_count), "--out", gen_off,
                    "--seed", str(args.seed)]),
        ("eval", ["eval", "--ref", data, "--gen", gen_off, "--out", report_off]),
    ]:
        rc = cli_main(argv_)
        if rc != 0:
            raise SystemExit(f"{name} failed with exit code {rc}")

    def read_kl(path):
        header, row = open(path).read().strip().split("\n")
        cols, vals = header.split(","), row.split(",")
        return {c: float(v) for c, v in zip(cols[3:], vals[3:])}

    with_deg = read_kl(os.path.join(wd, "report.csv"))
    without = read_kl(report_off)
    comparison = {
        "with_degree_loss": with_deg,
        "without_degree_loss": without,
        "degree_loss_not_worse": (without["deg"] >= with_deg["deg"]
                                  and without["E"] >= with_deg["E"]),
    }
    out = os.path.join(wd, "ablation.json")
    with open(out, "w") as f:
        json.dump(comparison, f, indent=1)
    print(json.dumps(comparison, indent=1))
    return comparison


if __name__ == "__main__":
    run(sys.argv[1:])
