"""Command-line entry point: synth / train / sample / eval / verify.

Exit codes: 0 ok, 1 I/O failure, 2 configuration error, 3 numeric failure,
4 verification failure. Every command is deterministic given --seed, and
every run writes a manifest.json (atomically, at run end) into its output
directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .edgediff import sample_edges_batch
from .graphs import (DatasetMeta, GraphFormatError, SpatialGraph, _atomic_write,
                     find_graph_dirs, load_dataset, save_dataset, validate)
from .metrics import evaluate_sets, write_histogram_csvs, write_report_csv
from .nodediff import sample_nodes_batch
from .rng import substream
from .selfcheck import run_all
from .synthdata import build_dataset, default_config
from .train import Checkpoint, NumericError, make_config, train_stage

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4


class ConfigError(ValueError):
    pass


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def write_manifest(out_dir: str, command: str, config: dict, seed: int,
                   inputs: list, outputs: list, started: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "tool_version": __version__,
        "started": started,
        "ended": _now(),
    }
    _atomic_write(os.path.join(out_dir, "manifest.json"), json.dumps(doc, indent=1) + "\n")


def cmd_synth(args) -> int:
    started = _now()
    if args.count < 1:
        raise ConfigError("count >= 1")
    cfg = default_config(args.family, seed=args.seed)
    graphs, meta = build_dataset(cfg, args.count)
    save_dataset(graphs, args.out, meta, split="train")
    write_manifest(args.out, "synth", dataclasses.asdict(cfg), args.seed,
                   [], [args.out], started)
    print(f"wrote {len(graphs)} {args.family} graphs to {args.out}")
    return EXIT_OK


def _parse_config_file(path: str) -> dict:
    values = {}
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            for cast in (int, float):
                try:
                    values[key] = cast(raw)
                    break
                except ValueError:
                    continue
            else:
                values[key] = raw
    return values


def _resolve_train_config(args) -> "TrainConfig":
    overrides: dict = {}
    if args.config:
        overrides.update(_parse_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        for cast in (int, float):
            try:
                overrides[key] = cast(raw)
                break
            except ValueError:
                continue
        else:
            overrides[key] = raw
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    overrides["stage"] = args.stage
    try:
        return make_config(args.preset, **overrides)
    except TypeError as e:
        raise ConfigError(f"bad train config: {e}") from None


def cmd_train(args) -> int:
    started = _now()
    cfg = _resolve_train_config(args)
    if not os.path.isdir(args.data):
        raise ConfigError(f"dataset directory not found: {args.data}")
    graphs, meta = load_dataset(args.data)
    if not graphs:
        raise ConfigError(f"no graphs found under {args.data}")
    if meta is None:
        raise ConfigError(f"{args.data}: missing meta.json")
    ck = train_stage(graphs, meta, cfg, args.out, resume_from=args.resume)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    write_manifest(out_dir, "train", ck.train_config.to_json(), cfg.seed,
                   [args.data], [args.out], started)
    print(f"stage {cfg.stage}: trained {ck.epoch} epochs "
          f"(T={cfg.T}, lr={cfg.learning_rate}, batch={cfg.batch_size}) -> {args.out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    started = _now()
    if args.count < 1:
        raise ConfigError("count >= 1")
    node_ck = Checkpoint.load(args.nodes)
    edge_ck = Checkpoint.load(args.edges)
    if node_ck.stage != "nodes" or edge_ck.stage != "edges":
        raise ConfigError("checkpoints must be a nodes stage and an edges stage")
    if node_ck.schedule.T != edge_ck.schedule.T:
        raise ConfigError(f"incompatible schedules: node T={node_ck.schedule.T} "
                          f"edge T={edge_ck.schedule.T}")
    if node_ck.node_counts is None or node_ck.normalization is None:
        raise ConfigError("node checkpoint lacks node-count histogram or normalization")
    node_model = node_ck.build_node_model()
    edge_model, noise = edge_ck.build_edge_model()
    rng = substream(args.seed, "sample")
    ns = [node_ck.node_counts.sample(rng) for _ in range(args.count)]
    coords_norm = sample_nodes_batch(node_model, ns, node_ck.schedule, rng)
    edge_mats = sample_edges_batch(edge_model, coords_norm, noise, rng)
    graphs = []
    for cn, em in zip(coords_norm, edge_mats):
        g = SpatialGraph(coords=node_ck.normalization.denormalize(cn),
                         edges=em, num_classes=edge_ck.num_classes)
        bad = validate(g)
        if bad:
            raise NumericError(f"sampled graph failed validation: {bad[0]}")
        graphs.append(g)
    meta = DatasetMeta(num_classes=edge_ck.num_classes, family="generated")
    save_dataset(graphs, args.out, meta, split="gen")
    write_manifest(args.out, "sample",
                   {"nodes": args.nodes, "edges": args.edges, "count": args.count},
                   args.seed, [args.nodes, args.edges], [args.out], started)
    print(f"sampled {len(graphs)} graphs -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = _now()
    ref, _ = load_dataset(args.ref)
    gen, _ = load_dataset(args.gen)
    if not ref or not gen:
        raise ConfigError("both --ref and --gen must contain graphs")
    report = evaluate_sets(ref, gen)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    method = os.path.basename(os.path.normpath(args.gen))
    write_report_csv(args.out, {method: report})
    write_histogram_csvs(out_dir, report)
    write_manifest(out_dir, "eval", {"ref": args.ref, "gen": args.gen},
                   0, [args.ref, args.gen], [args.out], started)
    cols = ", ".join(f"{k}={v:.4g}" for k, v in report.kl.items())
    print(f"{method}: {cols}")
    return EXIT_OK


def cmd_verify(args) -> int:
    t0 = time.time()
    results = run_all(seed=args.seed, break_posterior=args.break_posterior)
    all_ok = True
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        all_ok &= ok
    print(f"verify: {'all checks passed' if all_ok else 'CHECKS FAILED'} "
          f"in {time.time() - t0:.1f}s")
    return EXIT_OK if all_ok else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vesseldiff",
                                description="Two-stage diffusion for 3D vessel graphs")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--family", choices=("capillary", "cow"), required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="train one diffusion stage")
    tp.add_argument("--stage", choices=("nodes", "edges"), required=True)
    tp.add_argument("--data", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--preset", choices=("desk", "paper"), default="desk")
    tp.add_argument("--config", help="flat key = value overrides")
    tp.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="single config override (repeatable)")
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--epochs", type=int, default=None)
    tp.add_argument("--resume", help="checkpoint to resume from")
    tp.set_defaults(func=cmd_train)

    gp = sub.add_parser("sample", help="sample graphs from trained checkpoints")
    gp.add_argument("--nodes", required=True)
    gp.add_argument("--edges", required=True)
    gp.add_argument("--count", type=int, required=True)
    gp.add_argument("--out", required=True)
    gp.add_argument("--seed", type=int, default=0)
    gp.set_defaults(func=cmd_sample)

    ep = sub.add_parser("eval", help="KL report between two graph sets")
    ep.add_argument("--ref", required=True)
    ep.add_argument("--gen", required=True)
    ep.add_argument("--out", required=True)
    ep.set_defaults(func=cmd_eval)

    vp = sub.add_parser("verify", help="run the built-in oracle suite")
    vp.add_argument("--seed", type=int, default=0)
    vp.add_argument("--break-posterior", action="store_true",
                    help=argparse.SUPPRESS)
    vp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GraphFormatError, OSError) as e:
        print(f"I/O failure: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
