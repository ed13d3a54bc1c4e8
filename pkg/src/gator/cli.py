"""Command line: gator analyze | profile-latency | train | prune | report.

Exit status: 0 success, 1 runtime failure, 2 invalid input.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from gator import container
from gator.builtin import builtin_graph
from gator.cost import OBJECTIVES, CostObjective, LatencyTable, cost_factors
from gator.datasets import DatasetError, load_dataset
from gator.executor import check_weights, forward
from gator.hypergraph import build_hypergraph, format_table, to_records
from gator.ir import IRError, dumps, load_network
from gator.pruning import (BranchNotCollapsible, PlanError, apply_pruning, collapse_empty_blocks,
                           extract_plan, report)
from gator.profiler import ProfileConfig, profile_latency
from gator.training import GatedNet, TrainingConfig, TrainingError, initial_weights, run_iterative_pruning

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2
EQUIVALENCE_TOL = 1e-5

log = logging.getLogger("gator")


class InputError(Exception):
    """Invalid user input; maps to exit status 2."""


def _input(fn, *args, what: str = "input"):
    try:
        return fn(*args)
    except (IRError, DatasetError, PlanError, ValueError, KeyError, OSError) as exc:
        raise InputError(f"{what}: {exc}") from exc


def _load_ir(spec: str):
    if spec.startswith("builtin:"):
        return _input(builtin_graph, spec[len("builtin:"):], what="--ir")
    return _input(load_network, spec, what=f"--ir {spec}")


def _need(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise InputError(f"{args.command} requires {', '.join(missing)}")


def _load_weights(g, path):
    w = _input(container.load, path, what=f"--weights {path}")
    _input(check_weights, g, w, what=f"--weights {path}")
    return w


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_analyze(args) -> int:
    _need(args, "ir")
    g = _load_ir(args.ir)
    h = _input(build_hypergraph, g, what="--ir")
    print(format_table(h))
    kinds = [args.objective] if args.objective else ["memory", "flops"]
    factors = {}
    for kind in kinds:
        if kind == "latency":
            if not args.latency_table:
                raise InputError("--objective latency requires --latency-table")
            obj = CostObjective(kind, _input(LatencyTable.load, args.latency_table, what="--latency-table"))
        else:
            obj = CostObjective(kind)
        cf = _input(cost_factors, obj, g, h, what=f"{kind} factors")
        factors[kind] = {str(j): {"lambda": cf.lam[j], "lambda_normalized": cf.normalized[j]} for j in cf.edges}
        print(f"\n{kind} cost per channel (normalized):")
        for j in cf.edges:
            print(f"  edge {j:3d}  {cf.normalized[j]:.6e}")
    prunable = len(h.prunable_edges())
    print(f"\n{h.m} edges, {prunable} prunable, {sum(h.edges[j].trivial for j in h.prunable_edges())} trivial")
    if args.out:
        doc = {"network": g.name, "edges": to_records(h), "factors": factors}
        _write(Path(args.out), json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_profile(args) -> int:
    _need(args, "ir", "out")
    g = _load_ir(args.ir)
    cfg = _input(ProfileConfig, args.warmup, args.repeats, args.batch_size,
                 tuple(args.input_hw) if args.input_hw else None, what="profile config")
    w = _load_weights(g, args.weights) if args.weights else None
    table = profile_latency(g, cfg, w, seed=args.seed or 0)
    _write(Path(args.out), table.dumps())
    print(table.dumps(), end="")
    return EXIT_OK


def _train_config(args) -> TrainingConfig:
    doc = {}
    if args.config:
        doc = _input(lambda p: json.loads(Path(p).read_text()), args.config, what=f"--config {args.config}")
    if args.objective:
        doc["objective"] = args.objective
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.latency_table:
        doc["latency_table"] = args.latency_table
    return _input(TrainingConfig.from_dict, doc, what="config")


def cmd_train(args) -> int:
    _need(args, "ir", "data", "out")
    g = _load_ir(args.ir)
    out = Path(args.out)
    cfg = _train_config(args)
    if args.resume and (out / "config.json").exists():
        saved = _input(TrainingConfig.loads, (out / "config.json").read_text(), what="saved config")
        if saved.to_dict() != cfg.to_dict():
            raise InputError(f"--resume: config differs from {out / 'config.json'}")
    base = Path(args.config).parent if args.config else None
    objective = _input(cfg.cost_objective, base, what="objective")
    data = _input(load_dataset, args.data, what=f"--data {args.data}")
    if g.spatial[g.output_layer.id] is not None:
        raise InputError("training needs a network whose output is a vector of class scores")
    if data.image_shape != g.input_shape:
        raise InputError(f"dataset images {data.image_shape} do not match network input {g.input_shape}")
    if data.classes > g.num_classes:
        raise InputError(f"dataset has {data.classes} classes, network outputs {g.num_classes}")
    net = _input(GatedNet.build, g, what="--ir")
    _input(objective.check_covers, net.hypergraph, what="latency table")
    pretrain = args.weights is None
    w = _load_weights(g, args.weights) if args.weights else initial_weights(g, cfg.seed)
    res = run_iterative_pruning(net, w, data, cfg, out=out, objective=objective, resume=args.resume,
                                pretrain=pretrain)
    plan = extract_plan(res.gates, net.hypergraph)
    _write(out / "plan.json", plan.dumps())
    container.save(out / "final.weights", res.weights)
    container.save_gates(out / "final.gates", res.gates)
    pruned = apply_pruning(g, res.weights, plan, net.hypergraph)
    rep = report(g, pruned)
    final_acc = res.log.records[-1]["eval_accuracy"] if res.log.records else res.baseline_accuracy
    summary = {
        "baseline_accuracy": res.baseline_accuracy,
        "final_accuracy": final_acc,
        "gamma": res.gamma,
        "calibration": res.calibration,
        "flops_reduction_pct": rep["flops_reduction_pct"],
        "memory_reduction_pct": rep["memory_reduction_pct"],
        "pruned_channels": res.gates.total_pruned(),
    }
    _write(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_OK


def equivalence_gap(g, w, pruned, plan, h, n: int = 100, seed: int = 0) -> float:
    """Max abs difference between the masked original and the emitted network."""
    from gator.gating import place_gates

    x = np.random.default_rng(seed).standard_normal((n, *g.input_shape))
    site = place_gates(h).site_masks(plan.masks(h))
    gap = 0.0
    for i in range(0, n, 25):
        a = forward(g, w, x[i:i + 25], "eval", site_masks=site)
        b = forward(pruned.graph, pruned.weights, x[i:i + 25], "eval")
        gap = max(gap, float(np.max(np.abs(a - b))))
    return gap


def cmd_prune(args) -> int:
    _need(args, "ir", "weights", "gates", "out")
    g = _load_ir(args.ir)
    h = _input(build_hypergraph, g, what="--ir")
    w = _load_weights(g, args.weights)
    gates = _input(container.load_gates, args.gates, what=f"--gates {args.gates}")
    if sorted(gates.edges) != h.prunable_edges() or any(
            gates.theta[j].shape != (h.edges[j].channel_count,) for j in gates.edges):
        raise InputError("gate checkpoint does not match the network's dependency edges")
    plan = extract_plan(gates, h)
    _input(plan.validate, h, what="plan")
    pruned = apply_pruning(g, w, plan, h)
    gap = equivalence_gap(g, w, pruned, plan, h)
    if not gap <= EQUIVALENCE_TOL:
        log.error("emitted network differs from the gated network by %.3g; nothing written", gap)
        return EXIT_RUNTIME
    pruned = collapse_empty_blocks(pruned, strict=False)
    for item in pruned.not_collapsed:
        log.warning("empty branch %s outputs non-zero values; kept", item)
    out = Path(args.out)
    _write(out / "pruned.json", dumps(pruned.graph))
    container.save(out / "pruned.weights", pruned.weights)
    _write(out / "plan.json", plan.dumps())
    rep = report(g, pruned)
    rep["equivalence_gap"] = gap
    rep["collapsed_layers"] = pruned.collapsed
    rep["not_collapsed"] = pruned.not_collapsed
    _write(out / "report.json", json.dumps(rep, indent=1, sort_keys=True) + "\n")
    print(_format_report(rep))
    return EXIT_OK


def _format_report(rep: dict) -> str:
    lines = [
        f"FLOPs   {rep['flops_original']:>14,d} -> {rep['flops_pruned']:>14,d}  ({rep['flops_reduction_pct']:.2f}% reduction)",
        f"params  {rep['params_original']:>14,d} -> {rep['params_pruned']:>14,d}  ({rep['memory_reduction_pct']:.2f}% reduction)",
        f"layers  {rep['layers_original']:>14d} -> {rep['layers_pruned']:>14d}  ({rep['layer_count_delta']:+d})",
    ]
    return "\n".join(lines)


def cmd_report(args) -> int:
    _need(args, "ir", "pruned")
    g = _load_ir(args.ir)
    p = _load_ir(args.pruned)
    hw = tuple(args.input_hw) if args.input_hw else None
    rep = _input(report, g, p, hw, what="report")
    print(_format_report(rep))
    if args.out:
        _write(Path(args.out), json.dumps(rep, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gator", description="Channel pruning with learned hard gates.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--ir", help="network description (JSON path or builtin:<name>)")
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--objective", choices=OBJECTIVES)
        sp.add_argument("--latency-table")
        sp.add_argument("--weights")
        sp.add_argument("--gates")
        sp.add_argument("--data")
        sp.add_argument("--config")
        return sp

    common(sub.add_parser("analyze", help="dependency edges and cost factors"))
    sp = common(sub.add_parser("profile-latency", help="measure per-edge latency factors"))
    sp.add_argument("--warmup", type=int, default=2)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--input-hw", type=int, nargs=2)
    sp = common(sub.add_parser("train", help="iterative gated pruning"))
    sp.add_argument("--resume", action="store_true")
    common(sub.add_parser("prune", help="emit the pruned network"))
    sp = common(sub.add_parser("report", help="compare an original and a pruned network"))
    sp.add_argument("--pruned")
    sp.add_argument("--input-hw", type=int, nargs=2)
    return p


COMMANDS = {"analyze": cmd_analyze, "profile-latency": cmd_profile, "train": cmd_train,
            "prune": cmd_prune, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except InputError as exc:
        print(f"gator {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingError, BranchNotCollapsible, RuntimeError, ValueError, ArithmeticError, OSError) as exc:
        print(f"gator {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
