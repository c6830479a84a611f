"""Command line entry point: ``d2drelay run | compare | dump-drop``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from .allocator import SolverOptions, solve
from .harness import (
    MODES,
    ExperimentSpec,
    emit_results,
    format_results,
    load_spec,
    run_drop,
    run_experiment,
)
from .scenario import make_drop, relay_problem
from .topology import ScenarioConfig

log = logging.getLogger("d2drelay")

EXIT_INFEASIBLE = 3


def _solver_flags(p):
    g = p.add_argument_group("solver")
    g.add_argument("--step-a", type=float, help="step scale a (step a/sqrt(t))")
    g.add_argument("--t-max", type=int, help="iteration cap")
    g.add_argument("--epsilon", type=float, help="relative sum-rate stopping tolerance")
    g.add_argument("--mult-init", type=float, help="initial multiplier value")
    g.add_argument("--lambda-ceiling", type=float, help="QoS multiplier infeasibility ceiling")


def _apply_solver_flags(opts: SolverOptions, args) -> SolverOptions:
    changes = {
        "a": args.step_a,
        "t_max": args.t_max,
        "epsilon": args.epsilon,
        "mult_init": args.mult_init,
        "lambda_ceiling": args.lambda_ceiling,
    }
    changes = {k: v for k, v in changes.items() if v is not None}
    return dataclasses.replace(opts, **changes)


def _verbose(p):
    p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)


def _common(p):
    _verbose(p)
    p.add_argument("spec", help="experiment spec file (key = value with optional blocks)")
    p.add_argument("-o", "--output", help="output file; stdout when omitted")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--drops", type=int, help="override num_drops")
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--workers", type=int, help="worker processes for the drops")
    p.add_argument("--figures", action="store_true", help="also write PNG figures next to the output")
    _solver_flags(p)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="d2drelay", description="Relay-aided D2D resource allocation experiments")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment spec")
    _common(p)
    p.add_argument("--mode", choices=MODES, help="override the spec's mode")

    p = sub.add_parser("compare", help="run one spec under several modes on paired drops")
    _common(p)
    p.add_argument("--modes", default="nominal,chance,robust", help="comma-separated modes")

    p = sub.add_parser("dump-drop", help="raw JSON of one drop: topology, gains and allocations")
    p.add_argument("spec", nargs="?", help="spec file; defaults when omitted")
    p.add_argument("--index", type=int, default=0, help="drop index")
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("-o", "--output", help="output file; stdout when omitted")
    p.add_argument("--no-gains", action="store_true", help="omit the gain tensor")
    _verbose(p)
    _solver_flags(p)
    return ap


def _prepare(args, mode=None):
    spec, workers = load_spec(args.spec)
    if args.drops is not None:
        spec.num_drops = args.drops
    if args.seed is not None:
        spec.master_seed = args.seed
    if mode is not None:
        spec.mode = mode
    if getattr(args, "workers", None) is not None:
        workers = args.workers
    spec.solver = _apply_solver_flags(spec.solver, args)
    spec.validate()
    return spec, workers


def _write(text: str, path):
    if path:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _figure_stem(args, suffix=""):
    if args.output:
        return os.path.splitext(args.output)[0] + suffix
    return "d2drelay" + suffix


def _infeasible_dominated(metrics) -> bool:
    total = sum(m.num_drops for m in metrics)
    bad = sum(m.infeasible_drops for m in metrics)
    return total > 0 and bad > 0.5 * total


def cmd_run(args) -> int:
    spec, workers = _prepare(args, args.mode)
    metrics = run_experiment(spec, workers)
    if args.output:
        emit_results(metrics, args.output, args.format)
    else:
        _write(format_results(metrics, args.format), None)
    if args.figures:
        from .plotting import render_figures

        for path in render_figures(metrics, _figure_stem(args)):
            log.info("wrote %s", path)
    if _infeasible_dominated(metrics):
        log.error("more than half of the drops were infeasible")
        return EXIT_INFEASIBLE
    return 0


def cmd_compare(args) -> int:
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise ValueError(f"unknown modes: {bad}")
    results = {}
    status = 0
    for mode in modes:
        spec, workers = _prepare(args, mode)
        metrics = run_experiment(spec, workers)
        results[mode] = metrics
        if _infeasible_dominated(metrics):
            log.error("%s: more than half of the drops were infeasible", mode)
            status = EXIT_INFEASIBLE
    rows = [m for mode in modes for m in results[mode]]
    if args.output:
        emit_results(rows, args.output, args.format)
    else:
        _write(format_results(rows, args.format), None)
    if args.figures:
        from .plotting import render_comparison

        for path in render_comparison(results, _figure_stem(args)):
            log.info("wrote %s", path)
    return status


def cmd_dump_drop(args) -> int:
    if args.spec:
        spec, _ = load_spec(args.spec)
    else:
        spec = ExperimentSpec(ScenarioConfig())
    if args.seed is not None:
        spec.master_seed = args.seed
    spec.solver = _apply_solver_flags(spec.solver, args)
    if spec.sweep is not None:
        spec = spec.points()[0][1]
    drop = make_drop(spec.scenario, spec.master_seed, args.index)
    real = drop.realization
    doc = {
        "master_seed": spec.master_seed,
        "drop_index": args.index,
        "scenario": drop.config.to_dict(),
        "topology": drop.topology.to_dict(),
        "sigma2_w": real.sigma2_w,
    }
    if not args.no_gains:
        doc["gain"] = real.gain.tolist()
    relays = []
    for l in range(drop.topology.num_relays):
        pb = relay_problem(drop, l)
        if pb.num_ues == 0:
            continue
        sol = solve(pb, None, spec.solver)
        relays.append({
            "relay": l,
            "ue_ids": list(pb.ue_ids),
            "x": sol.x.astype(int).tolist(),
            "p1_w": sol.p1.tolist(),
            "p2_w": sol.p2.tolist(),
            "rate_bps": sol.rate.tolist(),
            "sum_rate_bps": sol.sum_rate,
            "iterations": sol.iterations,
            "feasible": sol.feasible,
        })
    doc["nominal"] = relays
    doc["result"] = run_drop(spec, args.index).to_dict()
    _write(json.dumps(doc, indent=1, default=_json_default) + "\n", args.output)
    return 0


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": cmd_run, "compare": cmd_compare, "dump-drop": cmd_dump_drop}
    try:
        return handlers[args.command](args)
    except (ValueError, KeyError) as exc:
        log.error("configuration error: %s", exc)
        return 2
    except OSError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
