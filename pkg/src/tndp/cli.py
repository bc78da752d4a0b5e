"""Command-line entry point: ``python -m tndp <command> ...``.

Every command accepts ``--seed``, ``--config`` (a flat JSON object whose keys
mirror the training or evolution settings) and ``--out`` (output directory).
Errors are printed to stderr as a JSON object and give a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import (cmd_lc, cmd_plot_pareto, cmd_sweep, cmd_validate, pareto_points,
                    read_records, summarize, write_atomic, write_manifest)
from .city import BENCHMARKS, CITY_KINDS, City, NdpParams, generate_city, load_named_benchmark
from .cost import CostWeights
from .evolution import EaConfig
from .evolution import run as run_evolution
from .policy import load_params
from .streams import stream
from .training import TrainConfig, train

log = logging.getLogger("tndp")


def _load_config(path) -> dict:
    if not path:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError(f"config {path} must be a JSON object")
    return doc


def _city(args) -> City:
    """City from ``--city`` (native JSON) or ``--benchmark`` + ``--data-dir``."""
    if getattr(args, "city", None):
        city = City.load(args.city)
        if city.name is None:
            city.name = Path(args.city).stem
    elif getattr(args, "benchmark", None):
        city = load_named_benchmark(args.benchmark, args.data_dir)
    else:
        raise ValueError("give --city FILE or --benchmark NAME")
    overrides = [getattr(args, k, None) for k in ("S", "MIN", "MAX")]
    if any(v is not None for v in overrides):
        base = city.params or NdpParams(1, 2, 2)
        S, lo, hi = (v if v is not None else d for v, d in
                     zip(overrides, (base.n_routes, base.min_stops, base.max_stops)))
        city = city.with_params(NdpParams(S, lo, hi))
    if city.params is None:
        raise ValueError("the city has no route parameters; pass --S, --MIN and --MAX")
    return city


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="flat JSON file of settings")
    p.add_argument("--out", default="out", help="output directory")


def _add_city(p, many=False):
    if many:
        p.add_argument("--city", action="append", default=[], help="native city JSON (repeatable)")
        p.add_argument("--benchmark", action="append", default=[], help="benchmark name (repeatable)")
    else:
        p.add_argument("--city", help="native city JSON")
        p.add_argument("--benchmark", choices=sorted(b.name for b in BENCHMARKS.values()))
    p.add_argument("--data-dir", default="data", help="directory with benchmark text files")
    for k in ("S", "MIN", "MAX"):
        p.add_argument(f"--{k}", type=int, help=f"override {k}")


def _cost_args(p):
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=5.0)
    p.add_argument("--transfer-penalty", type=float, default=300.0)


def cmd_gen_cities(args):
    cfg = {"count": 10, "n": 20, "kind": None, "rho": 0.1, **_load_config(args.config)}
    for k in ("count", "n", "kind", "rho"):
        if getattr(args, k) is not None:
            cfg[k] = getattr(args, k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kinds = stream(args.seed, "kinds").integers(len(CITY_KINDS), size=cfg["count"])
    for i in range(cfg["count"]):
        kind = cfg["kind"] or CITY_KINDS[kinds[i]]
        city = generate_city(kind, cfg["n"], cfg["rho"], stream(args.seed, "city", i))
        city.save(out / f"city_{i:05d}.json")
    write_manifest(out, "gen-cities", cfg, args.seed)
    return {"written": cfg["count"], "out": str(out)}


def cmd_train(args):
    doc = _load_config(args.config)
    doc["seed"] = args.seed
    config = TrainConfig.from_dict(doc)
    write_manifest(args.out, "train", config.to_dict(), args.seed)
    result = train(config, args.out)
    return {"best_epoch": result.best_epoch,
            "initial_val_cost": result.initial_validation.mean,
            "history": result.history, "checkpoint": str(Path(args.out) / "best.npz")}


def _net(args, required=True):
    if not args.checkpoint:
        if required:
            raise ValueError("a policy checkpoint is required (--checkpoint)")
        return None
    return load_params(args.checkpoint)


def cmd_lc_cli(args):
    city = _city(args)
    net = _net(args)
    cfg = {"K": args.K, "alpha": args.alpha, "beta": args.beta,
           "transfer_penalty": args.transfer_penalty, **_load_config(args.config)}
    res = cmd_lc(city, net, city.params, cfg["K"], cfg["alpha"], args.seed, cfg["beta"],
                 cfg["transfer_penalty"])
    out = Path(args.out)
    write_manifest(out, "lc", {**cfg, "checkpoint": args.checkpoint}, args.seed)
    write_atomic(out / "network.json", json.dumps([list(r) for r in res.routes]))
    write_atomic(out / "costs.json", json.dumps(res.costs))
    write_atomic(out / "cost.json", json.dumps(res.cost.to_dict(), indent=2))
    return {"best": res.cost.to_dict(), "K": len(res.costs)}


def _evolve(args, mode):
    city = _city(args)
    net = _net(args, required=mode == "nea")
    doc = {"alpha": args.alpha, "beta": args.beta, "transfer_penalty": args.transfer_penalty,
           **_load_config(args.config), "mode": mode, "seed": args.seed}
    if args.iterations is not None:
        doc["iterations"] = args.iterations
    cfg = EaConfig(**doc)
    write_manifest(args.out, mode, {**cfg.to_dict(), "checkpoint": args.checkpoint}, args.seed)
    result = run_evolution(city, cfg, net=net)
    result.write(args.out)
    return {"best": result.best.cost.to_dict(), "iterations": cfg.iterations}


def cmd_sweep_cli(args):
    cities = [City.load(p) for p in args.city]
    for c, p in zip(cities, args.city):
        c.name = c.name or Path(p).stem
    cities += [load_named_benchmark(b, args.data_dir) for b in args.benchmark]
    if not cities:
        raise ValueError("give at least one --city or --benchmark")
    cfg = _load_config(args.config)
    modes = args.modes.split(",")
    alphas = ([float(a) for a in args.alphas.split(",")] if args.alphas
              else np.linspace(0.0, 1.0, args.n_alphas).round(10).tolist())
    seeds = list(range(args.seed, args.seed + args.seeds))
    net = _net(args, required=bool({"lc", "nea"} & set(modes)))
    write_manifest(args.out, "sweep", {"modes": modes, "alphas": alphas, "seeds": seeds,
                                       "checkpoint": args.checkpoint, "K": args.K,
                                       "cities": [c.name for c in cities], "ea": cfg}, args.seed)
    records = cmd_sweep(cities, modes, alphas, seeds, net=net, ea_overrides=cfg, K=args.K,
                        beta=args.beta, transfer_penalty=args.transfer_penalty, out_dir=args.out,
                        log=lambda r: log.info("%s", json.dumps(r)))
    failed = [r for r in records if r["error"]]
    return {"cells": len(records), "failed": len(failed), "out": args.out}


def cmd_pareto_cli(args):
    src = Path(args.results)
    if src.is_dir():
        src = src / "records.csv"
    series_by_city = {}
    if src.suffix == ".csv":
        summary = summarize(read_records(src))
        for city in dict.fromkeys(r["city"] for r in summary):
            series_by_city[city] = pareto_points(summary, city)
    else:
        series_by_city = json.loads(src.read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for city, series in series_by_city.items():
        path = out / f"pareto_{city}.svg"
        write_atomic(path, cmd_plot_pareto(series, title=city))
        written.append(str(path))
    if not written:
        raise ValueError("no results to plot")
    return {"written": written}


def cmd_validate_cli(args):
    city = _city(args)
    weights = CostWeights(args.alpha, args.beta, args.transfer_penalty)
    report = cmd_validate(args.network, city, city.params, weights)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "report.json", json.dumps(report, indent=2))
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tndp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-cities", help="write synthetic cities as JSON")
    _add_common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--kind", choices=CITY_KINDS)
    p.add_argument("--rho", type=float)
    p.set_defaults(func=cmd_gen_cities)

    p = sub.add_parser("train", help="train a construction policy")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("lc", help="best of K policy rollouts")
    _add_common(p)
    _add_city(p)
    _cost_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--K", type=int, default=100)
    p.set_defaults(func=cmd_lc_cli)

    for mode in ("ea", "nea"):
        p = sub.add_parser(mode, help=f"run the {'neural ' if mode == 'nea' else ''}evolutionary algorithm")
        _add_common(p)
        _add_city(p)
        _cost_args(p)
        p.add_argument("--checkpoint", required=mode == "nea")
        p.add_argument("--iterations", type=int)
        p.set_defaults(func=lambda a, m=mode: _evolve(a, m))

    p = sub.add_parser("sweep", help="multi-seed, multi-alpha comparison")
    _add_common(p)
    _add_city(p, many=True)
    p.add_argument("--beta", type=float, default=5.0)
    p.add_argument("--transfer-penalty", type=float, default=300.0)
    p.add_argument("--modes", default="lc,ea,nea")
    p.add_argument("--alphas", help="comma-separated alpha values")
    p.add_argument("--n-alphas", type=int, default=3, help="evenly spaced alphas in [0, 1]")
    p.add_argument("--seeds", type=int, default=10, help="number of consecutive seeds")
    p.add_argument("--checkpoint")
    p.add_argument("--K", type=int, default=100)
    p.set_defaults(func=cmd_sweep_cli)

    p = sub.add_parser("pareto-plot", help="SVG trade-off curves from sweep results")
    _add_common(p)
    p.add_argument("--results", required=True, help="sweep directory, records.csv or pareto.json")
    p.set_defaults(func=cmd_pareto_cli)

    p = sub.add_parser("validate", help="check a network against the constraints")
    _add_common(p)
    _add_city(p)
    _cost_args(p)
    p.add_argument("--network", required=True, help="JSON list of routes")
    p.set_defaults(func=cmd_validate_cli)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                     "command": args.command}) + "\n")
        return 1
    sys.stdout.write(json.dumps(result, default=str) + "\n")
    return 0
