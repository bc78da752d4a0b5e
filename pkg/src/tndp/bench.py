"""Experiment harness: best-of-K sampling, multi-seed sweeps, tables and SVG plots."""

from __future__ import annotations

import csv
import html
import io
import json
import os
import platform
import subprocess
import sys
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .city import City, NdpParams
from .cost import CostWeights, constraint_report, total_cost
from .evolution import EaConfig, load_network
from .evolution import run as run_evolution
from .streams import stream

SWEEP_MODES = ("lc", "ea", "nea")
RECORD_COLUMNS = ("city", "mode", "alpha", "seed", "C", "C_p_minutes", "C_o_minutes", "C_c",
                  "seconds", "error")


# -- provenance -------------------------------------------------------------

def code_version() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=here, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from importlib.metadata import PackageNotFoundError, version
    try:
        return "artifact " + version("artifact")
    except PackageNotFoundError:
        return "unknown"


def write_manifest(out_dir, command: str, config: dict, seed: int, argv=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "seed": seed,
        "config": config,
        "argv": list(sys.argv if argv is None else argv),
        "code_version": code_version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path = out / "manifest.json"
    write_atomic(path, json.dumps(doc, indent=2, default=str))
    return path


def write_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# -- learned constructor ----------------------------------------------------

@dataclass
class LcResult:
    routes: tuple
    cost: object
    costs: list[float]


def cmd_lc(city: City, net, params: NdpParams, K: int = 100, alpha: float = 1.0, seed: int = 0,
           beta: float = 5.0, transfer_penalty: float = 300.0) -> LcResult:
    """Sample ``K`` policy rollouts and keep the cheapest network.

    Rollout ``k`` uses its own stream, so the first ``k`` samples are the same
    for any ``K >= k``.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    rngs = [stream(seed, "lc", k) for k in range(K)]
    episodes = net.rollout([city] * K, params, alpha, rngs, beta=beta,
                           transfer_penalty=transfer_penalty)
    costs = [e.cost.total for e in episodes]
    best = episodes[int(np.argmin(costs))]
    return LcResult(best.routes, best.cost, costs)


# -- sweeps -----------------------------------------------------------------

def run_cell(city: City, mode: str, alpha: float, seed: int, params: NdpParams, *, net=None,
             ea_overrides: dict | None = None, K: int = 100, beta: float = 5.0,
             transfer_penalty: float = 300.0) -> tuple[dict, tuple]:
    """Run one (mode, alpha, seed) cell; returns its record and network."""
    start = time.perf_counter()
    if mode == "lc":
        if net is None:
            raise ValueError("lc mode needs a policy checkpoint")
        res = cmd_lc(city, net, params, K, alpha, seed, beta, transfer_penalty)
        routes, cost = res.routes, res.cost
    elif mode in ("ea", "nea"):
        cfg = EaConfig(**{**(ea_overrides or {}), "mode": mode, "alpha": alpha, "seed": seed,
                          "beta": beta, "transfer_penalty": transfer_penalty})
        res = run_evolution(city, cfg, net=net, params=params)
        routes, cost = res.best.network, res.best.cost
    else:
        raise ValueError(f"unknown mode {mode!r}")
    record = {"city": city.name or "city", "mode": mode, "alpha": float(alpha), "seed": int(seed),
              "C": cost.total, "C_p_minutes": cost.passenger_minutes,
              "C_o_minutes": cost.operator_minutes, "C_c": cost.constraint,
              "seconds": time.perf_counter() - start, "error": ""}
    return record, routes


def cmd_sweep(cities, modes, alphas, seeds, *, net=None, ea_overrides=None, K: int = 100,
              beta: float = 5.0, transfer_penalty: float = 300.0, out_dir=None,
              log=None) -> list[dict]:
    """Run every (city, mode, alpha, seed) cell; failures are recorded, not raised.

    With ``out_dir`` each finished cell is written to ``cells/`` as it
    completes, followed by ``records.csv``, ``table.md``, ``table.json`` and
    ``pareto.json``.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "cells").mkdir(parents=True, exist_ok=True)
    records = []
    for city in cities:
        params = city.params
        for mode in modes:
            for alpha in alphas:
                for seed in seeds:
                    try:
                        rec, routes = run_cell(city, mode, alpha, seed, params, net=net,
                                               ea_overrides=ea_overrides, K=K, beta=beta,
                                               transfer_penalty=transfer_penalty)
                    except Exception as exc:  # a failed cell must not stop the sweep
                        rec = {k: None for k in RECORD_COLUMNS}
                        rec.update(city=city.name or "city", mode=mode, alpha=float(alpha),
                                   seed=int(seed), error=f"{type(exc).__name__}: {exc}")
                        routes = None
                    records.append(rec)
                    if log:
                        log(rec)
                    if out is not None:
                        name = f"{rec['city']}_{mode}_a{alpha:.2f}_s{seed}.json"
                        write_atomic(out / "cells" / name, json.dumps(
                            {"record": rec, "routes": None if routes is None else [list(r) for r in routes]}))
    if out is not None:
        write_sweep_outputs(out, records)
    return records


def summarize(records) -> list[dict]:
    """Mean and standard deviation of C per (city, mode, alpha) over seeds."""
    cells: dict[tuple, list[dict]] = {}
    for r in records:
        cells.setdefault((r["city"], r["mode"], r["alpha"]), []).append(r)
    rows = []
    for (city, mode, alpha), group in cells.items():
        ok = [r for r in group if not r.get("error")]
        c = np.array([r["C"] for r in ok], dtype=float)
        rows.append({
            "city": city, "mode": mode, "alpha": alpha, "runs": len(group), "failed": len(group) - len(ok),
            "C_mean": float(c.mean()) if len(c) else None,
            "C_std": float(c.std()) if len(c) else None,
            "C_p_minutes_mean": _mean(ok, "C_p_minutes"), "C_p_minutes_std": _std(ok, "C_p_minutes"),
            "C_o_minutes_mean": _mean(ok, "C_o_minutes"), "C_o_minutes_std": _std(ok, "C_o_minutes"),
            "violating_seeds": [r["seed"] for r in ok if r["C_c"] > 0],
        })
    return rows


def _mean(rows, key):
    return float(np.mean([r[key] for r in rows])) if rows else None


def _std(rows, key):
    return float(np.std([r[key] for r in rows])) if rows else None


def format_table(summary) -> str:
    """Markdown table with one row per (alpha, mode) and one column per city.

    Cells read ``mean ± std``; a trailing ``*`` marks cells where at least one
    seed violated a constraint (C_c > 0).
    """
    cities = list(dict.fromkeys(r["city"] for r in summary))
    index = {(r["alpha"], r["mode"], r["city"]): r for r in summary}
    keys = sorted({(r["alpha"], r["mode"]) for r in summary},
                  key=lambda k: (k[0], _mode_rank(k[1])))
    lines = ["| α | Method | " + " | ".join(cities) + " |",
             "|---|---|" + "---|" * len(cities)]
    for alpha, mode in keys:
        cells = []
        for city in cities:
            r = index.get((alpha, mode, city))
            if r is None or r["C_mean"] is None:
                cells.append("n/a")
            else:
                mark = "*" if r["violating_seeds"] else ""
                cells.append(f"{r['C_mean']:.3f} ± {r['C_std']:.3f}{mark}")
        lines.append(f"| {alpha:.1f} | {mode.upper()} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _mode_rank(mode):
    return SWEEP_MODES.index(mode) if mode in SWEEP_MODES else len(SWEEP_MODES)


def pareto_points(summary, city: str | None = None) -> dict[str, list[dict]]:
    """Per-mode (C_p, C_o) points in minutes, sorted by alpha."""
    series: dict[str, list[dict]] = {}
    for r in summary:
        if (city is not None and r["city"] != city) or r["C_mean"] is None:
            continue
        series.setdefault(r["mode"], []).append({
            "alpha": r["alpha"], "x": r["C_p_minutes_mean"], "y": r["C_o_minutes_mean"],
            "x_std": r["C_p_minutes_std"], "y_std": r["C_o_minutes_std"],
            "violating": bool(r["violating_seeds"])})
    for pts in series.values():
        pts.sort(key=lambda p: p["alpha"])
    return series


def write_sweep_outputs(out_dir, records) -> None:
    out = Path(out_dir)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=RECORD_COLUMNS)
    writer.writeheader()
    writer.writerows(records)
    write_atomic(out / "records.csv", buf.getvalue())
    summary = summarize(records)
    write_atomic(out / "table.md", format_table(summary))
    write_atomic(out / "table.json", json.dumps(summary, indent=2))
    cities = list(dict.fromkeys(r["city"] for r in summary))
    write_atomic(out / "pareto.json", json.dumps(
        {c: pareto_points(summary, c) for c in cities}, indent=2))


def read_records(path) -> list[dict]:
    """Inverse of the ``records.csv`` writer (numbers parsed back)."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rec = {"city": r["city"], "mode": r["mode"], "alpha": float(r["alpha"]),
                   "seed": int(r["seed"]), "error": r["error"]}
            for k in ("C", "C_p_minutes", "C_o_minutes", "C_c", "seconds"):
                rec[k] = float(r[k]) if r[k] not in ("", "None") else None
            rows.append(rec)
    return rows


# -- SVG --------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
SVG_NS = "http://www.w3.org/2000/svg"


@dataclass(frozen=True)
class Axes:
    """Affine map from data (minutes) to SVG pixel coordinates."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    left: float = 70.0
    right: float = 590.0
    top: float = 30.0
    bottom: float = 410.0

    def px(self, x, y) -> tuple[float, float]:
        u = self.left + (x - self.x_min) / (self.x_max - self.x_min) * (self.right - self.left)
        v = self.bottom - (y - self.y_min) / (self.y_max - self.y_min) * (self.bottom - self.top)
        return float(u), float(v)

    def data(self, u, v) -> tuple[float, float]:
        x = self.x_min + (u - self.left) / (self.right - self.left) * (self.x_max - self.x_min)
        y = self.y_min + (self.bottom - v) / (self.bottom - self.top) * (self.y_max - self.y_min)
        return x, y


def _padded(lo, hi):
    span = hi - lo
    pad = 0.08 * span if span > 0 else max(abs(lo) * 0.05, 1.0)
    return float(lo - pad), float(hi + pad)


def cmd_plot_pareto(series: dict[str, list[dict]], title: str = "") -> str:
    """Self-contained SVG of passenger vs operator cost per mode.

    Points of one mode are joined in alpha order; error bars span one
    standard deviation. Axes are in minutes.
    """
    pts = [p for ps in series.values() for p in ps]
    if not pts:
        raise ValueError("no results to plot")
    xs = [p["x"] - (p.get("x_std") or 0) for p in pts] + [p["x"] + (p.get("x_std") or 0) for p in pts]
    ys = [p["y"] - (p.get("y_std") or 0) for p in pts] + [p["y"] + (p.get("y_std") or 0) for p in pts]
    ax = Axes(*_padded(min(xs), max(xs)), *_padded(min(ys), max(ys)))
    f = "{:.3f}".format
    parts = [
        f'<svg xmlns="{SVG_NS}" width="640" height="470" viewBox="0 0 640 470" '
        f'data-x-min="{ax.x_min!r}" data-x-max="{ax.x_max!r}" '
        f'data-y-min="{ax.y_min!r}" data-y-max="{ax.y_max!r}">',
        '<rect width="640" height="470" fill="white"/>',
        f'<text x="330" y="18" text-anchor="middle" font-size="14">{html.escape(title)}</text>',
        f'<g id="axes" stroke="black"><line x1="{ax.left}" y1="{ax.bottom}" x2="{ax.right}" '
        f'y2="{ax.bottom}"/><line x1="{ax.left}" y1="{ax.top}" x2="{ax.left}" y2="{ax.bottom}"/></g>',
    ]
    for i in range(5):
        x = ax.x_min + (ax.x_max - ax.x_min) * (i + 0.5) / 5
        y = ax.y_min + (ax.y_max - ax.y_min) * (i + 0.5) / 5
        u, _ = ax.px(x, ax.y_min)
        _, v = ax.px(ax.x_min, y)
        parts.append(f'<text x="{f(u)}" y="{ax.bottom + 16}" text-anchor="middle" font-size="10">{x:.1f}</text>')
        parts.append(f'<text x="{ax.left - 6}" y="{f(v + 3)}" text-anchor="end" font-size="10">{y:.0f}</text>')
    parts.append(f'<text x="{(ax.left + ax.right) / 2}" y="{ax.bottom + 36}" text-anchor="middle" '
                 'font-size="12">passenger cost C_p (minutes)</text>')
    parts.append(f'<text x="16" y="{(ax.top + ax.bottom) / 2}" text-anchor="middle" font-size="12" '
                 f'transform="rotate(-90 16 {(ax.top + ax.bottom) / 2})">operator cost C_o (minutes)</text>')
    for k, (mode, ps) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        group = [f'<g class="series" data-mode="{html.escape(mode)}" stroke="{color}" fill="{color}">']
        if len(ps) > 1:
            coords = " ".join("{},{}".format(*map(f, ax.px(p["x"], p["y"]))) for p in ps)
            group.append(f'<polyline fill="none" stroke-width="1.5" points="{coords}"/>')
        for p in ps:
            u, v = ax.px(p["x"], p["y"])
            sx, sy = p.get("x_std") or 0.0, p.get("y_std") or 0.0
            if sx:
                u0, _ = ax.px(p["x"] - sx, p["y"])
                u1, _ = ax.px(p["x"] + sx, p["y"])
                group.append(f'<line class="err" x1="{f(u0)}" y1="{f(v)}" x2="{f(u1)}" y2="{f(v)}"/>')
            if sy:
                _, v0 = ax.px(p["x"], p["y"] - sy)
                _, v1 = ax.px(p["x"], p["y"] + sy)
                group.append(f'<line class="err" x1="{f(u)}" y1="{f(v0)}" x2="{f(u)}" y2="{f(v1)}"/>')
            fill = "white" if p.get("violating") else color
            group.append(f'<circle class="point" cx="{u!r}" cy="{v!r}" r="3.5" fill="{fill}" '
                         f'data-alpha="{p["alpha"]}"/>')
        group.append("</g>")
        parts.extend(group)
        ly = ax.top + 14 * k
        parts.append(f'<text x="{ax.right - 4}" y="{ly + 10}" text-anchor="end" font-size="11" '
                     f'fill="{color}">{html.escape(mode.upper())}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def read_svg_points(svg: str) -> dict[str, list[tuple[float, float, float]]]:
    """Recover ``(alpha, C_p, C_o)`` per mode from an SVG written by :func:`cmd_plot_pareto`."""
    root = ET.fromstring(svg)
    ax = Axes(*(float(root.get(k)) for k in ("data-x-min", "data-x-max", "data-y-min", "data-y-max")))
    out = {}
    for g in root.iter(f"{{{SVG_NS}}}g"):
        if g.get("class") != "series":
            continue
        pts = []
        for c in g.iter(f"{{{SVG_NS}}}circle"):
            x, y = ax.data(float(c.get("cx")), float(c.get("cy")))
            pts.append((float(c.get("data-alpha")), x, y))
        out[g.get("data-mode")] = pts
    return out


# -- validation -------------------------------------------------------------

def cmd_validate(network_source, city: City, params: NdpParams | None = None,
                 weights: CostWeights | None = None) -> dict:
    """Constraint report for a network given as a path or a list of routes."""
    params = params or city.params
    if params is None:
        raise ValueError("route parameters are required (city has none)")
    if isinstance(network_source, (str, os.PathLike)):
        routes = load_network(network_source)
    else:
        routes = network_source
    return constraint_report(city, routes, params, weights or CostWeights(1.0))


def recompute_cost(city: City, routes, params: NdpParams, alpha: float, beta: float = 5.0,
                   transfer_penalty: float = 300.0):
    return total_cost(city, routes, params, CostWeights(alpha, beta, transfer_penalty))
