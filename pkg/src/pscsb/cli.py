"""Command-line entry point: ``pscsb {generate,run,bounds,plot}``.

Every flag can also be given in a JSON file passed with ``--config``; the
keys are the flag names without dashes (``reps``, ``noise_scale``...), and
flags given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import bounds as bnd
from .harness import ExperimentConfig, run_experiment, write_atomic, write_outputs
from .policies import POLICY_NAMES
from .sem_core import InvalidInputError, Scenario, SyntheticParams, generate_synthetic_scenario

DEFAULTS = {
    "generate": {
        "paper_defaults": False, "K": None, "T": None, "m": None, "groups": None,
        "changes": None, "density": None, "weight_range": None, "noise_scale": None,
        "groups_per_change": None, "seed": 0, "out": "scenario.json",
    },
    "run": {
        "scenario": None, "policies": "ps-sem-ucb-gr,glr-cucb", "reps": 20, "seed": 0,
        "out": "results", "threads": None, "param": [],
    },
    "bounds": {
        "from_scenario": None, "omega_max": 1.0, "m": 1, "K": 1, "T": math.e,
        "delta_min": 1.0, "delta_max": 1.0, "delta": 0.0, "p": 0.0, "d": 0.0,
        "group_profile": None, "N_W": 1, "delta_min_change": 1.0,
        "C1": 1.0, "C2": 1.0, "kappa": 4.0, "eta": 2.0, "s": 0.0, "remark_K": 10,
    },
    "plot": {"aggregate": "results/aggregate.csv", "scenario": None, "out": "regret.svg",
             "title": "Cumulative expected regret"},
}


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pscsb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(p, *flags, **kw):
        kw.setdefault("default", None)
        p.add_argument(*flags, **kw)

    g = sub.add_parser("generate", help="write a synthetic scenario file")
    add(g, "--config")
    add(g, "--paper-defaults", action="store_true", default=None,
        help="K=18, m=4, T=25000, 3 groups of 6, 4 graph + 4 distribution changes")
    add(g, "--K", type=int)
    add(g, "--T", type=int)
    add(g, "--m", type=int)
    add(g, "--groups", type=_int_list, help="group sizes, e.g. 3,3,3")
    add(g, "--changes", type=int, nargs=2, metavar=("GRAPH", "DIST"))
    add(g, "--density", type=float)
    add(g, "--weight-range", type=float, nargs=2, metavar=("LO", "HI"))
    add(g, "--noise-scale", type=float)
    add(g, "--groups-per-change", type=int)
    add(g, "--seed", type=int)
    add(g, "--out")

    r = sub.add_parser("run", help="run policies on a scenario and write CSVs")
    add(r, "--config")
    add(r, "--scenario")
    add(r, "--policies", help=f"comma-separated subset of: {', '.join(POLICY_NAMES)}")
    add(r, "--reps", type=int)
    add(r, "--seed", type=int)
    add(r, "--out")
    add(r, "--threads", type=int)
    add(r, "--param", action="append", metavar="POLICY.KEY=VALUE",
        help="policy parameter, value parsed as JSON when possible (repeatable)")

    b = sub.add_parser("bounds", help="print the regret bounds and the restart-cost table")
    add(b, "--config")
    add(b, "--from-scenario")
    add(b, "--omega-max", type=float)
    add(b, "--m", type=int)
    add(b, "--K", type=int)
    add(b, "--T", type=float)
    add(b, "--delta-min", type=float)
    add(b, "--delta-max", type=float)
    add(b, "--delta", type=float)
    add(b, "--p", type=float)
    add(b, "--d", type=float, help="worst detection delay in rounds")
    add(b, "--group-profile", help="N_g:K_g pairs, e.g. 2:3,1:3")
    add(b, "--N-W", type=int)
    add(b, "--delta-min-change", type=float)
    add(b, "--C1", type=float)
    add(b, "--C2", type=float)
    add(b, "--kappa", type=float)
    add(b, "--eta", type=float)
    add(b, "--s", type=float)
    add(b, "--remark-K", type=int)

    pl = sub.add_parser("plot", help="SVG of mean cumulative regret from aggregate.csv")
    add(pl, "--config")
    add(pl, "--aggregate")
    add(pl, "--scenario", help="scenario file providing change-point markers")
    add(pl, "--out")
    add(pl, "--title")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge built-in defaults, the config file and explicit flags."""
    defaults = DEFAULTS[args.command]
    merged = dict(defaults)
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise CliError("config file must hold a JSON object")
        unknown = sorted(set(doc) - set(defaults))
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(unknown)}")
        merged.update(doc)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _even_groups(K: int, count: int = 3) -> tuple[int, ...]:
    count = max(1, min(count, K))
    return tuple(K // count + (1 if i < K % count else 0) for i in range(count))


def synthetic_params(opts: dict) -> SyntheticParams:
    base = SyntheticParams.full_scale()
    fields = {k: getattr(base, k) for k in base.__dataclass_fields__}
    if opts["K"] is not None:
        fields["K"] = opts["K"]
        fields["group_sizes"] = _even_groups(opts["K"])
        fields["m"] = min(fields["m"], opts["K"])
    if opts["groups"] is not None:
        fields["group_sizes"] = tuple(opts["groups"])
    if opts["changes"] is not None:
        fields["n_graph_changes"], fields["n_dist_changes"] = (int(v) for v in opts["changes"])
    for key in ("T", "m", "density", "noise_scale", "groups_per_change"):
        if opts[key] is not None:
            fields[key] = opts[key]
    if opts["weight_range"] is not None:
        fields["weight_range"] = tuple(float(v) for v in opts["weight_range"])
    if opts["paper_defaults"] and any(opts[k] is not None for k in ("K", "T", "m", "groups", "changes")):
        raise CliError("--paper-defaults cannot be combined with K/T/m/groups/changes")
    return SyntheticParams(**fields)


def cmd_generate(opts: dict) -> int:
    scenario = generate_synthetic_scenario(synthetic_params(opts), np.random.default_rng(opts["seed"]))
    write_atomic({Path(opts["out"]): scenario.dumps()})
    print(f"wrote {opts['out']}: K={scenario.K} T={scenario.T} m={scenario.m} "
          f"graph segments={len(scenario.graph_segments)} "
          f"distribution segments={len(scenario.dist_segments)}")
    return 0


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def policy_specs(policies, params) -> list[tuple[str, dict]]:
    names = [p.strip() for p in policies.split(",")] if isinstance(policies, str) else list(policies)
    names = [n for n in names if n]
    if not names:
        raise CliError("no policies given")
    unknown = [n for n in names if n not in POLICY_NAMES]
    if unknown:
        raise CliError(f"unknown policies: {', '.join(unknown)}; known: {', '.join(POLICY_NAMES)}")
    per_policy: dict[str, dict] = {n: {} for n in names}
    if isinstance(params, dict):
        for name, mapping in params.items():
            if name not in per_policy:
                raise CliError(f"parameters given for unselected policy {name!r}")
            per_policy[name].update(mapping)
    else:
        for item in params or []:
            key, sep, value = item.partition("=")
            name, dot, field = key.partition(".")
            if not sep or not dot or name not in per_policy:
                raise CliError(f"bad --param {item!r}; expected POLICY.KEY=VALUE for a selected policy")
            per_policy[name][field] = _parse_value(value)
    return [(n, per_policy[n]) for n in names]


def cmd_run(opts: dict) -> int:
    if not opts["scenario"]:
        raise CliError("run needs --scenario")
    try:
        scenario = Scenario.load(opts["scenario"])
    except OSError as exc:
        raise CliError(f"cannot read scenario {opts['scenario']}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"scenario {opts['scenario']} is not valid JSON: {exc}") from exc
    specs = policy_specs(opts["policies"], opts["param"])
    try:
        config = ExperimentConfig(scenario=scenario, policies=specs, replications=int(opts["reps"]),
                                  seed=int(opts["seed"]), threads=opts["threads"])
        bundle = run_experiment(config)
    except TypeError as exc:
        raise CliError(f"bad policy parameter: {exc}") from exc
    paths = write_outputs(bundle, opts["out"])
    print(f"{'policy':<16} {'final mean regret':>18} {'2*SE':>10}")
    for name in bundle.policies:
        mean, se = bundle.final(name)
        print(f"{name:<16} {mean:>18.3f} {2 * se:>10.3f}")
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return 0


def _profile(text) -> tuple:
    if text is None:
        return ()
    if isinstance(text, list):
        return tuple((int(n), int(k)) for n, k in text)
    try:
        return tuple(tuple(int(v) for v in pair.split(":")) for pair in str(text).split(","))
    except ValueError as exc:
        raise CliError(f"bad group profile {text!r}; expected N:K pairs") from exc


def cmd_bounds(opts: dict) -> int:
    if opts["from_scenario"]:
        scenario = Scenario.load(opts["from_scenario"])
        explicit = {k: opts[k] for k in ("delta", "p") if opts[k] != DEFAULTS["bounds"][k]}
        params = bnd.params_from_scenario(scenario, d=float(opts["d"]), **explicit)
    else:
        params = bnd.BoundParams(
            omega_max=float(opts["omega_max"]), m=int(opts["m"]), K=int(opts["K"]),
            T=float(opts["T"]), delta_min=float(opts["delta_min"]),
            delta_max=float(opts["delta_max"]), delta=float(opts["delta"]), p=float(opts["p"]),
            d=float(opts["d"]), group_profile=_profile(opts["group_profile"]),
            N_W=int(opts["N_W"]), delta_min_change=float(opts["delta_min_change"]))
    print("parameters")
    for key in ("omega_max", "m", "K", "T", "delta_min", "delta_max", "delta", "p", "d", "N_W",
                "delta_min_change"):
        print(f"  {key:<17}{getattr(params, key):.6g}")
    print(f"  {'group_profile':<17}{' '.join(f'{n}:{k}' for n, k in params.group_profile)}")
    print("bounds")
    for name, value in bnd.bound_table(params).items():
        print(f"  {name:<24}{value:.6f}")
    print(f"restart increments (C1={opts['C1']:g}, C2={opts['C2']:g}, kappa={opts['kappa']:g}, "
          f"eta={opts['eta']:g}, s={opts['s']:g}, K={opts['remark_K']})")
    table = bnd.remark1_table(float(opts["C1"]), float(opts["C2"]), float(opts["kappa"]),
                              float(opts["eta"]), float(opts["s"]), int(opts["remark_K"]))
    for case, value in table.items():
        print(f"  {case:<24}{value:.6g}")
    return 0


# ---------------------------------------------------------------------------
# SVG plot
# ---------------------------------------------------------------------------

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf")


def read_aggregate(path) -> dict:
    curves: dict[str, list[tuple[int, float]]] = {}
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"policy", "t", "mean_cum_regret"} <= set(reader.fieldnames):
                raise CliError(f"{path}: missing policy/t/mean_cum_regret columns")
            for row in reader:
                curves.setdefault(row["policy"], []).append((int(row["t"]), float(row["mean_cum_regret"])))
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    except (ValueError, TypeError, KeyError) as exc:
        raise CliError(f"{path}: malformed row ({exc})") from exc
    if not curves:
        raise CliError(f"{path}: no data rows")
    return {name: sorted(points) for name, points in curves.items()}


def _thin(points, limit: int = 800):
    if len(points) <= limit:
        return points
    idx = np.unique(np.linspace(0, len(points) - 1, limit).round().astype(int))
    return [points[i] for i in idx]


def render_svg(curves: dict, dist_changes: Sequence[int] = (), graph_changes: Sequence[int] = (),
               title: str = "", width: int = 760, height: int = 460) -> str:
    left, right, top, bottom = 70, 170, 40, 50
    pw, ph = width - left - right, height - top - bottom
    t_max = max(t for pts in curves.values() for t, _ in pts)
    y_max = max(max(v for _, v in pts) for pts in curves.values())
    y_max = y_max if y_max > 0 else 1.0

    def sx(t):
        return left + pw * (t / t_max if t_max else 0.0)

    def sy(v):
        return top + ph * (1.0 - v / y_max)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="22" text-anchor="middle" font-size="15">{_esc(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for i in range(6):
        t = t_max * i / 5
        v = y_max * i / 5
        out.append(f'<text x="{sx(t):.1f}" y="{top + ph + 18}" text-anchor="middle">{t:.0f}</text>')
        out.append(f'<text x="{left - 6}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.4g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">round t</text>')
    for t in dist_changes:
        out.append(f'<line class="dist-change" data-t="{t}" x1="{sx(t):.2f}" y1="{top}" '
                   f'x2="{sx(t):.2f}" y2="{top + ph}" stroke="green" stroke-width="1.2"/>')
    for t in graph_changes:
        out.append(f'<line class="graph-change" data-t="{t}" x1="{sx(t):.2f}" y1="{top}" '
                   f'x2="{sx(t):.2f}" y2="{top + ph}" stroke="red" stroke-width="1.2" '
                   f'stroke-dasharray="6,4"/>')
    for i, (name, pts) in enumerate(curves.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(t):.2f},{sy(v):.2f}" for t, v in _thin(pts))
        out.append(f'<polyline class="curve" data-policy="{_esc(name)}" fill="none" '
                   f'stroke="{color}" stroke-width="1.6" points="{coords}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 34}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 40}" y="{ly + 4}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(text: str) -> str:
    return (str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;"))


def cmd_plot(opts: dict) -> int:
    curves = read_aggregate(opts["aggregate"])
    dist, graph = [], []
    if opts["scenario"]:
        scenario = Scenario.load(opts["scenario"])
        dist = [t for t in scenario.dist_change_rounds if t <= scenario.T]
        graph = [t for t in scenario.graph_change_rounds if t <= scenario.T]
    write_atomic({Path(opts["out"]): render_svg(curves, dist, graph, opts["title"])})
    print(f"wrote {opts['out']}")
    return 0


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "bounds": cmd_bounds, "plot": cmd_plot}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](resolve(args))
    except (CliError, InvalidInputError, OSError, json.JSONDecodeError) as exc:
        print(f"pscsb {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
