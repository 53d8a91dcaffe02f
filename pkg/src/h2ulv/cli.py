"""Command line harness: ``h2ulv run|sweep|rankstudy|partition-plan|gen-points``.

Option precedence is command line > ``--config`` file (key=value lines) >
built-in defaults. The seed falls back to the H2ULV_SEED environment
variable when neither the command line nor the config file sets it.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .compression import build_nested
from .estimator import H2ULVSolver, build_hmatrix, structure_for
from .geometry import (generate_line, generate_sphere_surface,
                       generate_uniform_cube, read_points, write_points)
from .linalg import rel_error
from .solve import ORACLE_GUARD, dense_solve_oracle, matvec_dense_oracle
from .ulv import dependency_graph, factorize, plans_to_dot, stored_entries

RUN_SCHEMA = "h2ulv.run/1"
SWEEP_SCHEMA = "h2ulv.sweep/1"
RANK_SCHEMA = "h2ulv.rankstudy/1"
PLAN_SCHEMA = "h2ulv.partition/1"
ERROR_SCHEMA = "h2ulv.error/1"

RANK_CAP_PRESET = 50

DEFAULTS = {
    "n": 1024, "leaf": 256, "tol": 1e-8, "rank_cap": None, "kernel": "laplace",
    "alpha_m": 0.0, "reg": None, "structure": "h2", "variant": "nodep",
    "admissibility": None, "eta": 1.0, "threads": 1, "seed": 0,
    "geometry": "cube", "spheres": 1, "points": None, "output": None,
    "oracle_guard": ORACLE_GUARD,
}


def _opt_int(v):
    return None if v in (None, "", "none", "None") else int(v)


def _opt_float(v):
    return None if v in (None, "", "none", "None") else float(v)


def _opt_str(v):
    return None if v in (None, "", "none", "None") else str(v)


CASTS = {
    "n": int, "leaf": int, "tol": float, "rank_cap": _opt_int, "kernel": str,
    "alpha_m": float, "reg": _opt_float, "structure": str, "variant": str,
    "admissibility": _opt_str, "eta": float, "threads": int, "seed": int,
    "geometry": str, "spheres": int, "points": _opt_str, "output": _opt_str,
    "oracle_guard": int,
}


class ConfigError(ValueError):
    pass


def read_config_file(path):
    cfg = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in CASTS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            cfg[key] = CASTS[key](val)
    return cfg


def resolve_config(args):
    """Merge defaults, config file, H2ULV_SEED and explicit flags."""
    cfg = dict(DEFAULTS)
    from_file = read_config_file(args.config) if getattr(args, "config", None) else {}
    cfg.update(from_file)
    if "seed" not in from_file and os.environ.get("H2ULV_SEED"):
        cfg["seed"] = int(os.environ["H2ULV_SEED"])
    for key in CASTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "preset_cap50", False):
        cfg["rank_cap"] = RANK_CAP_PRESET
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    if cfg["n"] < 2:
        raise ConfigError("n must be at least 2")
    if cfg["leaf"] < 1:
        raise ConfigError("leaf must be positive")
    if not cfg["tol"] > 0:
        raise ConfigError("tol must be positive")
    if cfg["rank_cap"] is not None and cfg["rank_cap"] < 0:
        raise ConfigError("rank cap must be nonnegative")
    if cfg["kernel"] not in ("laplace", "yukawa"):
        raise ConfigError(f"unknown kernel {cfg['kernel']!r}")
    if cfg["alpha_m"] < 0:
        raise ConfigError("alpha_m must be nonnegative")
    if cfg["structure"] not in ("blr2", "hss", "h2"):
        raise ConfigError(f"unknown structure {cfg['structure']!r}")
    if cfg["variant"] not in ("dep", "nodep"):
        raise ConfigError(f"unknown variant {cfg['variant']!r}")
    if cfg["variant"] == "dep" and cfg["structure"] != "h2":
        raise ConfigError("the dep variant requires the h2 structure")
    if cfg["admissibility"] not in (None, "weak", "strong"):
        raise ConfigError(f"unknown admissibility {cfg['admissibility']!r}")
    if cfg["structure"] == "h2" and cfg["admissibility"] == "weak":
        raise ConfigError("h2 needs strong admissibility")
    if cfg["structure"] in ("hss", "blr2") and cfg["admissibility"] == "strong":
        raise ConfigError(f"{cfg['structure']} uses weak admissibility")
    if cfg["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    if cfg["geometry"] not in ("cube", "line", "sphere"):
        raise ConfigError(f"unknown geometry {cfg['geometry']!r}")


# ------------------------------------------------------------------ helpers

def make_cloud(cfg):
    if cfg["points"]:
        return read_points(cfg["points"])
    gen = cfg["geometry"]
    if gen == "cube":
        return generate_uniform_cube(cfg["n"], cfg["seed"])
    if gen == "line":
        return generate_line(cfg["n"], cfg["seed"])
    return generate_sphere_surface(cfg["n"], cfg["spheres"], seed=cfg["seed"])


def make_solver(cfg):
    return H2ULVSolver(structure=cfg["structure"], variant=cfg["variant"],
                       leaf_size=cfg["leaf"], tol=cfg["tol"], rank_cap=cfg["rank_cap"],
                       kernel=cfg["kernel"], alpha_m=cfg["alpha_m"], reg=cfg["reg"],
                       admissibility=cfg["admissibility"], eta=cfg["eta"],
                       threads=cfg["threads"], seed=cfg["seed"])


def read_vector(path):
    return np.loadtxt(path, ndmin=1).astype(np.float64)


def write_vector(path, x):
    with open(path, "w") as fh:
        for v in np.asarray(x).ravel():
            fh.write(f"{v:.17g}\n")


def _emit(text, path):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def run_pipeline(cfg, rhs=None):
    """Build, factorize, solve and (within the guard) check against dense LU.
    Returns (report dict, solver, solution)."""
    cloud = make_cloud(cfg)
    n = len(cloud)
    solver = make_solver(cfg).fit(cloud.points, charges=cloud.charges)
    if rhs is None:
        b = np.random.default_rng(cfg["seed"] + 1).standard_normal(n)
    else:
        b = rhs
    x = solver.solve(b)
    rep = solver.report_
    H = solver.hmatrix_
    st = H.structure
    fv = structure_for(cfg["structure"], cfg["variant"])
    plans = dependency_graph(st, fv)
    err = resid = None
    oracle = "skipped"
    if n <= cfg["oracle_guard"]:
        ref = dense_solve_oracle(cloud, H.kernel, b, guard=cfg["oracle_guard"])
        err = rel_error(x, ref)
        Ax = matvec_dense_oracle(cloud, H.kernel, x, guard=cfg["oracle_guard"])
        resid = float(np.linalg.norm(Ax - b) / np.linalg.norm(b))
        oracle = "dense-lu"
    entries = stored_entries(solver.factors_) + H.dense_entries()
    flops = {k: int(v) for k, v in sorted(rep["flops"].items())}
    times = {k: float(rep["times"].get(k, 0.0)) for k in
             ("assemble", "fill-precompute", "basis", "skeleton", "factorize", "solve")}
    report = {
        "schema": RUN_SCHEMA,
        "version": __version__,
        "config": {k: cfg[k] for k in sorted(cfg)},
        "n": n,
        "factorization": fv,
        "times": times,
        "flops": flops,
        "flops_factorization": int(sum(v for k, v in flops.items()
                                       if k in ("fill-precompute", "basis", "skeleton",
                                                "factorize"))),
        "flops_total": int(sum(flops.values())),
        "ranks": {str(k): v for k, v in sorted(rep["ranks"].items())},
        "max_rank": int(max(v["max"] for v in rep["ranks"].values())),
        "top_size": int(solver.factors_.stats["top_size"]),
        "dense_blocks": {"total": len(H.dense),
                         "max_per_row": int(max(st.dense_per_row()))},
        "dependency_edges": {str(p.level): len(p.edges) for p in plans},
        "memory_bytes": int(8 * entries),
        "oracle": oracle,
        "error": err,
        "residual": resid,
        "error_gate": None if err is None else 100 * cfg["tol"],
        "passed": True if err is None else bool(err <= 100 * cfg["tol"]),
    }
    return report, solver, x


# ----------------------------------------------------------------- commands

def cmd_run(args):
    cfg = resolve_config(args)
    rhs = read_vector(args.rhs) if args.rhs else None
    report, solver, x = run_pipeline(cfg, rhs)
    if args.solution:
        write_vector(args.solution, x)
    if args.dot:
        fv = structure_for(cfg["structure"], cfg["variant"])
        with open(args.dot, "w") as fh:
            fh.write(plans_to_dot(dependency_graph(solver.hmatrix_.structure, fv)))
    _emit(_json(report), cfg["output"])
    return 0 if report["passed"] else 1


def _parse_values(axis, text):
    cast = float if axis == "tol" else int
    vals = [cast(v) for v in text.split(",") if v.strip()]
    if not vals:
        raise ConfigError("no sweep values given")
    return vals


SWEEP_KEYS = {"n": "n", "leaf": "leaf", "tol": "tol", "threads": "threads"}


def cmd_sweep(args):
    cfg = resolve_config(args)
    values = _parse_values(args.axis, args.values)
    series = []
    for v in values:
        point = dict(cfg)
        point[SWEEP_KEYS[args.axis]] = v
        try:
            validate_config(point)
            rep, _, _ = run_pipeline(point)
            series.append({"value": v, "report": rep})
        except Exception as exc:  # recorded, sweep continues
            series.append({"value": v, "error": {"type": type(exc).__name__,
                                                 "message": str(exc)}})
    buf = io.StringIO()
    buf.write(f"# schema: {SWEEP_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([args.axis, "factorize_time", "total_flops", "max_rank", "error"])
    for p in series:
        rep = p.get("report")
        if rep is None:
            w.writerow([p["value"], "", "", "", "failed"])
            continue
        t = sum(rep["times"][k] for k in ("fill-precompute", "basis", "skeleton", "factorize"))
        err = "" if rep["error"] is None else f"{rep['error']:.6e}"
        w.writerow([p["value"], f"{t:.6f}", rep["flops_factorization"], rep["max_rank"], err])
    _emit(buf.getvalue(), cfg["output"])
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(_json({"schema": SWEEP_SCHEMA, "axis": args.axis, "points": series}))
    return 0 if all("report" in p for p in series) else 1


def rank_study(cfg, ns):
    """Top-level HSS rank and H2 leaf/upper ranks of the plain nested
    compression (no fill-ins) for each N."""
    rows = []
    for n in ns:
        point = dict(cfg, n=n)
        cloud = make_cloud(point)
        row = {"n": n}
        for st in ("hss", "h2"):
            H = build_hmatrix(cloud, cfg["leaf"], st, None, cfg["eta"], cfg["kernel"],
                              cfg["alpha_m"], cfg["reg"], cfg["seed"])
            nested = build_nested(H, cfg["tol"], cfg["rank_cap"])
            ranks = {lev: max(r) for lev, r in nested.ranks().items()}
            leaf = H.structure.leaf_level
            top = min(lev for lev in ranks if lev >= 1) if len(ranks) > 1 else leaf
            row[st] = {"levels": {str(k): int(v) for k, v in sorted(ranks.items())},
                       "top_rank": int(ranks[top]), "leaf_rank": int(ranks[leaf])}
        rows.append(row)
    hss_top = [r["hss"]["top_rank"] for r in rows]
    h2_leaf = [r["h2"]["leaf_rank"] for r in rows]
    return {
        "schema": RANK_SCHEMA,
        "config": {k: cfg[k] for k in sorted(cfg)},
        "rows": rows,
        "hss_top_strictly_increasing": all(b > a for a, b in zip(hss_top, hss_top[1:])),
        "h2_leaf_variation": (max(h2_leaf) - min(h2_leaf)) / max(min(h2_leaf), 1),
    }


def cmd_rankstudy(args):
    cfg = resolve_config(args)
    ns = _parse_values("n", args.ns)
    _emit(_json(rank_study(cfg, ns)), cfg["output"])
    return 0


def partition_plan(structure, dims_by_level, processes):
    """Ownership of block rows per level for a full binary process tree.

    Below the replication level every process owns a contiguous run of
    clusters. From there up, each cluster is held by a group of processes,
    which gather the near S^SS blocks of the level; the reported bytes are
    that gathered volume, computed from the merged skeleton sizes.
    """
    L = structure.leaf_level
    nleaf = structure.levels[L].nclusters
    P = int(processes)
    if P < 1 or P & (P - 1) or P > nleaf:
        raise ConfigError(f"process count must be a power of two <= {nleaf}, got {P}")
    rep_level = int(math.log2(P))
    owners, exchange = {}, {}
    for lev in sorted(structure.levels, reverse=True):
        pat = structure.levels[lev]
        m = pat.nclusters
        if m >= P:
            per = m // P
            owners[str(lev)] = [[c // per] for c in range(m)]
        else:
            share = P // m
            owners[str(lev)] = [list(range(c * share, (c + 1) * share)) for c in range(m)]
        if P > 1 and lev <= rep_level and lev in dims_by_level:
            d = dims_by_level[lev]
            exchange[str(lev)] = int(8 * sum(d[c] * d[j] for c in range(m) for j in pat.near[c]))
    return {"schema": PLAN_SCHEMA, "processes": P, "leaf_level": L,
            "replicated_from_level": rep_level if P > 1 else None,
            "ownership": owners, "exchange_bytes": exchange}


def cmd_partition_plan(args):
    cfg = resolve_config(args)
    cloud = make_cloud(cfg)
    H = build_hmatrix(cloud, cfg["leaf"], cfg["structure"], cfg["admissibility"],
                      cfg["eta"], cfg["kernel"], cfg["alpha_m"], cfg["reg"], cfg["seed"])
    fv = structure_for(cfg["structure"], cfg["variant"])
    # recurse to the top so every level has measured skeleton sizes
    f = factorize(H, fv, cfg["tol"], cfg["rank_cap"], cfg["threads"], top_side=0)
    dims = {lf.level: list(lf.dims) for lf in f.levels}
    plan = partition_plan(H.structure, dims, args.processes)
    plan["config"] = {k: cfg[k] for k in sorted(cfg)}
    _emit(_json(plan), cfg["output"])
    return 0


def cmd_gen_points(args):
    cfg = resolve_config(args)
    cloud = make_cloud(cfg)
    if cfg["output"]:
        write_points(cfg["output"], cloud)
    else:
        for p, q in zip(cloud.points, cloud.charges):
            sys.stdout.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {q:.17g}\n")
    return 0


# ------------------------------------------------------------------- parser

def _common(p):
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--n", type=int)
    p.add_argument("--leaf", type=int, help="leaf size (default 256)")
    p.add_argument("--tol", type=float, help="relative truncation tolerance (default 1e-8)")
    p.add_argument("--rank-cap", dest="rank_cap", type=_opt_int)
    p.add_argument("--preset-cap50", dest="preset_cap50", action="store_true",
                   help=f"cap ranks at {RANK_CAP_PRESET}")
    p.add_argument("--kernel", choices=["laplace", "yukawa"])
    p.add_argument("--alpha-m", dest="alpha_m", type=float)
    p.add_argument("--reg", type=float, help="diagonal regularization added to r")
    p.add_argument("--structure", choices=["blr2", "hss", "h2"])
    p.add_argument("--variant", choices=["dep", "nodep"])
    p.add_argument("--admissibility", choices=["weak", "strong"])
    p.add_argument("--eta", type=float)
    p.add_argument("--threads", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--geometry", choices=["cube", "line", "sphere"])
    p.add_argument("--spheres", type=int)
    p.add_argument("--points", help="read points from an 'x y z q' file")
    p.add_argument("--oracle-guard", dest="oracle_guard", type=int)
    p.add_argument("--output", "-o")


def build_parser():
    ap = argparse.ArgumentParser(prog="h2ulv", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="build, factorize, solve, verify")
    _common(p)
    p.add_argument("--rhs", help="right-hand side vector file (one value per line)")
    p.add_argument("--solution", help="write the solution vector here")
    p.add_argument("--dot", help="write the dependency graph as DOT")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="repeat run over one axis, CSV out")
    _common(p)
    p.add_argument("--axis", choices=sorted(SWEEP_KEYS), required=True)
    p.add_argument("--values", required=True, help="comma separated")
    p.add_argument("--json", help="also write the full JSON series")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("rankstudy", help="HSS vs H2 rank growth")
    _common(p)
    p.add_argument("--ns", default="2048,4096,8192")
    p.set_defaults(func=cmd_rankstudy)

    p = sub.add_parser("partition-plan", help="offline process-tree ownership report")
    _common(p)
    p.add_argument("--processes", type=int, required=True)
    p.set_defaults(func=cmd_partition_plan)

    p = sub.add_parser("gen-points", help="write a point cloud as 'x y z q'")
    _common(p)
    p.set_defaults(func=cmd_gen_points)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        doc = {"schema": ERROR_SCHEMA, "command": args.command,
               "error": type(exc).__name__, "message": str(exc)}
        sys.stdout.write(_json(doc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
