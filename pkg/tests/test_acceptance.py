"""Acceptance criteria 1-10, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL`` line (collected again in the
terminal summary by conftest.py) and then asserts the same condition.
"""
import os
import subprocess
import sys
import time

import numpy as np

from h2ulv import (H2ULVSolver, build_hmatrix, dependency_graph, factorize,
                   generate_line, generate_uniform_cube, solve)
from h2ulv.cli import DEFAULTS, rank_study
from h2ulv.compression import precompute_fillins
from h2ulv.hstructure import block_system
from h2ulv.linalg import rel_error
from h2ulv.solve import dense_solve_oracle, matvec_dense_oracle

HERE = os.path.dirname(__file__)


def oracle_error(cloud, est, b):
    x = est.solve(b)
    ref = dense_solve_oracle(cloud, est.hmatrix_.kernel, b)
    resid = np.linalg.norm(matvec_dense_oracle(cloud, est.hmatrix_.kernel, x) - b) / np.linalg.norm(b)
    return rel_error(x, ref), resid


def rhs(n, seed=1):
    return np.random.default_rng(seed).standard_normal(n)


# 1 ---------------------------------------------------------------------------

def test_criterion_01_oracle_accuracy(verdict):
    gates = {1e-6: 1e-5, 1e-8: 1e-7}
    rows, ok = [], True
    for n in (512, 1024, 2048, 4096):
        leaf = 128 if n == 512 else 256
        cloud = generate_uniform_cube(n, 0)
        for tol, gate in gates.items():
            est = H2ULVSolver("h2", "nodep", leaf_size=leaf, tol=tol).fit(cloud.points)
            err, resid = oracle_error(cloud, est, rhs(n))
            good = err <= gate and resid <= 100 * tol
            ok &= good
            rows.append(f"N={n} tol={tol:g} err={err:.2e} res={resid:.2e}")
    verdict(1, ok, "; ".join(rows))
    assert ok


# 2 ---------------------------------------------------------------------------

def factorization_flops(n):
    est = H2ULVSolver("h2", "nodep", leaf_size=256, tol=1e-6).fit(generate_uniform_cube(n, 0).points)
    f = est.report_["flops"]
    return sum(f.get(k, 0) for k in ("fill-precompute", "basis", "skeleton", "factorize"))


def test_criterion_02_linear_flops(verdict):
    flops = {n: factorization_flops(n) for n in (4096, 8192, 16384)}
    r1 = flops[8192] / flops[4096]
    r2 = flops[16384] / flops[8192]
    ok = r1 <= 2.6 and r2 <= 2.6
    verdict(2, ok, f"flops {flops[4096]:.3g} {flops[8192]:.3g} {flops[16384]:.3g}; "
                   f"ratios {r1:.2f} {r2:.2f} (gate 2.6)")
    assert ok


# 3 ---------------------------------------------------------------------------

def factor_arrays(f):
    out = [f.top.lu]
    for lf in f.levels:
        out += lf.U0 + lf.V0
        for k, p in sorted(lf.pivots().items()):
            out.append(p.lu.lu)
            out += [M for _, (_, M) in sorted(p.lhat.items())]
            out += [M for _, (_, M) in sorted(p.uhat.items())]
    return out


def test_criterion_03_dependency_freedom(verdict):
    H = build_hmatrix(generate_uniform_cube(1024, 0), 128, "h2")
    edges = sum(len(p.edges) for p in dependency_graph(H.structure, "h2nodep"))
    b = rhs(1024)
    base = factorize(H, "h2nodep", 1e-8)
    ref_arrays, x_ref = factor_arrays(base), solve(base, b)
    same = True
    for seed in range(5):
        f = factorize(H, "h2nodep", 1e-8, order_rng=np.random.default_rng(100 + seed))
        arrays = factor_arrays(f)
        same &= len(arrays) == len(ref_arrays)
        same &= all(np.array_equal(a, r) for a, r in zip(arrays, ref_arrays))
        same &= np.array_equal(solve(f, b), x_ref)
    ok = edges == 0 and same
    verdict(3, ok, f"intra-level edges={edges}; 5 random orders bitwise identical={same}")
    assert ok


# 4 ---------------------------------------------------------------------------

def test_criterion_04_fill_absorption(verdict):
    tol = 1e-8
    rows, ok = [], True
    cases = [("line", generate_line(1024, 0), 1.5), ("cube", generate_uniform_cube(1024, 0), 1.0)]
    for name, cloud, eta in cases:
        for leaf in (128, 256):
            H = build_hmatrix(cloud, leaf, "h2", eta=eta)
            rec = []
            factorize(H, "h2nodep", tol, instrument=rec)
            worst = max(e["residual"] / (tol * e["fill_norm"]) for e in rec if e["fill_norm"] > 0)
            ok &= bool(rec) and worst <= 10
            rows.append(f"{name} leaf={leaf} fills={len(rec)} worst={worst:.2f}*tol*|F|")
    verdict(4, ok, "; ".join(rows))
    assert ok


# 5 ---------------------------------------------------------------------------

def gauss_schur(M, p):
    M = np.array(M, dtype=float)
    for k in range(p):
        for i in range(k + 1, M.shape[0]):
            M[i, k:] -= (M[i, k] / M[k, k]) * M[k, k:]
    return M[p:, p:]


def permuted_oracle(blocks, near, c, j, b):
    """Target row/column moved last, coupling pivots eliminated densely."""
    piv = [k for k in near[c] if k not in (c, j) and j in near[k]]
    if not piv:
        return None
    p = len(piv) * b
    M = np.zeros((p + b, p + b))
    for a, k in enumerate(piv):
        M[a * b:(a + 1) * b, a * b:(a + 1) * b] = blocks[(k, k)]
        M[a * b:(a + 1) * b, p:] = blocks[(k, j)]
        M[p:, a * b:(a + 1) * b] = blocks[(c, k)]
    return gauss_schur(M, p)


def test_criterion_05_fill_correctness(verdict):
    worst, count, ok = 0.0, 0, True
    for m in (4, 8):
        for seed in range(10):
            rng = np.random.default_rng(1000 * m + seed)
            b = 6
            near = [{c} for c in range(m)]
            for c in range(m):
                for j in range(c + 1, m):
                    if rng.random() < 0.4:
                        near[c].add(j)
                        near[j].add(c)
            near = [sorted(r) for r in near]
            blocks = {(c, j): rng.standard_normal((b, b)) + (4 * b * np.eye(b) if c == j else 0)
                      for c in range(m) for j in range(m)}
            fills = precompute_fillins(block_system(blocks, near))
            expected = 0
            for c in range(m):
                for j in range(m):
                    S = permuted_oracle(blocks, near, c, j, b)
                    if S is None:
                        ok &= (c, j) not in fills
                        continue
                    expected += 1
                    e = np.linalg.norm(fills[(c, j)] - S) / np.linalg.norm(S)
                    worst = max(worst, e)
                    count += 1
            ok &= expected == len(fills)
    ok &= worst <= 1e-11
    verdict(5, ok, f"{count} fill blocks on 4x4/8x8 grids, worst relative diff {worst:.2e}")
    assert ok


# 6 ---------------------------------------------------------------------------

def test_criterion_06_variant_agreement(verdict):
    cloud = generate_line(1024, 0)
    b = rhs(1024)
    errs = {}
    for variant in ("dep", "nodep"):
        est = H2ULVSolver("h2", variant, leaf_size=128, tol=1e-8, eta=1.5).fit(cloud.points)
        errs[variant], _ = oracle_error(cloud, est, b)
    ratio = max(errs.values()) / min(errs.values())
    ok = max(errs.values()) <= 1e-6 and ratio <= 10
    verdict(6, ok, f"tri-diagonal line N=1024: dep {errs['dep']:.2e}, nodep {errs['nodep']:.2e}, "
                   f"ratio {ratio:.1f} (gate 10)")
    assert ok


# 7 ---------------------------------------------------------------------------

def test_criterion_07_rank_growth(verdict):
    cfg = dict(DEFAULTS, tol=1e-6, leaf=256)
    doc = rank_study(cfg, [2048, 4096, 8192])
    hss = [r["hss"]["top_rank"] for r in doc["rows"]]
    h2 = [r["h2"]["leaf_rank"] for r in doc["rows"]]
    var = doc["h2_leaf_variation"]
    ok = doc["hss_top_strictly_increasing"] and var <= 0.25
    verdict(7, ok, f"hss top ranks {hss} (strictly increasing: "
                   f"{doc['hss_top_strictly_increasing']}); h2 leaf ranks {h2} "
                   f"(variation {var:.0%}, gate 25%)")
    assert ok


# 8 ---------------------------------------------------------------------------

def test_criterion_08_exactness_limit(verdict):
    cloud = generate_uniform_cube(64, 0)
    est = H2ULVSolver("hss", "nodep", leaf_size=16, tol=1e-14).fit(cloud.points)
    err, _ = oracle_error(cloud, est, rhs(64))
    ok = err <= 1e-10
    verdict(8, ok, f"N=64 weak HSS tol 1e-14: err={err:.2e}")
    assert ok


# 9 ---------------------------------------------------------------------------

def factor_time(points, threads):
    est = H2ULVSolver("h2", "nodep", leaf_size=256, tol=1e-6, threads=threads)
    t0 = time.perf_counter()
    est.fit(points)
    return time.perf_counter() - t0


def test_criterion_09_thread_scaling(verdict):
    pts = generate_uniform_cube(8192, 0).points
    t1 = factor_time(pts, 1)
    t8 = factor_time(pts, 8)
    speedup = t1 / t8
    cores = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count()
    ok = speedup >= 3
    verdict(9, ok, f"N=8192 factorize 1 thread {t1:.1f}s, 8 threads {t8:.1f}s, "
                   f"speedup {speedup:.2f} on {cores} available core(s)")
    assert ok


# 10 --------------------------------------------------------------------------

UNIT_SELECTION = [
    os.path.join(HERE, "test_linalg.py"),
    os.path.join(HERE, "test_compression.py") + "::test_bases_orthonormal",
    os.path.join(HERE, "test_hstructure.py") + "::test_nested_bases_orthonormal",
    os.path.join(HERE, "test_ulv.py") + "::test_eliminate_reconstructs_random_8x8",
    os.path.join(HERE, "test_ulv.py") + "::test_eliminate_reconstruction_property",
    os.path.join(HERE, "test_ulv.py") + "::test_spot_check_block_reconstruction_every_level",
    os.path.join(HERE, "test_solve.py") + "::test_linearity",
]


def test_criterion_10_unit_invariants(verdict):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           *UNIT_SELECTION], capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr
    ok = proc.returncode == 0 and elapsed < 60
    verdict(10, ok, f"{summary} ({elapsed:.0f}s)")
    assert ok
