"""ULV factorization drivers.

Each level is turned into skeleton coordinates with its shared bases, the
redundant unknowns are eliminated, and the remaining skeleton blocks are
merged 2x2 into the parent level. A dense LU closes the recursion.

Two elimination modes exist:

* parallel (blr2, hss, h2nodep): every block row is an independent task
  reading frozen inputs. Pivot k keeps the R rows/columns of later blocks
  in its L/U factors, so near R-R couplings are eliminated exactly; only
  the Schur updates onto S^SS are applied, the remaining fill-ins being
  covered by the fill-augmented bases. The updates are reduced afterwards
  in ascending pivot order.
* sequential (h2dep): exact block elimination in ascending order. Updates
  landing on low-rank positions are absorbed by recompressing the affected
  bases, with each rotation recorded so the solve can replay it.
"""
from __future__ import annotations

import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from .compression import (build_level_bases, compute_skeletons, merge_far,
                          recompress_fillin, resplit)
from .hstructure import BlockId, LevelSystem
from .linalg import FLOPS, LinalgError, flop_phase, lu_partial, mm

FACTOR_VARIANTS = ("blr2", "hss", "h2dep", "h2nodep")
PIVOT_RTOL = 1e-13


class FillAbsorptionError(LinalgError):
    pass


@dataclass
class PivotFactor:
    k: int
    r: int
    lu: object
    lhat: Dict[int, Tuple[int, np.ndarray]]     # c -> (first active row, L^)
    uhat: Dict[int, Tuple[int, np.ndarray]]     # j -> (first active col, U^)


@dataclass
class LevelFactors:
    level: int
    dims: List[int]
    U0: List[np.ndarray]
    V0: List[np.ndarray]
    events: list
    ranks: List[int]
    U: list = None
    V: list = None

    def pivots(self):
        return {ev[1].k: ev[1] for ev in self.events if ev[0] == "pivot"}


@dataclass
class ULVFactors:
    variant: str
    n: int
    perm: np.ndarray
    levels: List[LevelFactors]
    top: object
    top_dims: List[int]
    stats: dict = field(default_factory=dict)


@dataclass
class LevelPlan:
    level: int
    tasks: List[int]
    edges: List[Tuple[int, int]]


# ---------------------------------------------------------- single block

def eliminate_block(S, r, r_col=None):
    """Eliminate the redundant part of one diagonal skeleton block.

    Returns (lu of S^RR, U^RS, L^SR, new S^SS).
    """
    rc = r if r_col is None else r_col
    S = np.asarray(S, dtype=np.float64)
    lu = lu_partial(S[:r, :rc], pivot_rtol=PIVOT_RTOL)
    U_rs = lu.solve_L(S[:r, rc:])
    L_sr = lu.right_solve_U(S[r:, :rc])
    SS = S[r:, rc:] - mm(L_sr, U_rs)
    return lu, U_rs, L_sr, SS


# ---------------------------------------------------------- parallel mode

def _pivot_task(k, Shat, near, r, level):
    rk = r[k]
    lu = lu_partial(Shat[(k, k)][:rk, :rk], pivot_rtol=PIVOT_RTOL,
                    block=BlockId(level, k, k))
    # R parts of later blocks stay in L/U; earlier ones belong to their own pivot
    uhat, lhat = {}, {}
    for j in near[k]:
        s = 0 if j > k else r[j]
        uhat[j] = (s, lu.solve_L(Shat[(k, j)][:rk, s:]))
    for c in near[k]:
        s = 0 if c > k else r[c]
        lhat[c] = (s, lu.right_solve_U(Shat[(c, k)][s:, :rk]))
    return PivotFactor(k, rk, lu, lhat, uhat)


def _fill_check(k, Shat, near, r, tol, record, abort):
    """Generated fill-ins of pivot k and their part outside the fixed bases.

    The full update of eliminating R_k is G = S_{c,Rk} (S^RR_kk)^{-1} S_{Rk,j};
    the parallel scheme keeps only its S^SS part. The reference size is the
    matching first-order term S_ck S_kk^{-1} S_kj.
    """
    rk = r[k]
    if rk == 0:
        return
    Skk = Shat[(k, k)]
    RRinv = np.linalg.inv(Skk[:rk, :rk])
    Skk_inv = np.linalg.inv(Skk)
    for c in near[k]:
        if c == k:
            continue
        left = Shat[(c, k)][:, :rk] @ RRinv
        for j in near[k]:
            if j == k:
                continue
            G = left @ Shat[(k, j)][:rk, :]
            out2 = np.linalg.norm(G[:r[c], :]) ** 2 + np.linalg.norm(G[r[c]:, :r[j]]) ** 2
            resid = float(np.sqrt(out2))
            ref = float(np.linalg.norm(Shat[(c, k)] @ Skk_inv @ Shat[(k, j)]))
            record.append({"pivot": k, "row": c, "col": j, "residual": resid,
                           "fill_norm": ref, "generated_norm": float(np.linalg.norm(G))})
            if abort and resid > 100 * tol * ref:
                raise FillAbsorptionError(
                    f"basis does not absorb fill-in at ({c},{j}) from pivot {k}: "
                    f"residual {resid:.3e} > 100*tol*|F| = {100 * tol * ref:.3e}")


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def factor_level_parallel(sys, U, V, Shat, far, threads=1, order=None,
                          instrument=None, tol=None, check_fills=False):
    """Independent elimination of every block row, then the S^SS reduction.

    Returns (LevelFactors, ss) where ss holds the S^SS block of every pair.
    """
    m = sys.m
    near = sys.near
    r = [U[c].r for c in range(m)]
    if any(U[c].r != V[c].r for c in range(m)):
        raise LinalgError("row/column redundant sizes differ")
    if instrument is not None:
        for k in range(m):
            _fill_check(k, Shat, near, r, tol, instrument, check_fills)
    tasks = list(range(m)) if order is None else list(order)
    if sorted(tasks) != list(range(m)):
        raise ValueError("order must be a permutation of the block rows")
    res = _map(lambda k: _pivot_task(k, Shat, near, r, sys.level), tasks, threads)
    piv = {p.k: p for p in res}

    ss = {}
    for c in range(m):
        for j in near[c]:
            ss[(c, j)] = Shat[(c, j)][r[c]:, r[j]:].copy()
    ss.update(far)

    def reduce_row(c):
        for k in near[c]:
            s, Lm = piv[k].lhat[c]
            if Lm.shape[1] == 0:
                continue
            Lm = Lm[r[c] - s:]
            for j in near[k]:
                t, Um = piv[k].uhat[j]
                ss[(c, j)] -= mm(Lm, Um[:, r[j] - t:])

    _map(reduce_row, range(m), threads)
    events = [("pivot", piv[k]) for k in range(m)]
    lf = LevelFactors(sys.level, list(sys.dims), [u.full for u in U],
                      [v.full for v in V], events, [u.rank for u in U], U, V)
    return lf, ss


# -------------------------------------------------------- sequential mode

def factor_level_sequential(sys, U, V, Shat, far, tol, cap=None, instrument=None):
    """h2dep: exact elimination in ascending block-row order with
    recompression of fill-ins that land on low-rank positions."""
    m = sys.m
    near = sys.near
    U, V = list(U), list(V)
    r = [U[c].r for c in range(m)]
    U0 = [u.full for u in U]
    V0 = [v.full for v in V]
    far_of = [sys.pattern.far(c) for c in range(m)]
    far_cols = [[c for c in range(m) if not sys.pattern.is_near(c, j)] for j in range(m)]
    Shat = {key: val.copy() for key, val in Shat.items()}
    far = dict(far)
    events = []

    for k in range(m):
        def first(c):
            return 0 if c > k else r[c]
        rk = r[k]
        lu = lu_partial(Shat[(k, k)][:rk, :rk], pivot_rtol=PIVOT_RTOL,
                        block=BlockId(sys.level, k, k))
        lhat = {c: (first(c), lu.right_solve_U(Shat[(c, k)][first(c):, :rk])) for c in near[k]}
        uhat = {j: (first(j), lu.solve_L(Shat[(k, j)][:rk, first(j):])) for j in near[k]}
        events.append(("pivot", PivotFactor(k, rk, lu, lhat, uhat)))
        if rk == 0:
            continue

        pending = {}
        for c in near[k]:
            sc, Lm = lhat[c]
            for j in near[k]:
                sj, Um = uhat[j]
                upd = mm(Lm, Um)
                if sys.pattern.is_near(c, j):
                    Shat[(c, j)][sc:, sj:] -= upd
                elif c < k and j < k:
                    far[(c, j)] -= upd
                else:
                    B = np.zeros((sys.dims[c] - sc, sys.dims[j] - sj))
                    B[r[c] - sc:, r[j] - sj:] = far[(c, j)]
                    B -= upd
                    pending[(c, j)] = (sc, sj, B, float(np.linalg.norm(upd)))
        if not pending:
            continue

        rows = sorted({c for c, _ in pending if c > k})
        cols = sorted({j for _, j in pending if j > k})
        rowP, colP = {}, {}
        for c in rows:
            tj = {j for (i, j) in pending if i == c}
            olds = [far[(c, q)] for q in far_of[c] if q not in tj]
            targets = [pending[(c, j)][2] for j in sorted(tj)]
            U[c], rowP[c] = recompress_fillin(U[c], olds, targets, tol, cap)
        for j in cols:
            ti = {i for (i, jj) in pending if jj == j}
            olds = [far[(q, j)].T for q in far_cols[j] if q not in ti]
            targets = [pending[(i, j)][2].T for i in sorted(ti)]
            V[j], colP[j] = recompress_fillin(V[j], olds, targets, tol, cap)
        for c in sorted(set(rows) | set(cols)):
            want = max(U[c].rank, V[c].rank)
            for side, bases, Pd in (("U", U, rowP), ("V", V, colP)):
                nb, P2 = resplit(bases[c], want)
                if P2 is None:
                    continue
                bases[c] = nb
                Pd[c] = P2 if c not in Pd else Pd[c] @ P2

        # rotate everything stored in the affected rows and columns
        for c, P in sorted(rowP.items()):
            r_old, r_new = r[c], U[c].r
            for j in near[c]:
                Shat[(c, j)] = mm(P.T, Shat[(c, j)])
            for q in far_of[c]:
                if (c, q) not in pending:
                    far[(c, q)] = mm(P.T[r_new:, r_old:], far[(c, q)])
            for (i, j), (sc, sj, B, un) in list(pending.items()):
                if i == c:
                    pending[(i, j)] = (sc, sj, mm(P.T, B), un)
            events.append(("rowrot", c, P))
        for j, P in sorted(colP.items()):
            r_old, r_new = r[j], V[j].r
            for c in range(m):
                if sys.pattern.is_near(c, j):
                    Shat[(c, j)] = mm(Shat[(c, j)], P)
            for q in far_cols[j]:
                if (q, j) not in pending:
                    far[(q, j)] = mm(far[(q, j)], P[r_old:, r_new:])
            for (i, jj), (sc, sj, B, un) in list(pending.items()):
                if jj == j:
                    pending[(i, jj)] = (sc, sj, mm(B, P), un)
            events.append(("colrot", j, P))
        for c in set(rowP) | set(colP):
            r[c] = U[c].r
            assert U[c].r == V[c].r

        # what is left of each fill outside the skeleton is dropped
        for (c, j), (sc, sj, B, un) in pending.items():
            a, b = r[c] - sc, r[j] - sj
            SS = B[a:, b:]
            if instrument is not None:
                tot = np.linalg.norm(B) ** 2 - np.linalg.norm(SS) ** 2
                instrument.append({"pivot": k, "row": c, "col": j,
                                   "residual": float(np.sqrt(max(tot, 0.0))),
                                   "fill_norm": un,
                                   "target_norm": float(np.linalg.norm(B))})
            far[(c, j)] = np.ascontiguousarray(SS)

    ss = {}
    for c in range(m):
        for j in near[c]:
            ss[(c, j)] = Shat[(c, j)][r[c]:, r[j]:].copy()
    ss.update(far)
    lf = LevelFactors(sys.level, list(sys.dims), U0, V0, events,
                      [u.rank for u in U], U, V)
    return lf, ss


# ------------------------------------------------------------- the driver

def _merge_system(ss, structure, level, ranks):
    pat = structure.levels[level]
    dims = [ranks[2 * p] + ranks[2 * p + 1] for p in range(pat.nclusters)]
    dense = {}
    for p in range(pat.nclusters):
        for q in pat.near[p]:
            dense[(p, q)] = np.block([[ss[(2 * p + a, 2 * q + b)] for b in (0, 1)]
                                      for a in (0, 1)])
    return LevelSystem(level, dims, pat, dense, merge_far(ss), pat.admissible)


def _top_matrix(ss, ranks):
    off = np.concatenate([[0], np.cumsum(ranks)]).astype(int)
    m = len(ranks)
    A = np.zeros((off[-1], off[-1]))
    for c in range(m):
        for j in range(m):
            A[off[c]:off[c + 1], off[j]:off[j + 1]] = ss[(c, j)]
    return A


def factorize(H, variant, tol, cap=None, threads=1, leaf_bases=None,
              order_rng=None, instrument=None, check_fills=False, top_side=None):
    """Factorize an HMatrix with one of the four ULV variants.

    leaf_bases: optional (U, V) for the leaf level; otherwise built here
    (fill-augmented for h2nodep).
    order_rng: numpy Generator; when given, each level's block-row tasks are
      run in a random order (the results must not depend on it).
    instrument: list that receives fill-in diagnostics.
    top_side: recursion stops once the skeleton system has at most this
      many unknowns (default 4 * leaf size); 0 recurses to the top level.
    """
    if variant not in FACTOR_VARIANTS:
        raise ValueError(f"unknown factorization variant {variant!r}")
    st = H.structure
    want = {"blr2": "blr2", "hss": "hss", "h2dep": "h2", "h2nodep": "h2"}[variant]
    if st.variant != want:
        raise ValueError(f"variant {variant} needs a {want} structure, got {st.variant}")
    sequential = variant == "h2dep"
    use_fill = variant == "h2nodep"
    leaf_cut = 4 * H.tree.leaf_size if top_side is None else int(top_side)

    times = defaultdict(float)
    rank_stats = {}
    levels = []
    sys = H.leaf_system()
    lev = st.leaf_level
    with threadpool_limits(limits=1):
        while True:
            t0 = time.perf_counter()
            if lev == st.leaf_level and leaf_bases is not None:
                U, V = leaf_bases
            else:
                clock = {}
                with flop_phase("basis"):
                    fills = "compute" if use_fill else None
                    U, V = build_level_bases(sys, tol, cap, fills=fills, clock=clock)
                tf = clock.get("fill-precompute", 0.0)
                times["fill-precompute"] += tf
                t0 += tf
            t1 = time.perf_counter()
            times["basis"] += t1 - t0
            with flop_phase("skeleton"):
                Shat, far = compute_skeletons(sys, U, V)
            t2 = time.perf_counter()
            times["skeleton"] += t2 - t1
            with flop_phase("factorize"):
                if sequential:
                    lf, ss = factor_level_sequential(sys, U, V, Shat, far, tol, cap,
                                                     instrument=instrument)
                else:
                    order = None
                    if order_rng is not None:
                        order = order_rng.permutation(sys.m)
                    lf, ss = factor_level_parallel(sys, U, V, Shat, far, threads, order,
                                                   instrument=instrument, tol=tol,
                                                   check_fills=check_fills)
            del Shat, far
            levels.append(lf)
            rk = lf.ranks
            rank_stats[lev] = {"max": int(max(rk)), "mean": float(np.mean(rk)),
                               "dims_max": int(max(sys.dims))}
            side = int(sum(rk))
            done = (st.variant == "blr2" or lev == st.top_level or side <= leaf_cut)
            if done:
                with flop_phase("factorize"):
                    top_A = _top_matrix(ss, rk)
                    top = lu_partial(top_A, pivot_rtol=1e-15)
                times["factorize"] += time.perf_counter() - t2
                break
            with flop_phase("factorize"):
                sys = _merge_system(ss, st, lev - 1, rk)
            del ss
            times["factorize"] += time.perf_counter() - t2
            lev -= 1
    f = ULVFactors(variant, H.n, H.tree.perm, levels, top, list(rk))
    f.stats = {"times": dict(times), "ranks": rank_stats, "top_size": int(sum(rk))}
    return f


# ------------------------------------------------------- dependency graph

def _task_sets(pat, k, sequential):
    near = pat.near
    reads = {("S", k, j) for j in near[k]} | {("S", c, k) for c in near[k]}
    if not sequential:
        return reads, {("F", k)}
    reads |= {("B", k)}
    writes = {("F", k)}
    for c in near[k]:
        for j in near[k]:
            if c == k and j == k:
                continue
            writes.add(("S", c, j))
            if not pat.is_near(c, j):
                if c > k:
                    writes.add(("B", c))
                if j > k:
                    writes.add(("B", j))
    return reads, writes


def dependency_graph(structure, variant):
    """Read/write-set dependency edges between block-row tasks per level."""
    sequential = variant == "h2dep"
    plans = []
    for lev in sorted(structure.levels, reverse=True):
        pat = structure.levels[lev]
        sets = [_task_sets(pat, k, sequential) for k in range(pat.nclusters)]
        edges = []
        for a in range(pat.nclusters):
            for b in range(a + 1, pat.nclusters):
                ra, wa = sets[a]
                rb, wb = sets[b]
                if (wa & (rb | wb)) or (wb & ra):
                    edges.append((a, b))
        plans.append(LevelPlan(lev, list(range(pat.nclusters)), edges))
    return plans


def plans_to_dot(plans, name="deps"):
    lines = [f"digraph {name} {{"]
    for p in plans:
        lines.append(f"  subgraph cluster_l{p.level} {{ label=\"level {p.level}\";")
        for t in p.tasks:
            lines.append(f"    l{p.level}_{t} [label=\"{t}\"];")
        for a, b in p.edges:
            lines.append(f"    l{p.level}_{a} -> l{p.level}_{b};")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


def stored_entries(factors):
    """Number of float64 entries held by a ULVFactors object."""
    n = factors.top.lu.size
    for lf in factors.levels:
        n += sum(u.size for u in lf.U0) + sum(v.size for v in lf.V0)
        for ev in lf.events:
            if ev[0] == "pivot":
                p = ev[1]
                n += p.lu.lu.size
                n += sum(M.size for _, M in p.lhat.values())
                n += sum(M.size for _, M in p.uhat.values())
            else:
                n += ev[2].size
    return int(n)
