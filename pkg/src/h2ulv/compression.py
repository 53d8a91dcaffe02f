"""Shared bases, skeleton matrices, fill-in pre-computation and recompression.

Everything here works on a `LevelSystem`, so the same code builds leaf bases
from kernel assemblies and transfer matrices from merged skeletons.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import time

import numpy as np
import scipy.linalg as sla

from .hstructure import BlockId, LevelSystem, SharedBasis
from .linalg import (FLOPS, PivotedQR, RankDecision, flop_phase,
                     lu_partial, mm, qr_pivoted)


class CompressionError(ValueError):
    pass


# ------------------------------------------------------------------ fill-ins

@dataclass
class FillInSet:
    level: int
    blocks: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return len(self.blocks)

    def __contains__(self, key):
        return key in self.blocks

    def __getitem__(self, key):
        return self.blocks[key]

    def ids(self):
        return [BlockId(self.level, c, j) for c, j in sorted(self.blocks)]

    def row(self, c):
        return {j: F for (i, j), F in sorted(self.blocks.items()) if i == c}


def diagonal_lus(sys):
    """Cached LU of every diagonal block that couples to an off-diagonal
    dense neighbour."""
    lus = {}
    for k in range(sys.m):
        if len(sys.near[k]) > 1:
            lus[k] = lu_partial(sys.dense[(k, k)], block=BlockId(sys.level, k, k))
    return lus


def iter_fill_rows(sys, lus=None):
    """Yield (c, {j: F_cj}) for every row with first-order fill-ins.

    F_cj = -sum_k A_ck A_kk^{-1} A_kj over pivots k != c, j with both
    couplings dense. Z = A_ck A_kk^{-1} is formed once per (c, k).
    """
    if lus is None:
        lus = diagonal_lus(sys)
    for c in range(sys.m):
        row = {}
        for k in sys.near[c]:
            if k == c or k not in lus:
                continue
            Z = lus[k].right_solve(sys.dense[(c, k)])
            for j in sys.near[k]:
                if j == k:
                    continue
                upd = mm(Z, sys.dense[(k, j)])
                if j in row:
                    row[j] -= upd
                else:
                    row[j] = -upd
        if row:
            yield c, dict(sorted(row.items()))


def precompute_fillins(sys):
    fills = FillInSet(sys.level)
    for c, row in iter_fill_rows(sys):
        for j, F in row.items():
            fills.blocks[(c, j)] = F
    return fills


# ----------------------------------------------------------- concatenation

COMPRESS_FACTOR = 3


class ConcatFactor:
    """Running horizontal concatenation [B1 | B2 | ...] with d rows.

    Once the width passes 3d it is replaced by the transpose of the R factor
    of its transpose, which spans the same column space with d columns.
    """

    def __init__(self, d):
        self.d = d
        self.parts = []
        self.width = 0
        self.compressed = False

    def add(self, B):
        if B.shape[0] != self.d:
            raise CompressionError(f"concat member has {B.shape[0]} rows, expected {self.d}")
        if B.shape[1] == 0:
            return
        self.parts.append(B)
        self.width += B.shape[1]
        if self.width > COMPRESS_FACTOR * self.d:
            self._compress()

    def _compress(self):
        M = np.hstack(self.parts)
        w, d = M.shape[1], self.d
        R = sla.qr(M.T, mode="r", check_finite=False)[0]
        p = min(w, d)
        FLOPS.add(2 * w * d * p - (2 * p ** 3) // 3)
        self.parts = [np.ascontiguousarray(R[:p].T)]
        self.width = p
        self.compressed = True

    def matrix(self):
        if not self.parts:
            return np.zeros((self.d, 0))
        return self.parts[0] if len(self.parts) == 1 else np.hstack(self.parts)


def _basis_from_concat(acc, decision):
    if acc.d == 0:
        return PivotedQR(np.zeros((0, 0)), 0, np.arange(0), np.zeros(0))
    return qr_pivoted(acc.matrix(), decision)


def _timed_rows(gen, clock):
    """Run each step of a fill-row generator under the fill-precompute phase."""
    while True:
        t0 = time.perf_counter()
        with flop_phase("fill-precompute"):
            item = next(gen, None)
        clock["fill-precompute"] = clock.get("fill-precompute", 0.0) + time.perf_counter() - t0
        if item is None:
            return
        yield item


def build_level_bases(sys, tol, cap=None, fills=None, equal_ranks=True, clock=None):
    """Row and column shared bases for one level.

    fills: None, a FillInSet, or "compute" to stream fill rows from the
    level's dense blocks without storing them all.
    Concatenation order per row is [fill-ins | far blocks]; per column the
    transposes in the same order.
    clock: optional dict; streamed fill computation time is added under
    "fill-precompute" and its flops are booked to that phase.
    """
    decision = RankDecision(tol, cap)
    m = sys.m
    racc = [ConcatFactor(sys.dims[c]) for c in range(m)]
    cacc = [ConcatFactor(sys.dims[c]) for c in range(m)]
    if fills is not None:
        if isinstance(fills, str):
            rows = _timed_rows(iter_fill_rows(sys), {} if clock is None else clock)
        else:
            rows = ((c, fills.row(c)) for c in sorted({i for i, _ in fills.blocks}))
        for c, row in rows:
            for j, F in row.items():
                racc[c].add(F)
                cacc[j].add(F.T)
    for c, j in sys.far_pairs():
        B = sys.far_block(c, j)
        racc[c].add(B)
        cacc[j].add(B.T)
    U, V = [], []
    for c in range(m):
        pu = _basis_from_concat(racc[c], decision)
        pv = _basis_from_concat(cacc[c], decision)
        ku, kv = pu.rank, pv.rank
        if equal_ranks:
            ku = kv = max(ku, kv)
        U.append(SharedBasis(sys.level, c, "U", pu.Q, ku))
        V.append(SharedBasis(sys.level, c, "V", pv.Q, kv))
    return U, V


def build_shared_bases(H, tol, cap=None):
    return build_level_bases(H.leaf_system(), tol, cap)


def build_shared_bases_with_fill(H, fills, tol, cap=None):
    return build_level_bases(H.leaf_system(), tol, cap, fills=fills)


def compute_transfer(sys, tol, cap=None, fills=None):
    """Transfer matrices for a merged (non-leaf) level system."""
    return build_level_bases(sys, tol, cap, fills=fills)


# --------------------------------------------------------------- skeletons

def skeleton_dense(D, Ub, Vb):
    """[Ur Us]^T D [Vr Vs]."""
    return mm(mm(Ub.full.T, D), Vb.full)


def skeleton_lowrank(B, Ub, Vb):
    return mm(mm(Ub.Qs.T, B), Vb.Qs)


def compute_skeletons(sys, U, V):
    """Full 2x2-partitioned S for near blocks, S^SS for every far pair."""
    near = {}
    for c in range(sys.m):
        for j in sys.near[c]:
            near[(c, j)] = skeleton_dense(sys.dense[(c, j)], U[c], V[j])
    far = {}
    for c, j in sys.far_pairs():
        far[(c, j)] = skeleton_lowrank(sys.far_block(c, j), U[c], V[j])
    return near, far


# ---------------------------------------------------- nested representation

@dataclass
class NestedH2:
    """Plain nested-basis representation (no elimination)."""
    tree: object
    structure: object
    dense: dict
    bases: Dict[int, Tuple[list, list]]
    coupling: Dict[int, Dict[Tuple[int, int], np.ndarray]]

    def ranks(self):
        return {lev: [u.rank for u in U] for lev, (U, V) in self.bases.items()}

    def stored_entries(self):
        n = sum(b.size for b in self.dense.values())
        for lev, (U, V) in self.bases.items():
            n += sum(u.d * u.rank for u in U) + sum(v.d * v.rank for v in V)
        for lev, blocks in self.coupling.items():
            n += sum(b.size for b in blocks.values())
        return int(n)

    def effective_bases(self, side="U"):
        """Skeleton bases expressed on the original (reordered) points."""
        L = self.structure.leaf_level
        pick = 0 if side == "U" else 1
        eff = {L: [b.Qs for b in self.bases[L][pick]]}
        for lev in range(L - 1, min(self.bases) - 1, -1):
            child = eff[lev + 1]
            cur = []
            for p, b in enumerate(self.bases[lev][pick]):
                E = sla.block_diag(child[2 * p], child[2 * p + 1])
                cur.append(E @ b.Qs)
            eff[lev] = cur
        return eff

    def expand_to_dense(self, guard=8192):
        """Test helper only."""
        n = self.tree.n
        if n > guard:
            raise CompressionError(f"expand_to_dense refuses N={n} > {guard}")
        A = np.zeros((n, n))
        L = self.structure.leaf_level
        leaves = self.tree.levels[L]
        for (c, j), D in self.dense.items():
            A[leaves[c].slice, leaves[j].slice] = D
        EU, EV = self.effective_bases("U"), self.effective_bases("V")
        for lev, blocks in self.coupling.items():
            nodes = self.tree.levels[lev]
            for (p, q), S in blocks.items():
                A[nodes[p].slice, nodes[q].slice] += EU[lev][p] @ S @ EV[lev][q].T
        return A


def merge_far(ss):
    """far_block callable for the parent level built from child S^SS blocks."""
    def far_block(p, q):
        return np.block([[ss[(2 * p + a, 2 * q + b)] for b in (0, 1)] for a in (0, 1)])
    return far_block


def build_nested(H, tol, cap=None, fills=False):
    """Leaf bases plus transfers for every level, without factorization.

    The S^SS of all far pairs is carried up level by level; only the
    admissible ones are stored in the result.
    """
    st = H.structure
    L = st.leaf_level
    sys = H.leaf_system()
    bases, coupling = {}, {}
    lev = L
    while True:
        use_fill = "compute" if (fills and lev == L) else None
        U, V = build_level_bases(sys, tol, cap, fills=use_fill)
        bases[lev] = (U, V)
        ss = {}
        for c, j in sys.far_pairs():
            ss[(c, j)] = skeleton_lowrank(sys.far_block(c, j), U[c], V[j])
        coupling[lev] = {key: ss[key] for key in sys.admissible}
        if lev == st.top_level:
            break
        lev -= 1
        pat = st.levels[lev]
        dims = [U[2 * p].rank + U[2 * p + 1].rank for p in range(pat.nclusters)]
        # near blocks above the leaf do not enter the far-field bases
        dense = {(c, j): None for c in range(pat.nclusters) for j in pat.near[c]}
        sys = LevelSystem(lev, dims, pat, dense, merge_far(ss),
                          pat.admissible)
    return NestedH2(H.tree, st, H.dense, bases, coupling)


# ----------------------------------------------------- recompression (dep)

def embed(SS, d_r, d_c, r_r, r_c):
    """Place S^SS in the lower-right corner of a (d_r x d_c) zero block."""
    out = np.zeros((d_r, d_c))
    out[r_r:, r_c:] = SS
    return out


def recompress_fillin(basis, far_rows, targets, tol, cap=None, min_rank=0):
    """Re-derive one shared basis so it absorbs new fill-ins.

    basis: current SharedBasis (row side; pass transposed blocks for V).
    far_rows: list of current S^SS blocks of the low-rank positions in the
      row (k x w each); they enter as [0; S^SS], i.e. Us S^SS in local
      coordinates.
    targets: list of (d x w) local-coordinate blocks holding old content
      plus fill.
    Returns (new SharedBasis, P) where P = old_full^T new_full.
    """
    d = basis.d
    acc = ConcatFactor(d)
    r = basis.r
    for S in far_rows:
        if S.size:
            acc.add(np.vstack([np.zeros((r, S.shape[1])), S]))
    for T in targets:
        acc.add(T)
    pq = qr_pivoted(acc.matrix(), RankDecision(tol, cap))
    # pq.Q lives in the old local frame; rebuild in the global frame
    Qnew = mm(basis.full, pq.Q)
    rank = max(pq.rank, min_rank)
    if rank > d:
        raise CompressionError("rank growth beyond block size")
    nb = SharedBasis(basis.level, basis.index, basis.side, Qnew, rank)
    P = np.hstack([pq.Q[:, rank:], pq.Q[:, :rank]])
    return nb, P


def resplit(basis, rank):
    """Same Q, new rank. Returns (new basis, P) with P = old_full^T new_full."""
    if rank == basis.rank:
        return basis, None
    nb = SharedBasis(basis.level, basis.index, basis.side, basis.Q, rank)
    P = basis.full.T @ nb.full
    return nb, P
