"""Forward/backward substitution through ULV factors, and dense oracles."""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from .kernels import assemble_block
from .linalg import flop_phase, mm

ORACLE_GUARD = 16384


class SolveError(ValueError):
    pass


def _split(v, sizes):
    off = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    return [v[off[i]:off[i + 1]] for i in range(len(sizes))]


def _forward(lf, v):
    y = [mm(U0.T, vc) for U0, vc in zip(lf.U0, _split(v, lf.dims))]
    z = {}
    for ev in lf.events:
        if ev[0] == "pivot":
            p = ev[1]
            zk = p.lu.solve_L(y[p.k][:p.r])
            z[p.k] = zk
            if p.r == 0:
                continue
            for c, (s, M) in p.lhat.items():
                y[c][s:s + M.shape[0]] -= mm(M, zk)
        elif ev[0] == "rowrot":
            y[ev[1]] = mm(ev[2].T, y[ev[1]])
    up = np.concatenate([yc[d - k:] for yc, d, k in zip(y, lf.dims, lf.ranks)])
    return up, z


def _backward(lf, xs, z):
    xh = []
    for d, k, part in zip(lf.dims, lf.ranks, _split(xs, lf.ranks)):
        v = np.zeros(d)
        v[d - k:] = part
        xh.append(v)
    for ev in reversed(lf.events):
        if ev[0] == "pivot":
            p = ev[1]
            if p.r == 0:
                continue
            rhs = z[p.k].copy()
            for j, (s, M) in p.uhat.items():
                rhs -= mm(M, xh[j][s:s + M.shape[1]])
            xh[p.k][:p.r] = p.lu.solve_U(rhs)
        elif ev[0] == "colrot":
            xh[ev[1]] = mm(ev[2], xh[ev[1]])
    return np.concatenate([mm(V0, v) for V0, v in zip(lf.V0, xh)])


def _solve_one(factors, b):
    v = b[factors.perm]
    zs = []
    for lf in factors.levels:
        v, z = _forward(lf, v)
        zs.append(z)
    x = factors.top.solve(v)
    for lf, z in zip(reversed(factors.levels), reversed(zs)):
        x = _backward(lf, x, z)
    out = np.empty_like(x)
    out[factors.perm] = x
    return out


def solve(factors, b):
    """Solve A x = b; b and x are in the caller's original point order.
    A 2-D b is handled one column at a time."""
    if factors is None or getattr(factors, "top", None) is None:
        raise SolveError("factors are missing or incomplete")
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != factors.n:
        raise SolveError(f"right-hand side has length {b.shape[0]}, expected {factors.n}")
    if not np.all(np.isfinite(b)):
        raise SolveError("right-hand side has non-finite entries")
    with flop_phase("solve"):
        if b.ndim == 1:
            return _solve_one(factors, b)
        return np.column_stack([_solve_one(factors, b[:, i]) for i in range(b.shape[1])])


# ------------------------------------------------------------------ oracles

def _guard(cloud, guard):
    if len(cloud) > guard:
        raise SolveError(f"dense oracle disabled for N={len(cloud)} > {guard}")


def matvec_dense_oracle(cloud, kernel, x, guard=ORACLE_GUARD, chunk=1024):
    """Exact kernel matrix-vector product, assembled in row chunks."""
    _guard(cloud, guard)
    x = np.asarray(x, dtype=np.float64)
    n = len(cloud)
    out = np.empty((n,) + x.shape[1:])
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        out[s:e] = assemble_block(kernel, cloud, slice(s, e), slice(0, n)) @ x
    return out


def dense_matrix(cloud, kernel, guard=ORACLE_GUARD):
    _guard(cloud, guard)
    n = len(cloud)
    return assemble_block(kernel, cloud, slice(0, n), slice(0, n))


def dense_solve_oracle(cloud, kernel, b, guard=ORACLE_GUARD):
    """Ground truth by dense LU."""
    A = dense_matrix(cloud, kernel, guard)
    return sla.lu_solve(sla.lu_factor(A, overwrite_a=True, check_finite=False),
                        np.asarray(b, dtype=np.float64), check_finite=False)
