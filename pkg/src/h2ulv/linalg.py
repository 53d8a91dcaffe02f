"""Dense kernels used by every other module.

Thin wrappers over LAPACK (through scipy.linalg) that validate input and
report analytic flop counts to a process-wide counter.
"""
from __future__ import annotations

import threading
import warnings
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla


class LinalgError(ValueError):
    pass


class SingularBlockError(LinalgError):
    """Raised when an LU pivot falls under the singularity threshold."""

    def __init__(self, step, pivot, threshold, block=None):
        self.step = step
        self.block = block
        where = f" in block {block}" if block is not None else ""
        super().__init__(
            f"singular block{where}: pivot {pivot:.3e} <= {threshold:.3e} at step {step}")


# ---------------------------------------------------------------- flop counter

class FlopCounter:
    """Thread-safe tally of floating point operations, bucketed by phase."""

    def __init__(self):
        self._lock = threading.Lock()
        self._tally = defaultdict(int)
        self.phase = "other"

    def add(self, n, phase=None):
        n = int(n)
        if n < 0:
            raise ValueError("flop increments must be nonnegative")
        with self._lock:
            self._tally[phase or self.phase] += n

    @property
    def tally(self):
        with self._lock:
            return sum(self._tally.values())

    def by_phase(self):
        with self._lock:
            return dict(self._tally)

    def reset(self):
        with self._lock:
            self._tally.clear()


FLOPS = FlopCounter()


@contextmanager
def flop_phase(name):
    """Attribute flops counted inside the block to `name`."""
    prev = FLOPS.phase
    FLOPS.phase = name
    try:
        yield
    finally:
        FLOPS.phase = prev


# -------------------------------------------------------------------- helpers

def _as_matrix(A, name="A"):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise LinalgError(f"{name} must be 2-D, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise LinalgError(f"{name} has non-finite entries")
    return A


def qr_flops(m, n):
    # Householder R plus explicit m x m Q.
    p = min(m, n)
    r_part = 2 * m * n * p - (2 * p ** 3) // 3
    q_part = 4 * m * m * p - 4 * m * p * p + (4 * p ** 3) // 3
    return int(r_part + q_part)


def norms(A):
    """Frobenius norm and max-abs entry."""
    A = np.asarray(A, dtype=np.float64)
    if A.size == 0:
        return 0.0, 0.0
    return float(np.linalg.norm(A)), float(np.abs(A).max())


def rel_error(x, x_ref):
    x = np.asarray(x, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    if x.shape != x_ref.shape:
        raise LinalgError(f"shape mismatch {x.shape} vs {x_ref.shape}")
    den = np.linalg.norm(x_ref)
    if den == 0.0:
        raise LinalgError("reference is all zero")
    return float(np.linalg.norm(x - x_ref) / den)


# ------------------------------------------------------------------------- QR

def qr_full(A):
    """Householder QR with a square Q."""
    A = _as_matrix(A)
    if A.shape[0] < 1:
        raise LinalgError("empty matrix")
    m, n = A.shape
    if n == 0:
        return np.eye(m), np.zeros((m, 0))
    Q, R = sla.qr(A, mode="full", check_finite=False)
    FLOPS.add(qr_flops(m, n))
    return Q, R


@dataclass(frozen=True)
class RankDecision:
    tol: float
    cap: Optional[int] = None

    def __post_init__(self):
        if not self.tol > 0:
            raise LinalgError("tol must be positive")
        if self.cap is not None and self.cap < 0:
            raise LinalgError("rank cap must be nonnegative")


@dataclass
class PivotedQR:
    Q: np.ndarray          # square, columns ordered by pivot importance
    rank: int
    perm: np.ndarray
    rdiag: np.ndarray

    @property
    def Qs(self):
        return self.Q[:, :self.rank]

    @property
    def Qr(self):
        return self.Q[:, self.rank:]


def revealed_rank(rdiag, tol, cap=None):
    """Smallest k with |R[k,k]| <= tol*|R[0,0]| (0-based), then capped."""
    d = np.abs(np.asarray(rdiag))
    if d.size == 0 or d[0] == 0.0:
        k = 0
    else:
        small = np.flatnonzero(d <= tol * d[0])
        k = int(small[0]) if small.size else d.size
    if cap is not None:
        k = min(k, cap)
    return k


def qr_pivoted(A, decision):
    """Column-pivoted QR (LAPACK geqp3) with a relative diagonal cut.

    Returns the full square Q so callers can split it into skeleton and
    redundant parts.
    """
    if not isinstance(decision, RankDecision):
        decision = RankDecision(*decision) if isinstance(decision, tuple) else RankDecision(decision)
    A = _as_matrix(A)
    m, n = A.shape
    if m < 1:
        raise LinalgError("empty matrix")
    if n == 0:
        return PivotedQR(np.eye(m), 0, np.arange(0), np.zeros(0))
    Q, R, perm = sla.qr(A, mode="full", pivoting=True, check_finite=False)
    FLOPS.add(qr_flops(m, n))
    rdiag = np.diag(R).copy()
    k = revealed_rank(rdiag, decision.tol, decision.cap)
    return PivotedQR(Q, k, perm, rdiag)


# ------------------------------------------------------------------------- LU

def _piv_to_perm(piv):
    perm = np.arange(piv.size)
    for i, p in enumerate(piv):
        if p != i:
            perm[i], perm[p] = perm[p], perm[i]
    return perm


class LUFactor:
    """P A = L U with row pivoting confined to the block.

    `perm` satisfies A[perm] = L @ U.
    """

    def __init__(self, lu, piv):
        self.lu = lu
        self.piv = piv
        self.perm = _piv_to_perm(piv)
        self.n = lu.shape[0]

    @property
    def L(self):
        return np.tril(self.lu, -1) + np.eye(self.n)

    @property
    def U(self):
        return np.triu(self.lu)

    def solve_L(self, B):
        """L^{-1} P B."""
        B = np.asarray(B)
        if self.n == 0 or B.size == 0:
            return np.array(B, dtype=np.float64, copy=True)
        FLOPS.add(self.n * self.n * (B.shape[1] if B.ndim == 2 else 1))
        return sla.solve_triangular(self.lu, B[self.perm], lower=True,
                                    unit_diagonal=True, check_finite=False)

    def solve_U(self, B):
        """U^{-1} B."""
        B = np.asarray(B)
        if self.n == 0 or B.size == 0:
            return np.array(B, dtype=np.float64, copy=True)
        FLOPS.add(self.n * self.n * (B.shape[1] if B.ndim == 2 else 1))
        return sla.solve_triangular(self.lu, B, lower=False, check_finite=False)

    def right_solve_U(self, B):
        """B U^{-1}."""
        B = np.asarray(B)
        if self.n == 0 or B.size == 0:
            return np.array(B, dtype=np.float64, copy=True)
        FLOPS.add(self.n * self.n * B.shape[0])
        return sla.solve_triangular(self.lu, B.T, lower=False, trans="T",
                                    check_finite=False).T

    def solve(self, B):
        return self.solve_U(self.solve_L(B))

    def right_solve(self, B):
        """B A^{-1}."""
        B = np.asarray(B)
        if self.n == 0 or B.size == 0:
            return np.array(B, dtype=np.float64, copy=True)
        FLOPS.add(2 * self.n * self.n * B.shape[0])
        X = sla.lu_solve((self.lu, self.piv), B.T, trans=1, check_finite=False)
        return X.T


def lu_flops(n):
    return (2 * n ** 3) // 3


def lu_partial(A, pivot_rtol=1e-14, block=None):
    """Block-local partially pivoted LU.

    A pivot with |u_ii| <= pivot_rtol * max|A| raises SingularBlockError
    naming the elimination step.
    """
    A = _as_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise LinalgError(f"LU needs a square block, got {A.shape}")
    n = A.shape[0]
    if n == 0:
        return LUFactor(np.zeros((0, 0)), np.zeros(0, dtype=np.int32))
    with warnings.catch_warnings():
        # singular pivots are reported below with the step number
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(A, check_finite=False)
    FLOPS.add(lu_flops(n))
    thr = pivot_rtol * np.abs(A).max()
    d = np.abs(np.diag(lu))
    bad = np.flatnonzero(d <= thr)
    if bad.size:
        raise SingularBlockError(int(bad[0]), float(d[bad[0]]), float(thr), block)
    return LUFactor(lu, piv)


# ------------------------------------------------------------------ trsm/gemm

def trsm(T, B, side="left", uplo="lower", unit_diag=False):
    T = _as_matrix(T, "T")
    B = _as_matrix(B, "B")
    n = T.shape[0]
    if T.shape[1] != n:
        raise LinalgError("triangular factor must be square")
    if side not in ("left", "right") or uplo not in ("lower", "upper"):
        raise LinalgError("bad side/uplo")
    if (side == "left" and B.shape[0] != n) or (side == "right" and B.shape[1] != n):
        raise LinalgError(f"shape mismatch {T.shape} vs {B.shape}")
    if not unit_diag and np.any(np.diag(T) == 0.0):
        raise LinalgError("zero on the diagonal")
    lower = uplo == "lower"
    if side == "left":
        FLOPS.add(n * n * B.shape[1])
        return sla.solve_triangular(T, B, lower=lower, unit_diagonal=unit_diag,
                                    check_finite=False)
    FLOPS.add(n * n * B.shape[0])
    return sla.solve_triangular(T, B.T, lower=lower, trans="T",
                                unit_diagonal=unit_diag, check_finite=False).T


def gemm(alpha, A, B, beta=0.0, C=None, transA=False, transB=False):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    opA = A.T if transA else A
    opB = B.T if transB else B
    if opA.ndim != 2 or opB.ndim != 2 or opA.shape[1] != opB.shape[0]:
        raise LinalgError(f"shape mismatch {opA.shape} @ {opB.shape}")
    m, k = opA.shape
    n = opB.shape[1]
    FLOPS.add(2 * m * k * n)
    out = opA @ opB
    if alpha != 1.0:
        out *= alpha
    if C is not None and beta != 0.0:
        C = np.asarray(C, dtype=np.float64)
        if C.shape != out.shape:
            raise LinalgError(f"C has shape {C.shape}, expected {out.shape}")
        out += beta * C
    return out


def mm(A, B):
    """Plain product with flop accounting."""
    FLOPS.add(2 * A.shape[0] * A.shape[1] * (B.shape[1] if B.ndim == 2 else 1))
    return A @ B


# ----------------------------------------------------------------- matrix I/O

def write_matrix(path, A):
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    with open(path, "w") as fh:
        fh.write(f"{A.shape[0]} {A.shape[1]}\n")
        for row in A:
            fh.write(" ".join(f"{v:.16e}" for v in row) + "\n")


def read_matrix(path):
    with open(path) as fh:
        rows, cols = (int(t) for t in fh.readline().split())
        vals = np.array(fh.read().split(), dtype=np.float64)
    if vals.size != rows * cols:
        raise LinalgError(f"expected {rows * cols} values, found {vals.size}")
    return vals.reshape(rows, cols)
