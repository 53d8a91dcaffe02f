"""scikit-learn style front end: ``fit(points)`` factorizes, ``solve(b)`` solves."""
from __future__ import annotations

import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .geometry import AdmissibilityRule, PointCloud, build_cluster_tree
from .hstructure import classify_blocks, materialize_dense
from .kernels import make_kernel
from .linalg import FLOPS, flop_phase
from .solve import solve as ulv_solve
from .ulv import factorize


def structure_for(structure, variant):
    if structure == "h2":
        return "h2dep" if variant == "dep" else "h2nodep"
    if variant == "dep":
        raise ValueError("the dep variant needs the h2 structure")
    return structure


def build_hmatrix(cloud, leaf_size=256, structure="h2", admissibility=None, eta=1.0,
                  kernel="laplace", alpha_m=0.0, reg=None, seed=0):
    """Tree, block classification and dense leaf blocks for a point cloud."""
    if admissibility is None:
        admissibility = "strong" if structure == "h2" else "weak"
    tree, ordered = build_cluster_tree(cloud, leaf_size, seed=seed)
    kspec = make_kernel(kernel, cloud, alpha_m=alpha_m, reg=reg)
    rule = AdmissibilityRule(admissibility, eta)
    st = classify_blocks(tree, rule, structure)
    return materialize_dense(st, tree, ordered, kspec)


class H2ULVSolver(BaseEstimator):
    """Hierarchical ULV direct solver for Laplace/Yukawa kernel matrices.

    Parameters mirror the command line flags. After ``fit`` the factors are
    in ``factors_`` and timings/flops in ``report_``.
    """

    def __init__(self, structure="h2", variant="nodep", leaf_size=256, tol=1e-8,
                 rank_cap=None, kernel="laplace", alpha_m=0.0, reg=None,
                 admissibility=None, eta=1.0, threads=1, seed=0, check_fills=False):
        self.structure = structure
        self.variant = variant
        self.leaf_size = leaf_size
        self.tol = tol
        self.rank_cap = rank_cap
        self.kernel = kernel
        self.alpha_m = alpha_m
        self.reg = reg
        self.admissibility = admissibility
        self.eta = eta
        self.threads = threads
        self.seed = seed
        self.check_fills = check_fills

    def _validate(self):
        if self.structure not in ("blr2", "hss", "h2"):
            raise ValueError(f"structure must be blr2, hss or h2, got {self.structure!r}")
        if self.variant not in ("dep", "nodep"):
            raise ValueError(f"variant must be dep or nodep, got {self.variant!r}")
        if not (self.tol > 0):
            raise ValueError("tol must be positive")
        if int(self.threads) < 1:
            raise ValueError("threads must be >= 1")
        return structure_for(self.structure, self.variant)

    def fit(self, X, y=None, charges=None):
        """Build and factorize the kernel matrix of the points in X (N x 3)."""
        fv = self._validate()
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        if X.shape[1] != 3:
            raise ValueError(f"expected 3-D points, got {X.shape[1]} columns")
        self.n_features_in_ = 3
        cloud = PointCloud(X, charges)
        FLOPS.reset()
        t0 = time.perf_counter()
        with flop_phase("assemble"):
            H = build_hmatrix(cloud, self.leaf_size, self.structure, self.admissibility,
                              self.eta, self.kernel, self.alpha_m, self.reg, self.seed)
        t1 = time.perf_counter()
        self.instrument_ = [] if self.check_fills else None
        self.factors_ = factorize(H, fv, self.tol, self.rank_cap, int(self.threads),
                                  instrument=self.instrument_, check_fills=self.check_fills)
        self.hmatrix_ = H
        times = dict(self.factors_.stats["times"])
        times["assemble"] = t1 - t0
        self.report_ = {"times": times, "flops": FLOPS.by_phase(),
                        "ranks": self.factors_.stats["ranks"],
                        "dense_blocks": int(len(H.dense))}
        return self

    def solve(self, b):
        check_is_fitted(self, "factors_")
        b = check_array(np.asarray(b, dtype=np.float64).reshape(len(b), -1),
                        dtype=np.float64, ensure_min_features=1)
        before = FLOPS.by_phase().get("solve", 0)
        t0 = time.perf_counter()
        x = ulv_solve(self.factors_, b if b.shape[1] > 1 else b[:, 0])
        self.report_["times"]["solve"] = time.perf_counter() - t0
        self.report_["flops"]["solve"] = FLOPS.by_phase().get("solve", 0) - before
        return x

    def predict(self, b):
        """Alias of ``solve``."""
        return self.solve(b)
