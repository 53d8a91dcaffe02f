"""Point clouds, 2-means cluster trees and admissibility.

Random numbers come from numpy's ``default_rng`` (PCG64 bit generator), so a
given integer seed always reproduces the same cloud and tree.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    charges: np.ndarray = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise GeometryError(f"points must be (N, 3), got {self.points.shape}")
        if self.charges is None:
            self.charges = np.ones(len(self.points))
        self.charges = np.ascontiguousarray(self.charges, dtype=np.float64)
        if self.charges.shape != (len(self.points),):
            raise GeometryError("need one charge per point")
        if len(self.points) < 2:
            raise GeometryError("a cloud needs at least 2 points")
        if not (np.all(np.isfinite(self.points)) and np.all(np.isfinite(self.charges))):
            raise GeometryError("non-finite coordinates or charges")

    def __len__(self):
        return len(self.points)

    def take(self, idx):
        return PointCloud(self.points[idx], self.charges[idx])

    def diameter(self):
        ext = self.points.max(0) - self.points.min(0)
        return float(np.linalg.norm(ext))


def generate_uniform_cube(n, seed=0):
    if n < 2:
        raise GeometryError("n must be >= 2")
    rng = np.random.default_rng(seed)
    return PointCloud(rng.random((n, 3)))


def generate_line(n, seed=0):
    """Random points on the x axis in [0, 1); gives a block tri-diagonal
    dense pattern under the strong rule."""
    if n < 2:
        raise GeometryError("n must be >= 2")
    rng = np.random.default_rng(seed)
    pts = np.zeros((n, 3))
    pts[:, 0] = rng.random(n)
    return PointCloud(pts)


def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = math.pi * (1.0 + 5 ** 0.5) * i
    return np.column_stack([np.cos(theta) * np.sin(phi),
                            np.sin(theta) * np.sin(phi),
                            np.cos(phi)])


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def generate_sphere_surface(n, spheres=1, spacing=3.0, seed=0):
    """Unit spheres on a cubic lattice, each covered by a Fibonacci lattice.

    The seed only picks a random rotation per sphere.
    """
    if n < 2:
        raise GeometryError("n must be >= 2")
    side = round(spheres ** (1.0 / 3.0))
    if spheres < 1 or side ** 3 != spheres:
        raise GeometryError(f"spheres must be a perfect cube, got {spheres}")
    rng = np.random.default_rng(seed)
    g = np.arange(side) * spacing
    centers = np.array([(x, y, z) for x in g for y in g for z in g], dtype=float)
    counts = np.full(spheres, n // spheres)
    counts[: n % spheres] += 1
    chunks = []
    for c, m in zip(centers, counts):
        if m == 0:
            continue
        chunks.append(_fibonacci_sphere(m) @ _random_rotation(rng).T + c)
    return PointCloud(np.vstack(chunks))


def read_points(path):
    data = np.loadtxt(path, ndmin=2)
    if data.shape[1] != 4:
        raise GeometryError("point files need 4 columns: x y z q")
    return PointCloud(data[:, :3], data[:, 3])


def write_points(path, cloud):
    with open(path, "w") as fh:
        for p, q in zip(cloud.points, cloud.charges):
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {q:.17g}\n")


# ------------------------------------------------------------------ the tree

@dataclass
class Cluster:
    level: int
    index: int
    start: int
    stop: int
    center: np.ndarray
    radius: float
    children: List["Cluster"] = field(default_factory=list)

    @property
    def size(self):
        return self.stop - self.start

    @property
    def is_leaf(self):
        return not self.children

    @property
    def slice(self):
        return slice(self.start, self.stop)


@dataclass
class ClusterTree:
    levels: List[List[Cluster]]
    perm: np.ndarray          # reordered position -> original index
    leaf_size: int

    @property
    def depth(self):
        return len(self.levels) - 1

    @property
    def leaves(self):
        return self.levels[-1]

    @property
    def root(self):
        return self.levels[0][0]

    @property
    def n(self):
        return self.root.size


def _farthest_pair_seed(P, rng, n_candidates=32):
    m = len(P)
    cand = rng.choice(m, size=min(n_candidates, m), replace=False)
    cand.sort()
    C = P[cand]
    d2 = ((C[:, None, :] - C[None, :, :]) ** 2).sum(-1)
    a, b = np.unravel_index(np.argmax(d2), d2.shape)
    return C[[a, b]].copy()


def _two_means(P, rng, max_iter=100):
    cen = _farthest_pair_seed(P, rng)
    lab = None
    for _ in range(max_iter):
        d = ((P[:, None, :] - cen[None, :, :]) ** 2).sum(-1)
        new = (d[:, 1] < d[:, 0]).astype(np.int8)
        if lab is not None and np.array_equal(new, lab):
            break
        lab = new
        for s in (0, 1):
            if np.any(lab == s):
                cen[s] = P[lab == s].mean(0)
    return lab


def _split(P, rng, min_side):
    """Boolean mask of the second half; falls back to a median cut along the
    principal spread direction when 2-means leaves one side too small."""
    axis = np.argmax(P.var(0))
    lab = _two_means(P, rng).astype(bool)
    n1 = int(lab.sum())
    if min(n1, len(P) - n1) >= min_side:
        # first child is the one lower along the widest axis, so that
        # leaf order follows space (matters for 1-D clouds)
        if P[lab, axis].mean() < P[~lab, axis].mean():
            lab = ~lab
        return lab
    order = np.argsort(P[:, axis], kind="stable")
    lab = np.zeros(len(P), dtype=bool)
    lab[order[len(P) // 2:]] = True
    return lab


def build_cluster_tree(cloud, leaf_size, seed=0):
    """Recursive 2-means bisection to a uniform depth ceil(log2(N/leaf)).

    Returns the tree and the cloud reordered so that every node owns a
    contiguous index range.
    """
    n = len(cloud)
    if leaf_size < 2:
        raise GeometryError("leaf_size must be >= 2")
    if n < 2 * leaf_size:
        raise GeometryError(f"need N >= 2*leaf_size, got N={n}, leaf={leaf_size}")
    if np.all(cloud.points == cloud.points[0]):
        raise GeometryError("degenerate cloud: all points coincide")
    depth = math.ceil(math.log2(n / leaf_size))
    rng = np.random.default_rng(seed)

    order = []
    leaf_lists = []

    def rec(idx, lev):
        if lev == depth:
            leaf_lists.append(idx)
            return
        P = cloud.points[idx]
        if np.all(P == P[0]):
            raise GeometryError("degenerate cluster: coincident points cannot be split")
        lab = _split(P, rng, 2 ** (depth - lev - 1))
        rec(idx[~lab], lev + 1)
        rec(idx[lab], lev + 1)

    rec(np.arange(n), 0)
    perm = np.concatenate(leaf_lists)
    pts = cloud.points[perm]

    def make(lev, i, start, stop):
        P = pts[start:stop]
        c = P.mean(0)
        r = float(np.sqrt(((P - c) ** 2).sum(1)).max())
        return Cluster(lev, i, start, stop, c, r)

    offs = np.concatenate([[0], np.cumsum([len(l) for l in leaf_lists])])
    levels = [[make(depth, i, offs[i], offs[i + 1]) for i in range(len(leaf_lists))]]
    for lev in range(depth - 1, -1, -1):
        below = levels[0]
        cur = []
        for i in range(len(below) // 2):
            a, b = below[2 * i], below[2 * i + 1]
            node = make(lev, i, a.start, b.stop)
            node.children = [a, b]
            cur.append(node)
        levels.insert(0, cur)
    return ClusterTree(levels, perm, leaf_size), cloud.take(perm)


# ------------------------------------------------------------- admissibility

@dataclass(frozen=True)
class AdmissibilityRule:
    kind: str = "strong"
    eta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise GeometryError(f"unknown admissibility {self.kind!r}")
        if self.kind == "strong" and not self.eta > 0:
            raise GeometryError("eta must be positive")


def admissible(a, b, rule):
    """Classify a same-level cluster pair: 'admissible', 'dense' or 'subdivide'."""
    if a.level != b.level:
        raise GeometryError(f"level mismatch: {a.level} vs {b.level}")
    if rule.kind == "weak":
        far = a.index != b.index
    else:
        far = np.linalg.norm(a.center - b.center) > rule.eta * (a.radius + b.radius)
    if far:
        return "admissible"
    return "dense" if a.is_leaf else "subdivide"
