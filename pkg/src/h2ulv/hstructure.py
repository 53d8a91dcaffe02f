"""Block structure, shared bases and the hierarchical matrix container."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .geometry import AdmissibilityRule, admissible
from .kernels import assemble_block

VARIANTS = ("blr2", "hss", "h2")


class StructureError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class BlockId:
    level: int
    row: int
    col: int

    def __post_init__(self):
        lim = 2 ** self.level
        if not (0 <= self.row < lim and 0 <= self.col < lim):
            raise StructureError(f"cluster index out of range for level {self.level}")


@dataclass
class LevelPattern:
    nclusters: int
    near: List[List[int]]                      # sorted, includes the diagonal
    admissible: set = field(default_factory=set)

    def is_near(self, c, j):
        return j in self._near_sets[c]

    def __post_init__(self):
        self._near_sets = [set(r) for r in self.near]

    def far(self, c):
        s = self._near_sets[c]
        return [j for j in range(self.nclusters) if j not in s]

    def pairs_near(self):
        return [(c, j) for c in range(self.nclusters) for j in self.near[c]]


@dataclass
class BlockStructure:
    variant: str
    rule: AdmissibilityRule
    leaf_level: int
    levels: Dict[int, LevelPattern]

    @property
    def top_level(self):
        return min(self.levels)

    def kind(self, bid):
        pat = self.levels.get(bid.level)
        if pat is None:
            raise StructureError(f"level {bid.level} not in structure")
        if (bid.row, bid.col) in pat.admissible:
            return "lowrank"
        if pat.is_near(bid.row, bid.col):
            return "dense" if bid.level == self.leaf_level else "subdivided"
        return "far"          # covered by an admissible ancestor

    def dense_per_row(self):
        pat = self.levels[self.leaf_level]
        return [len(r) for r in pat.near]

    def summary(self):
        out = {}
        for lev, pat in sorted(self.levels.items()):
            nn = sum(len(r) for r in pat.near)
            out[lev] = {"clusters": pat.nclusters,
                        "dense" if lev == self.leaf_level else "subdivided": nn,
                        "lowrank": len(pat.admissible)}
        return out


def classify_blocks(tree, rule, variant):
    """Top-down admissibility sweep; BLR2 only looks at the leaf level.
    hss and blr2 always use the weak rule."""
    if variant not in VARIANTS:
        raise StructureError(f"unknown variant {variant!r}")
    if variant in ("hss", "blr2"):
        rule = AdmissibilityRule("weak")
    elif variant == "h2" and rule.kind != "strong":
        raise StructureError("h2 needs the strong admissibility rule")
    L = tree.depth
    if L < 1:
        raise StructureError("tree needs at least one level below the root")
    levels = {}
    if variant == "blr2":
        leaves = tree.leaves
        near = [[] for _ in leaves]
        adm = set()
        for a in leaves:
            for b in leaves:
                if admissible(a, b, rule) == "admissible":
                    adm.add((a.index, b.index))
                else:
                    near[a.index].append(b.index)
        levels[L] = LevelPattern(len(leaves), near, adm)
        return BlockStructure(variant, rule, L, levels)

    cand = [(0, 1), (1, 0), (0, 0), (1, 1)]
    for lev in range(1, L + 1):
        nodes = tree.levels[lev]
        near = [[] for _ in nodes]
        adm = set()
        nxt = []
        for c, j in cand:
            k = admissible(nodes[c], nodes[j], rule)
            if k == "admissible":
                adm.add((c, j))
            else:
                near[c].append(j)
                if k == "subdivide":
                    nxt.extend((2 * c + a, 2 * j + b) for a in (0, 1) for b in (0, 1))
        for r in near:
            r.sort()
        levels[lev] = LevelPattern(len(nodes), near, adm)
        cand = nxt
    return BlockStructure(variant, rule, L, levels)


# ------------------------------------------------------------------- bases

@dataclass
class SharedBasis:
    """Square orthonormal basis; columns of Q in pivot order, first `rank`
    are the skeleton. The ULV layout puts redundant columns first."""
    level: int
    index: int
    side: str                     # "U" or "V"
    Q: np.ndarray
    rank: int

    @property
    def d(self):
        return self.Q.shape[0]

    @property
    def r(self):
        return self.d - self.rank

    @property
    def Qs(self):
        return self.Q[:, :self.rank]

    @property
    def Qr(self):
        return self.Q[:, self.rank:]

    @property
    def full(self):
        """[Qr | Qs]."""
        return np.hstack([self.Qr, self.Qs])


# ----------------------------------------------------------- level systems

class LevelSystem:
    """One level of the hierarchy seen as a block matrix.

    Near pairs keep explicit blocks; far pairs are produced on demand by
    `far_block(c, j)` (kernel assembly at the leaf, merged skeletons above).
    """

    def __init__(self, level, dims, pattern, dense, far_block: Callable,
                 admissible=None):
        self.level = level
        self.dims = list(dims)
        self.pattern = pattern
        self.dense = dense
        self.far_block = far_block
        self.admissible = admissible if admissible is not None else set()

    @property
    def m(self):
        return len(self.dims)

    @property
    def near(self):
        return self.pattern.near

    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.dims)]).astype(int)

    def far_pairs(self):
        return [(c, j) for c in range(self.m) for j in self.pattern.far(c)]

    def to_dense(self):
        off = self.offsets()
        A = np.zeros((off[-1], off[-1]))
        for c in range(self.m):
            for j in range(self.m):
                blk = self.dense[(c, j)] if self.pattern.is_near(c, j) else self.far_block(c, j)
                A[off[c]:off[c + 1], off[j]:off[j + 1]] = blk
        return A


def block_system(blocks, near, far_blocks=None, level=None):
    """LevelSystem from explicit blocks (for tests and small experiments).
    The level defaults to the smallest one that holds len(near) clusters."""
    m = len(near)
    if level is None:
        level = max(0, (m - 1).bit_length())
    dims = [blocks[(c, c)].shape[0] for c in range(m)]
    pat = LevelPattern(m, [sorted(r) for r in near])
    far_blocks = far_blocks or {}

    def far(c, j):
        if (c, j) in far_blocks:
            return far_blocks[(c, j)]
        return np.zeros((dims[c], dims[j]))

    dense = {(c, j): blocks[(c, j)] for c in range(m) for j in pat.near[c]}
    return LevelSystem(level, dims, pat, dense, far)


# ----------------------------------------------------------------- HMatrix

class HMatrix:
    """Leaf dense blocks plus assembly recipes for the low-rank part."""

    def __init__(self, tree, cloud, kernel, structure, dense):
        self.tree = tree
        self.cloud = cloud
        self.kernel = kernel
        self.structure = structure
        self.dense = dense
        self.bases = None

    @property
    def variant(self):
        return self.structure.variant

    @property
    def n(self):
        return len(self.cloud)

    def leaf_nodes(self):
        return self.tree.levels[self.structure.leaf_level]

    def assemble(self, c, j, level=None):
        nodes = self.tree.levels[self.structure.leaf_level if level is None else level]
        return assemble_block(self.kernel, self.cloud, nodes[c].slice, nodes[j].slice)

    def leaf_system(self):
        L = self.structure.leaf_level
        pat = self.structure.levels[L]
        dims = [nd.size for nd in self.leaf_nodes()]
        return LevelSystem(L, dims, pat, self.dense, self.assemble, pat.admissible)

    def dense_entries(self):
        return int(sum(b.size for b in self.dense.values()))


def materialize_dense(structure, tree, cloud, kernel):
    leaves = tree.levels[structure.leaf_level]
    pat = structure.levels[structure.leaf_level]
    dense = {}
    for c in range(pat.nclusters):
        for j in pat.near[c]:
            dense[(c, j)] = assemble_block(kernel, cloud, leaves[c].slice, leaves[j].slice)
    return HMatrix(tree, cloud, kernel, structure, dense)


def structure_summary_json(structure, ranks=None, stored_bytes=None):
    out = {"schema": "h2ulv.structure/1", "variant": structure.variant,
           "levels": {str(k): v for k, v in structure.summary().items()}}
    if ranks is not None:
        out["ranks"] = {str(k): v for k, v in ranks.items()}
    if stored_bytes is not None:
        out["stored_bytes"] = int(stored_bytes)
    return json.dumps(out, indent=2)
