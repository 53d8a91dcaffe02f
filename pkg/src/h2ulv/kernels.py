"""Laplace and Yukawa Green's functions and block assembly."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "laplace"
    alpha_m: float = 0.0
    scale: float = 4.0 * math.pi
    reg: float = 0.0

    def __post_init__(self):
        if self.kind not in ("laplace", "yukawa"):
            raise KernelError(f"unknown kernel {self.kind!r}")
        if self.alpha_m < 0 or not self.scale > 0 or self.reg < 0:
            raise KernelError("need alpha_m >= 0, scale > 0, reg >= 0")


def default_reg(cloud):
    """1e-3 times the typical point spacing (bounding-box diagonal / N^(1/3))."""
    return 1e-3 * cloud.diameter() / len(cloud) ** (1.0 / 3.0)


def make_kernel(kind="laplace", cloud=None, alpha_m=0.0, reg=None):
    if reg is None:
        reg = default_reg(cloud) if cloud is not None else 0.0
    return KernelSpec(kind=kind, alpha_m=alpha_m if kind == "yukawa" else 0.0, reg=reg)


def _values(spec, r, q):
    den = spec.scale * (r + spec.reg)
    if np.any(den == 0.0):
        raise KernelError("kernel singularity: r + reg == 0")
    out = q / den
    if spec.kind == "yukawa" and spec.alpha_m != 0.0:
        out = out * np.exp(-spec.alpha_m * r)
    return out


def eval_kernel(spec, xi, xj, qj=1.0):
    r = float(np.linalg.norm(np.asarray(xi, float) - np.asarray(xj, float)))
    return float(_values(spec, r, qj))


def _idx(rng, n):
    if isinstance(rng, slice):
        start, stop, _ = rng.indices(n)
        if stop <= start:
            raise KernelError("empty range")
        return rng
    rng = np.asarray(rng)
    if rng.size == 0:
        raise KernelError("empty range")
    if rng.min() < 0 or rng.max() >= n:
        raise KernelError("range outside [0, N)")
    return rng


def assemble_block(spec, cloud, rows, cols):
    """Dense kernel block; entry (i, j) = G(x_i, x_j) * q_j."""
    n = len(cloud)
    rows, cols = _idx(rows, n), _idx(cols, n)
    X = cloud.points[rows]
    Y = cloud.points[cols]
    r2 = np.zeros((len(X), len(Y)))
    for d in range(3):
        diff = X[:, d, None] - Y[None, :, d]
        r2 += diff * diff
    return _values(spec, np.sqrt(r2), cloud.charges[cols][None, :])
