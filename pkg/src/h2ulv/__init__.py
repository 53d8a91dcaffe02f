"""Hierarchical low-rank (BLR2, HSS, H2) kernel matrices with ULV solvers."""
from .estimator import H2ULVSolver, build_hmatrix
from .geometry import (AdmissibilityRule, PointCloud, build_cluster_tree,
                       generate_line, generate_sphere_surface,
                       generate_uniform_cube)
from .kernels import KernelSpec, assemble_block, eval_kernel
from .solve import dense_solve_oracle, matvec_dense_oracle, solve
from .ulv import dependency_graph, factorize

__version__ = "0.1.0"
