"""Adaptive hybrid high-order methods for convex minimization problems."""

from .adaptivity import EstimatorParams, estimate, mark_doerfler, prolong, \
    run_ahho
from .benchmarks import get_benchmark, register_benchmarks
from .densities import by_name as density_by_name
from .hho import HhoSpace, HhoVector
from .mesh import Triangulation, build_triangulation, read_mesh, \
    refine_nvb, refine_uniform, shape_regularity, write_mesh
from .solver import DiscreteProblem, SolverSettings, minimize

__version__ = "0.1.0"

__all__ = [
    "EstimatorParams", "estimate", "mark_doerfler", "prolong", "run_ahho",
    "get_benchmark", "register_benchmarks", "density_by_name",
    "HhoSpace", "HhoVector",
    "Triangulation", "build_triangulation", "read_mesh", "refine_nvb",
    "refine_uniform", "shape_regularity", "write_mesh",
    "DiscreteProblem", "SolverSettings", "minimize",
]
