"""Adaptive FEM for the spectral fractional Laplacian on the truncated cylinder."""

from .forms import FractionalParams, weighted_moment
from .mesh import (
    BaseMesh,
    CylinderMesh,
    Star,
    YPartition,
    aspect_ratio_stats,
    bisect,
    build_base_mesh,
    build_graded_partition,
    check_mesh_condition,
    extrude,
    star,
)
from .system import (
    AssembledSystem,
    DiscreteField,
    assemble,
    energy,
    energy_error,
    exact_error_identity,
    solve,
)
from .estimator import IndicatorSet, StarProblem, effectivity, estimate
from .afem import AfemConfig, IterationRecord, RunResult, mark_dorfler, run

__all__ = [
    "AfemConfig",
    "AssembledSystem",
    "BaseMesh",
    "CylinderMesh",
    "DiscreteField",
    "FractionalParams",
    "IndicatorSet",
    "IterationRecord",
    "RunResult",
    "Star",
    "StarProblem",
    "YPartition",
    "aspect_ratio_stats",
    "assemble",
    "bisect",
    "build_base_mesh",
    "build_graded_partition",
    "check_mesh_condition",
    "effectivity",
    "energy",
    "energy_error",
    "estimate",
    "exact_error_identity",
    "extrude",
    "mark_dorfler",
    "run",
    "solve",
    "star",
    "weighted_moment",
]
