"""Layered Helmholtz solver built on polarized interface traces.

The volume problem is reduced, without approximation, to an integral
system on the interfaces between horizontal layers; that system is
extended with directional (polarized) unknowns, preconditioned by
triangular sweeps, and solved matrix-free with GMRES or BiCGstab.  An
inner level decomposes each layer into cells for the local solves, with
partitioned-low-rank compression of the interface operators.
"""

from .discretization import (
    Grid,
    PmlProfile,
    QuadratureError,
    VelocityModel,
    assemble_fd,
    assemble_q1,
    default_npml,
    default_pml_strength,
    delta_source,
    load_model,
    save_model,
)
from .krylov import KrylovConfig, KrylovResult, bicgstab, gmres
from .nested import NestedLayerSolver, build_nested_layers
from .plr import AlphaFit, PlrMatrix, estimate_alpha
from .sie import PolarizedTracesSolver, SolveResult, TraceStack, PolarizedTraceStack
from .subdomain import (
    DiscretizationSpec,
    LayerPartition,
    LayerWorkspace,
    build_layer,
    partition_cells,
    partition_layers,
)

__version__ = "0.1.0"

__all__ = [
    "Grid",
    "PmlProfile",
    "VelocityModel",
    "QuadratureError",
    "assemble_fd",
    "assemble_q1",
    "delta_source",
    "default_npml",
    "default_pml_strength",
    "save_model",
    "load_model",
    "KrylovConfig",
    "KrylovResult",
    "gmres",
    "bicgstab",
    "PlrMatrix",
    "AlphaFit",
    "estimate_alpha",
    "DiscretizationSpec",
    "LayerPartition",
    "LayerWorkspace",
    "partition_layers",
    "partition_cells",
    "build_layer",
    "TraceStack",
    "PolarizedTraceStack",
    "PolarizedTracesSolver",
    "SolveResult",
    "NestedLayerSolver",
    "build_nested_layers",
    "__version__",
]
