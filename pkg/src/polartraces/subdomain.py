"""Layer/cell partitions and factorized local Helmholtz problems.

A layer is a horizontal slab of the domain equipped with its own absorbing
collar: the physical PML survives on outer sides, and artificial quadratic
ramps of the same width and strength are added at the cuts.  Local depth
indices run -npml+1 .. n+npml with rows 1..n interior; rows 0 and n+1 are
the first collar rows on either side and carry sigma_z = 0, so the local
operator coincides with the parent operator on all interior rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import Grid, PmlProfile, VelocityModel, assemble_fd, assemble_q1

__all__ = [
    "DiscretizationSpec",
    "LayerPartition",
    "CellPartition",
    "LayerOperator",
    "LayerWorkspace",
    "partition_layers",
    "partition_cells",
    "build_layer",
    "extract_trace",
    "inject_trace",
]


@dataclass(frozen=True)
class DiscretizationSpec:
    """Which volume discretization to assemble, with its Q1 quadrature knobs."""

    kind: str = "fd"
    smoothness_threshold: float = 1.05
    quad_tol: float = 1e-8

    def assemble(self, grid, model, pml):
        if self.kind == "fd":
            return assemble_fd(grid, model, pml)
        if self.kind == "q1":
            return assemble_q1(grid, model, pml, self.smoothness_threshold, self.quad_tol)
        raise ValueError(f"unknown discretization {self.kind!r}")


@dataclass(frozen=True)
class LayerPartition:
    """Depth extents n^l of each layer plus cumulative offsets."""

    extents: tuple[int, ...]

    @property
    def L(self):
        return len(self.extents)

    @property
    def offsets(self):
        """Cumulative interior depth offset of each layer (lattice units)."""
        return tuple(int(v) for v in np.concatenate([[0], np.cumsum(self.extents)[:-1]]))

    @property
    def n_interfaces(self):
        return self.L - 1

    def interface_rows(self):
        """Global lattice depth of each interface's upper trace row."""
        off = np.cumsum(self.extents)
        return tuple(int(v) for v in off[:-1])


@dataclass(frozen=True)
class CellPartition:
    """Transverse extents of the cells inside one layer (after the x<->z swap)."""

    extents: tuple[int, ...]
    swapped: bool = True

    @property
    def Lc(self):
        return len(self.extents)


def _split(n, parts):
    base, rem = divmod(n, parts)
    return tuple(base + 1 if i < rem else base for i in range(parts))


def partition_layers(grid, L):
    """Split nz into L near-equal slabs (difference <= 1, remainder on top)."""
    nz = grid.nz if isinstance(grid, Grid) else int(grid)
    if L < 1:
        raise ValueError("need at least one layer")
    if nz < 2 * L:
        raise ValueError(f"{L} layers need nz >= {2 * L}, got {nz}")
    return LayerPartition(_split(nz, L))


def partition_cells(grid, Lc):
    """Split nx into Lc near-equal cells (the swapped-frame layer partition)."""
    nx = grid.nx if isinstance(grid, Grid) else int(grid)
    if Lc < 1:
        raise ValueError("need at least one cell")
    if Lc > 1 and nx < 2 * Lc:
        raise ValueError(f"{Lc} cells need nx >= {2 * Lc}, got {nx}")
    return CellPartition(_split(nx, Lc))


class LayerOperator:
    """Assembled local problem: indexing, coupling blocks, boundary sources.

    Subclasses provide solve(); everything the trace machinery consumes
    (boundary_samples, newton_samples, the source builders) is defined here
    in terms of it.
    """

    def __init__(self, grid, model, pml, disc=DiscretizationSpec(), label=""):
        self.grid = grid
        self.model = model
        self.pml = pml
        self.disc = disc
        self.label = label or "layer"
        self.n = grid.nz
        self.width = grid.wx
        self.H = disc.assemble(grid, model, pml)
        self._blocks = {}

    # -- indexing -------------------------------------------------------
    def row_index(self, k):
        """Array row of local lattice depth k (valid -npml+1 .. n+npml)."""
        r = k + self.grid.npml - 1
        if not 0 <= r < self.grid.wz:
            raise ValueError(f"depth {k} outside local extended grid of {self.label}")
        return r

    def row_dofs(self, k):
        r = self.row_index(k)
        return np.arange(r * self.width, (r + 1) * self.width)

    def solve(self, rhs):
        raise NotImplementedError

    def block(self, j, k):
        """Depth-coupling block H_{j,k} (width x width sparse)."""
        key = (j, k)
        if key not in self._blocks:
            rows = self.row_dofs(j)
            cols = self.row_dofs(k)
            self._blocks[key] = self.H[rows][:, cols].tocsr()
        return self._blocks[key]

    # -- boundary sources (discrete GRF weights) -------------------------
    def src_top(self, v0, v1, out=None):
        """Equivalent sources carrying traces (v0, v1) across the top cut.

        Places -H_{1,0} v0 at row 1 and +H_{0,1} v1 at row 0; solving with
        this right-hand side realizes the down-going incomplete Green's
        integral of the pair at every sampled depth.
        """
        rhs = out if out is not None else np.zeros(self.grid.shape, dtype=complex)
        if v0 is not None:
            rhs[self.row_index(1)] -= self.block(1, 0) @ v0
        if v1 is not None:
            rhs[self.row_index(0)] += self.block(0, 1) @ v1
        return rhs

    def src_bot(self, vn, vnp, out=None):
        """Equivalent sources for the bottom cut: the up-going counterpart.

        Places +H_{n+1,n} vn at row n+1 and -H_{n,n+1} v(n+1) at row n.
        """
        n = self.n
        rhs = out if out is not None else np.zeros(self.grid.shape, dtype=complex)
        if vn is not None:
            rhs[self.row_index(n + 1)] += self.block(n + 1, n) @ vn
        if vnp is not None:
            rhs[self.row_index(n)] -= self.block(n, n + 1) @ vnp
        return rhs

    def boundary_samples(self, v0, v1, vn, vnp, rows):
        """Incomplete Green's integrals of the four boundary panels at rows.

        One local solve with the combined equivalent sources, sampled at the
        requested local depths.  Nested backends override this with the
        factored interface-operator pipeline.
        """
        rhs = self.src_top(v0, v1)
        self.src_bot(vn, vnp, out=rhs)
        w = self.solve(rhs)
        return [w[self.row_index(r)].copy() for r in rows]

    def newton_samples(self, f_local, rows):
        """Rows of the Newton potential (H^l)^{-1} f^l."""
        w = self.solve(f_local)
        return [w[self.row_index(r)].copy() for r in rows]


class LayerWorkspace(LayerOperator):
    """Local problem factorized once; solves are cached-LU back-substitutions."""

    def __init__(self, grid, model, pml, disc=DiscretizationSpec(), label=""):
        super().__init__(grid, model, pml, disc, label)
        try:
            self.lu = spla.splu(self.H.tocsc())
        except RuntimeError as exc:
            raise RuntimeError(
                f"local factorization failed for {self.label} at omega={pml.omega:g}: {exc}"
            ) from exc

    def solve(self, rhs):
        """Solve H^l w = rhs; rhs may be (wz, wx), flat, or multi-column."""
        arr = np.asarray(rhs, dtype=complex)
        if arr.shape == self.grid.shape:
            return self.lu.solve(arr.ravel()).reshape(self.grid.shape)
        if arr.ndim == 1 and arr.size != self.grid.n_unknowns:
            raise ValueError("rhs length does not match the local grid")
        return self.lu.solve(arr)

    def solve_transposed(self, rhs):
        return self.lu.solve(np.asarray(rhs, dtype=complex), trans="T")


def build_layer(grid, model, pml, partition, ell, disc=DiscretizationSpec()):
    """Workspace for layer ell (1-based) of a partitioned problem."""
    if not 1 <= ell <= partition.L:
        raise ValueError(f"layer index {ell} outside 1..{partition.L}")
    n_ell = partition.extents[ell - 1]
    off = partition.offsets[ell - 1]
    lgrid = Grid(grid.nx, n_ell, grid.h, grid.npml, origin=(grid.origin[0], grid.origin[1] + off))
    lmodel = model.restrict(lgrid, row0=off, col0=0)
    lpml = PmlProfile(grid.npml, grid.h, pml.C, pml.omega)
    return LayerWorkspace(lgrid, lmodel, lpml, disc, label=f"layer {ell}")


def extract_trace(field, workspace, k):
    """Copy of the wavefield row at local depth k."""
    return np.asarray(field)[workspace.row_index(k)].copy()


def inject_trace(workspace, panel, k, weight=None):
    """Right-hand-side contribution of a panel placed at local depth k.

    The default weight 1/h is the one-dimensional delta(z_k - z) scaling;
    the GRF source builders src_top/src_bot apply operator-block weights
    instead.
    """
    if weight is None:
        weight = 1.0 / workspace.grid.h
    rhs = np.zeros(workspace.grid.shape, dtype=complex)
    rhs[workspace.row_index(k)] = weight * np.asarray(panel)
    return rhs
