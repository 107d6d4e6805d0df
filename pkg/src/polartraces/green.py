"""Interface Green operators and the discrete Green's representation formula.

All interface machinery is expressed through four per-layer "slot" maps

    J(j, slot) = sample at depth j  o  (H^l)^{-1}  o  slot source,

where the slot sources carry the operator-block weights of the algebraic
representation formula: a trace pair at the top cut enters as
(-H_{1,0} v0 at row 1, +H_{0,1} v1 at row 0), a pair at the bottom cut as
(+H_{n+1,n} vn at row n+1, -H_{n,n+1} v(n+1) at row n).  Summing the two
gives the down- and up-going incomplete Green's integrals; adding the
local Newton potential reproduces the field inside the slab exactly.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .plr import PlrMatrix

__all__ = [
    "InterfaceOperator",
    "GreenBlockSet",
    "green_columns",
    "incomplete_green_down",
    "incomplete_green_up",
    "incomplete_green_down_fd",
    "incomplete_green_up_fd",
    "newton_potential",
    "grf_reconstruct",
    "grf_sources",
]

SLOTS = ("v0", "v1", "vn", "vnp")


class InterfaceOperator:
    """Map between two interface rows: dense matrix or PLR handle."""

    def __init__(self, matrix, source_depth, target_depth):
        self.matrix = matrix
        self.source_depth = source_depth
        self.target_depth = target_depth

    @property
    def shape(self):
        return self.matrix.shape

    def apply(self, v):
        return self.matrix @ v

    __matmul__ = apply

    def to_dense(self):
        if isinstance(self.matrix, PlrMatrix):
            return self.matrix.to_dense()
        return np.asarray(self.matrix)

    def compressed(self, eps=1e-8, max_rank=None, seed=0):
        dense = self.to_dense()
        plr = PlrMatrix.compress(dense, eps=eps, max_rank=max_rank, seed=seed)
        return InterfaceOperator(plr, self.source_depth, self.target_depth)


def green_columns(workspace, source_depth, target_depths=None):
    """Interface-to-interface operators G(z_j, z_k) of Definition-style form.

    One local solve per source node at depth z_k; the returned operators
    carry the h quadrature weight, i.e. they act as
    (G v)_i = h * sum_i' G((x_i, z_j), (x_i', z_k)) v_i'.
    """
    ws = workspace
    w = ws.width
    if target_depths is None:
        target_depths = (0, 1, ws.n, ws.n + 1)
    rhs = np.zeros((ws.grid.n_unknowns, w), dtype=complex)
    rhs[ws.row_dofs(source_depth), np.arange(w)] = 1.0
    sol = ws.solve(rhs)
    scale = 1.0 / ws.grid.h  # h-weight times the 1/h^2 discrete delta
    return {
        j: InterfaceOperator(scale * sol[ws.row_dofs(j), :], source_depth, j)
        for j in target_depths
    }


class GreenBlockSet:
    """Cached slot maps J(j, slot) of one layer at the SIE sampling rows.

    Built once per (layer, frequency): four multi-right-hand-side solves,
    one per slot, i.e. 4*(nx + 2 npml) local solves.  Application is
    read-only afterwards.
    """

    def __init__(self, blocks, n, width):
        self.blocks = blocks  # {(j, slot): matrix}
        self.n = n
        self.width = width

    @classmethod
    def build(cls, workspace, rows=None, plr_threshold=None, plr_eps=1e-8,
              plr_max_rank=None, seed=0):
        ws = workspace
        n, w = ws.n, ws.width
        if rows is None:
            rows = (0, 1, n, n + 1)
        eye = np.eye(w, dtype=complex)
        blocks = {}
        for slot in SLOTS:
            rhs = np.zeros((ws.grid.n_unknowns, w), dtype=complex)
            rhs2d = rhs.reshape(ws.grid.wz, ws.grid.wx, w)
            if slot == "v0":
                rhs2d[ws.row_index(1)] = -(ws.block(1, 0) @ eye)
            elif slot == "v1":
                rhs2d[ws.row_index(0)] = ws.block(0, 1) @ eye
            elif slot == "vn":
                rhs2d[ws.row_index(n + 1)] = ws.block(n + 1, n) @ eye
            else:
                rhs2d[ws.row_index(n)] = -(ws.block(n, n + 1) @ eye)
            sol = ws.solve(rhs)
            for j in rows:
                mat = np.ascontiguousarray(sol[ws.row_dofs(j), :])
                if plr_threshold is not None and w > plr_threshold:
                    mat = PlrMatrix.compress(mat, eps=plr_eps, max_rank=plr_max_rank, seed=seed)
                blocks[(j, slot)] = mat
        return cls(blocks, n, w)

    def apply(self, j, slot, v):
        return self.blocks[(j, slot)] @ v

    def down(self, j, v0, v1):
        """Down-going incomplete Green's integral at depth j from the top pair."""
        out = np.zeros(self.width, dtype=complex)
        if v0 is not None:
            out += self.blocks[(j, "v0")] @ v0
        if v1 is not None:
            out += self.blocks[(j, "v1")] @ v1
        return out

    def up(self, j, vn, vnp):
        out = np.zeros(self.width, dtype=complex)
        if vn is not None:
            out += self.blocks[(j, "vn")] @ vn
        if vnp is not None:
            out += self.blocks[(j, "vnp")] @ vnp
        return out

    def dense(self, j, slot):
        mat = self.blocks[(j, slot)]
        return mat.to_dense() if isinstance(mat, PlrMatrix) else mat

    # -- offline artifact IO ---------------------------------------------
    def dump(self, directory, key):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        arrays = {f"{j}_{slot}": self.dense(j, slot) for (j, slot) in self.blocks}
        np.savez(directory / f"green_{key}.npz", **arrays)
        manifest = {
            "key": key,
            "n": self.n,
            "width": self.width,
            "rows": sorted({j for (j, _) in self.blocks}),
            "format": "dense complex128 blocks, little-endian",
            "version": 1,
        }
        (directory / f"green_{key}.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory, key):
        directory = Path(directory)
        manifest = json.loads((directory / f"green_{key}.json").read_text())
        data = np.load(directory / f"green_{key}.npz")
        blocks = {}
        for name, arr in data.items():
            j, slot = name.rsplit("_", 1)
            blocks[(int(j), slot)] = arr
        return cls(blocks, manifest["n"], manifest["width"])


def cache_key(model, grid, omega, partition):
    """Hash identifying one (model, grid, omega, partition) offline stage."""
    hasher = hashlib.sha256()
    hasher.update(np.ascontiguousarray(model.c).tobytes())
    meta = (grid.nx, grid.nz, grid.h, grid.npml, float(omega), tuple(partition.extents))
    hasher.update(repr(meta).encode())
    return hasher.hexdigest()[:16]


def incomplete_green_down(workspace, v0, v1, target_depths):
    """Matrix-free down-going incomplete Green's integral (one local solve)."""
    rhs = workspace.src_top(v0, v1)
    sol = workspace.solve(rhs)
    return [sol[workspace.row_index(j)].copy() for j in target_depths]


def incomplete_green_up(workspace, vn, vnp, target_depths):
    rhs = workspace.src_bot(vn, vnp)
    sol = workspace.solve(rhs)
    return [sol[workspace.row_index(j)].copy() for j in target_depths]


def incomplete_green_down_fd(gcols0, gcols1, v0, v1, h):
    """Divided-difference form of the down integral (FD cross-check only).

    gcols0/gcols1 are {target: InterfaceOperator} maps with sources at
    depths 0 and 1.  Equals the operator-block form exactly for the
    finite-difference discretization.
    """
    out = {}
    for j, g0 in gcols0.items():
        g1 = gcols1[j]
        out[j] = -(g0 @ ((v1 - v0) / h)) + ((g1.to_dense() - g0.to_dense()) / h) @ v0
    return out


def incomplete_green_up_fd(gcolsn, gcolsnp, vn, vnp, h):
    out = {}
    for j, gnp in gcolsnp.items():
        gn = gcolsn[j]
        out[j] = gnp @ ((vnp - vn) / h) - ((gnp.to_dense() - gn.to_dense()) / h) @ vnp
    return out


def newton_potential(workspace, f_local, target_depth):
    """Row of the local Newton potential (H^l)^{-1} f^l at one depth."""
    return workspace.newton_samples(f_local, [target_depth])[0]


def grf_sources(workspace, u0, u1, un, unp, f_local=None):
    """Right-hand side realizing the discrete representation formula."""
    rhs = workspace.src_top(u0, u1)
    workspace.src_bot(un, unp, out=rhs)
    if f_local is not None:
        rhs += f_local
    return rhs


def grf_reconstruct(workspace, u0, u1, un, unp, f_local=None):
    """Reconstruct the layer-interior field from boundary traces and source.

    With exact traces of a globally consistent field the result equals that
    field on interior rows 1..n and vanishes on rows 0 and n+1.  Pass
    u0 = u1 = None (or un = unp = None) for slabs that extend through the
    physical absorbing layer on that side; the reproduced region then
    extends through it as well.
    """
    return workspace.solve(grf_sources(workspace, u0, u1, un, unp, f_local))
