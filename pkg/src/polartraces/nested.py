"""Inner solver: cell decomposition of each layer under the x<->z swap.

A layer is transposed (the variable swap R, R^2 = I) so its transverse
direction becomes depth, partitioned into cells with artificial absorbing
collars, and reduced to a cell-interface integral system.  Volumetric
right-hand sides go through the full swap/partition/solve/reconstruct
pipeline; boundary-concentrated sources (the sweep applications) go
through the factored pipeline

    samples = M_u * (cell-interface system)^{-1} * M_f * panels  +  direct part,

whose blocks are precomputed per cell and optionally compressed in
partitioned-low-rank form.  The cell-interface system itself is solved
either by the same polarized-trace iteration one level down ("pt") or by
an unpivoted block-tridiagonal LU with inverted, stored diagonal blocks
("lu").
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import krylov
from .discretization import Grid
from .green import GreenBlockSet
from .plr import PlrMatrix
from .sie import PolarizedTraceStack, TraceStack, TraceSystem
from .subdomain import DiscretizationSpec, LayerOperator, build_layer, partition_layers

__all__ = [
    "TouchCounter",
    "NestedLayerSolver",
    "InnerSolveError",
    "build_nested_layers",
    "apply_green_factored",
    "variable_swap",
]

_ROWS4 = ("r0", "r1", "rn", "rnp")


def variable_swap(field):
    """The coordinate swap x <-> z: transposition of a wavefield array."""
    return np.asarray(field).T.copy()


class InnerSolveError(RuntimeError):
    pass


class TouchCounter:
    """Operator-element touches accumulated over compressed/dense matvecs."""

    __slots__ = ("total", "applies")

    def __init__(self):
        self.total = 0
        self.applies = 0

    def reset(self):
        self.total = 0
        self.applies = 0

    def matvec(self, mat, v):
        self.applies += 1
        if isinstance(mat, PlrMatrix):
            self.total += mat.touches
            return mat.matvec(v)
        self.total += mat.shape[0] * mat.shape[1]
        return mat @ v


def _maybe_compress(mat, threshold, eps, max_rank, seed):
    if threshold is not None and min(mat.shape) > threshold:
        return PlrMatrix.compress(mat, eps=eps, max_rank=max_rank, seed=seed)
    return mat


class CellBlockLayer:
    """Cell workspace whose boundary application runs on assembled blocks.

    Volumetric solves delegate to the factorized cell; the incomplete
    Green's integrals are matvecs against the cached interface operators,
    counted by the shared touch counter.
    """

    def __init__(self, workspace, blockset, counter):
        self.ws = workspace
        self.blocks = blockset
        self.counter = counter
        self.grid = workspace.grid
        self.n = workspace.n
        self.width = workspace.width

    def solve(self, rhs):
        return self.ws.solve(rhs)

    def src_top(self, v0, v1, out=None):
        return self.ws.src_top(v0, v1, out=out)

    def src_bot(self, vn, vnp, out=None):
        return self.ws.src_bot(vn, vnp, out=out)

    def row_index(self, k):
        return self.ws.row_index(k)

    def newton_samples(self, f_local, rows):
        return self.ws.newton_samples(f_local, rows)

    def boundary_samples(self, v0, v1, vn, vnp, rows):
        out = []
        panels = {"v0": v0, "v1": v1, "vn": vn, "vnp": vnp}
        for r in rows:
            acc = np.zeros(self.width, dtype=complex)
            for slot, panel in panels.items():
                if panel is not None:
                    acc += self.counter.matvec(self.blocks.blocks[(r, slot)], panel)
            out.append(acc)
        return out


class _InnerPT:
    """Nested polarized traces: the outer iteration one level down."""

    def __init__(self, system, ktol, max_iter, label):
        self.system = system
        self.ktol = ktol
        self.max_iter = max_iter
        self.label = label

    def solve_traces(self, tables):
        sysm = self.system
        if sysm.nI == 0:
            return TraceStack.zeros(0, sysm.width)
        rhs = sysm.build_rhs_polarized(None, tables=tables)
        nI, w = sysm.nI, sysm.width

        def op(flat):
            return sysm.apply_M_polarized(PolarizedTraceStack.from_flat(flat, nI, w)).flat()

        def pre(flat):
            return sysm.precondition_gs(PolarizedTraceStack.from_flat(flat, nI, w)).flat()

        res = krylov.gmres(op, rhs.flat(), precond=pre, ktol=self.ktol, max_iter=self.max_iter)
        if not res.converged:
            raise InnerSolveError(
                f"inner trace solve of {self.label} stalled at {res.residuals[-1]:.3e} "
                f"after {res.iterations:g} iterations"
            )
        return PolarizedTraceStack.from_flat(res.x, nI, w).reassemble()


class _InnerLU:
    """Unpivoted block-tridiagonal LU of the assembled cell-interface system.

    Blocks are paired per interface (2w x 2w); the pivot blocks are
    inverted and stored so both substitutions are matrix-vector products.
    """

    def __init__(self, cells, blocksets, counter, plr_threshold=None, plr_eps=1e-8,
                 plr_max_rank=None, seed=0, label=""):
        self.counter = counter
        self.label = label
        nI = len(cells) - 1
        self.nI = nI
        self.w = cells[0].width
        w = self.w
        eye = np.eye(w, dtype=complex)
        zero = np.zeros((w, w), dtype=complex)
        self.diag = []
        self.lower = [None]
        self.upper = []
        for i in range(nI):
            bs_i, bs_ip = blocksets[i], blocksets[i + 1]
            n_i = cells[i].n
            a_ii = np.block(
                [
                    [eye - bs_i.dense(n_i, "vn"), -bs_i.dense(n_i, "vnp")],
                    [-bs_ip.dense(1, "v0"), eye - bs_ip.dense(1, "v1")],
                ]
            )
            self.diag.append(a_ii)
            if i >= 1:
                self.lower.append(
                    np.block(
                        [[-bs_i.dense(n_i, "v0"), -bs_i.dense(n_i, "v1")], [zero, zero]]
                    )
                )
            if i <= nI - 2:
                self.upper.append(
                    np.block(
                        [[zero, zero], [-bs_ip.dense(1, "vn"), -bs_ip.dense(1, "vnp")]]
                    )
                )
            else:
                self.upper.append(None)
        # factor: pivot_i = diag_i - lower_i pivinv_{i-1} upper_{i-1}
        self.pivinv = []
        for i in range(nI):
            piv = self.diag[i].copy()
            if i >= 1:
                piv -= self.lower[i] @ (self._pivinv_dense(i - 1) @ self.upper[i - 1])
            try:
                inv = np.linalg.inv(piv)
            except np.linalg.LinAlgError as exc:
                raise InnerSolveError(
                    f"singular diagonal block {i} in the block LU of {self.label}"
                ) from exc
            self.pivinv.append(
                _maybe_compress(inv, plr_threshold, plr_eps, plr_max_rank, seed + i)
            )
        self.lower = [
            None if m is None else _maybe_compress(m, plr_threshold, plr_eps, plr_max_rank, seed + 101 + i)
            for i, m in enumerate(self.lower)
        ]
        self.upper = [
            None if m is None else _maybe_compress(m, plr_threshold, plr_eps, plr_max_rank, seed + 201 + i)
            for i, m in enumerate(self.upper)
        ]

    def _pivinv_dense(self, i):
        m = self.pivinv[i]
        return m.to_dense() if isinstance(m, PlrMatrix) else m

    def solve_traces(self, tables):
        if self.nI == 0:
            return TraceStack.zeros(0, self.w)
        # unpolarized right-hand side from the Newton tables
        b = []
        for i in range(self.nI):
            n_i = tables[i + 1]
            b.append(np.concatenate([n_i["bot0"], tables[i + 2]["top1"]]))
        y = [b[0]]
        for i in range(1, self.nI):
            y.append(b[i] - self.counter.matvec(self.lower[i], self.counter.matvec(self.pivinv[i - 1], y[i - 1])))
        x = [None] * self.nI
        x[-1] = self.counter.matvec(self.pivinv[-1], y[-1])
        for i in range(self.nI - 2, -1, -1):
            x[i] = self.counter.matvec(self.pivinv[i], y[i] - self.counter.matvec(self.upper[i], x[i + 1]))
        w = self.w
        out = TraceStack.zeros(self.nI, w)
        for i in range(self.nI):
            out.data[i, 0] = x[i][:w]
            out.data[i, 1] = x[i][w:]
        return out

    def reconstruct_matrix(self):
        """Dense L*U product, for factorization-identity checks."""
        nI, w = self.nI, self.w
        dim = 2 * nI * w
        lfac = np.eye(dim, dtype=complex)
        ufac = np.zeros((dim, dim), dtype=complex)
        for i in range(nI):
            sl = slice(2 * i * w, 2 * (i + 1) * w)
            piv = np.linalg.inv(self._pivinv_dense(i))
            ufac[sl, sl] = piv
            if i <= nI - 2:
                up = self.upper[i]
                ufac[sl, slice(2 * (i + 1) * w, 2 * (i + 2) * w)] = (
                    up.to_dense() if isinstance(up, PlrMatrix) else up
                )
            if i >= 1:
                lo = self.lower[i]
                lo = lo.to_dense() if isinstance(lo, PlrMatrix) else lo
                lfac[sl, slice(2 * (i - 1) * w, 2 * i * w)] = lo @ self._pivinv_dense(i - 1)
        return lfac, ufac


class NestedLayerSolver(LayerOperator):
    """Layer solver whose local solves run on the swapped cell decomposition.

    Presents the same interface as a factorized LayerWorkspace; the trace
    machinery cannot tell the difference apart from the inner tolerance.
    """

    def __init__(self, grid, model, pml, disc=DiscretizationSpec(), Lc=1, backend="pt",
                 inner_ktol=1e-6, inner_max_iter=200, plr_threshold=None, plr_eps=1e-8,
                 plr_max_rank=None, seed=0, assembled_boundary=False, label=""):
        super().__init__(grid, model, pml, disc, label or f"nested layer ({backend})")
        if backend not in ("pt", "lu"):
            raise ValueError(f"unknown inner backend {backend!r}")
        self.backend = backend
        self.inner_ktol = inner_ktol
        self.counter = TouchCounter()
        if plr_max_rank is None and plr_threshold is not None:
            plr_max_rank = max(1, int(np.ceil(np.sqrt(pml.omega))))
        self._plr = dict(
            plr_threshold=plr_threshold, plr_eps=plr_eps, plr_max_rank=plr_max_rank, seed=seed
        )

        sgrid = grid.transposed()
        smodel = model.transposed()
        self.cpart = partition_layers(sgrid, Lc)
        self.cells = [
            build_layer(sgrid, smodel, pml, self.cpart, c, disc)
            for c in range(1, Lc + 1)
        ]
        for c, cell in enumerate(self.cells, start=1):
            cell.label = f"{self.label}, cell {c}"
        self.blocksets = [
            GreenBlockSet.build(cell, plr_threshold=plr_threshold, plr_eps=plr_eps,
                                plr_max_rank=plr_max_rank, seed=seed)
            for cell in self.cells
        ]
        adapters = [
            CellBlockLayer(cell, bs, self.counter)
            for cell, bs in zip(self.cells, self.blocksets)
        ]
        self.inner_system = TraceSystem(adapters, self.cpart)
        if backend == "lu":
            self.inner = _InnerLU(self.cells, self.blocksets, self.counter,
                                  label=self.label, **self._plr)
        else:
            self.inner = _InnerPT(self.inner_system, inner_ktol, inner_max_iter, self.label)
        self.assembled_boundary = assembled_boundary
        self._boundary_ops = None

    # -- inner pipeline ----------------------------------------------------
    def _inner_tables(self, f_cells):
        """Newton samples per cell, keyed the way both inner backends want."""
        tables = self.inner_system.newton_tables(f_cells)
        if self.backend == "lu":
            named = {}
            for c, rows in tables.items():
                ws = self.cells[c - 1]
                entry = {}
                if ws.n in rows:
                    entry["bot0"] = rows[ws.n]
                if 1 in rows:
                    entry["top1"] = rows[1]
                named[c] = entry
            return tables, named
        return tables, None

    def _solve_traces(self, f_cells):
        tables, named = self._inner_tables(f_cells)
        if self.backend == "lu":
            return self.inner.solve_traces(named)
        return self.inner.solve_traces(tables)

    def solve(self, rhs):
        """Full inner solve: swap, partition, cell solves, trace solve, rebuild."""
        arr = np.asarray(rhs, dtype=complex)
        if arr.ndim == 1:
            arr = arr.reshape(self.grid.shape)
        g = variable_swap(arr)
        f_cells = self.inner_system.split_source(g)
        traces = self._solve_traces(f_cells)
        v = self.inner_system.reconstruct(traces, f_cells, g.shape)
        return variable_swap(v)

    # -- factored boundary application (Eq. 4.3 pipeline) -------------------
    def boundary_samples(self, v0, v1, vn, vnp, rows):
        if not self.assembled_boundary:
            return super().boundary_samples(v0, v1, vn, vnp, rows)
        return self._boundary_assembled(v0, v1, vn, vnp, rows)

    def _source_panels(self, v0, v1, vn, vnp):
        """The four weighted source columns of the swapped frame."""
        S = self.src_top(v0, v1)
        self.src_bot(vn, vnp, out=S)
        n = self.n
        return {
            "r0": S[self.row_index(0)].copy(),
            "r1": S[self.row_index(1)].copy(),
            "rn": S[self.row_index(n)].copy(),
            "rnp": S[self.row_index(n + 1)].copy(),
        }

    def _slab_ranges(self):
        """Swapped-global array ranges each cell owns (end cells take the PML)."""
        npml = self.grid.npml
        out = []
        for c, cell in enumerate(self.cells, start=1):
            off = self.cpart.offsets[c - 1]
            lo = 0 if c == 1 else npml
            hi = cell.grid.wz if c == len(self.cells) else npml + cell.n
            out.append((off + lo, off + hi, lo, hi))
        return out

    def _ensure_boundary_ops(self):
        if self._boundary_ops is not None:
            return self._boundary_ops
        thr = self._plr["plr_threshold"]
        eps, mrk, seed = self._plr["plr_eps"], self._plr["plr_max_rank"], self._plr["seed"]
        col_of = {r: self.cells[0].grid.col_of(k) for r, k in
                  zip(_ROWS4, (0, 1, self.n, self.n + 1))}
        ops = []
        for c, (cell, bs) in enumerate(zip(self.cells, self.blocksets), start=1):
            lo_g, hi_g, lo, hi = self._slab_ranges()[c - 1]
            w = cell.width
            nloc = cell.grid.n_unknowns
            wz = cell.grid.wz
            slab = np.arange(lo, hi)

            # transpose solves at the four trace rows -> M_f blocks
            trace_rows = (1, cell.n, 0, cell.n + 1)
            et = np.zeros((nloc, 4 * w), dtype=complex)
            for t, r in enumerate(trace_rows):
                et[cell.row_dofs(r), np.arange(t * w, (t + 1) * w)] = 1.0
            yt = cell.solve_transposed(et)
            mf = {}
            for r, col in col_of.items():
                src_dofs = slab * w + col
                for t, tr in enumerate(trace_rows):
                    blockT = yt[src_dofs, t * w : (t + 1) * w].T
                    mf[(tr, r)] = _maybe_compress(blockT, thr, eps, mrk, seed + 11 * c)

            # transpose solves at the four sampled columns -> direct part and M_u
            eo = np.zeros((nloc, 4 * len(slab)), dtype=complex)
            for kdx, (r, col) in enumerate(col_of.items()):
                cols = np.arange(kdx * len(slab), (kdx + 1) * len(slab))
                eo[slab * w + col, cols] = 1.0
            yo = cell.solve_transposed(eo)
            direct = {}
            for kdx, rout in enumerate(_ROWS4):
                rows_out = slice(kdx * len(slab), (kdx + 1) * len(slab))
                for jdx, rsrc in enumerate(_ROWS4):
                    src_dofs = slab * w + col_of[rsrc]
                    direct[(rout, rsrc)] = _maybe_compress(
                        yo[src_dofs, rows_out].T, thr, eps, mrk, seed + 13 * c
                    )
            mu = {}
            eye = np.eye(w, dtype=complex)
            srcmats = {
                "v0": (cell.row_dofs(1), -(cell.block(1, 0) @ eye)),
                "v1": (cell.row_dofs(0), cell.block(0, 1) @ eye),
                "vn": (cell.row_dofs(cell.n + 1), cell.block(cell.n + 1, cell.n) @ eye),
                "vnp": (cell.row_dofs(cell.n), -(cell.block(cell.n, cell.n + 1) @ eye)),
            }
            for kdx, rout in enumerate(_ROWS4):
                rows_out = slice(kdx * len(slab), (kdx + 1) * len(slab))
                for slot, (dofs, mat) in srcmats.items():
                    block = (yo[dofs, rows_out].T @ mat)
                    mu[(rout, slot)] = _maybe_compress(block, thr, eps, mrk, seed + 17 * c)
            ops.append({"mf": mf, "mu": mu, "direct": direct})
        self._boundary_ops = ops
        return ops

    def _boundary_assembled(self, v0, v1, vn, vnp, rows):
        ops = self._ensure_boundary_ops()
        panels = self._source_panels(v0, v1, vn, vnp)
        ranges = self._slab_ranges()
        key_of = {0: "r0", 1: "r1", self.n: "rn", self.n + 1: "rnp"}

        # M_f: equivalent interface sources, expressed as Newton tables
        tables = {}
        named = {}
        for c, cell in enumerate(self.cells, start=1):
            lo_g, hi_g, _, _ = ranges[c - 1]
            entry = {}
            for tr in {1, cell.n, 0, cell.n + 1}:
                acc = np.zeros(cell.width, dtype=complex)
                for r in _ROWS4:
                    acc += self.counter.matvec(ops[c - 1]["mf"][(tr, r)], panels[r][lo_g:hi_g])
                entry[tr] = acc
            tables[c] = entry
            named[c] = {"bot0": entry[cell.n], "top1": entry[1]}
        traces = (
            self.inner.solve_traces(named)
            if self.backend == "lu"
            else self.inner.solve_traces(tables)
        )

        # direct part plus M_u applied to each cell's boundary traces
        out = {r: np.zeros(self.width, dtype=complex) for r in _ROWS4}
        for c, cell in enumerate(self.cells, start=1):
            lo_g, hi_g, _, _ = ranges[c - 1]
            top = traces[c - 2] if c >= 2 else None
            bot = traces[c - 1] if c <= len(self.cells) - 1 else None
            cell_ops = ops[c - 1]
            for rout in _ROWS4:
                acc = np.zeros(hi_g - lo_g, dtype=complex)
                for rsrc in _ROWS4:
                    acc += self.counter.matvec(cell_ops["direct"][(rout, rsrc)], panels[rsrc][lo_g:hi_g])
                if top is not None:
                    acc += self.counter.matvec(cell_ops["mu"][(rout, "v0")], top[0])
                    acc += self.counter.matvec(cell_ops["mu"][(rout, "v1")], top[1])
                if bot is not None:
                    acc += self.counter.matvec(cell_ops["mu"][(rout, "vn")], bot[0])
                    acc += self.counter.matvec(cell_ops["mu"][(rout, "vnp")], bot[1])
                out[rout][lo_g:hi_g] = acc
        return [out[key_of[r]].copy() for r in rows]

    # -- offline artifact IO -------------------------------------------------
    def dump_offline(self, directory, key):
        """Hash-keyed cell interface operators plus a manifest."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for c, bs in enumerate(self.blocksets, start=1):
            bs.dump(directory, f"{key}_cell{c}")
        manifest = {
            "key": key,
            "version": 1,
            "backend": self.backend,
            "cells": len(self.cells),
            "cell_extents": list(self.cpart.extents),
            "omega": self.pml.omega,
            "inner_ktol": self.inner_ktol,
        }
        (directory / f"nested_{key}.json").write_text(json.dumps(manifest, indent=2))


def build_nested_layers(grid, model, pml, partition, disc=DiscretizationSpec(), Lc=1,
                        backend="pt", **kwargs):
    """Nested inner solvers for every layer of a partition."""
    layers = []
    for ell in range(1, partition.L + 1):
        n_ell = partition.extents[ell - 1]
        off = partition.offsets[ell - 1]
        lgrid = Grid(grid.nx, n_ell, grid.h, grid.npml,
                     origin=(grid.origin[0], grid.origin[1] + off))
        lmodel = model.restrict(lgrid, row0=off, col0=0)
        layers.append(
            NestedLayerSolver(lgrid, lmodel, pml, disc, Lc=Lc, backend=backend,
                              label=f"layer {ell} ({backend})", **kwargs)
        )
    return layers


def apply_green_factored(nested_layer, v0, v1, vn, vnp, rows=None):
    """Factored incomplete-Green application at the four boundary rows.

    Runs the precomputed-operator pipeline regardless of the layer's
    default boundary mode (building the operators on first use).
    """
    if rows is None:
        rows = (0, 1, nested_layer.n, nested_layer.n + 1)
    return nested_layer._boundary_assembled(v0, v1, vn, vnp, rows)
