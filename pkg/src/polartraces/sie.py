"""The interface integral system, its polarized extension, and the sweep solver.

Trace unknowns live on the two grid rows adjacent to each layer cut.  The
unpolarized system is applied in the (I - G) convention, so that
apply_M(exact traces) equals the Newton-potential right-hand side.  The
polarized extension doubles the unknowns into down-going and up-going
stacks; its operators are applied in the negated convention, in which the
triangular blocks have -I diagonals and the first downward-sweep block is
u = -v.  The sweep preconditioners invert those triangular blocks by block
back-substitution, one local solve per layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import krylov
from .green import GreenBlockSet
from .subdomain import DiscretizationSpec, build_layer, partition_layers

__all__ = [
    "TraceStack",
    "PolarizedTraceStack",
    "TraceSystem",
    "PolarizedTracesSolver",
    "SolveResult",
    "assemble_unpolarized",
    "assemble_polarized",
    "assemble_preconditioner",
    "polarized_equation_order",
    "polarized_permutation",
]


class TraceStack:
    """2(L-1) interface panels, stored as (interfaces, 2 rows, width)."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.asarray(data, dtype=complex)

    @classmethod
    def zeros(cls, n_interfaces, width):
        return cls(np.zeros((n_interfaces, 2, width), dtype=complex))

    @classmethod
    def from_flat(cls, flat, n_interfaces, width):
        return cls(np.asarray(flat, dtype=complex).reshape(n_interfaces, 2, width))

    @property
    def n_interfaces(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[2]

    def flat(self):
        return self.data.ravel().copy()

    def copy(self):
        return TraceStack(self.data.copy())

    def norm(self):
        return np.linalg.norm(self.data)

    def __add__(self, other):
        return TraceStack(self.data + other.data)

    def __sub__(self, other):
        return TraceStack(self.data - other.data)

    def __getitem__(self, idx):
        return self.data[idx]


class PolarizedTraceStack:
    """Down-going and up-going trace stacks; their sum is the trace vector."""

    __slots__ = ("down", "up")

    def __init__(self, down, up):
        self.down = down
        self.up = up

    @classmethod
    def zeros(cls, n_interfaces, width):
        return cls(TraceStack.zeros(n_interfaces, width), TraceStack.zeros(n_interfaces, width))

    @classmethod
    def from_flat(cls, flat, n_interfaces, width):
        flat = np.asarray(flat, dtype=complex)
        half = flat.size // 2
        return cls(
            TraceStack.from_flat(flat[:half], n_interfaces, width),
            TraceStack.from_flat(flat[half:], n_interfaces, width),
        )

    def flat(self):
        return np.concatenate([self.down.flat(), self.up.flat()])

    def reassemble(self):
        return self.down + self.up

    def __sub__(self, other):
        return PolarizedTraceStack(self.down - other.down, self.up - other.up)


class TraceSystem:
    """Matrix-free interface operators over a list of layer solvers.

    Layer objects must provide n (interior depth rows), width,
    boundary_samples(v0, v1, vn, vnp, rows) and newton_samples(f, rows);
    the direct LayerWorkspace and the nested inner solvers both qualify.
    """

    def __init__(self, layers, partition):
        self.layers = list(layers)
        self.partition = partition
        self.L = len(self.layers)
        self.nI = self.L - 1
        self.width = self.layers[0].width

    # -- stack/panel plumbing -------------------------------------------
    def _pairs_for_layer(self, stack, ell):
        """(top pair, bottom pair) of a stack as seen by layer ell (1-based)."""
        top = stack[ell - 2] if ell >= 2 else (None, None)
        bot = stack[ell - 1] if ell <= self.L - 1 else (None, None)
        return top, bot

    def split_source(self, f_global):
        """Per-layer source restrictions on the local extended grids.

        The first and last layers absorb the physical top/bottom PML rows so
        that the slabs tile every depth row of the extended domain.
        """
        f_global = np.asarray(f_global, dtype=complex)
        npml = self.layers[0].grid.npml
        out = []
        for ell, ws in enumerate(self.layers, start=1):
            off = self.partition.offsets[ell - 1]
            loc = np.array(f_global[off : off + ws.grid.wz], dtype=complex)
            lo = 0 if ell == 1 else npml
            hi = ws.grid.wz if ell == self.L else npml + ws.n
            loc[:lo] = 0.0
            loc[hi:] = 0.0
            out.append(loc)
        return out

    # -- unpolarized system ----------------------------------------------
    def apply_M(self, stack):
        """(I - G) applied matrix-free: one local solve per layer."""
        out = stack.copy()
        for ell, ws in enumerate(self.layers, start=1):
            (t0, t1), (b0, b1) = self._pairs_for_layer(stack, ell)
            rows = []
            if ell >= 2:
                rows.append(1)
            if ell <= self.L - 1:
                rows.append(ws.n)
            if not rows:
                continue
            samples = ws.boundary_samples(t0, t1, b0, b1, rows)
            k = 0
            if ell >= 2:
                out.data[ell - 2, 1] -= samples[k]
                k += 1
            if ell <= self.L - 1:
                out.data[ell - 1, 0] -= samples[k]
        return out

    def newton_tables(self, f_locals):
        """Per-layer Newton-potential samples at every SIE row, one solve each."""
        tables = {}
        for ell, ws in enumerate(self.layers, start=1):
            rows = []
            if ell >= 2:
                rows.extend([0, 1])
            if ell <= self.L - 1:
                rows.extend([ws.n, ws.n + 1])
            if not rows:
                continue
            samples = ws.newton_samples(f_locals[ell - 1], rows)
            tables[ell] = dict(zip(rows, samples))
        return tables

    def build_rhs(self, f_locals, tables=None):
        """Newton-potential traces: f_bar = (N^1_{n1} f^1, N^2_1 f^2, ...)."""
        if tables is None:
            tables = self.newton_tables(f_locals)
        rhs = TraceStack.zeros(self.nI, self.width)
        for ell, ws in enumerate(self.layers, start=1):
            if ell >= 2:
                rhs.data[ell - 2, 1] = tables[ell][1]
            if ell <= self.L - 1:
                rhs.data[ell - 1, 0] = tables[ell][ws.n]
        return rhs

    # -- polarized system (negated convention) ----------------------------
    def apply_M_polarized(self, pol):
        """Polarized residual rows; two local solves per interior layer."""
        d, p = pol.down, pol.up
        out = PolarizedTraceStack.zeros(self.nI, self.width)
        for ell, ws in enumerate(self.layers, start=1):
            has_top = ell >= 2
            has_bot = ell <= self.L - 1
            i_top = ell - 2  # interface above the layer
            i_bot = ell - 1  # interface below the layer
            if has_bot:
                # bottom sampling rows: sources from the full pair above and
                # the up-going pair below
                v0 = d[i_bot - 1, 0] + p[i_bot - 1, 0] if has_top else None
                v1 = d[i_bot - 1, 1] + p[i_bot - 1, 1] if has_top else None
                wb = ws.boundary_samples(v0, v1, p[i_bot, 0], p[i_bot, 1], (ws.n, ws.n + 1))
                out.down.data[i_bot, 0] = wb[0] - (d[i_bot, 0] + p[i_bot, 0])
                out.down.data[i_bot, 1] = wb[1] - d[i_bot, 1]
            if has_top:
                # top sampling rows: sources from the down-going pair above
                # and the full pair below
                vn = p[i_bot, 0] + d[i_bot, 0] if has_bot else None
                vnp = p[i_bot, 1] + d[i_bot, 1] if has_bot else None
                wt = ws.boundary_samples(d[i_top, 0], d[i_top, 1], vn, vnp, (0, 1))
                out.up.data[i_top, 0] = wt[0] - p[i_top, 0]
                out.up.data[i_top, 1] = wt[1] - (d[i_top, 1] + p[i_top, 1])
        return out

    def build_rhs_polarized(self, f_locals, tables=None):
        """Negated Newton stacks at the interface and ghost sampling rows."""
        if tables is None:
            tables = self.newton_tables(f_locals)
        rhs = PolarizedTraceStack.zeros(self.nI, self.width)
        for ell, ws in enumerate(self.layers, start=1):
            if ell <= self.L - 1:
                rhs.down.data[ell - 1, 0] = -tables[ell][ws.n]
                rhs.down.data[ell - 1, 1] = -tables[ell][ws.n + 1]
            if ell >= 2:
                rhs.up.data[ell - 2, 0] = -tables[ell][0]
                rhs.up.data[ell - 2, 1] = -tables[ell][1]
        return rhs

    # -- triangular blocks and sweeps -------------------------------------
    def apply_D_down(self, stack):
        """Down-going diagonal block: -I plus coupling to the interface above."""
        out = TraceStack.zeros(self.nI, self.width)
        for i in range(1, self.nI + 1):
            ws = self.layers[i - 1]
            acc = -stack.data[i - 1].copy()
            if i >= 2:
                w = ws.boundary_samples(
                    stack[i - 2, 0], stack[i - 2, 1], None, None, (ws.n, ws.n + 1)
                )
                acc[0] += w[0]
                acc[1] += w[1]
            out.data[i - 1] = acc
        return out

    def apply_D_up(self, stack):
        out = TraceStack.zeros(self.nI, self.width)
        for i in range(1, self.nI + 1):
            ws = self.layers[i]  # layer i+1
            acc = -stack.data[i - 1].copy()
            if i <= self.nI - 1:
                w = ws.boundary_samples(None, None, stack[i, 0], stack[i, 1], (0, 1))
                acc[0] += w[0]
                acc[1] += w[1]
            out.data[i - 1] = acc
        return out

    def sweep_down(self, stack):
        """Invert the down-going block: sequential top-to-bottom substitution."""
        out = TraceStack.zeros(self.nI, self.width)
        if self.nI == 0:
            return out
        out.data[0] = -stack.data[0]
        for i in range(2, self.nI + 1):
            ws = self.layers[i - 1]
            w = ws.boundary_samples(out[i - 2, 0], out[i - 2, 1], None, None, (ws.n, ws.n + 1))
            out.data[i - 1, 0] = w[0] - stack.data[i - 1, 0]
            out.data[i - 1, 1] = w[1] - stack.data[i - 1, 1]
        return out

    def sweep_up(self, stack):
        """Invert the up-going block: sequential bottom-to-top substitution."""
        out = TraceStack.zeros(self.nI, self.width)
        if self.nI == 0:
            return out
        out.data[self.nI - 1] = -stack.data[self.nI - 1]
        for i in range(self.nI - 1, 0, -1):
            ws = self.layers[i]  # layer i+1
            w = ws.boundary_samples(None, None, out[i, 0], out[i, 1], (0, 1))
            out.data[i - 1, 0] = w[0] - stack.data[i - 1, 0]
            out.data[i - 1, 1] = w[1] - stack.data[i - 1, 1]
        return out

    def upward_reflections(self, down_stack):
        """Coupling of down-going traces into the up-going rows (parallel)."""
        out = TraceStack.zeros(self.nI, self.width)
        for i in range(1, self.nI + 1):
            ws = self.layers[i]  # layer i+1
            b0 = down_stack[i, 0] if i <= self.nI - 1 else None
            b1 = down_stack[i, 1] if i <= self.nI - 1 else None
            w = ws.boundary_samples(down_stack[i - 1, 0], down_stack[i - 1, 1], b0, b1, (0, 1))
            out.data[i - 1, 0] = w[0]
            out.data[i - 1, 1] = w[1] - down_stack.data[i - 1, 1]
        return out

    def apply_U(self, up_stack):
        """Coupling of up-going traces into the down-going rows (parallel)."""
        out = TraceStack.zeros(self.nI, self.width)
        for i in range(1, self.nI + 1):
            ws = self.layers[i - 1]  # layer i
            t0 = up_stack[i - 2, 0] if i >= 2 else None
            t1 = up_stack[i - 2, 1] if i >= 2 else None
            w = ws.boundary_samples(t0, t1, up_stack[i - 1, 0], up_stack[i - 1, 1], (ws.n, ws.n + 1))
            out.data[i - 1, 0] = w[0] - up_stack.data[i - 1, 0]
            out.data[i - 1, 1] = w[1]
        return out

    def precondition_gs(self, pol):
        """Block Gauss-Seidel: invert the lower block triangle of the system."""
        y_down = self.sweep_down(pol.down)
        y_up = self.sweep_up(pol.up - self.upward_reflections(y_down))
        return PolarizedTraceStack(y_down, y_up)

    def precondition_jac(self, pol):
        return PolarizedTraceStack(self.sweep_down(pol.down), self.sweep_up(pol.up))

    # -- reconstruction ----------------------------------------------------
    def reconstruct(self, stack, f_locals, global_shape):
        """Per-layer representation-formula solves stitched into the volume."""
        npml = self.layers[0].grid.npml
        out = np.zeros(global_shape, dtype=complex)
        for ell, ws in enumerate(self.layers, start=1):
            (t0, t1), (b0, b1) = self._pairs_for_layer(stack, ell)
            rhs = ws.src_top(t0, t1)
            ws.src_bot(b0, b1, out=rhs)
            rhs += f_locals[ell - 1]
            w = ws.solve(rhs)
            off = self.partition.offsets[ell - 1]
            lo = 0 if ell == 1 else npml
            hi = ws.grid.wz if ell == self.L else npml + ws.n
            out[off + lo : off + hi] = w[lo:hi]
        return out


@dataclass
class SolveResult:
    u: np.ndarray
    iterations: float
    residuals: list[float] = field(default_factory=list)
    converged: bool = True
    relative_residual: float = 0.0
    kappa_margin: float = 0.0
    traces: TraceStack | None = None
    polarized: PolarizedTraceStack | None = None


class PolarizedTracesSolver:
    """Layered Helmholtz solver: factorize once, then sweep-preconditioned Krylov.

    layers may be plain LayerWorkspace objects (direct local solves) or
    nested inner solvers with the same interface.
    """

    def __init__(self, grid, model, pml, partition, disc=DiscretizationSpec(), layers=None,
                 global_operator=None):
        self.grid = grid
        self.model = model
        self.pml = pml
        self.partition = partition
        self.disc = disc
        if layers is None:
            layers = [
                build_layer(grid, model, pml, partition, ell, disc)
                for ell in range(1, partition.L + 1)
            ]
        self.system = TraceSystem(layers, partition)
        self._H = global_operator

    @property
    def layers(self):
        return self.system.layers

    def global_operator(self):
        if self._H is None:
            self._H = self.disc.assemble(self.grid, self.model, self.pml)
        return self._H

    def solve(self, f_global, config=krylov.KrylovConfig(), preconditioner="gs"):
        """Three stages: trace right-hand side, preconditioned Krylov, rebuild."""
        f_global = np.asarray(f_global, dtype=complex).reshape(self.grid.shape)
        sysm = self.system
        f_locals = sysm.split_source(f_global)
        fnorm = np.linalg.norm(f_global)
        if fnorm == 0.0:
            return SolveResult(np.zeros(self.grid.shape, dtype=complex), 0.0, [0.0])

        if sysm.nI == 0:
            u = sysm.reconstruct(TraceStack.zeros(0, sysm.width), f_locals, self.grid.shape)
            res = self._relative_residual(u, f_global)
            return SolveResult(u, 0.0, [res], True, res, res / config.ktol)

        rhs_pol = sysm.build_rhs_polarized(f_locals)
        precond_fn = sysm.precondition_gs if preconditioner == "gs" else sysm.precondition_jac

        nI, w = sysm.nI, sysm.width

        def op(flat):
            pol = PolarizedTraceStack.from_flat(flat, nI, w)
            return sysm.apply_M_polarized(pol).flat()

        def pre(flat):
            pol = PolarizedTraceStack.from_flat(flat, nI, w)
            return precond_fn(pol).flat()

        result = krylov.solve(op, rhs_pol.flat(), config, precond=pre)
        if not result.converged:
            raise krylov.KrylovBreakdown(
                f"trace solve did not reach {config.ktol:g} in {config.max_iter} iterations "
                f"(last residual {result.residuals[-1]:.3e})",
                residuals=result.residuals,
            )
        pol = PolarizedTraceStack.from_flat(result.x, nI, w)
        traces = pol.reassemble()
        u = sysm.reconstruct(traces, f_locals, self.grid.shape)
        rel = self._relative_residual(u, f_global)
        return SolveResult(
            u,
            result.iterations,
            result.residuals,
            result.converged,
            rel,
            rel / config.ktol,
            traces=traces,
            polarized=pol,
        )

    def _relative_residual(self, u, f_global):
        H = self.global_operator()
        return float(
            np.linalg.norm(H @ u.ravel() - f_global.ravel()) / np.linalg.norm(f_global)
        )


# -- assembled forms (oracles, inner direct solvers, spectra) ----------------


def _blockset_list(layers, plr_threshold=None, **plr_opts):
    return [
        GreenBlockSet.build(ws, plr_threshold=plr_threshold, **plr_opts) for ws in layers
    ]


def assemble_unpolarized(layers, block_sets=None):
    """Dense trace matrix M in the (I - G) convention, stack ordering."""
    if block_sets is None:
        block_sets = _blockset_list(layers)
    L = len(layers)
    nI = L - 1
    w = layers[0].width
    dim = 2 * nI * w
    M = np.eye(dim, dtype=complex)

    def blk(i, slot_row, j, slot_col):
        return (
            slice((2 * i + slot_row) * w, (2 * i + slot_row + 1) * w),
            slice((2 * j + slot_col) * w, (2 * j + slot_col + 1) * w),
        )

    for i in range(nI):  # interface index, 0-based
        bs_i = block_sets[i]  # layer i+1 (hosts row slot 0 at its bottom)
        n = layers[i].n
        if i >= 1:
            M[blk(i, 0, i - 1, 0)] -= bs_i.dense(n, "v0")
            M[blk(i, 0, i - 1, 1)] -= bs_i.dense(n, "v1")
        M[blk(i, 0, i, 0)] -= bs_i.dense(n, "vn")
        M[blk(i, 0, i, 1)] -= bs_i.dense(n, "vnp")
        bs_ip = block_sets[i + 1]  # layer i+2 (hosts row slot 1 at its top)
        M[blk(i, 1, i, 0)] -= bs_ip.dense(1, "v0")
        M[blk(i, 1, i, 1)] -= bs_ip.dense(1, "v1")
        if i <= nI - 2:
            M[blk(i, 1, i + 1, 0)] -= bs_ip.dense(1, "vn")
            M[blk(i, 1, i + 1, 1)] -= bs_ip.dense(1, "vnp")
    return M


def assemble_polarized(layers, block_sets=None):
    """Dense polarized blocks (negated convention) in stack ordering.

    Returns dict with D_down, D_up, L, U and the full matrix M;
    M = [[D_down, U], [L, D_up]] over (down stack, up stack).
    """
    if block_sets is None:
        block_sets = _blockset_list(layers)
    L = len(layers)
    nI = L - 1
    w = layers[0].width
    half = 2 * nI * w
    D_down = -np.eye(half, dtype=complex)
    D_up = -np.eye(half, dtype=complex)
    Lmat = np.zeros((half, half), dtype=complex)
    Umat = np.zeros((half, half), dtype=complex)

    def blk(i, sr, j, sc):
        return (
            slice((2 * i + sr) * w, (2 * i + sr + 1) * w),
            slice((2 * j + sc) * w, (2 * j + sc + 1) * w),
        )

    for i in range(nI):
        n_i = layers[i].n
        bs_i = block_sets[i]  # layer i+1: down rows of interface i
        bs_ip = block_sets[i + 1]  # layer i+2: up rows of interface i
        # D_down: coupling to the down pair above (interface i-1)
        if i >= 1:
            for sr, row in ((0, n_i), (1, n_i + 1)):
                D_down[blk(i, sr, i - 1, 0)] += bs_i.dense(row, "v0")
                D_down[blk(i, sr, i - 1, 1)] += bs_i.dense(row, "v1")
        # U: up pair above via the top slots, up pair at i via the bottom slots
        for sr, row in ((0, n_i), (1, n_i + 1)):
            if i >= 1:
                Umat[blk(i, sr, i - 1, 0)] += bs_i.dense(row, "v0")
                Umat[blk(i, sr, i - 1, 1)] += bs_i.dense(row, "v1")
            Umat[blk(i, sr, i, 0)] += bs_i.dense(row, "vn")
            Umat[blk(i, sr, i, 1)] += bs_i.dense(row, "vnp")
        Umat[blk(i, 0, i, 0)] -= np.eye(w)
        # D_up: coupling to the up pair below (interface i+1)
        if i <= nI - 2:
            for sr, row in ((0, 0), (1, 1)):
                D_up[blk(i, sr, i + 1, 0)] += bs_ip.dense(row, "vn")
                D_up[blk(i, sr, i + 1, 1)] += bs_ip.dense(row, "vnp")
        # L: down pair at i via top slots, down pair below via bottom slots
        for sr, row in ((0, 0), (1, 1)):
            Lmat[blk(i, sr, i, 0)] += bs_ip.dense(row, "v0")
            Lmat[blk(i, sr, i, 1)] += bs_ip.dense(row, "v1")
            if i <= nI - 2:
                Lmat[blk(i, sr, i + 1, 0)] += bs_ip.dense(row, "vn")
                Lmat[blk(i, sr, i + 1, 1)] += bs_ip.dense(row, "vnp")
        Lmat[blk(i, 1, i, 1)] -= np.eye(w)

    M = np.block([[D_down, Umat], [Lmat, D_up]])
    return {"M": M, "D_down": D_down, "D_up": D_up, "L": Lmat, "U": Umat}


def assemble_preconditioner(blocks, which="gs"):
    """Dense preconditioner matrix matching the matrix-free sweeps."""
    import scipy.linalg as sla

    D_down, D_up = blocks["D_down"], blocks["D_up"]
    half = D_down.shape[0]
    if which == "jac":
        P = np.zeros((2 * half, 2 * half), dtype=complex)
        P[:half, :half] = sla.inv(D_down)
        P[half:, half:] = sla.inv(D_up)
        return P
    lower = np.block(
        [[D_down, np.zeros_like(D_down)], [blocks["L"], D_up]]
    )
    return sla.inv(lower)


def polarized_equation_order(L):
    """Raw layer-major equation list: (sample row kind, layer) tuples.

    Per layer the four equation families are sampled at rows 1, n, 0, n+1;
    families at rows 1 and 0 exist for layers 2..L, families at n and n+1
    for layers 1..L-1.
    """
    order = []
    for ell in range(1, L + 1):
        if ell >= 2:
            order.append(("row1", ell))
        if ell <= L - 1:
            order.append(("rown", ell))
        if ell >= 2:
            order.append(("row0", ell))
        if ell <= L - 1:
            order.append(("rownp", ell))
    return order


def polarized_permutation(L):
    """Panel permutation from the layer-major equation order to stack order.

    Stack order lists the down rows (interface-major, row slots n then n+1)
    followed by the up rows (slots 0 then 1); entry k of the returned array
    is the position of stack panel k in the raw equation list.
    """
    raw = polarized_equation_order(L)
    pos = {eq: k for k, eq in enumerate(raw)}
    perm = []
    for i in range(1, L):  # down rows live in layer i
        perm.append(pos[("rown", i)])
        perm.append(pos[("rownp", i)])
    for i in range(1, L):  # up rows live in layer i+1
        perm.append(pos[("row0", i + 1)])
        perm.append(pos[("row1", i + 1)])
    return np.array(perm)
