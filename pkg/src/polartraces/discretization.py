"""Grids, PML profiles, velocity models, and discrete Helmholtz operators.

Two discretizations of (-lap - m*omega^2) u = f on a rectangle with
absorbing layers are provided: a 5-point finite-difference stencil and a
symmetric Q1 finite-element formulation with per-element quadrature.

Grid convention: the physical domain is [0, Lx] x [0, Lz] with
Lx = (nx+1)*h, Lz = (nz+1)*h, interior nodes at lattice positions
p = 1..nx (x = p*h) and q = 1..nz.  The extended grid adds npml points
per side: lattice indices p = -npml+1 .. nx+npml, giving nx + 2*npml
unknowns per axis.  Homogeneous Dirichlet values sit one step beyond the
extended grid on each side, exactly at distance delta_pml = npml*h from
the physical boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Grid",
    "PmlProfile",
    "VelocityModel",
    "QuadratureError",
    "default_pml_strength",
    "default_npml",
    "make_pml_sigma",
    "make_alpha",
    "assemble_fd",
    "assemble_q1",
    "q1_rough_elements",
    "delta_source",
    "project_rhs_q1",
    "save_model",
    "load_model",
]

# Absorption target for the default PML strength: round-trip amplitude
# exp(-2C/(3c)) <= 1e-6.
_PML_ATTENUATION = 1e-6


def default_pml_strength(c_ref):
    """Absorption constant C giving round-trip attenuation <= 1e-6 at speed c_ref."""
    return 1.5 * np.log(1.0 / _PML_ATTENUATION) * c_ref


def default_npml(nx, nz):
    """PML width rule max(10, ceil(log2(N))) for N = nx*nz volume unknowns."""
    return max(10, int(np.ceil(np.log2(nx * nz))))


@dataclass(frozen=True)
class Grid:
    """Tensor grid metadata for one rectangular (sub)domain.

    nx, nz are interior point counts, h the spacing, npml the number of
    absorbing points per side.  origin gives the lattice offset of this
    grid's (p=0, q=0) corner inside a parent grid (0 for the root domain).
    """

    nx: int
    nz: int
    h: float
    npml: int
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.nx < 1 or self.nz < 1:
            raise ValueError("grid needs nx, nz >= 1")
        if self.h <= 0:
            raise ValueError("grid spacing must be positive")
        if self.npml < 0:
            raise ValueError("npml must be nonnegative")

    @property
    def wx(self):
        """Extended point count along x."""
        return self.nx + 2 * self.npml

    @property
    def wz(self):
        """Extended point count along z."""
        return self.nz + 2 * self.npml

    @property
    def shape(self):
        """Extended array shape (depth-major)."""
        return (self.wz, self.wx)

    @property
    def n_unknowns(self):
        return self.wx * self.wz

    @property
    def lx(self):
        return (self.nx + 1) * self.h

    @property
    def lz(self):
        return (self.nz + 1) * self.h

    def x_coords(self):
        """Physical x of the extended nodes, lattice p = -npml+1 .. nx+npml."""
        return self.h * np.arange(1 - self.npml, self.nx + self.npml + 1, dtype=float)

    def z_coords(self):
        return self.h * np.arange(1 - self.npml, self.nz + self.npml + 1, dtype=float)

    def row_of(self, q):
        """Array row of lattice depth q (q = 1 is the first interior row)."""
        return q + self.npml - 1

    def col_of(self, p):
        return p + self.npml - 1

    def transposed(self):
        return Grid(self.nz, self.nx, self.h, self.npml, (self.origin[1], self.origin[0]))


@dataclass(frozen=True)
class PmlProfile:
    """Quadratic absorption ramps for both axes of a grid.

    sigma(s) = C/delta * ((s - edge)/delta)^2 outside the physical span and
    zero inside it; alpha = 1/(1 + i sigma/omega).  delta_pml = npml*h.
    """

    npml: int
    h: float
    C: float
    omega: float

    def __post_init__(self):
        if self.C <= 0:
            raise ValueError("absorption strength C must be positive")
        if self.omega <= 0:
            raise ValueError("omega must be positive")

    @property
    def delta(self):
        return self.npml * self.h

    def sigma(self, s, span):
        """Ramp value at coordinate(s) s for a physical span [0, span]."""
        s = np.asarray(s, dtype=float)
        if self.npml == 0:
            return np.zeros_like(s)
        d = self.delta
        out = np.zeros_like(s)
        left = s < 0.0
        right = s > span
        out[left] = (self.C / d) * (s[left] / d) ** 2
        out[right] = (self.C / d) * ((s[right] - span) / d) ** 2
        return out

    def alpha(self, sigma):
        """Complex damping factor 1/(1 + i sigma/omega)."""
        return 1.0 / (1.0 + 1j * np.asarray(sigma) / self.omega)

    def sigma_axis(self, n, half=0.0):
        """Sigma sampled at the extended nodes of an axis with n interior points.

        half = +-0.5 shifts the sample points by half a grid step, as needed
        by the staggered finite-difference coefficients.
        """
        coords = self.h * (np.arange(1 - self.npml, n + self.npml + 1, dtype=float) + half)
        return self.sigma(coords, (n + 1) * self.h)

    def alpha_axis(self, n, half=0.0):
        return self.alpha(self.sigma_axis(n, half))


def make_pml_sigma(grid, C, axis, omega=1.0, half=0.0):
    """Sampled sigma profile along one grid axis ('x' or 'z')."""
    prof = PmlProfile(grid.npml, grid.h, C, omega)
    n = grid.nx if axis == "x" else grid.nz
    return prof.sigma_axis(n, half=half)


def make_alpha(sigma, omega):
    """Damping factor alpha = 1/(1 + i sigma/omega) for sampled sigma."""
    if omega <= 0:
        raise ValueError("omega must be positive")
    return 1.0 / (1.0 + 1j * np.asarray(sigma) / omega)


class VelocityModel:
    """Wave speed sampled on the extended grid nodes (depth-major array)."""

    def __init__(self, grid, c):
        c = np.asarray(c, dtype=float)
        if c.shape != grid.shape:
            raise ValueError(f"model shape {c.shape} does not match extended grid {grid.shape}")
        if not np.all(np.isfinite(c)) or np.any(c <= 0):
            raise ValueError("wave speeds must be positive and finite")
        self.grid = grid
        self.c = c

    @property
    def m(self):
        """Squared slowness 1/c^2."""
        return 1.0 / self.c**2

    @classmethod
    def constant(cls, grid, c0=1.0):
        return cls(grid, np.full(grid.shape, float(c0)))

    def restrict(self, grid, row0, col0):
        """Sub-model on a child grid whose extended array starts at (row0, col0)."""
        sub = self.c[row0 : row0 + grid.wz, col0 : col0 + grid.wx]
        return VelocityModel(grid, sub.copy())

    def transposed(self):
        return VelocityModel(self.grid.transposed(), self.c.T.copy())


def assemble_fd(grid, model, pml):
    """Second-order finite-difference Helmholtz operator on the extended grid.

    Interior rows carry the plain 5-point stencil minus omega^2*m; inside the
    absorbing layers each second derivative d_s(d_s u) becomes
    alpha_s * (alpha_{s+1/2}(u_+ - u) - alpha_{s-1/2}(u - u_-)) / h^2.
    Returns a CSR matrix over the depth-major raveled unknowns, which is
    block tridiagonal in the depth index with diagonal off-blocks.
    """
    if grid.shape != model.grid.shape:
        raise ValueError("model does not cover the extended grid")
    h2 = grid.h**2
    omega = pml.omega

    def axis_tridiag(n):
        a0 = pml.alpha_axis(n, 0.0)
        ap = pml.alpha_axis(n, +0.5)
        am = pml.alpha_axis(n, -0.5)
        main = a0 * (ap + am) / h2
        upper = -(a0 * ap / h2)[:-1]
        lower = -(a0 * am / h2)[1:]
        return sp.diags([lower, main, upper], offsets=[-1, 0, 1], format="csr")

    tx = axis_tridiag(grid.nx)
    tz = axis_tridiag(grid.nz)
    ix = sp.identity(grid.wx, format="csr")
    iz = sp.identity(grid.wz, format="csr")
    mass = sp.diags(omega**2 * model.m.ravel())
    return (sp.kron(iz, tx) + sp.kron(tz, ix) - mass).tocsr()


class QuadratureError(RuntimeError):
    """Adaptive element quadrature failed to reach the requested tolerance."""

    def __init__(self, element, achieved, tol):
        self.element = element
        super().__init__(
            f"adaptive quadrature stalled at {achieved:.3e} (tol {tol:.3e}) on element {element}"
        )


# Q1 reference basis on [0,1]^2, local node order (00, 10, 01, 11).
def _q1_basis(xi, eta):
    return np.stack(
        [(1 - xi) * (1 - eta), xi * (1 - eta), (1 - xi) * eta, xi * eta], axis=0
    )


def _q1_grad(xi, eta):
    dxi = np.stack([-(1 - eta), (1 - eta), -eta, eta], axis=0)
    deta = np.stack([-(1 - xi), -xi, (1 - xi), xi], axis=0)
    return dxi, deta


_GAUSS2 = (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0))


def _element_gauss_speeds(c_pad, xi, eta):
    """Bilinear speeds at the per-element Gauss points, shape (nez, nex, 2, 2)."""
    c00 = c_pad[:-1, :-1][:, :, None, None]
    c10 = c_pad[:-1, 1:][:, :, None, None]
    c01 = c_pad[1:, :-1][:, :, None, None]
    c11 = c_pad[1:, 1:][:, :, None, None]
    return (
        c00 * ((1 - xi) * (1 - eta))[None, None]
        + c10 * (xi * (1 - eta))[None, None]
        + c01 * ((1 - xi) * eta)[None, None]
        + c11 * (xi * eta)[None, None]
    )


def _element_speed_ratio(c_pad):
    """Max/min sampled speed per element (nodal samples are the extrema)."""
    corners = np.stack([c_pad[:-1, :-1], c_pad[:-1, 1:], c_pad[1:, :-1], c_pad[1:, 1:]])
    return corners.max(axis=0) / corners.min(axis=0)


def q1_rough_elements(model, smoothness_threshold=1.05):
    """Mask of elements classified discontinuous by the velocity-ratio test.

    An element (including the Dirichlet-ring boundary elements) is smooth
    when the ratio of its sampled speeds stays below the threshold.
    """
    return _element_speed_ratio(np.pad(model.c, 1, mode="edge")) >= smoothness_threshold


def _mass_entries_trapezoid(elems, corners, x0, z0, pml, lx, lz, omega, h, quad_tol,
                            max_depth=9, chunk=256):
    """Mass-matrix entries of rough elements by dyadically refined trapezoid.

    elems: (m, 2) element indices (j, i); corners: (m, 2, 2) nodal speeds;
    x0, z0: element corner coordinates.  Batched over elements: the
    composite rule is refined with one Richardson-extrapolation level until
    successive extrapolated estimates agree to quad_tol relatively; an
    element still unconverged at max_depth raises QuadratureError with its
    index.  Returns (m, 4, 4) arrays.
    """
    m = len(elems)
    out = np.empty((m, 4, 4), dtype=complex)
    for lo in range(0, m, chunk):
        sel = slice(lo, min(lo + chunk, m))
        out[sel] = _trapezoid_chunk(
            elems[sel], corners[sel], x0[sel], z0[sel], pml, lx, lz, omega, h,
            quad_tol, max_depth,
        )
    return out


def _trapezoid_chunk(elems, corners, x0, z0, pml, lx, lz, omega, h, quad_tol, max_depth):
    def composite(depth, active):
        npt = 2**depth + 1
        t = np.linspace(0.0, 1.0, npt)
        w = np.full(npt, 1.0 / (npt - 1))
        w[0] = w[-1] = 0.5 / (npt - 1)
        xi, eta = np.meshgrid(t, t, indexing="xy")
        cs = corners[active]
        c = (
            cs[:, 0, 0, None, None] * ((1 - xi) * (1 - eta))[None]
            + cs[:, 0, 1, None, None] * (xi * (1 - eta))[None]
            + cs[:, 1, 0, None, None] * ((1 - xi) * eta)[None]
            + cs[:, 1, 1, None, None] * (xi * eta)[None]
        )
        ax = pml.alpha(pml.sigma(x0[active][:, None] + h * t[None, :], lx))
        az = pml.alpha(pml.sigma(z0[active][:, None] + h * t[None, :], lz))
        dens = (omega**2 / c**2) / (ax[:, None, :] * az[:, :, None])
        phi = _q1_basis(xi, eta)
        ww = w[None, :] * w[:, None]
        return np.einsum("mij,aij,bij,ij->mab", dens, phi, phi, ww) * h**2

    m = len(elems)
    vals = np.empty((m, 4, 4), dtype=complex)
    active = np.arange(m)
    err = np.full(m, np.inf)
    prev_t = composite(1, active)
    prev_r1 = prev_r2 = None
    for depth in range(2, max_depth + 1):
        cur_t = composite(depth, active)
        cur_r1 = (4.0 * cur_t - prev_t) / 3.0
        cur_r2 = None if prev_r1 is None else (16.0 * cur_r1 - prev_r1) / 15.0
        if prev_r2 is not None:
            scale = np.maximum(np.abs(cur_r2).max(axis=(1, 2)), 1e-300)
            e = np.abs(cur_r2 - prev_r2).max(axis=(1, 2)) / scale
            err[active] = e
            conv = e <= quad_tol
            vals[active[conv]] = cur_r2[conv]
            active = active[~conv]
            if active.size == 0:
                return vals
            cur_t, cur_r1, cur_r2 = cur_t[~conv], cur_r1[~conv], cur_r2[~conv]
        prev_t, prev_r1, prev_r2 = cur_t, cur_r1, cur_r2
    bad = int(active[0])
    raise QuadratureError(tuple(int(v) for v in elems[bad]), float(err[bad]), quad_tol)


def assemble_q1(grid, model, pml, smoothness_threshold=1.05, quad_tol=1e-8):
    """Q1 finite-element Helmholtz operator in the symmetric PML formulation.

    H = S - M with the stiffness S from a fixed 2x2 Gauss rule applied to
    div(Lambda grad), Lambda = diag(alpha_x/alpha_z, alpha_z/alpha_x), and
    the mass M from per-element quadrature: 2x2 Gauss where the sampled
    velocity ratio stays below smoothness_threshold, adaptive trapezoid to
    quad_tol otherwise.  The operator is complex symmetric for any sigma.
    """
    if smoothness_threshold <= 1:
        raise ValueError("smoothness_threshold must exceed 1")
    if grid.shape != model.grid.shape:
        raise ValueError("model does not cover the extended grid")
    h = grid.h
    omega = pml.omega

    # Node set padded by the Dirichlet ring; elements cover the full extended
    # domain and the ring rows/columns are dropped after assembly.
    nxp, nzp = grid.wx + 2, grid.wz + 2
    c_pad = np.pad(model.c, 1, mode="edge")
    xr = h * np.arange(-grid.npml, grid.nx + grid.npml + 2, dtype=float)
    zr = h * np.arange(-grid.npml, grid.nz + grid.npml + 2, dtype=float)

    g0, g1 = _GAUSS2
    gp = np.array([g0, g1])
    xi, eta = np.meshgrid(gp, gp, indexing="xy")  # (q over eta rows, p over xi cols)
    phi = _q1_basis(xi, eta)  # (4, 2, 2)
    dxi, deta = _q1_grad(xi, eta)
    wq = np.full((2, 2), 0.25)

    nex, nez = nxp - 1, nzp - 1
    # alpha at Gauss abscissae, separable per axis
    ax_g = pml.alpha(pml.sigma(xr[:-1, None] + h * gp[None, :], grid.lx))  # (nex, 2)
    az_g = pml.alpha(pml.sigma(zr[:-1, None] + h * gp[None, :], grid.lz))  # (nez, 2)

    cg = _element_gauss_speeds(c_pad, xi, eta)

    axq = ax_g[None, :, None, :]  # alpha_x at (element col, xi)
    azq = az_g[:, None, :, None]  # alpha_z at (element row, eta)
    sxq = axq / azq
    szq = azq / axq
    stiff = np.einsum("pq,jipq,apq,bpq->jiab", wq, sxq, dxi, dxi) + np.einsum(
        "pq,jipq,apq,bpq->jiab", wq, szq, deta, deta
    )
    dens = (omega**2 / cg**2) / (axq * azq)
    mass = np.einsum("pq,jipq,apq,bpq->jiab", wq, dens, phi, phi) * h**2

    # adaptive quadrature on elements with a rough velocity sample
    rough = np.argwhere(_element_speed_ratio(c_pad) >= smoothness_threshold)
    if len(rough):
        jj_r, ii_r = rough[:, 0], rough[:, 1]
        corners = np.stack(
            [
                np.stack([c_pad[jj_r, ii_r], c_pad[jj_r, ii_r + 1]], axis=1),
                np.stack([c_pad[jj_r + 1, ii_r], c_pad[jj_r + 1, ii_r + 1]], axis=1),
            ],
            axis=1,
        )
        mass[jj_r, ii_r] = _mass_entries_trapezoid(
            rough, corners, xr[ii_r], zr[jj_r], pml, grid.lx, grid.lz, omega, h, quad_tol
        )

    elem = (stiff - mass).reshape(nez * nex, 4, 4)

    # scatter into the padded node numbering, then drop the Dirichlet ring
    jj, ii = np.meshgrid(np.arange(nez), np.arange(nex), indexing="ij")
    base = (jj * nxp + ii).ravel()
    loc = np.array([0, 1, nxp, nxp + 1])
    nodes = base[:, None] + loc[None, :]
    rows = np.repeat(nodes, 4, axis=1).ravel()
    cols = np.tile(nodes, (1, 4)).ravel()
    hpad = sp.coo_matrix(
        (elem.ravel(), (rows, cols)), shape=(nxp * nzp, nxp * nzp)
    ).tocsr()

    keep = (np.arange(1, nzp - 1)[:, None] * nxp + np.arange(1, nxp - 1)[None, :]).ravel()
    return hpad[keep][:, keep].tocsr()


def delta_source(grid, node, discretization="fd"):
    """Discrete point source at lattice node (p, q).

    FD: value 1/h^2 at the node (the discrete Dirac delta).  Q1: the
    mass-lumped nodal load h^2 * (1/h^2) = 1, chosen so both
    discretizations produce matching Green's functions at leading order.
    """
    p, q = node
    if not (1 - grid.npml <= p <= grid.nx + grid.npml) or not (
        1 - grid.npml <= q <= grid.nz + grid.npml
    ):
        raise ValueError(f"node {node} outside the extended grid")
    out = np.zeros(grid.shape, dtype=complex)
    val = 1.0 / grid.h**2 if discretization == "fd" else 1.0
    out[grid.row_of(q), grid.col_of(p)] = val
    return out


def project_rhs_q1(grid, f, pml, order=3):
    """Project nodal f/(alpha_x alpha_z) onto the Q1 basis with Gauss quadrature."""
    from numpy.polynomial.legendre import leggauss

    t, w = leggauss(order)
    gp, gw = 0.5 * (t + 1.0), 0.5 * w
    h = grid.h
    f_pad = np.pad(np.asarray(f, dtype=complex), 1, mode="edge")
    xr = h * np.arange(-grid.npml, grid.nx + grid.npml + 2, dtype=float)
    zr = h * np.arange(-grid.npml, grid.nz + grid.npml + 2, dtype=float)
    xi, eta = np.meshgrid(gp, gp, indexing="xy")
    phi = _q1_basis(xi, eta)
    ax_g = pml.alpha(pml.sigma(xr[:-1, None] + h * gp[None, :], grid.lx))
    az_g = pml.alpha(pml.sigma(zr[:-1, None] + h * gp[None, :], grid.lz))
    fg = (
        f_pad[:-1, :-1][:, :, None, None] * ((1 - xi) * (1 - eta))[None, None]
        + f_pad[:-1, 1:][:, :, None, None] * (xi * (1 - eta))[None, None]
        + f_pad[1:, :-1][:, :, None, None] * ((1 - xi) * eta)[None, None]
        + f_pad[1:, 1:][:, :, None, None] * (xi * eta)[None, None]
    )
    dens = fg / (ax_g[None, :, None, :] * az_g[:, None, :, None])
    wq = gw[None, :] * gw[:, None]
    loads = np.einsum("pq,jipq,apq->jia", wq, dens, phi) * h**2

    nxp, nzp = grid.wx + 2, grid.wz + 2
    jj, ii = np.meshgrid(np.arange(nzp - 1), np.arange(nxp - 1), indexing="ij")
    base = (jj * nxp + ii).ravel()
    loc = np.array([0, 1, nxp, nxp + 1])
    nodes = (base[:, None] + loc[None, :]).ravel()
    rhs_pad = np.zeros(nxp * nzp, dtype=complex)
    np.add.at(rhs_pad, nodes, loads.reshape(-1, 4).ravel())
    rhs = rhs_pad.reshape(nzp, nxp)[1:-1, 1:-1]
    return rhs


def save_model(path, grid, model):
    """Write a velocity model as JSON header + raw little-endian f64 binary."""
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    header = {
        "nx": grid.nx,
        "nz": grid.nz,
        "npml": grid.npml,
        "h": grid.h,
        "dtype": "f64",
        "order": "row-major, z-major blocks",
        "data": bin_path.name,
    }
    path.write_text(json.dumps(header, indent=2))
    model.c.astype("<f8").tofile(bin_path)


def load_model(path):
    """Load a velocity model file (.json header + .bin, or headered .csv)."""
    path = Path(path)
    if path.suffix == ".csv":
        return _load_model_csv(path)
    header = json.loads(path.read_text())
    grid = Grid(header["nx"], header["nz"], header["h"], header["npml"])
    data = np.fromfile(path.parent / header.get("data", path.with_suffix(".bin").name), "<f8")
    if data.size != grid.n_unknowns:
        raise ValueError(
            f"binary holds {data.size} values, grid wants {grid.n_unknowns}"
        )
    return grid, VelocityModel(grid, data.reshape(grid.shape))


def _load_model_csv(path):
    """Tiny-grid CSV: '# nx=.. nz=.. npml=.. h=..' header then speed rows."""
    meta = {}
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].replace(",", " ").split():
                if "=" in tok:
                    k, v = tok.split("=")
                    meta[k.strip()] = float(v)
            continue
        rows.append([float(v) for v in line.split(",")])
    try:
        grid = Grid(int(meta["nx"]), int(meta["nz"]), meta["h"], int(meta["npml"]))
    except KeyError as exc:
        raise ValueError("CSV model needs a '# nx=.. nz=.. npml=.. h=..' header") from exc
    return grid, VelocityModel(grid, np.array(rows))
