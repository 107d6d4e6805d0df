import numpy as np
import pytest
import scipy.sparse.linalg as spla

from polartraces.discretization import (
    Grid,
    PmlProfile,
    VelocityModel,
    assemble_fd,
    default_npml,
    default_pml_strength,
    delta_source,
)
from polartraces.subdomain import (
    DiscretizationSpec,
    build_layer,
    extract_trace,
    inject_trace,
    partition_layers,
)


def make_problem(nx=20, nz=20, npml=6, omega=10.0, seed=0, kind="fd"):
    h = 1.0 / (nx + 1)
    grid = Grid(nx, nz, h, npml)
    pml = PmlProfile(npml, h, default_pml_strength(1.5), omega)
    rng = np.random.default_rng(seed)
    c = 1.0 + 0.4 * rng.random(grid.shape)
    model = VelocityModel(grid, c)
    disc = DiscretizationSpec(kind)
    return grid, pml, model, disc


# ----------------------------------------------------------------- partitions


def test_partition_examples():
    assert partition_layers(9, 3).extents == (3, 3, 3)
    assert partition_layers(10, 3).extents == (4, 3, 3)


def test_partition_sums_and_bounds():
    for L in range(1, 11):
        part = partition_layers(60, L)
        assert sum(part.extents) == 60
        assert max(part.extents) - min(part.extents) <= 1
        assert all(n >= 2 for n in part.extents)
        assert part.n_interfaces == L - 1


def test_partition_too_many_layers():
    with pytest.raises(ValueError):
        partition_layers(9, 5)


# --------------------------------------------------------------------- layers


def _depth_blocks(mat_rows, wx):
    """Rows of an operator grouped as (row, depth block, column)."""
    return mat_rows.toarray().reshape(wx, -1, wx)


def test_layer_interior_rows_match_global_exactly():
    grid, pml, model, disc = make_problem()
    H = disc.assemble(grid, model, pml).tocsr()
    part = partition_layers(grid, 3)
    for ell in range(1, 4):
        ws = build_layer(grid, model, pml, part, ell, disc)
        off = part.offsets[ell - 1]
        for k in (1, ws.n // 2 + 1, ws.n):
            lblk = _depth_blocks(ws.H[ws.row_dofs(k)], grid.wx)
            gidx = (off + grid.npml - 1 + k) * grid.wx + np.arange(grid.wx)
            gblk = _depth_blocks(H[gidx], grid.wx)
            li = ws.row_index(k)
            gi = off + grid.npml - 1 + k
            np.testing.assert_array_equal(
                lblk[:, li - 1 : li + 2, :], gblk[:, gi - 1 : gi + 2, :]
            )


def test_layer1_keeps_physical_top_pml():
    grid, pml, model, disc = make_problem()
    H = disc.assemble(grid, model, pml).tocsr()
    part = partition_layers(grid, 3)
    ws = build_layer(grid, model, pml, part, 1, disc)
    # a row deep in the physical top PML is unchanged
    k = 2 - grid.npml
    lblk = _depth_blocks(ws.H[ws.row_dofs(k)], grid.wx)
    gblk = _depth_blocks(H[ws.row_index(k) * grid.wx + np.arange(grid.wx)], grid.wx)
    li = ws.row_index(k)
    np.testing.assert_array_equal(lblk[:, li - 1 : li + 2, :], gblk[:, li - 1 : li + 2, :])
    # while below the slab an artificial absorbing row appears
    k_out = ws.n + 2
    lblk = _depth_blocks(ws.H[ws.row_dofs(k_out)], grid.wx)
    gi = part.offsets[0] + grid.npml - 1 + k_out
    gblk = _depth_blocks(H[gi * grid.wx + np.arange(grid.wx)], grid.wx)
    assert not np.allclose(lblk[:, ws.row_index(k_out), :], gblk[:, gi, :])


def test_layer_rebuild_bit_identical():
    grid, pml, model, disc = make_problem(nx=12, nz=12, npml=4)
    part = partition_layers(grid, 2)
    a = build_layer(grid, model, pml, part, 2, disc)
    b = build_layer(grid, model, pml, part, 2, disc)
    assert (a.H != b.H).nnz == 0


def test_local_solve_roundtrip():
    grid, pml, model, disc = make_problem(nx=14, nz=14, npml=5)
    part = partition_layers(grid, 3)
    ws = build_layer(grid, model, pml, part, 2, disc)
    rng = np.random.default_rng(1)
    w0 = rng.standard_normal(ws.grid.shape) + 1j * rng.standard_normal(ws.grid.shape)
    rhs = (ws.H @ w0.ravel()).reshape(ws.grid.shape)
    w = ws.solve(rhs)
    assert np.linalg.norm(w - w0) / np.linalg.norm(w0) < 1e-12
    assert np.linalg.norm(ws.solve(np.zeros(ws.grid.shape))) == 0.0


def test_factorization_probe():
    grid, pml, model, disc = make_problem(nx=10, nz=10, npml=4)
    part = partition_layers(grid, 2)
    ws = build_layer(grid, model, pml, part, 1, disc)
    rng = np.random.default_rng(2)
    x = rng.standard_normal(ws.grid.n_unknowns) + 1j * rng.standard_normal(ws.grid.n_unknowns)
    err = np.linalg.norm(ws.solve(ws.H @ x) - x) / np.linalg.norm(x)
    assert err < 1e-12


def test_size_mismatch_rejected():
    grid, pml, model, disc = make_problem(nx=10, nz=10, npml=4)
    part = partition_layers(grid, 2)
    ws = build_layer(grid, model, pml, part, 1, disc)
    with pytest.raises(ValueError):
        ws.solve(np.zeros(7))


# --------------------------------------------------------------------- traces


def test_extract_inject_roundtrip():
    grid, pml, model, disc = make_problem(nx=10, nz=10, npml=4)
    part = partition_layers(grid, 2)
    ws = build_layer(grid, model, pml, part, 1, disc)
    rng = np.random.default_rng(3)
    p = rng.standard_normal(ws.width) + 1j * rng.standard_normal(ws.width)
    rhs = inject_trace(ws, p, 2)
    np.testing.assert_allclose(extract_trace(rhs, ws, 2) * ws.grid.h, p, rtol=1e-14)
    assert np.linalg.norm(inject_trace(ws, np.zeros(ws.width), 3)) == 0.0


def test_invalid_depth_rejected():
    grid, pml, model, disc = make_problem(nx=10, nz=10, npml=4)
    part = partition_layers(grid, 2)
    ws = build_layer(grid, model, pml, part, 1, disc)
    with pytest.raises(ValueError):
        ws.row_index(ws.n + ws.grid.npml + 1)


# ------------------------------------------- one-sided reproduction identities
# These four truncation identities are exact algebra (no PML quality
# involved) and underpin the polarized system: fields generated on one side
# of a cut are reproduced/annihilated by the incomplete Green's integrals.


@pytest.mark.parametrize("kind", ["fd", "q1"])
def test_one_sided_identities(kind):
    grid, pml, model, disc = make_problem(nx=16, nz=18, npml=5, kind=kind)
    part = partition_layers(grid, 3)
    ws = build_layer(grid, model, pml, part, 2, disc)
    rng = np.random.default_rng(4)
    n = ws.n

    def field_from(rows):
        g = np.zeros(ws.grid.shape, dtype=complex)
        for k in rows:
            g[ws.row_index(k)] = rng.standard_normal(ws.width) + 1j * rng.standard_normal(ws.width)
        return ws.solve(g)

    tol = 1e-11

    # sources below the slab: the bottom-cut integrals reproduce above, kill below
    w = field_from(range(n + 1, n + ws.grid.npml))
    up = ws.boundary_samples(None, None, w[ws.row_index(n)], w[ws.row_index(n + 1)], (1, n, n + 1))
    scale = np.linalg.norm(w)
    assert np.linalg.norm(up[0] - w[ws.row_index(1)]) / scale < tol
    assert np.linalg.norm(up[1] - w[ws.row_index(n)]) / scale < tol
    assert np.linalg.norm(up[2]) / scale < tol

    # sources above the slab: the top-cut integrals reproduce below, kill above
    w = field_from(range(1 - ws.grid.npml, 1))
    down = ws.boundary_samples(w[ws.row_index(0)], w[ws.row_index(1)], None, None, (0, 1, n))
    scale = np.linalg.norm(w)
    assert np.linalg.norm(down[0]) / scale < tol
    assert np.linalg.norm(down[1] - w[ws.row_index(1)]) / scale < tol
    assert np.linalg.norm(down[2] - w[ws.row_index(n)]) / scale < tol

    # sources inside/below row 1: top-cut integrals of the traces flip sign above
    w = field_from(range(1, n + 1))
    down = ws.boundary_samples(w[ws.row_index(0)], w[ws.row_index(1)], None, None, (0, 1))
    scale = np.linalg.norm(w)
    assert np.linalg.norm(down[0] + w[ws.row_index(0)]) / scale < tol
    assert np.linalg.norm(down[1]) / scale < tol

    # sources inside/above row n: bottom-cut integrals flip sign below
    up = ws.boundary_samples(None, None, w[ws.row_index(n)], w[ws.row_index(n + 1)], (n, n + 1))
    assert np.linalg.norm(up[0]) / scale < tol
    assert np.linalg.norm(up[1] + w[ws.row_index(n + 1)]) / scale < tol


# ------------------------------------------------------- consistency (global)


def _green_consistency(npml, nx=24, omega=10.0):
    h = 1.0 / (nx + 1)
    grid = Grid(nx, nx, h, npml)
    pml = PmlProfile(npml, h, default_pml_strength(1.0), omega=omega)
    model = VelocityModel.constant(grid, 1.0)
    disc = DiscretizationSpec("fd")
    H = disc.assemble(grid, model, pml)
    part = partition_layers(grid, 3)
    ws = build_layer(grid, model, pml, part, 2, disc)

    node = (nx // 2, part.offsets[1] + ws.n // 2 + 1)  # global lattice, inside layer 2
    gcol = spla.spsolve(H.tocsc(), delta_source(grid, node).ravel()).reshape(grid.shape)
    lcol = ws.solve(delta_source(ws.grid, (node[0], node[1] - part.offsets[1])))

    rows = slice(grid.npml, grid.npml + ws.n)  # interior rows of the layer
    grows = slice(part.offsets[1] + grid.npml, part.offsets[1] + grid.npml + ws.n)
    return np.linalg.norm(lcol[rows] - gcol[grows]) / np.linalg.norm(gcol[grows])


def test_local_green_column_matches_global():
    # Local and global Green columns agree inside the layer to the
    # absorbing-layer floor.  With the quadratic ramp at the default width
    # the measured floor on constant media sits just above 1e-5 at desk
    # scale, so the check pins that level at the default width and the
    # 1e-5 level at twice the width.
    floor_default = _green_consistency(default_npml(24, 24))
    floor_double = _green_consistency(2 * default_npml(24, 24))
    assert floor_default < 1e-4, floor_default
    assert floor_double < 1e-5, floor_double
    assert floor_double < floor_default
