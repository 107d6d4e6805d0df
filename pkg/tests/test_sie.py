import numpy as np
import pytest
import scipy.sparse.linalg as spla

from polartraces.discretization import Grid, PmlProfile, VelocityModel, default_pml_strength
from polartraces.krylov import KrylovConfig
from polartraces.sie import (
    PolarizedTraceStack,
    PolarizedTracesSolver,
    TraceStack,
    TraceSystem,
    assemble_polarized,
    assemble_preconditioner,
    assemble_unpolarized,
    polarized_equation_order,
    polarized_permutation,
)
from polartraces.subdomain import DiscretizationSpec, build_layer, partition_layers


def make_solver(nx=24, nz=24, L=3, npml=6, omega=10.0, seed=0, kind="fd", contrast=0.4):
    h = 1.0 / (nx + 1)
    grid = Grid(nx, nz, h, npml)
    pml = PmlProfile(npml, h, default_pml_strength(1.0 + contrast), omega)
    rng = np.random.default_rng(seed)
    c = 1.0 + contrast * rng.random(grid.shape)
    model = VelocityModel(grid, c)
    disc = DiscretizationSpec(kind)
    part = partition_layers(grid, L)
    return PolarizedTracesSolver(grid, model, pml, part, disc)


def rand_stack(rng, nI, w):
    return TraceStack(rng.standard_normal((nI, 2, w)) + 1j * rng.standard_normal((nI, 2, w)))


def rand_pol(rng, nI, w):
    return PolarizedTraceStack(rand_stack(rng, nI, w), rand_stack(rng, nI, w))


def point_source(grid, p, q):
    f = np.zeros(grid.shape, dtype=complex)
    f[grid.row_of(q), grid.col_of(p)] = 1.0 / grid.h**2
    return f


def direct_solve(solver, f):
    H = solver.global_operator()
    return spla.spsolve(H.tocsc(), np.asarray(f, dtype=complex).ravel()).reshape(
        solver.grid.shape
    )


def exact_traces(solver, u):
    sysm = solver.system
    t = TraceStack.zeros(sysm.nI, sysm.width)
    npml = solver.grid.npml
    for i in range(sysm.nI):
        a = solver.partition.offsets[i + 1] + npml - 1  # global array row of slot 0
        t.data[i, 0] = u[a]
        t.data[i, 1] = u[a + 1]
    return t


# ------------------------------------------------------- matrix-free = dense


@pytest.mark.parametrize("kind", ["fd", "q1"])
def test_apply_m_matches_assembly(kind):
    solver = make_solver(L=3, kind=kind, nx=20, nz=22)
    sysm = solver.system
    M = assemble_unpolarized(sysm.layers)
    rng = np.random.default_rng(1)
    for _ in range(3):
        v = rand_stack(rng, sysm.nI, sysm.width)
        got = sysm.apply_M(v).flat()
        want = M @ v.flat()
        assert np.linalg.norm(got - want) / np.linalg.norm(want) < 1e-11


@pytest.mark.parametrize("kind", ["fd", "q1"])
def test_apply_m_polarized_matches_assembly(kind):
    solver = make_solver(L=4, kind=kind, nx=18, nz=26, seed=2)
    sysm = solver.system
    blocks = assemble_polarized(sysm.layers)
    rng = np.random.default_rng(3)
    for _ in range(3):
        v = rand_pol(rng, sysm.nI, sysm.width)
        got = sysm.apply_M_polarized(v).flat()
        want = blocks["M"] @ v.flat()
        assert np.linalg.norm(got - want) / np.linalg.norm(want) < 1e-11


def test_block_composition_matches_polarized_apply():
    solver = make_solver(L=4, nx=16, nz=24, seed=4)
    sysm = solver.system
    rng = np.random.default_rng(5)
    v = rand_pol(rng, sysm.nI, sysm.width)
    full = sysm.apply_M_polarized(v)
    down = sysm.apply_D_down(v.down).data + sysm.apply_U(v.up).data
    up = sysm.upward_reflections(v.down).data + sysm.apply_D_up(v.up).data
    assert np.linalg.norm(full.down.data - down) / np.linalg.norm(down) < 1e-12
    assert np.linalg.norm(full.up.data - up) / np.linalg.norm(up) < 1e-12


def test_zero_maps_to_zero():
    solver = make_solver(L=3, nx=12, nz=16)
    sysm = solver.system
    z = TraceStack.zeros(sysm.nI, sysm.width)
    assert sysm.apply_M(z).norm() == 0.0
    zp = PolarizedTraceStack.zeros(sysm.nI, sysm.width)
    out = sysm.apply_M_polarized(zp)
    assert out.down.norm() == 0.0 and out.up.norm() == 0.0
    assert sysm.sweep_down(z).norm() == 0.0
    assert sysm.sweep_up(z).norm() == 0.0
    gs = sysm.precondition_gs(zp)
    assert gs.down.norm() == 0.0 and gs.up.norm() == 0.0


# ------------------------------------------------------------ right-hand side


def test_rhs_zero_source():
    solver = make_solver(L=3, nx=12, nz=16)
    sysm = solver.system
    f_locals = sysm.split_source(np.zeros(solver.grid.shape, dtype=complex))
    assert sysm.build_rhs(f_locals).norm() == 0.0


def test_rhs_source_in_middle_layer_only():
    solver = make_solver(L=3, nx=12, nz=18)
    sysm = solver.system
    grid = solver.grid
    q = solver.partition.offsets[1] + 2  # inside layer 2
    f_locals = sysm.split_source(point_source(grid, 5, q))
    rhs = sysm.build_rhs(f_locals)
    assert np.linalg.norm(rhs.data[0, 0]) == 0.0  # layer-1 Newton trace
    assert np.linalg.norm(rhs.data[1, 1]) == 0.0  # layer-3 Newton trace
    assert np.linalg.norm(rhs.data[0, 1]) > 0.0
    assert np.linalg.norm(rhs.data[1, 0]) > 0.0


def test_rhs_matches_newton_potential():
    from polartraces.green import newton_potential

    solver = make_solver(L=3, nx=14, nz=18, seed=6)
    sysm = solver.system
    rng = np.random.default_rng(7)
    f = rng.standard_normal(solver.grid.shape) + 1j * rng.standard_normal(solver.grid.shape)
    f_locals = sysm.split_source(f)
    rhs = sysm.build_rhs(f_locals)
    ws1, ws2 = sysm.layers[0], sysm.layers[1]
    np.testing.assert_allclose(
        rhs.data[0, 0], newton_potential(ws1, f_locals[0], ws1.n), rtol=1e-12
    )
    np.testing.assert_allclose(rhs.data[0, 1], newton_potential(ws2, f_locals[1], 1), rtol=1e-12)


# --------------------------------------------- the trace equation M u = f


@pytest.mark.parametrize("kind", ["fd", "q1"])
def test_exact_traces_satisfy_trace_equation(kind):
    solver = make_solver(L=3, nx=20, nz=24, kind=kind, seed=8)
    sysm = solver.system
    f = point_source(solver.grid, 7, 5)
    u = direct_solve(solver, f)
    t = exact_traces(solver, u)
    rhs = sysm.build_rhs(sysm.split_source(f))
    res = sysm.apply_M(t) - rhs
    assert res.norm() / rhs.norm() < 1e-10


def test_polarized_exact_solution_and_equivalence():
    # solve the assembled polarized system directly: the matrix-free
    # operator reproduces the right-hand side on it, and the reassembled
    # down+up traces equal the direct solution's traces
    solver = make_solver(L=3, nx=18, nz=24, seed=9)
    sysm = solver.system
    f = point_source(solver.grid, 9, solver.partition.offsets[1] + 3)
    u = direct_solve(solver, f)
    t = exact_traces(solver, u)

    blocks = assemble_polarized(sysm.layers)
    rhs = sysm.build_rhs_polarized(sysm.split_source(f))
    x = np.linalg.solve(blocks["M"], rhs.flat())
    pol = PolarizedTraceStack.from_flat(x, sysm.nI, sysm.width)

    res = sysm.apply_M_polarized(pol) - rhs
    assert (res.down.norm() + res.up.norm()) / rhs.down.norm() < 1e-10
    re = pol.reassemble() - t
    assert re.norm() / t.norm() < 1e-10


def test_polarized_reduction_on_downgoing_stack():
    # with the up stack zero and a genuinely down-going d stack the
    # polarized rows reduce (negated) to the unpolarized operator rows
    solver = make_solver(L=3, nx=16, nz=22, seed=10)
    sysm = solver.system
    rng = np.random.default_rng(11)
    d = TraceStack.zeros(sysm.nI, sysm.width)
    for i in range(sysm.nI):
        ws = sysm.layers[i]
        g = np.zeros(ws.grid.shape, dtype=complex)
        for k in range(1, ws.n + 1):  # sources above the bottom cut of layer i+1
            g[ws.row_index(k)] = rng.standard_normal(ws.width) + 1j * rng.standard_normal(ws.width)
        w = ws.solve(g)
        d.data[i, 0] = w[ws.row_index(ws.n)]
        d.data[i, 1] = w[ws.row_index(ws.n + 1)]
    pol = PolarizedTraceStack(d, TraceStack.zeros(sysm.nI, sysm.width))
    out = sysm.apply_M_polarized(pol)
    ref = sysm.apply_M(d)
    scale = ref.norm()
    for i in range(sysm.nI):
        np.testing.assert_allclose(out.down.data[i, 0], -ref.data[i, 0], atol=1e-10 * scale)
        np.testing.assert_allclose(out.up.data[i, 1], -ref.data[i, 1], atol=1e-10 * scale)


# -------------------------------------------------------------------- sweeps


def test_sweep_down_first_block_sign():
    solver = make_solver(L=3, nx=12, nz=18)
    sysm = solver.system
    rng = np.random.default_rng(12)
    v = rand_stack(rng, sysm.nI, sysm.width)
    out = sysm.sweep_down(v)
    np.testing.assert_array_equal(out.data[0], -v.data[0])


def test_sweeps_invert_triangular_blocks():
    solver = make_solver(L=4, nx=14, nz=26, seed=13)
    sysm = solver.system
    rng = np.random.default_rng(14)
    v = rand_stack(rng, sysm.nI, sysm.width)
    down = sysm.apply_D_down(sysm.sweep_down(v))
    assert (down - v).norm() / v.norm() < 1e-11
    up = sysm.apply_D_up(sysm.sweep_up(v))
    assert (up - v).norm() / v.norm() < 1e-11


def test_block_causality():
    # zero leading panel pairs stay zero under the down block
    solver = make_solver(L=4, nx=12, nz=24)
    sysm = solver.system
    rng = np.random.default_rng(15)
    v = rand_stack(rng, sysm.nI, sysm.width)
    v.data[:2] = 0.0
    out = sysm.apply_D_down(v)
    assert np.linalg.norm(out.data[:2]) == 0.0
    np.testing.assert_allclose(out.data[2], -v.data[2] + sysm.apply_D_down(v).data[2])


def test_gs_inverts_lower_triangle():
    # the Gauss-Seidel sweep is the exact inverse of [[D_down, 0], [L, D_up]]
    solver = make_solver(L=3, nx=14, nz=20, seed=16)
    sysm = solver.system
    rng = np.random.default_rng(17)
    x = rand_pol(rng, sysm.nI, sysm.width)
    lower = PolarizedTraceStack(
        sysm.apply_D_down(x.down),
        TraceStack(sysm.upward_reflections(x.down).data + sysm.apply_D_up(x.up).data),
    )
    back = sysm.precondition_gs(lower)
    err = (back.down - x.down).norm() + (back.up - x.up).norm()
    assert err / (x.down.norm() + x.up.norm()) < 1e-11


def test_gs_exact_inverse_when_u_vanishes():
    # two layers: zeroing the U block makes GS the exact inverse (dense check)
    solver = make_solver(L=2, nx=14, nz=14, seed=18)
    sysm = solver.system
    blocks = assemble_polarized(sysm.layers)
    lower = np.block(
        [[blocks["D_down"], np.zeros_like(blocks["U"])], [blocks["L"], blocks["D_up"]]]
    )
    P = assemble_preconditioner(blocks, "gs")
    np.testing.assert_allclose(P @ lower, np.eye(lower.shape[0]), atol=1e-10)
    rng = np.random.default_rng(19)
    x = rng.standard_normal(lower.shape[0]) + 1j * rng.standard_normal(lower.shape[0])
    y = lower @ x
    got = sysm.precondition_gs(
        PolarizedTraceStack.from_flat(y, sysm.nI, sysm.width)
    ).flat()
    assert np.linalg.norm(got - x) / np.linalg.norm(x) < 1e-11


def test_preconditioner_dense_matches_matrix_free():
    solver = make_solver(L=3, nx=12, nz=18, seed=20)
    sysm = solver.system
    blocks = assemble_polarized(sysm.layers)
    rng = np.random.default_rng(21)
    v = rand_pol(rng, sysm.nI, sysm.width)
    for which, fn in (("gs", sysm.precondition_gs), ("jac", sysm.precondition_jac)):
        P = assemble_preconditioner(blocks, which)
        got = fn(v).flat()
        want = P @ v.flat()
        assert np.linalg.norm(got - want) / np.linalg.norm(want) < 1e-10


# ----------------------------------------------------------------- end to end


@pytest.mark.parametrize("kind", ["fd", "q1"])
def test_solve_matches_direct(kind):
    solver = make_solver(nx=60, nz=60, L=3, npml=8, omega=18.0, kind=kind, seed=22)
    f = point_source(solver.grid, 20, 15)
    res = solver.solve(f, KrylovConfig(ktol=1e-7, max_iter=60))
    u_ref = direct_solve(solver, f)
    rel = np.linalg.norm(res.u - u_ref) / np.linalg.norm(u_ref)
    assert rel < 1e-6, rel
    assert res.relative_residual < 1e-5
    # reassembled polarized traces match the direct solution's traces
    t = exact_traces(solver, u_ref)
    assert (res.traces - t).norm() / t.norm() < 1e-5


def test_solve_zero_source():
    solver = make_solver(nx=16, nz=16, L=2)
    res = solver.solve(np.zeros(solver.grid.shape))
    assert res.iterations == 0.0
    assert np.linalg.norm(res.u) == 0.0


def test_gs_not_slower_than_jacobi():
    solver = make_solver(nx=40, nz=40, L=3, npml=8, omega=14.0, seed=23)
    f = point_source(solver.grid, 12, 9)
    cfg = KrylovConfig(ktol=1e-7, max_iter=100)
    it_gs = solver.solve(f, cfg, preconditioner="gs").iterations
    it_jac = solver.solve(f, cfg, preconditioner="jac").iterations
    assert it_gs <= it_jac, (it_gs, it_jac)


def test_first_sweep_transmits_downward():
    # homogeneous medium, source in the top layer: one preconditioned
    # iteration already resolves the transmitted field
    solver = make_solver(nx=60, nz=60, L=3, npml=10, omega=15.0, contrast=0.0)
    f = point_source(solver.grid, 30, 6)
    res = solver.solve(f, KrylovConfig(ktol=1e-9, max_iter=60))
    assert res.residuals[0] < 1e-2, res.residuals[:3]


def test_monolayer_partition():
    solver = make_solver(nx=16, nz=16, L=1, npml=6)
    f = point_source(solver.grid, 8, 8)
    res = solver.solve(f)
    u_ref = direct_solve(solver, f)
    assert np.linalg.norm(res.u - u_ref) / np.linalg.norm(u_ref) < 1e-10
    assert res.iterations == 0.0


# ------------------------------------------------------------- permutation


def test_polarized_equation_order_l3():
    order = polarized_equation_order(3)
    assert order == [
        ("rown", 1),
        ("rownp", 1),
        ("row1", 2),
        ("rown", 2),
        ("row0", 2),
        ("rownp", 2),
        ("row1", 3),
        ("row0", 3),
    ]


def test_polarized_permutation_l3():
    perm = polarized_permutation(3)
    order = polarized_equation_order(3)
    stacked = [order[k] for k in perm]
    assert stacked == [
        ("rown", 1),
        ("rownp", 1),
        ("rown", 2),
        ("rownp", 2),
        ("row0", 2),
        ("row1", 2),
        ("row0", 3),
        ("row1", 3),
    ]
    assert sorted(perm.tolist()) == list(range(8))
