import numpy as np
import pytest

from mchom import fem
from mchom.fem import CoefficientField, FineGrid, active_nodes, assemble_mass
from mchom.fine import TimeGrid, project_initial, run_fine, step_backward_euler
from mchom.geometry import CONTINUUM_1, build_timeline

from conftest import mini_geometry, unperforated_geometry


def full_square_labels(n):
    return np.full((n, n), CONTINUUM_1, dtype=np.int8)


def hat_function(grid, node):
    """Nodal indicator of one node as a callable (piecewise bilinear)."""
    n = grid.n_cells
    ix0, iy0 = node % (n + 1), node // (n + 1)

    def u0(x, y):
        sx = np.clip(1 - np.abs(x / grid.h - ix0), 0, 1)
        sy = np.clip(1 - np.abs(y / grid.h - iy0), 0, 1)
        return sx * sy

    return u0


def test_time_grid_frames():
    tg = TimeGrid(3, 2)
    assert tg.n_levels == 6
    assert tg.tau == 0.5
    assert [tg.frame(l) for l in range(7)] == [0, 0, 1, 1, 2, 2, 3]
    assert tg.frame_levels() == [0, 2, 4, 6]
    assert tg.time(3) == 1.5


def test_projection_reproduces_member_of_space():
    grid = FineGrid(8)
    labels = full_square_labels(8)
    node = 4 * 9 + 4
    active, u = project_initial(grid, labels, hat_function(grid, node))
    expected = np.zeros(active.size)
    expected[np.flatnonzero(active.nodes == node)[0]] = 1.0
    assert np.max(np.abs(u - expected)) < 1e-10


def test_projection_zero():
    grid = FineGrid(6)
    labels = full_square_labels(6)
    _, u = project_initial(grid, labels, lambda x, y: 0.0 * x)
    assert (u == 0).all()


def test_projection_gaussian_residual_and_norm():
    grid = FineGrid(40)
    labels = full_square_labels(40)

    def u0(x, y):
        return 1e-1 * np.exp(-100.0 * ((x - 0.5) ** 2 + (y - 0.5) ** 2))

    active, u = project_initial(grid, labels, u0)
    M = assemble_mass(grid, active, labels)
    b = fem.assemble_load(grid, active, labels, lambda x, y, t: u0(x, y))
    res = np.linalg.norm(M @ u - b) / np.linalg.norm(b)
    assert res < 1e-10
    # discrete L2 norm vs the exact norm of u0 (O(h^2) agreement)
    pts, wts = np.polynomial.legendre.leggauss(12)
    pts, wts = (pts + 1) / 2, wts / 2
    X, Y = np.meshgrid(pts, wts)
    exact_sq = 0.0
    h = grid.h
    for iy in range(40):
        for ix in range(40):
            for a, wx in zip(pts, wts):
                for c, wy in zip(pts, wts):
                    exact_sq += wx * wy * h * h * u0((ix + a) * h, (iy + c) * h) ** 2
    discrete = np.sqrt(u @ (M @ u))
    assert abs(discrete - np.sqrt(exact_sq)) < 30 * grid.h**2 * np.sqrt(exact_sq)


def test_step_zero_stays_zero():
    grid = FineGrid(6)
    labels = full_square_labels(6)
    active = active_nodes(grid, labels)
    coeff = CoefficientField(np.ones((6, 6)))
    _, u1 = step_backward_euler(
        grid, active, np.zeros(active.size), labels, 0.5, coeff,
        lambda x, y, t: 0.0 * x, 0.5,
    )
    assert (u1 == 0).all()


def test_step_dissipates_mass_norm():
    grid = FineGrid(8)
    labels = full_square_labels(8)
    active = active_nodes(grid, labels)
    coeff = CoefficientField(np.ones((8, 8)))
    u = np.zeros(active.size)
    u[len(u) // 2] = 1.0
    M = assemble_mass(grid, active, labels)
    _, u1 = step_backward_euler(
        grid, active, u, labels, 0.25, coeff, lambda x, y, t: 0.0 * x, 0.25
    )
    assert u1 @ (M @ u1) < u @ (M @ u)


def test_step_single_active_node_closed_form():
    grid = FineGrid(2)
    labels = full_square_labels(2)
    active = active_nodes(grid, labels)
    assert active.size == 1
    coeff = CoefficientField(np.full((2, 2), 3.0))
    tau = 0.2
    u = np.array([0.7])

    def f(x, y, t):
        return np.ones_like(x)

    _, u1 = step_backward_euler(grid, active, u, labels, tau, coeff, f, tau)
    m = fem.assemble_mass(grid, active, labels)[0, 0]
    a = fem.assemble_stiffness(grid, active, labels, coeff)[0, 0]
    b = fem.assemble_load(grid, active, labels, f, tau)[0]
    assert abs(u1[0] - (m * u[0] / tau + b) / (m / tau + a)) < 1e-14


def test_run_fine_zero_steps_is_projection():
    tl = build_timeline(unperforated_geometry(8))
    coeff = CoefficientField(np.ones((8, 8)))
    traj = run_fine(
        tl, coeff, lambda x, y, t: 0.0 * x,
        lambda x, y: x * (1 - x) * y * (1 - y), TimeGrid(0, 1),
    )
    assert len(traj.values) == 1
    assert traj.dof_counts == [49]


def test_run_fine_active_dofs_monotone_and_restriction():
    tl = build_timeline(mini_geometry())
    grid = FineGrid(48)
    coeff = CoefficientField.build(grid, tl.labels[0], 1.0)
    traj = run_fine(
        tl, coeff, lambda x, y, t: 0.0 * x,
        lambda x, y: np.ones_like(x), TimeGrid(3, 1),
    )
    assert all(
        traj.dof_counts[k + 1] <= traj.dof_counts[k] for k in range(3)
    )
    # nodes that left the active set carry value zero in the full field
    full = traj.full(3)
    mask3 = traj.actives[3].mask.reshape(49, 49)
    assert (full[~mask3] == 0).all()


@pytest.mark.parametrize("substeps", [1, 2])
def test_substepping_static_domain_consistency(substeps):
    # with a static domain, two substeps of tau/2 land near the one-step
    # solution (first-order consistency, not equality)
    tl = build_timeline(unperforated_geometry(8, n_steps=1))
    coeff = CoefficientField(np.ones((8, 8)))
    traj = run_fine(
        tl, coeff, lambda x, y, t: 0.0 * x,
        lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y),
        TimeGrid(1, substeps),
    )
    assert len(traj.values) == substeps + 1
    assert np.isfinite(traj.values[-1]).all()


def manufactured_l2_error(n_cells, tau, T=0.1):
    """Backward Euler on the full square against an analytic solution."""
    tl = build_timeline(unperforated_geometry(n_cells))
    grid = FineGrid(n_cells)
    coeff = CoefficientField(np.ones((n_cells, n_cells)))

    def exact(x, y, t):
        return np.exp(-t) * np.sin(np.pi * x) * np.sin(np.pi * y)

    def f(x, y, t):
        return (2 * np.pi**2 - 1.0) * exact(x, y, t)

    labels = tl.labels[0]
    active, u = project_initial(grid, labels, lambda x, y: exact(x, y, 0.0))
    n_steps = int(round(T / tau))
    for k in range(1, n_steps + 1):
        active, u = step_backward_euler(
            grid, active, u, labels, tau, coeff, f, k * tau
        )
    M = assemble_mass(grid, active, labels)
    xs = (active.nodes % (n_cells + 1)) * grid.h
    ys = (active.nodes // (n_cells + 1)) * grid.h
    e = u - exact(xs, ys, n_steps * tau)
    return float(np.sqrt(e @ (M @ e)))


def test_manufactured_solution_second_order_in_space():
    err_coarse = manufactured_l2_error(20, 1e-3)
    err_fine = manufactured_l2_error(40, 1e-3)
    ratio = err_coarse / err_fine
    assert 3.2 <= ratio <= 4.8
