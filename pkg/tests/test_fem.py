import numpy as np
import pytest
import scipy.sparse as sp

from mchom import fem
from mchom.fem import (
    CoefficientField,
    ConfigurationError,
    ConstraintRankError,
    FineGrid,
    active_nodes,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    solve_saddle,
    solve_spd,
)
from mchom.geometry import CONTINUUM_1, GeometryConfig, Channel, build_timeline

from conftest import mini_geometry, unperforated_geometry


def shape_q1(xi, eta):
    return np.array(
        [(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta]
    )


def grad_q1(xi, eta):
    return np.array(
        [
            [-(1 - eta), -(1 - xi)],
            [(1 - eta), -xi],
            [eta, xi],
            [-eta, (1 - xi)],
        ]
    )


def gauss_1d(n=8):
    return np.polynomial.legendre.leggauss(n)


def element_matrices_by_quadrature(h, kappa=1.0, n_gauss=8):
    """Independent oracle: dense Gauss integration of the Q1 element forms."""
    pts, wts = gauss_1d(n_gauss)
    pts = (pts + 1) / 2
    wts = wts / 2
    M = np.zeros((4, 4))
    K = np.zeros((4, 4))
    for xi, wx in zip(pts, wts):
        for eta, wy in zip(pts, wts):
            N = shape_q1(xi, eta)
            G = grad_q1(xi, eta) / h
            M += wx * wy * h * h * np.outer(N, N)
            K += wx * wy * h * h * kappa * (G @ G.T)
    return M, K


def test_element_matrices_match_quadrature_oracle():
    h = 0.37
    M, K = element_matrices_by_quadrature(h)
    assert np.allclose(M, fem.MASS_LOCAL * h * h, atol=1e-14)
    assert np.allclose(K, fem.STIFF_LOCAL, atol=1e-13)


def test_grad_local_matches_quadrature_oracle():
    pts, wts = gauss_1d(6)
    pts = (pts + 1) / 2
    wts = wts / 2
    G = np.zeros((2, 2, 4, 4))
    for xi, wx in zip(pts, wts):
        for eta, wy in zip(pts, wts):
            D = grad_q1(xi, eta)
            for m in range(2):
                for n in range(2):
                    G[m, n] += wx * wy * np.outer(D[:, m], D[:, n])
    for m in range(2):
        for n in range(2):
            assert np.allclose(G[m, n], fem.GRAD_LOCAL[m][n], atol=1e-14)


def test_active_nodes_2x2_full_square():
    grid = FineGrid(2)
    labels = np.full((2, 2), CONTINUUM_1, dtype=np.int8)
    act = active_nodes(grid, labels)
    assert act.size == 1
    assert act.nodes[0] == 4  # center of the 3x3 node grid


def test_active_nodes_excluded_corner_cell():
    grid = FineGrid(4)
    labels = np.full((4, 4), CONTINUUM_1, dtype=np.int8)
    labels[0, 0] = 0
    act = active_nodes(grid, labels)
    expected = set()
    for iy in range(1, 4):
        for ix in range(1, 4):
            cellsok = all(
                labels[cy, cx] != 0
                for cy in (iy - 1, iy)
                for cx in (ix - 1, ix)
            )
            if cellsok:
                expected.add(iy * 5 + ix)
    assert set(act.nodes.tolist()) == expected


def test_subregion_whole_grid_matches_default():
    tl = build_timeline(mini_geometry())
    grid = FineGrid(48)
    a = active_nodes(grid, tl.labels[0])
    b = active_nodes(grid, tl.labels[0], grid.full_rect())
    assert (a.nodes == b.nodes).all()


def test_subregion_edge_is_natural_not_dirichlet():
    grid = FineGrid(4)
    labels = np.full((4, 4), CONTINUUM_1, dtype=np.int8)
    act = active_nodes(grid, labels, (1, 1, 2, 2))
    # all 9 nodes of the subregion node grid are interior to the domain and
    # touch only continuum cells inside the subregion
    assert act.size == 9


def test_mass_diagonal_interior_node():
    grid = FineGrid(2)
    labels = np.full((2, 2), CONTINUUM_1, dtype=np.int8)
    act = active_nodes(grid, labels)
    M = assemble_mass(grid, act, labels)
    h = grid.h
    assert M.shape == (1, 1)
    assert abs(M[0, 0] - 4 * h * h / 9) < 1e-16


def test_mass_row_sums_partition_of_unity():
    grid = FineGrid(6)
    labels = np.full((6, 6), CONTINUUM_1, dtype=np.int8)
    act = active_nodes(grid, labels)
    M = assemble_mass(grid, act, labels)
    h2 = grid.h**2
    rows = np.asarray(M.sum(axis=1)).ravel()
    # fully interior nodes (away from the Dirichlet boundary ring) integrate
    # their hat exactly: sum of row = int N_a = h^2
    interior = [
        i for i, node in enumerate(act.nodes)
        if 2 <= node % 7 <= 4 and 2 <= node // 7 <= 4
    ]
    assert np.allclose(rows[interior], h2, rtol=1e-13)


def test_stiffness_annihilates_constants_and_scales():
    tl = build_timeline(mini_geometry())
    grid = FineGrid(48)
    labels = tl.labels[0]
    act = active_nodes(grid, labels)
    coeff = CoefficientField.build(grid, labels, 1.0, contrast=(1.0, 1.0))
    A = assemble_stiffness(grid, act, labels, coeff)
    ones = np.ones(act.size)
    r = A @ ones
    # rows of nodes all of whose neighbors are active kill constants exactly
    full_interior = []
    for d, node in enumerate(act.nodes):
        ix, iy = node % 49, node // 49
        neigh = [
            (iy + dy) * 49 + (ix + dx)
            for dx in (-1, 0, 1)
            for dy in (-1, 0, 1)
        ]
        if all(act.dense_of_node[m] >= 0 for m in neigh):
            full_interior.append(d)
    assert len(full_interior) > 0
    assert np.max(np.abs(r[full_interior])) < 1e-13
    A2 = assemble_stiffness(
        grid, act, labels, CoefficientField(2.0 * coeff.values)
    )
    assert np.max(np.abs((A2 - 2 * A).data)) == 0.0 if (A2 - 2 * A).nnz else True


def test_stiffness_single_cell_element_matrix():
    grid = FineGrid(3)
    labels = np.zeros((3, 3), dtype=np.int8)
    labels[1, 1] = CONTINUUM_1
    act = active_nodes(grid, labels, (1, 1, 1, 1))
    assert act.size == 4
    coeff = CoefficientField(np.ones((3, 3)))
    A = np.asarray(assemble_stiffness(grid, act, labels, coeff).todense())
    # dense order follows node ids: (1,1),(2,1),(1,2),(2,2) -> local 0,1,3,2
    perm = [0, 1, 3, 2]
    expect = fem.STIFF_LOCAL[np.ix_(perm, perm)]
    assert np.allclose(A, expect, atol=1e-15)


def test_nonpositive_coefficient_rejected():
    grid = FineGrid(2)
    labels = np.full((2, 2), CONTINUUM_1, dtype=np.int8)
    act = active_nodes(grid, labels)
    with pytest.raises(ConfigurationError, match="nonpositive"):
        assemble_stiffness(grid, act, labels, CoefficientField(np.zeros((2, 2))))


def test_load_zero_and_partition_of_unity():
    grid = FineGrid(6)
    labels = np.full((6, 6), CONTINUUM_1, dtype=np.int8)
    act = active_nodes(grid, labels)
    b0 = assemble_load(grid, act, labels, lambda x, y, t: 0.0 * x)
    assert (b0 == 0).all()
    b1 = assemble_load(grid, act, labels, lambda x, y, t: np.ones_like(x))
    interior = [
        i for i, node in enumerate(act.nodes)
        if 2 <= node % 7 <= 4 and 2 <= node // 7 <= 4
    ]
    assert np.allclose(b1[interior], grid.h**2, rtol=1e-13)


def test_load_gaussian_matches_refined_quadrature():
    grid = FineGrid(40)
    n = 40
    labels = np.full((n, n), CONTINUUM_1, dtype=np.int8)
    act = active_nodes(grid, labels)

    def f(x, y, t=0.0):
        return 1e-3 * np.exp(-100.0 * ((x - 0.5) ** 2 + (y - 0.5) ** 2))

    b = assemble_load(grid, act, labels, f)
    # oracle: 8x8 Gauss per cell against symbolically evaluated hats
    pts, wts = gauss_1d(8)
    pts = (pts + 1) / 2
    wts = wts / 2
    h = grid.h
    oracle = np.zeros(act.size)
    for iy in range(n):
        for ix in range(n):
            dense = act.dense_of_node[
                [
                    iy * (n + 1) + ix,
                    iy * (n + 1) + ix + 1,
                    (iy + 1) * (n + 1) + ix + 1,
                    (iy + 1) * (n + 1) + ix,
                ]
            ]
            for xi, wx in zip(pts, wts):
                for eta, wy in zip(pts, wts):
                    val = f((ix + xi) * h, (iy + eta) * h) * wx * wy * h * h
                    N = shape_q1(xi, eta)
                    for a in range(4):
                        if dense[a] >= 0:
                            oracle[dense[a]] += val * N[a]
    rel = np.linalg.norm(b - oracle) / np.linalg.norm(oracle)
    assert rel < 1e-6


def test_accumulation_is_traversal_order_independent(rng):
    size = 30
    m = 400
    rows = rng.integers(0, size, m)
    cols = rng.integers(0, size, m)
    vals = rng.standard_normal(m)
    A = fem._accumulate_sym(rows, cols, vals, size)
    perm = rng.permutation(m)
    B = fem._accumulate_sym(rows[perm], cols[perm], vals[perm], size)
    assert (A != B).nnz == 0
    assert A.data.tobytes() == B.data.tobytes()


def test_assembly_symmetry_and_spd():
    tl = build_timeline(mini_geometry())
    grid = FineGrid(48)
    labels = tl.labels[1]
    act = active_nodes(grid, labels)
    coeff = CoefficientField.build(grid, labels, 1.0)
    M = assemble_mass(grid, act, labels)
    A = assemble_stiffness(grid, act, labels, coeff)
    assert (M - M.T).nnz == 0
    assert (A - A.T).nnz == 0
    rng = np.random.default_rng(7)
    for _ in range(5):
        x = rng.standard_normal(act.size)
        assert x @ (M @ x) > 0
        assert x @ ((M + A) @ x) > 0


def test_solve_spd_trivial_and_dense_oracle(rng):
    A = sp.identity(4, format="csr")
    x = solve_spd(A, np.array([1.0, 2.0, 3.0, 4.0]))
    assert np.allclose(x, [1, 2, 3, 4], atol=1e-14)

    A2 = sp.csr_matrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert np.allclose(solve_spd(A2, np.array([3.0, 3.0])), [1, 1], atol=1e-12)

    B = rng.standard_normal((50, 50))
    A3 = B @ B.T + 50 * np.eye(50)
    rhs = rng.standard_normal(50)
    x3 = solve_spd(sp.csr_matrix(A3), rhs)
    assert np.allclose(x3, np.linalg.solve(A3, rhs), atol=1e-9)


def test_solve_saddle_hand_kkt():
    A = sp.identity(2, format="csr")
    C = sp.csr_matrix(np.array([[1.0, 1.0]]))
    x, lam = solve_saddle(A, C, np.zeros(2), np.array([2.0]))
    assert np.allclose(x, [1.0, 1.0], atol=1e-12)
    assert np.allclose(lam, [-1.0], atol=1e-12)


def test_solve_saddle_pure_constraint():
    A = sp.csr_matrix((2, 2))
    C = sp.identity(2, format="csr")
    x, lam = solve_saddle(A, C, np.zeros(2), np.array([3.0, 4.0]))
    assert np.allclose(x, [3.0, 4.0], atol=1e-12)


def test_solve_saddle_dense_oracle(rng):
    n, m = 30, 4
    B = rng.standard_normal((n, n))
    A = B @ B.T + n * np.eye(n)
    C = rng.standard_normal((m, n))
    rhs = rng.standard_normal(n)
    g = rng.standard_normal(m)
    x, lam = solve_saddle(sp.csr_matrix(A), sp.csr_matrix(C), rhs, g)
    kkt = np.block([[A, C.T], [C, np.zeros((m, m))]])
    ref = np.linalg.solve(kkt, np.concatenate([rhs, g]))
    assert np.allclose(x, ref[:n], atol=1e-9)
    assert np.allclose(lam, ref[n:], atol=1e-9)


def test_solve_saddle_reports_dependent_rows():
    A = sp.identity(3, format="csr")
    C = sp.csr_matrix(np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]))
    with pytest.raises(ConstraintRankError) as err:
        solve_saddle(A, C, np.zeros(3), np.array([1.0, 1.0]))
    assert err.value.dependent_rows


def test_empty_active_set_signalled():
    grid = FineGrid(3)
    labels = np.zeros((3, 3), dtype=np.int8)  # everything excluded
    act = active_nodes(grid, labels)
    assert act.size == 0
    with pytest.raises(ConfigurationError, match="empty"):
        assemble_mass(grid, act, labels)
