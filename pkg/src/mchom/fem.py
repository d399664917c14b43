"""Q1 finite element infrastructure on the uniform fine grid.

Nodes live at (ix*h, iy*h) with global id iy*(n+1)+ix. Element matrices are
the exact bilinear-quadrilateral integrals on a square cell, in local corner
order (x0,y0), (x0+h,y0), (x0+h,y0+h), (x0,y0+h). Only active nodes carry
degrees of freedom; everything else is homogeneous Dirichlet.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import EXCLUDED, CONTINUUM_1, CONTINUUM_2


class SolverFailure(RuntimeError):
    """Linear solve did not reach the requested residual."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class ConstraintRankError(ValueError):
    """Constraint matrix has linearly dependent rows."""

    def __init__(self, message: str, dependent_rows):
        super().__init__(message)
        self.dependent_rows = list(dependent_rows)


class ConfigurationError(ValueError):
    pass


# Exact element integrals on a square cell (h-scaling applied at assembly).
MASS_LOCAL = np.array(
    [[4, 2, 1, 2], [2, 4, 2, 1], [1, 2, 4, 2], [2, 1, 2, 4]], dtype=float
) / 36.0
STIFF_LOCAL = np.array(
    [[4, -1, -2, -1], [-1, 4, -1, -2], [-2, -1, 4, -1], [-1, -2, -1, 4]], dtype=float
) / 6.0

# Directional gradient products: GRAD_LOCAL[m][n][a,b] = int d_m N_a d_n N_b
# (scale-invariant in 2D). Cross blocks are rank one.
_GX = np.array(
    [
        [1 / 3, -1 / 3, -1 / 6, 1 / 6],
        [-1 / 3, 1 / 3, 1 / 6, -1 / 6],
        [-1 / 6, 1 / 6, 1 / 3, -1 / 3],
        [1 / 6, -1 / 6, -1 / 3, 1 / 3],
    ]
)
_GY = np.array(
    [
        [1 / 3, 1 / 6, -1 / 6, -1 / 3],
        [1 / 6, 1 / 3, -1 / 3, -1 / 6],
        [-1 / 6, -1 / 3, 1 / 3, 1 / 6],
        [-1 / 3, -1 / 6, 1 / 6, 1 / 3],
    ]
)
_FX = np.array([-0.5, 0.5, 0.5, -0.5])  # int d_x N_a
_FY = np.array([-0.5, -0.5, 0.5, 0.5])  # int d_y N_a
GRAD_LOCAL = [[_GX, np.outer(_FX, _FY)], [np.outer(_FY, _FX), _GY]]

# Tensor Gauss rule on the reference square for integrals of analytic data
# against Q1 hats (4x4: keeps the sharp Gaussian forcing accurate to ~1e-7
# relative on the grids used here). Weights sum to one.
_P1, _W1 = np.polynomial.legendre.leggauss(4)
_P1 = (_P1 + 1.0) / 2.0
_W1 = _W1 / 2.0
GAUSS_PTS = np.array([(x, y) for y in _P1 for x in _P1])
GAUSS_WTS = np.array([wx * wy for wy in _W1 for wx in _W1])
N_GAUSS = len(GAUSS_WTS)
GAUSS_SHAPE = np.array(
    [
        [(1 - x) * (1 - y), x * (1 - y), x * y, (1 - x) * y]
        for x, y in GAUSS_PTS
    ]
)


@dataclass(frozen=True)
class FineGrid:
    n_cells: int

    @property
    def h(self) -> float:
        return 1.0 / self.n_cells

    @property
    def n_nodes(self) -> int:
        return (self.n_cells + 1) ** 2

    def full_rect(self) -> tuple[int, int, int, int]:
        return (0, 0, self.n_cells, self.n_cells)


@dataclass
class ActiveSet:
    """Active (non-Dirichlet) nodes at one time level, with dense index maps."""

    grid: FineGrid
    level: int
    mask: np.ndarray            # bool over all (n+1)^2 nodes
    dense_of_node: np.ndarray   # node id -> dense index or -1
    nodes: np.ndarray           # dense index -> node id
    subregion: Optional[tuple[int, int, int, int]] = None

    @property
    def size(self) -> int:
        return len(self.nodes)

    def restrict_full(self, full_values: np.ndarray) -> np.ndarray:
        """Gather a full nodal array onto the active dense ordering."""
        return full_values[self.nodes]

    def scatter(self, dense_values: np.ndarray) -> np.ndarray:
        """Spread dense active values into a full nodal array (zeros elsewhere)."""
        full = np.zeros(self.grid.n_nodes)
        full[self.nodes] = dense_values
        return full


def active_nodes(grid: FineGrid, labels_k: np.ndarray, subregion=None) -> ActiveSet:
    """Active-node mask for one label field, optionally within a cell rectangle.

    A node is active when every incident cell inside the (sub)region is
    non-excluded, it has at least one such cell, and it does not lie on the
    outer domain boundary. Cells outside the subregion are ignored, which
    leaves the subregion's artificial edge natural rather than Dirichlet.
    """
    n = grid.n_cells
    if subregion is None:
        subregion = grid.full_rect()
    x0, y0, nx, ny = subregion
    if not (0 <= x0 and 0 <= y0 and nx >= 1 and ny >= 1
            and x0 + nx <= n and y0 + ny <= n):
        raise ConfigurationError(f"subregion {subregion} outside the grid")

    ok = labels_k[y0 : y0 + ny, x0 : x0 + nx] != EXCLUDED
    # Node grid of the subregion is (ny+1) x (nx+1); pad incidence so cells
    # outside the subregion count as "no constraint" for all() and "absent"
    # for any().
    pad_all = np.pad(ok, 1, constant_values=True)
    pad_any = np.pad(ok, 1, constant_values=False)
    all_ok = (
        pad_all[:-1, :-1] & pad_all[:-1, 1:] & pad_all[1:, :-1] & pad_all[1:, 1:]
    )
    any_in = (
        pad_any[:-1, :-1] | pad_any[:-1, 1:] | pad_any[1:, :-1] | pad_any[1:, 1:]
    )
    local = all_ok & any_in

    mask = np.zeros((n + 1, n + 1), dtype=bool)
    mask[y0 : y0 + ny + 1, x0 : x0 + nx + 1] = local
    mask[0, :] = mask[-1, :] = False
    mask[:, 0] = mask[:, -1] = False

    flat = mask.ravel()
    nodes = np.flatnonzero(flat)
    dense = np.full(grid.n_nodes, -1, dtype=np.int64)
    dense[nodes] = np.arange(len(nodes))
    return ActiveSet(grid, 0, flat, dense, nodes, subregion)


@dataclass
class CoefficientField:
    """Per-cell diffusion values kappa1(label) * kappa2(cell center)."""

    values: np.ndarray  # (n, n) [iy, ix]

    @classmethod
    def build(
        cls,
        grid: FineGrid,
        labels_0: np.ndarray,
        kappa2: Callable | float = 1.0,
        contrast: tuple[float, float] = (1.0, 1e-2),
    ) -> "CoefficientField":
        n = grid.n_cells
        k1 = np.zeros((n, n))
        k1[labels_0 == CONTINUUM_1] = contrast[0]
        k1[labels_0 == CONTINUUM_2] = contrast[1]
        if callable(kappa2):
            centers = (np.arange(n) + 0.5) * grid.h
            xc, yc = np.meshgrid(centers, centers)  # [iy, ix]
            k2 = np.asarray(kappa2(xc, yc), dtype=float)
            k2 = np.broadcast_to(k2, (n, n))
        else:
            k2 = np.full((n, n), float(kappa2))
        return cls(k1 * k2)


def _cell_corner_dense(grid, active, labels_k):
    """Dense corner indices (ncell, 4) for non-excluded cells of the subregion.

    Also returns cell (ix, iy) index arrays. Corners follow the local element
    ordering; inactive corners get -1.
    """
    x0, y0, nx, ny = active.subregion or grid.full_rect()
    sub = labels_k[y0 : y0 + ny, x0 : x0 + nx]
    iy, ix = np.nonzero(sub != EXCLUDED)
    ix = ix + x0
    iy = iy + y0
    stride = grid.n_cells + 1
    n00 = iy * stride + ix
    corners = np.stack([n00, n00 + 1, n00 + stride + 1, n00 + stride], axis=1)
    return active.dense_of_node[corners], ix, iy


def _accumulate_sym(rows, cols, vals, size) -> sp.csr_matrix:
    """Order-independent COO accumulation: entries are sorted by (row, col,
    value) before summation, so identical entry sets sum bit-identically
    regardless of traversal order."""
    order = np.lexsort((vals, cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    key = rows * size + cols
    first = np.ones(len(key), dtype=bool)
    first[1:] = key[1:] != key[:-1]
    starts = np.flatnonzero(first)
    sums = np.add.reduceat(vals, starts) if len(vals) else vals
    mat = sp.csr_matrix(
        (sums, (rows[starts], cols[starts])), shape=(size, size)
    )
    return mat


def _assemble_bilinear(grid, active, labels_k, local_4x4, cell_scale) -> sp.csr_matrix:
    """Sum cell_scale[c] * local_4x4 over non-excluded cells into CSR."""
    dense, ix, iy = _cell_corner_dense(grid, active, labels_k)
    if len(ix) == 0:
        return sp.csr_matrix((active.size, active.size))
    scale = np.broadcast_to(np.asarray(cell_scale, dtype=float), (len(ix),))
    rows, cols, vals = [], [], []
    for a in range(4):
        for b in range(4):
            if local_4x4[a, b] == 0.0:
                continue
            r = dense[:, a]
            c = dense[:, b]
            keep = (r >= 0) & (c >= 0)
            rows.append(r[keep])
            cols.append(c[keep])
            vals.append(scale[keep] * local_4x4[a, b])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return _accumulate_sym(rows, cols, vals, active.size)


def assemble_mass(grid: FineGrid, active: ActiveSet, labels_k) -> sp.csr_matrix:
    if active.size == 0:
        raise ConfigurationError("empty active set")
    return _assemble_bilinear(grid, active, labels_k, MASS_LOCAL, grid.h**2)


def assemble_stiffness(
    grid: FineGrid, active: ActiveSet, labels_k, coeff: CoefficientField
) -> sp.csr_matrix:
    if active.size == 0:
        raise ConfigurationError("empty active set")
    dense, ix, iy = _cell_corner_dense(grid, active, labels_k)
    kappa = coeff.values[iy, ix] if len(ix) else np.zeros(0)
    if np.any(kappa <= 0.0):
        bad = np.flatnonzero(kappa <= 0.0)[0]
        raise ConfigurationError(
            f"nonpositive diffusion {kappa[bad]} on active cell "
            f"({ix[bad]}, {iy[bad]})"
        )
    return _assemble_bilinear(grid, active, labels_k, STIFF_LOCAL, kappa)


def assemble_load(
    grid: FineGrid, active: ActiveSet, labels_k, fn: Callable, t: float = 0.0
) -> np.ndarray:
    """Right-hand side entries int fn * N_a by tensor Gauss per cell.

    ``fn`` is called as fn(x, y, t) on arrays.
    """
    b = np.zeros(active.size)
    dense, ix, iy = _cell_corner_dense(grid, active, labels_k)
    if len(ix) == 0:
        return b
    h = grid.h
    for gp in range(N_GAUSS):
        xg = (ix + GAUSS_PTS[gp, 0]) * h
        yg = (iy + GAUSS_PTS[gp, 1]) * h
        fv = h * h * GAUSS_WTS[gp] * np.asarray(fn(xg, yg, t), dtype=float)
        fv = np.broadcast_to(fv, ix.shape)
        for a in range(4):
            d = dense[:, a]
            keep = d >= 0
            np.add.at(b, d[keep], fv[keep] * GAUSS_SHAPE[gp, a])
    return b


def solve_spd(A: sp.spmatrix, rhs: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Direct sparse solve with a residual guarantee ||Ax-rhs|| <= tol*||rhs||."""
    if A.shape[0] == 0:
        return np.zeros(0)
    rhs = np.asarray(rhs, dtype=float)
    lu = spla.splu(A.tocsc())
    x = lu.solve(rhs)
    nrhs = np.linalg.norm(rhs)
    if nrhs == 0.0:
        return np.zeros_like(rhs)
    res = np.linalg.norm(A @ x - rhs)
    if res > tol * nrhs:
        x = x + lu.solve(rhs - A @ x)  # one refinement step
        res = np.linalg.norm(A @ x - rhs)
    if not np.isfinite(res) or res > tol * nrhs:
        raise SolverFailure(
            f"SPD solve stalled at relative residual {res / nrhs:.3e}", res / nrhs
        )
    return x


def _diagnose_rank(C: sp.spmatrix):
    import scipy.linalg

    Cd = np.asarray(C.todense())
    _, _, piv = scipy.linalg.qr(Cd.T, mode="economic", pivoting=True)
    r = np.linalg.matrix_rank(Cd)
    return sorted(piv[r:].tolist())


def solve_saddle(
    A: sp.spmatrix,
    C: sp.spmatrix,
    rhs: np.ndarray,
    g: np.ndarray,
    tol: float = 1e-10,
):
    """Solve [[A, C^T], [C, 0]] [x, lam] = [rhs, g] by sparse factorization.

    A must be symmetric positive semidefinite on ker(C) and C full row rank
    (zero rows are expected to be filtered upstream). Returns (x, lam).
    """
    m, ndof = C.shape
    rhs = np.asarray(rhs, dtype=float)
    g = np.asarray(g, dtype=float)
    kkt = sp.bmat([[A, C.T], [C, None]], format="csc")
    full_rhs = np.concatenate([rhs, g])
    try:
        lu = spla.splu(kkt)
        sol = lu.solve(full_rhs)
        sol = sol + lu.solve(full_rhs - kkt @ sol)
    except RuntimeError as exc:  # singular factorization
        dep = _diagnose_rank(C)
        if dep:
            raise ConstraintRankError(
                f"constraint matrix rank-deficient; dependent rows {dep}", dep
            ) from exc
        raise SolverFailure(f"saddle factorization failed: {exc}") from exc
    x, lam = sol[:ndof], sol[ndof:]
    r1 = np.linalg.norm(A @ x + C.T @ lam - rhs)
    r2 = np.linalg.norm(C @ x - g)
    b1 = tol * max(np.linalg.norm(rhs), 1.0)
    b2 = tol * max(np.linalg.norm(g), 1.0)
    if not (np.isfinite(r1) and np.isfinite(r2)) or r1 > b1 or r2 > b2:
        dep = _diagnose_rank(C)
        if dep:
            raise ConstraintRankError(
                f"constraint matrix rank-deficient; dependent rows {dep}", dep
            )
        raise SolverFailure(
            f"saddle solve residuals {r1:.3e}, {r2:.3e} exceed tolerance",
            max(r1, r2),
        )
    return x, lam


class SaddleFactorization:
    """Reusable factorization of one KKT system for many right-hand sides."""

    def __init__(self, A: sp.spmatrix, C: sp.spmatrix, tol: float = 1e-10):
        self.A = A.tocsr()
        self.C = C.tocsr()
        self.tol = tol
        self.ndof = A.shape[0]
        self.kkt = sp.bmat([[A, C.T], [C, None]], format="csc")
        try:
            self.lu = spla.splu(self.kkt)
        except RuntimeError as exc:
            dep = _diagnose_rank(C)
            if dep:
                raise ConstraintRankError(
                    f"constraint matrix rank-deficient; dependent rows {dep}", dep
                ) from exc
            raise SolverFailure(f"saddle factorization failed: {exc}") from exc

    def solve(self, rhs: np.ndarray, g: np.ndarray):
        full = np.concatenate([rhs, g])
        sol = self.lu.solve(full)
        sol = sol + self.lu.solve(full - self.kkt @ sol)
        x, lam = sol[: self.ndof], sol[self.ndof :]
        r1 = np.linalg.norm(self.A @ x + self.C.T @ lam - rhs)
        r2 = np.linalg.norm(self.C @ x - g)
        if not (np.isfinite(r1) and np.isfinite(r2)) or (
            r1 > self.tol * max(np.linalg.norm(rhs), 1.0)
            or r2 > self.tol * max(np.linalg.norm(g), 1.0)
        ):
            dep = _diagnose_rank(self.C)
            if dep:
                raise ConstraintRankError(
                    f"constraint matrix rank-deficient; dependent rows {dep}", dep
                )
            raise SolverFailure(
                f"saddle solve residuals {r1:.3e}, {r2:.3e} exceed tolerance",
                max(r1, r2),
            )
        return x, lam


def dump_matrix(A: sp.spmatrix, path) -> None:
    """Debug dump in (row, col, value) text form."""
    coo = A.tocoo()
    with open(path, "w") as fh:
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {v!r}\n")
