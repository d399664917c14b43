"""Constrained space-time local problems on oversampled RVEs.

Every coarse block doubles as an RVE. For block p the local problems live on
the oversampled region R_p^+ (the block padded by a number of coarse layers,
clipped to the domain). Two families of basis functions are computed per
continuum: an averaging basis pinned to unit mean over its own continuum and
zero mean over the other in every sub-block, and a gradient basis (one per
coordinate) pinned to the first moment of the coordinate about the central
block's continuum centroid. Constraints are enforced with Lagrange
multipliers at every discrete time level while the domain shrinks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import fem
from .fem import ActiveSet, CoefficientField, FineGrid, SaddleFactorization
from .fine import TimeGrid
from .geometry import EXCLUDED, N_CONTINUA, DomainTimeline

KIND_AVG = "avg"
KIND_GRAD_X = "gradx"
KIND_GRAD_Y = "grady"
BASIS_KINDS = (KIND_AVG, KIND_GRAD_X, KIND_GRAD_Y)
GRAD_DIRECTION = {KIND_GRAD_X: 0, KIND_GRAD_Y: 1}


@dataclass(frozen=True)
class RveLayout:
    """Coarse partition with per-block oversampled regions and sub-RVEs."""

    n_blocks_side: int
    cells_per_block: int
    layers: int
    n_cells: int

    @property
    def H(self) -> float:
        return 1.0 / self.n_blocks_side

    @property
    def n_blocks(self) -> int:
        return self.n_blocks_side**2

    def block_xy(self, p: int) -> tuple[int, int]:
        return p % self.n_blocks_side, p // self.n_blocks_side

    def block_id(self, bx: int, by: int) -> int:
        return by * self.n_blocks_side + bx

    def block_rect(self, p: int) -> tuple[int, int, int, int]:
        bx, by = self.block_xy(p)
        c = self.cells_per_block
        return (bx * c, by * c, c, c)

    def oversampled_rect(self, p: int) -> tuple[int, int, int, int]:
        """R_p^+ cell rectangle: p padded by ``layers`` blocks, clipped."""
        bx, by = self.block_xy(p)
        nb = self.n_blocks_side
        x0 = max(bx - self.layers, 0)
        y0 = max(by - self.layers, 0)
        x1 = min(bx + self.layers + 1, nb)
        y1 = min(by + self.layers + 1, nb)
        c = self.cells_per_block
        return (x0 * c, y0 * c, (x1 - x0) * c, (y1 - y0) * c)

    def sub_rves(self, p: int) -> list[int]:
        """Block ids of all coarse blocks inside R_p^+."""
        bx, by = self.block_xy(p)
        nb = self.n_blocks_side
        xs = range(max(bx - self.layers, 0), min(bx + self.layers + 1, nb))
        ys = range(max(by - self.layers, 0), min(by + self.layers + 1, nb))
        return [self.block_id(x, y) for y in ys for x in xs]


def build_rve_layout(n_blocks_side: int, layers: int, grid: FineGrid) -> RveLayout:
    if grid.n_cells % n_blocks_side != 0:
        raise fem.ConfigurationError(
            f"coarse size 1/{n_blocks_side} is not a multiple of the fine "
            f"cell size 1/{grid.n_cells}"
        )
    if layers < 0:
        raise fem.ConfigurationError(f"oversampling layers must be >= 0, got {layers}")
    return RveLayout(
        n_blocks_side, grid.n_cells // n_blocks_side, layers, grid.n_cells
    )


@dataclass
class ConstraintSystem:
    """Sub-RVE averaging constraints C phi = g over one active set."""

    rows: list                 # (q, j0) per kept row, j0 zero-based continuum
    C: sp.csr_matrix           # (n_rows, n_active_dofs)
    g: np.ndarray
    kind: str
    continuum: int             # zero-based continuum the targets select
    centers: Optional[np.ndarray] = None   # c_{mj} per continuum (grad kinds)
    dropped: list = field(default_factory=list)  # (q, j0, reason)


def _continuum_cells(labels_k, rect, j0):
    x0, y0, nx, ny = rect
    sub = labels_k[y0 : y0 + ny, x0 : x0 + nx]
    iy, ix = np.nonzero(sub == j0 + 1)
    return ix + x0, iy + y0


def _row_structure(layout: RveLayout, p: int, labels_k, active: ActiveSet):
    """Kept (q, j0) rows of the constraint matrix plus the matrix itself.

    A row integrates the Q1 interpolant against the continuum indicator over
    one sub-RVE: each continuum cell adds h^2/4 to its four corners. Rows for
    empty continua, or with no active degrees of freedom, are dropped.
    """
    grid = active.grid
    h = grid.h
    rows, dropped = [], []
    data_rows = []
    for q in layout.sub_rves(p):
        rect = layout.block_rect(q)
        for j0 in range(N_CONTINUA):
            ix, iy = _continuum_cells(labels_k, rect, j0)
            if len(ix) == 0:
                dropped.append((q, j0, "no cells"))
                continue
            corners = fem_corner_nodes(grid, ix, iy)
            dense = active.dense_of_node[corners].ravel()
            keep = dense >= 0
            if not keep.any():
                dropped.append((q, j0, "no dofs"))
                continue
            vec = np.zeros(active.size)
            np.add.at(vec, dense[keep], h * h / 4.0)
            rows.append((q, j0))
            data_rows.append(vec)
    if not rows:
        raise fem.ConfigurationError(
            f"no continuum has cells with degrees of freedom in the "
            f"oversampled region of block {p}"
        )
    C = sp.csr_matrix(np.vstack(data_rows))
    return rows, C, dropped


def fem_corner_nodes(grid: FineGrid, ix, iy):
    stride = grid.n_cells + 1
    n00 = iy * stride + ix
    return np.stack([n00, n00 + 1, n00 + stride + 1, n00 + stride], axis=1)


def _grad_centers(layout: RveLayout, p: int, labels_k, grid: FineGrid):
    """Continuum centroids over the central block, used to center the
    gradient-basis targets. Falls back to the block center if a continuum has
    vanished from the central block."""
    h = grid.h
    x0, y0, nx, ny = layout.block_rect(p)
    fallback = ((x0 + nx / 2.0) * h, (y0 + ny / 2.0) * h)
    centers = np.empty((N_CONTINUA, 2))
    for j0 in range(N_CONTINUA):
        ix, iy = _continuum_cells(labels_k, layout.block_rect(p), j0)
        if len(ix) == 0:
            centers[j0] = fallback
        else:
            centers[j0] = ((ix + 0.5).mean() * h, (iy + 0.5).mean() * h)
    return centers


def _targets(layout, p, labels_k, grid, rows, kind, i0, centers=None):
    h = grid.h
    g = np.zeros(len(rows))
    for r, (q, j0) in enumerate(rows):
        if j0 != i0:
            continue
        ix, iy = _continuum_cells(labels_k, layout.block_rect(q), j0)
        if kind == KIND_AVG:
            g[r] = len(ix) * h * h
        else:
            m = GRAD_DIRECTION[kind]
            coords = (ix + 0.5) * h if m == 0 else (iy + 0.5) * h
            g[r] = float(np.sum(coords - centers[j0, m]) * h * h)
    return g


def build_constraints(
    layout: RveLayout,
    p: int,
    labels_k: np.ndarray,
    kind: str,
    continuum: int,
    active: Optional[ActiveSet] = None,
) -> ConstraintSystem:
    """Averaging constraints on block p's oversampled region.

    ``continuum`` is 1-based; ``kind`` one of BASIS_KINDS. The active set is
    rebuilt from the labels unless one is supplied.
    """
    grid = FineGrid(labels_k.shape[0])
    if active is None:
        active = fem.active_nodes(grid, labels_k, layout.oversampled_rect(p))
    rows, C, dropped = _row_structure(layout, p, labels_k, active)
    i0 = continuum - 1
    centers = None
    if kind != KIND_AVG:
        centers = _grad_centers(layout, p, labels_k, grid)
    g = _targets(layout, p, labels_k, grid, rows, kind, i0, centers)
    return ConstraintSystem(rows, C, g, kind, i0, centers, dropped)


@dataclass
class BlockBases:
    """All basis time lines for one block: fields[(continuum, kind)][level]."""

    layout: RveLayout
    p: int
    actives: list = field(default_factory=list)
    fields: dict = field(default_factory=dict)       # (i1, kind) -> [dense arrays]
    multipliers: dict = field(default_factory=dict)  # (i1, kind) -> [arrays]
    residuals: list = field(default_factory=list)    # per level,basis records
    dropped: list = field(default_factory=list)      # (level, q, j0, reason)

    def full_field(self, i1: int, kind: str, level: int) -> np.ndarray:
        """Nodal values on the whole grid (zeros off the local active set)."""
        return self.actives[level].scatter(self.fields[(i1, kind)][level])


def solve_block_bases(
    layout: RveLayout,
    p: int,
    timeline: DomainTimeline,
    coeff: CoefficientField,
    time_grid: TimeGrid,
    tol: float = 1e-10,
    kinds: tuple = BASIS_KINDS,
    continua: tuple = (1, 2),
) -> BlockBases:
    """Solve the constrained local problems for one block over all levels.

    At the initial level the steady constrained problem is solved; afterwards
    each backward Euler step restricts the previous basis to the shrunken
    active set and re-enforces the constraints. One KKT factorization per
    geometry frame serves every requested (continuum, kind) pair.
    """
    grid = FineGrid(timeline.n_cells)
    rp_plus = layout.oversampled_rect(p)
    bases = BlockBases(layout, p)
    basis_keys = [(i, kind) for i in continua for kind in kinds]
    for key in basis_keys:
        bases.fields[key] = []
        bases.multipliers[key] = []

    def frame_data(frame, with_mass):
        labels = timeline.labels[frame]
        active = fem.active_nodes(grid, labels, rp_plus)
        A = fem.assemble_stiffness(grid, active, labels, coeff)
        M = fem.assemble_mass(grid, active, labels) if with_mass else None
        rows, C, dropped = _row_structure(layout, p, labels, active)
        centers = _grad_centers(layout, p, labels, grid)
        targets = {}
        for i1, kind in basis_keys:
            targets[(i1, kind)] = _targets(
                layout, p, labels, grid, rows, kind, i1 - 1, centers
            )
        return labels, active, A, M, rows, C, dropped, targets

    def solve_with_context(fact, rhs, g, level, key):
        try:
            return fact.solve(rhs, g)
        except (fem.SolverFailure, fem.ConstraintRankError) as exc:
            raise type(exc)(
                f"block {p}, level {level}, continuum {key[0]}, "
                f"kind {key[1]}: {exc}",
                *([getattr(exc, 'dependent_rows', [])]
                  if isinstance(exc, fem.ConstraintRankError)
                  else [getattr(exc, 'residual', float('nan'))]),
            ) from exc

    # Initial steady solve: stiffness only.
    labels, active, A, _, rows, C, dropped, targets = frame_data(0, False)
    bases.actives.append(active)
    for q, j0, reason in dropped:
        bases.dropped.append((0, q, j0, reason))
    fact = SaddleFactorization(A, C, tol)
    zero_rhs = np.zeros(active.size)
    for key in basis_keys:
        g = targets[key]
        x, lam = solve_with_context(fact, zero_rhs, g, 0, key)
        bases.fields[key].append(x)
        bases.multipliers[key].append(lam)
        _record(bases, 0, key, A, C, x, lam, zero_rhs, g)

    cached_frame = -1
    cache = None
    tau = time_grid.tau
    for level in range(1, time_grid.n_levels + 1):
        frame = time_grid.frame(level)
        if frame != cached_frame:
            labels, active, A, M, rows, C, dropped, targets = frame_data(frame, True)
            sys_matrix = (M / tau + A).tocsr()
            fact = SaddleFactorization(sys_matrix, C, tol)
            cache = (labels, active, A, M, rows, C, dropped, targets, sys_matrix, fact)
            cached_frame = frame
            for q, j0, reason in dropped:
                bases.dropped.append((level, q, j0, reason))
        labels, active, A, M, rows, C, dropped, targets, sys_matrix, fact = cache
        prev_active = bases.actives[-1]
        bases.actives.append(active)
        for key in basis_keys:
            prev_full = prev_active.scatter(bases.fields[key][-1])
            prev = active.restrict_full(prev_full)
            rhs = M @ prev / tau
            g = targets[key]
            x, lam = solve_with_context(fact, rhs, g, level, key)
            bases.fields[key].append(x)
            bases.multipliers[key].append(lam)
            _record(bases, level, key, sys_matrix, C, x, lam, rhs, g)
    return bases


def _record(bases, level, key, A_sys, C, x, lam, rhs, g):
    res_c = float(np.max(np.abs(C @ x - g))) if C.shape[0] else 0.0
    stat = float(
        np.linalg.norm(A_sys @ x + C.T @ lam - rhs) / max(np.linalg.norm(rhs), 1.0)
    )
    bases.residuals.append(
        {
            "block": bases.p,
            "continuum": key[0],
            "kind": key[1],
            "level": level,
            "constraint_inf": res_c,
            "target_inf": float(np.max(np.abs(g))) if len(g) else 0.0,
            "stationarity_rel": stat,
        }
    )


def solve_phi_constant(
    layout, p, continuum, timeline, coeff, time_grid, tol: float = 1e-10
) -> BlockBases:
    """Averaging basis for one continuum on one block (unit own-mean)."""
    return solve_block_bases(
        layout, p, timeline, coeff, time_grid, tol,
        kinds=(KIND_AVG,), continua=(continuum,),
    )


def solve_phi_linear(
    layout, p, continuum, direction, timeline, coeff, time_grid, tol: float = 1e-10
) -> BlockBases:
    """Gradient basis for one continuum and coordinate direction (0=x, 1=y)."""
    kind = KIND_GRAD_X if direction == 0 else KIND_GRAD_Y
    return solve_block_bases(
        layout, p, timeline, coeff, time_grid, tol,
        kinds=(kind,), continua=(continuum,),
    )


def basis_block_norms(
    bases: BlockBases, timeline: DomainTimeline, time_grid: TimeGrid, level: int = 0
) -> dict:
    """Area-normalized (root mean square) value and gradient norms of each
    basis over the central block at one level."""
    layout, p = bases.layout, bases.p
    grid = FineGrid(timeline.n_cells)
    labels = timeline.labels[time_grid.frame(level)]
    x0, y0, nx, ny = layout.block_rect(p)
    sub = labels[y0 : y0 + ny, x0 : x0 + nx]
    iy, ix = np.nonzero(sub != EXCLUDED)
    ix, iy = ix + x0, iy + y0
    area = (nx * grid.h) * (ny * grid.h)
    out = {}
    corners = fem_corner_nodes(grid, ix, iy) if len(ix) else None
    for key, fields in bases.fields.items():
        if corners is None:
            out[key] = (0.0, 0.0)
            continue
        full = bases.actives[level].scatter(fields[level])
        vals = full[corners]
        sq_val = np.einsum("ca,ab,cb->", vals, fem.MASS_LOCAL, vals) * grid.h**2
        sq_grad = np.einsum("ca,ab,cb->", vals, fem.STIFF_LOCAL, vals)
        out[key] = (
            float(np.sqrt(max(sq_val, 0.0) / area)),
            float(np.sqrt(max(sq_grad, 0.0) / area)),
        )
    return out


def scaling_report(
    norms_coarse: dict,
    layout_coarse: RveLayout,
    norms_fine: dict,
    layout_fine: RveLayout,
) -> dict:
    """Compare basis norms between two RVE sizes (coarse H > fine H).

    ``norms_*`` map block id -> {(continuum, kind): (rms_value, rms_gradient)}.
    Reports medians per (continuum, kind), the ratio of medians, and the
    median of per-block ratios where each fine block is paired with the
    coarse block containing its center.
    """
    ratio_blocks = layout_fine.n_blocks_side // layout_coarse.n_blocks_side
    report = {
        "H": (layout_coarse.H, layout_fine.H),
        "entries": {},
    }
    any_block = next(iter(norms_coarse.values()))
    for key in any_block:
        vc = np.array([norms_coarse[p][key][0] for p in sorted(norms_coarse)])
        gc = np.array([norms_coarse[p][key][1] for p in sorted(norms_coarse)])
        vf = np.array([norms_fine[p][key][0] for p in sorted(norms_fine)])
        gf = np.array([norms_fine[p][key][1] for p in sorted(norms_fine)])
        paired = []
        for p in sorted(norms_fine):
            bx, by = layout_fine.block_xy(p)
            parent = layout_coarse.block_id(bx // ratio_blocks, by // ratio_blocks)
            child_v = norms_fine[p][key][0]
            if child_v > 0:
                paired.append(norms_coarse[parent][key][0] / child_v)
        report["entries"][key] = {
            "value_median": (float(np.median(vc)), float(np.median(vf))),
            "grad_median": (float(np.median(gc)), float(np.median(gf))),
            "value_ratio_of_medians": float(np.median(vc) / np.median(vf))
            if np.median(vf) > 0
            else float("nan"),
            "value_median_paired_ratio": float(np.median(paired))
            if paired
            else float("nan"),
            "grad_times_H": (
                float(np.median(gc) * layout_coarse.H),
                float(np.median(gf) * layout_fine.H),
            ),
        }
    return report
