"""Effective coefficient extraction over central RVEs and the coupled
two-continuum coarse solver on the unperforated domain."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import fem
from .cells import (
    BASIS_KINDS,
    KIND_AVG,
    KIND_GRAD_X,
    KIND_GRAD_Y,
    BlockBases,
    RveLayout,
    fem_corner_nodes,
)
from .fem import CoefficientField, FineGrid
from .fine import TimeGrid
from .geometry import EXCLUDED, N_CONTINUA, DomainTimeline

GRAD_KINDS = (KIND_GRAD_X, KIND_GRAD_Y)


@dataclass
class BlockCoefficients:
    """Effective coefficients of one block at one time level.

    mass[j, i] and reaction[j, i] couple the averaging bases; diffusion and
    grad_mass are [j, i, m, n] over continua and directions; source[j] tests
    the forcing against the averaging basis. weight is |K_p^eps| / |R_p|,
    identically 1 since every block is its own RVE, kept explicit.
    """

    p: int
    level: int
    mass: np.ndarray
    reaction: np.ndarray
    diffusion: np.ndarray
    source: np.ndarray
    grad_mass: Optional[np.ndarray] = None
    init_source: Optional[np.ndarray] = None
    flags: tuple = ()
    weight: float = 1.0


def effective_coefficients(
    bases: BlockBases,
    labels_k: np.ndarray,
    coeff: CoefficientField,
    f: Callable,
    u0: Optional[Callable],
    layout: RveLayout,
    level: int,
    t: float,
) -> BlockCoefficients:
    """Integrate basis products over the central block at one level.

    All integrals run over non-excluded cells of R_p only, with exact Q1
    cellwise products; the forcing uses 2x2 Gauss points. Coefficients of a
    continuum with no cells left in the block are zeroed and flagged.
    Initial-level extras (grad_mass, init_source) are present iff level == 0.
    """
    p = bases.p
    grid = FineGrid(labels_k.shape[0])
    h = grid.h
    x0, y0, nx, ny = layout.block_rect(p)
    sub = labels_k[y0 : y0 + ny, x0 : x0 + nx]
    iy, ix = np.nonzero(sub != EXCLUDED)
    ix, iy = ix + x0, iy + y0

    flags = tuple(
        i + 1 for i in range(N_CONTINUA) if not np.any(sub == i + 1)
    )

    mass = np.zeros((N_CONTINUA, N_CONTINUA))
    reaction = np.zeros((N_CONTINUA, N_CONTINUA))
    diffusion = np.zeros((N_CONTINUA, N_CONTINUA, 2, 2))
    source = np.zeros(N_CONTINUA)
    grad_mass = np.zeros((N_CONTINUA, N_CONTINUA, 2, 2)) if level == 0 else None
    init_source = np.zeros(N_CONTINUA) if level == 0 else None

    if len(ix) == 0:
        return BlockCoefficients(
            p, level, mass, reaction, diffusion, source, grad_mass, init_source,
            flags,
        )

    corners = fem_corner_nodes(grid, ix, iy)
    kappa = coeff.values[iy, ix]

    def corner_values(i1, kind):
        if (i1, kind) not in bases.fields:
            return np.zeros(corners.shape)
        return bases.full_field(i1, kind, level)[corners]

    avg = [corner_values(i + 1, KIND_AVG) for i in range(N_CONTINUA)]
    grads = [
        [corner_values(i + 1, kind) for kind in GRAD_KINDS]
        for i in range(N_CONTINUA)
    ]

    def mass_form(va, vb):
        return float(np.einsum("ca,ab,cb->", va, fem.MASS_LOCAL, vb)) * h * h

    def stiff_form(va, vb):
        return float(np.einsum("c,ca,ab,cb->", kappa, va, fem.STIFF_LOCAL, vb))

    # One quadrature path per unordered pair keeps the symmetries exact.
    for i in range(N_CONTINUA):
        for j in range(i, N_CONTINUA):
            mass[j, i] = mass[i, j] = mass_form(avg[i], avg[j])
            reaction[j, i] = reaction[i, j] = stiff_form(avg[i], avg[j])
    pairs = [(i, m) for i in range(N_CONTINUA) for m in range(2)]
    for a, (i, m) in enumerate(pairs):
        for i2, m2 in pairs[a:]:
            v = stiff_form(grads[i][m], grads[i2][m2])
            diffusion[i2, i, m, m2] = v
            diffusion[i, i2, m2, m] = v
            if grad_mass is not None:
                w = mass_form(grads[i][m], grads[i2][m2])
                grad_mass[i2, i, m, m2] = w
                grad_mass[i, i2, m2, m] = w

    fvals = []
    u0vals = []
    for gp in range(fem.N_GAUSS):
        w = h * h * fem.GAUSS_WTS[gp]
        xg = (ix + fem.GAUSS_PTS[gp, 0]) * h
        yg = (iy + fem.GAUSS_PTS[gp, 1]) * h
        fvals.append(w * np.broadcast_to(np.asarray(f(xg, yg, t), float), ix.shape))
        if init_source is not None and u0 is not None:
            u0vals.append(w * np.broadcast_to(np.asarray(u0(xg, yg), float), ix.shape))
    for j in range(N_CONTINUA):
        acc = 0.0
        acc0 = 0.0
        for gp in range(fem.N_GAUSS):
            shape_vals = avg[j] @ fem.GAUSS_SHAPE[gp]
            acc += float(fvals[gp] @ shape_vals)
            if u0vals:
                acc0 += float(u0vals[gp] @ shape_vals)
        source[j] = acc
        if init_source is not None:
            init_source[j] = acc0

    for i1 in flags:
        i = i1 - 1
        mass[i, :] = mass[:, i] = 0.0
        reaction[i, :] = reaction[:, i] = 0.0
        diffusion[i, :, :, :] = diffusion[:, i, :, :] = 0.0
        source[i] = 0.0
        if grad_mass is not None:
            grad_mass[i, :, :, :] = grad_mass[:, i, :, :] = 0.0
            init_source[i] = 0.0

    return BlockCoefficients(
        p, level, mass, reaction, diffusion, source, grad_mass, init_source, flags
    )


@dataclass
class CoefficientSet:
    """Coefficient arrays for all blocks and levels of one coarse layout."""

    n_blocks_side: int
    n_levels: int
    mass: np.ndarray        # (n_blocks, n_levels+1, 2, 2)
    reaction: np.ndarray
    diffusion: np.ndarray   # (n_blocks, n_levels+1, 2, 2, 2, 2)
    source: np.ndarray      # (n_blocks, n_levels+1, 2)
    grad_mass: np.ndarray   # (n_blocks, 2, 2, 2, 2)
    init_source: np.ndarray  # (n_blocks, 2)
    flags: np.ndarray       # (n_blocks, n_levels+1, 2) bool
    norms: dict = field(default_factory=dict)  # block -> {(i1,kind): (val, grad)}
    residual_max: float = 0.0
    wall_time: float = 0.0

    @classmethod
    def empty(cls, n_blocks_side: int, n_levels: int) -> "CoefficientSet":
        nb = n_blocks_side**2
        L = n_levels + 1
        return cls(
            n_blocks_side,
            n_levels,
            np.zeros((nb, L, 2, 2)),
            np.zeros((nb, L, 2, 2)),
            np.zeros((nb, L, 2, 2, 2, 2)),
            np.zeros((nb, L, 2)),
            np.zeros((nb, 2, 2, 2, 2)),
            np.zeros((nb, 2)),
            np.zeros((nb, L, 2), dtype=bool),
        )

    def insert(self, bc: BlockCoefficients) -> None:
        p, k = bc.p, bc.level
        self.mass[p, k] = bc.mass
        self.reaction[p, k] = bc.reaction
        self.diffusion[p, k] = bc.diffusion
        self.source[p, k] = bc.source
        for i1 in bc.flags:
            self.flags[p, k, i1 - 1] = True
        if bc.level == 0 and bc.grad_mass is not None:
            self.grad_mass[p] = bc.grad_mass
            self.init_source[p] = bc.init_source

    def save(self, path) -> None:
        np.savez_compressed(
            path,
            n_blocks_side=self.n_blocks_side,
            n_levels=self.n_levels,
            mass=self.mass,
            reaction=self.reaction,
            diffusion=self.diffusion,
            source=self.source,
            grad_mass=self.grad_mass,
            init_source=self.init_source,
            flags=self.flags,
            residual_max=self.residual_max,
        )

    @classmethod
    def load(cls, path) -> "CoefficientSet":
        z = np.load(path)
        out = cls(
            int(z["n_blocks_side"]),
            int(z["n_levels"]),
            z["mass"],
            z["reaction"],
            z["diffusion"],
            z["source"],
            z["grad_mass"],
            z["init_source"],
            z["flags"],
        )
        out.residual_max = float(z["residual_max"])
        return out


@dataclass
class MacroTrajectory:
    """Coarse nodal values per level, values[level][continuum] on the full
    (nb+1)^2 node grid with zero Dirichlet boundary."""

    n_blocks_side: int
    time_grid: TimeGrid
    values: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def coarse_dofs(self) -> int:
        return 2 * (self.n_blocks_side - 1) ** 2

    def full(self, level: int, continuum: int) -> np.ndarray:
        nb = self.n_blocks_side
        return self.values[level][continuum - 1].reshape(nb + 1, nb + 1)


def _interior_maps(nb: int):
    nodes = np.arange((nb + 1) ** 2).reshape(nb + 1, nb + 1)
    interior = nodes[1:-1, 1:-1].ravel()
    dense = np.full((nb + 1) ** 2, -1, dtype=np.int64)
    dense[interior] = np.arange(len(interior))
    return interior, dense


def _block_corner_nodes(nb: int, p: int):
    bx, by = p % nb, p // nb
    n00 = by * (nb + 1) + bx
    return np.array([n00, n00 + 1, n00 + nb + 2, n00 + nb + 1])


def assemble_macro_operator(
    coeffs: CoefficientSet, level: int, use_grad_mass_diffusion: bool = False
):
    """Coarse bilinear forms at one level as sparse matrices over interior
    continuum-blocked unknowns, plus the load vector.

    Coefficients act as densities (divided by the block area) against exact
    coarse Q1 element integrals; the diffusion term contracts the directional
    tensor with the per-direction gradient products. When
    ``use_grad_mass_diffusion`` is set the gradient-mass tensor (initial
    condition equation) replaces the diffusion tensor.
    """
    nb = coeffs.n_blocks_side
    H = 1.0 / nb
    area = H * H
    interior, dense = _interior_maps(nb)
    n_int = len(interior)
    size = 2 * n_int

    mass_rows, mass_cols, mass_vals = [], [], []
    stiff_rows, stiff_cols, stiff_vals = [], [], []
    react_rows, react_cols, react_vals = [], [], []
    load = np.zeros(size)

    mass_local = fem.MASS_LOCAL * area
    grad_stack = np.array(fem.GRAD_LOCAL)  # [m, n, a, b]

    for p in range(nb * nb):
        corners = _block_corner_nodes(nb, p)
        d = dense[corners]
        keep = d >= 0
        if not keep.any():
            continue
        for j in range(N_CONTINUA):
            for i in range(N_CONTINUA):
                mji = coeffs.mass[p, level, j, i] / area
                rji = coeffs.reaction[p, level, j, i] / area
                if use_grad_mass_diffusion:
                    a_mn = coeffs.grad_mass[p, j, i] / area
                else:
                    a_mn = coeffs.diffusion[p, level, j, i] / area
                # entry (a,b) = sum_mn a[m,n] int d_n N_a d_m N_b
                local_stiff = np.einsum("mn,nmab->ab", a_mn, grad_stack)
                for a in range(4):
                    if not keep[a]:
                        continue
                    row = j * n_int + d[a]
                    for b in range(4):
                        if not keep[b]:
                            continue
                        col = i * n_int + d[b]
                        if mji != 0.0:
                            mass_rows.append(row)
                            mass_cols.append(col)
                            mass_vals.append(mji * mass_local[a, b])
                            react_rows.append(row)
                            react_cols.append(col)
                            react_vals.append(rji * mass_local[a, b])
                        v = local_stiff[a, b]
                        if v != 0.0:
                            stiff_rows.append(row)
                            stiff_cols.append(col)
                            stiff_vals.append(v)
        for j in range(N_CONTINUA):
            bj = coeffs.source[p, level, j] / 4.0
            for a in range(4):
                if keep[a]:
                    load[j * n_int + d[a]] += bj

    def build(rows, cols, vals):
        if not rows:
            return sp.csr_matrix((size, size))
        return fem._accumulate_sym(
            np.asarray(rows), np.asarray(cols), np.asarray(vals, float), size
        )

    return {
        "mass": build(mass_rows, mass_cols, mass_vals),
        "reaction": build(react_rows, react_cols, react_vals),
        "diffusion": build(stiff_rows, stiff_cols, stiff_vals),
        "load": load,
        "n_interior": n_int,
    }


def _to_full(nb: int, vec: np.ndarray) -> np.ndarray:
    interior, _ = _interior_maps(nb)
    n_int = len(interior)
    out = np.zeros((N_CONTINUA, (nb + 1) ** 2))
    for i in range(N_CONTINUA):
        out[i, interior] = vec[i * n_int : (i + 1) * n_int]
    return out


def _from_full(nb: int, full: np.ndarray) -> np.ndarray:
    interior, _ = _interior_maps(nb)
    return np.concatenate([full[i, interior] for i in range(N_CONTINUA)])


def solve_macro_initial(
    coeffs: CoefficientSet, use_grad_mass: bool = True, tol: float = 1e-10
) -> np.ndarray:
    """Initial coarse field from the elliptic averaging equation."""
    nb = coeffs.n_blocks_side
    ops = assemble_macro_operator(coeffs, 0, use_grad_mass_diffusion=use_grad_mass)
    n_int = ops["n_interior"]
    _, dense = _interior_maps(nb)
    load = np.zeros(2 * n_int)
    for p in range(nb * nb):
        d = dense[_block_corner_nodes(nb, p)]
        for j in range(N_CONTINUA):
            bj = coeffs.init_source[p, j] / 4.0
            for a in range(4):
                if d[a] >= 0:
                    load[j * n_int + d[a]] += bj
    system = ops["mass"] + ops["diffusion"] if use_grad_mass else ops["mass"]
    x = fem.solve_spd(sp.csr_matrix(system), load, tol)
    return _to_full(nb, x)


def step_macro(
    U_k: np.ndarray,
    coeffs: CoefficientSet,
    level: int,
    tau: float,
    tol: float = 1e-10,
) -> np.ndarray:
    """One backward Euler step of the coupled coarse system onto ``level``."""
    nb = coeffs.n_blocks_side
    ops = assemble_macro_operator(coeffs, level)
    u_prev = _from_full(nb, U_k)
    lhs = (ops["mass"] / tau + ops["diffusion"] + ops["reaction"]).tocsr()
    rhs = ops["mass"] @ u_prev / tau + ops["load"]
    x = fem.solve_spd(lhs, rhs, tol)
    return _to_full(nb, x)


def run_macro(
    coeffs: CoefficientSet,
    time_grid: TimeGrid,
    use_grad_mass: bool = True,
    tol: float = 1e-10,
) -> MacroTrajectory:
    """Initial solve plus implicit stepping over every time level."""
    import time as _time

    t0 = _time.perf_counter()
    nb = coeffs.n_blocks_side
    traj = MacroTrajectory(nb, time_grid)
    U = solve_macro_initial(coeffs, use_grad_mass, tol)
    traj.values.append(U)
    for level in range(1, time_grid.n_levels + 1):
        U = step_macro(U, coeffs, level, time_grid.tau, tol)
        traj.values.append(U)
    traj.wall_time = _time.perf_counter() - t0
    return traj
