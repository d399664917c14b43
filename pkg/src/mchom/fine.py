"""Fine-scale reference solution: initial L2 projection and backward Euler
stepping with the active node set restricted as the domain shrinks."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import fem
from .fem import ActiveSet, CoefficientField, FineGrid
from .geometry import DomainTimeline


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid over [0, n_frames] with ``substeps`` steps per unit.

    Geometry frames change at integer times only; level l sits at time
    l/substeps and uses frame floor(t) (capped at the last frame).
    """

    n_frames: int
    substeps: int = 1

    @property
    def tau(self) -> float:
        return 1.0 / self.substeps

    @property
    def n_levels(self) -> int:
        return self.n_frames * self.substeps

    def time(self, level: int) -> float:
        return level / self.substeps

    def frame(self, level: int) -> int:
        return min(level // self.substeps, self.n_frames)

    def frame_levels(self) -> list[int]:
        """Levels that land exactly on integer times, frame by frame."""
        return [k * self.substeps for k in range(self.n_frames + 1)]


@dataclass
class FineTrajectory:
    grid: FineGrid
    time_grid: TimeGrid
    actives: list = field(default_factory=list)   # ActiveSet per level
    values: list = field(default_factory=list)    # dense nodal values per level
    dof_counts: list = field(default_factory=list)
    wall_time: float = 0.0

    def full(self, level: int) -> np.ndarray:
        """Nodal values as an (n+1, n+1) grid, zeros off the active set."""
        n = self.grid.n_cells
        return self.actives[level].scatter(self.values[level]).reshape(n + 1, n + 1)


def project_initial(
    grid: FineGrid,
    labels_0: np.ndarray,
    u0: Callable,
    tol: float = 1e-10,
) -> tuple[ActiveSet, np.ndarray]:
    """L2-project u0(x, y) onto the active space of the initial domain."""
    active = fem.active_nodes(grid, labels_0)
    if active.size == 0:
        raise fem.ConfigurationError("initial active set is empty")
    M = fem.assemble_mass(grid, active, labels_0)
    b = fem.assemble_load(grid, active, labels_0, lambda x, y, t: u0(x, y), 0.0)
    return active, fem.solve_spd(M, b, tol)


def step_backward_euler(
    grid: FineGrid,
    active_k: ActiveSet,
    u_k: np.ndarray,
    labels_next: np.ndarray,
    tau: float,
    coeff: CoefficientField,
    f: Callable,
    t_next: float,
    tol: float = 1e-10,
    active_next: Optional[ActiveSet] = None,
) -> tuple[ActiveSet, np.ndarray]:
    """One implicit step onto the (possibly smaller) next active set.

    The previous solution is restricted first: values on dropped nodes are
    discarded and nodes newly on the boundary take the Dirichlet value 0.
    """
    if active_next is None:
        active_next = fem.active_nodes(grid, labels_next)
    full_prev = active_k.scatter(u_k)
    u_prev = active_next.restrict_full(full_prev)
    M = fem.assemble_mass(grid, active_next, labels_next)
    A = fem.assemble_stiffness(grid, active_next, labels_next, coeff)
    b = fem.assemble_load(grid, active_next, labels_next, f, t_next)
    rhs = M @ u_prev / tau + b
    u_next = fem.solve_spd(M / tau + A, rhs, tol)
    return active_next, u_next


def run_fine(
    timeline: DomainTimeline,
    coeff: CoefficientField,
    f: Callable,
    u0: Callable,
    time_grid: TimeGrid,
    tol: float = 1e-10,
) -> FineTrajectory:
    """March the reference solution over all time levels."""
    grid = FineGrid(timeline.n_cells)
    t0 = time.perf_counter()
    traj = FineTrajectory(grid, time_grid)
    active, u = project_initial(grid, timeline.labels[0], u0, tol)
    traj.actives.append(active)
    traj.values.append(u)
    traj.dof_counts.append(active.size)
    for level in range(1, time_grid.n_levels + 1):
        frame = time_grid.frame(level)
        labels = timeline.labels[frame]
        active, u = step_backward_euler(
            grid, active, u, labels, time_grid.tau, coeff, f,
            time_grid.time(level), tol,
        )
        traj.actives.append(active)
        traj.values.append(u)
        traj.dof_counts.append(active.size)
    traj.wall_time = time.perf_counter() - t0
    return traj
