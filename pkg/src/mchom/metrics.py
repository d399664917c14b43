"""Continuum-wise coarse-block-average relative errors between the fine
reference solution and the coarse two-continuum solution."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cells import RveLayout
from .fine import FineTrajectory
from .geometry import N_CONTINUA, DomainTimeline
from .upscale import MacroTrajectory


@dataclass
class ErrorReport:
    """Squared-average error ratios per continuum and frame time.

    ``e2`` is the ratio of summed squared block-average differences to the
    summed squared fine block averages, exactly as tabulated; ``e2_root`` is
    its square root. Blocks where the fine domain no longer meets a continuum
    are skipped in both sums and listed in ``skipped``.
    """

    times: list
    e2: np.ndarray        # (N_CONTINUA, n_frames+1)
    e2_root: np.ndarray
    undefined: list = field(default_factory=list)   # (continuum, frame) pairs
    skipped: list = field(default_factory=list)     # (frame, continuum, block)
    per_block: Optional[dict] = None                # (frame, i1) -> block terms
    fine_dofs: list = field(default_factory=list)
    coarse_dofs: int = 0
    fine_wall_time: float = 0.0
    macro_wall_time: float = 0.0


def block_average_fine(
    u_full: np.ndarray,
    labels_k: np.ndarray,
    layout: RveLayout,
    p: int,
    continuum: int,
) -> Optional[float]:
    """Mean of the fine solution over the continuum's cells in block p.

    Exact for the Q1 interpolant (cell integral = corner mean times area).
    Returns None when the block no longer intersects the continuum.
    """
    x0, y0, nx, ny = layout.block_rect(p)
    sub = labels_k[y0 : y0 + ny, x0 : x0 + nx]
    iy, ix = np.nonzero(sub == continuum)
    if len(ix) == 0:
        return None
    ix, iy = ix + x0, iy + y0
    corners = (
        u_full[iy, ix] + u_full[iy, ix + 1] + u_full[iy + 1, ix] + u_full[iy + 1, ix + 1]
    )
    return float(corners.sum() / (4.0 * len(ix)))


def block_average_macro(U_full: np.ndarray, nb: int, p: int) -> float:
    """Mean of the bilinear coarse field over block p: corner average."""
    bx, by = p % nb, p // nb
    return float(
        (
            U_full[by, bx]
            + U_full[by, bx + 1]
            + U_full[by + 1, bx]
            + U_full[by + 1, bx + 1]
        )
        / 4.0
    )


def relative_errors(
    fine: FineTrajectory,
    macro: MacroTrajectory,
    layout: RveLayout,
    timeline: DomainTimeline,
    keep_per_block: bool = False,
) -> ErrorReport:
    """Error ratios at every integer-time frame of the shared time grid."""
    tg = fine.time_grid
    if macro.time_grid.n_levels != tg.n_levels:
        raise ValueError("fine and coarse trajectories use different time grids")
    nb = layout.n_blocks_side
    frames = tg.frame_levels()
    report = ErrorReport(
        times=[tg.time(l) for l in frames],
        e2=np.zeros((N_CONTINUA, len(frames))),
        e2_root=np.zeros((N_CONTINUA, len(frames))),
        per_block={} if keep_per_block else None,
        fine_dofs=list(fine.dof_counts),
        coarse_dofs=macro.coarse_dofs,
        fine_wall_time=fine.wall_time,
        macro_wall_time=macro.wall_time,
    )
    for fi, level in enumerate(frames):
        frame = tg.frame(level)
        labels = timeline.labels[frame]
        u_full = fine.full(level)
        for i1 in range(1, N_CONTINUA + 1):
            U_full = macro.full(level, i1)
            num = 0.0
            den = 0.0
            terms = []
            for p in range(layout.n_blocks):
                avg_u = block_average_fine(u_full, labels, layout, p, i1)
                if avg_u is None:
                    report.skipped.append((frame, i1, p))
                    continue
                avg_U = block_average_macro(U_full, nb, p)
                num += (avg_U - avg_u) ** 2
                den += avg_u**2
                if keep_per_block:
                    terms.append((p, avg_u, avg_U))
            if keep_per_block:
                report.per_block[(fi, i1)] = terms
            if den == 0.0:
                report.undefined.append((i1, fi))
                report.e2[i1 - 1, fi] = np.nan
                report.e2_root[i1 - 1, fi] = np.nan
            else:
                ratio = num / den
                report.e2[i1 - 1, fi] = ratio
                report.e2_root[i1 - 1, fi] = np.sqrt(ratio)
    return report
