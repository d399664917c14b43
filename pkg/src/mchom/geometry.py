"""Channel-lattice generation and prescribed shrinkage on a uniform fine grid.

The computational domain is the unit square split into ``n_cells`` x
``n_cells`` fine cells. Each cell carries a label: 0 (excluded solid
matrix), 1 (first continuum, thick channels) or 2 (second continuum, thin
channels). Channels are axis-aligned bands; at every time step each band
loses ``shrink_rate`` cells of width, removed from both walls as evenly as
possible with the extra cell taken from the low-index side.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EXCLUDED = 0
CONTINUUM_1 = 1
CONTINUUM_2 = 2
N_CONTINUA = 2

HORIZONTAL = "horizontal"
VERTICAL = "vertical"


class GeometryError(ValueError):
    """Raised for channel configurations that cannot produce a valid domain."""


@dataclass(frozen=True)
class Channel:
    """One axis-aligned channel band.

    ``center`` is a cell index along the transverse direction; the band
    covers cells [center - width//2, center - width//2 + width).
    """

    orientation: str
    center: int
    width: int

    def interval(self, reduction: int = 0) -> tuple[int, int]:
        """Covered cell range [lo, hi) after losing ``reduction`` cells."""
        lo = self.center - self.width // 2
        hi = lo + self.width
        return lo + (reduction + 1) // 2, hi - reduction // 2


@dataclass(frozen=True)
class GeometryConfig:
    n_cells: int
    thick_channels: tuple[Channel, ...] = ()
    thin_channels: tuple[Channel, ...] = ()
    shrink_rate: tuple[int, int] = (3, 1)
    n_steps: int = 3

    def __post_init__(self):
        object.__setattr__(self, "thick_channels", tuple(self.thick_channels))
        object.__setattr__(self, "thin_channels", tuple(self.thin_channels))

    def validate(self) -> None:
        if self.n_cells < 1:
            raise GeometryError(f"n_cells must be positive, got {self.n_cells}")
        if self.n_steps < 0:
            raise GeometryError(f"n_steps must be >= 0, got {self.n_steps}")
        if any(r < 0 for r in self.shrink_rate):
            raise GeometryError(f"shrink rates must be >= 0, got {self.shrink_rate}")
        for name, channels, rate in (
            ("thick", self.thick_channels, self.shrink_rate[0]),
            ("thin", self.thin_channels, self.shrink_rate[1]),
        ):
            for idx, ch in enumerate(channels):
                if ch.orientation not in (HORIZONTAL, VERTICAL):
                    raise GeometryError(
                        f"{name} channel {idx}: unknown orientation {ch.orientation!r}"
                    )
                lo, hi = ch.interval()
                if lo < 0 or hi > self.n_cells:
                    raise GeometryError(
                        f"{name} channel {idx}: cells [{lo},{hi}) outside grid "
                        f"of {self.n_cells} cells"
                    )
                for k in range(self.n_steps + 1):
                    if ch.width - k * rate < 1:
                        raise GeometryError(
                            f"{name} channel {idx} (center {ch.center}, width "
                            f"{ch.width}) shrinks below one cell at step {k}"
                        )


@dataclass
class DomainTimeline:
    """Per-step cell label fields, ``labels[k][iy, ix]`` with values 0/1/2."""

    labels: np.ndarray  # (n_steps+1, n_cells, n_cells) int8
    n_cells: int
    n_steps: int

    def __post_init__(self):
        self.labels.setflags(write=False)

    def indicator(self, k: int, continuum: int) -> np.ndarray:
        """Cell mask of the given continuum (1 or 2) at step k."""
        return self.labels[k] == continuum

    def active_cells(self, k: int) -> np.ndarray:
        return self.labels[k] != EXCLUDED


@dataclass
class ValidationReport:
    """Per-(step, block, continuum) cell counts with empty combinations flagged."""

    counts: np.ndarray  # (n_steps+1, n_blocks, N_CONTINUA) int64
    flags: list = field(default_factory=list)  # (block, step, continuum) triples

    @property
    def ok(self) -> bool:
        return not self.flags


def _coverage(channels, rate: int, k: int, n: int) -> np.ndarray:
    """Union of channel bands at step k as a cell mask [iy, ix]."""
    mask = np.zeros((n, n), dtype=bool)
    for ch in channels:
        lo, hi = ch.interval(k * rate)
        if ch.orientation == VERTICAL:
            mask[:, lo:hi] = True
        else:
            mask[lo:hi, :] = True
    return mask


def build_channel_lattice(config: GeometryConfig) -> DomainTimeline:
    """Label the initial (step 0) domain.

    Thick channels win at crossings; a continuum that has channels but ends
    up with no cells (fully shadowed) is rejected.
    """
    config.validate()
    n = config.n_cells
    thick = _coverage(config.thick_channels, 0, 0, n)
    thin = _coverage(config.thin_channels, 0, 0, n)
    labels = np.where(thick, CONTINUUM_1, np.where(thin, CONTINUUM_2, EXCLUDED))
    if config.thick_channels and not (labels == CONTINUUM_1).any():
        raise GeometryError("thick channels present but continuum 1 is empty")
    if config.thin_channels and not (labels == CONTINUUM_2).any():
        raise GeometryError(
            "thin channels fully shadowed by thick ones: continuum 2 is empty"
        )
    return DomainTimeline(labels[None].astype(np.int8), n, 0)


def evolve_domain(initial: DomainTimeline, config: GeometryConfig) -> DomainTimeline:
    """Erode every channel by its continuum's rate at each of n_steps steps.

    A cell keeps its step-0 label while still covered by a channel of that
    continuum and becomes excluded otherwise, so labels never switch
    between continua and the active region shrinks monotonically.
    """
    config.validate()
    n = config.n_cells
    lab0 = initial.labels[0]
    frames = [lab0]
    for k in range(1, config.n_steps + 1):
        thick = _coverage(config.thick_channels, config.shrink_rate[0], k, n)
        thin = _coverage(config.thin_channels, config.shrink_rate[1], k, n)
        frames.append(
            np.where(
                (lab0 == CONTINUUM_1) & thick,
                CONTINUUM_1,
                np.where((lab0 == CONTINUUM_2) & thin, CONTINUUM_2, EXCLUDED),
            )
        )
    labels = np.stack(frames).astype(np.int8)
    return DomainTimeline(labels, n, config.n_steps)


def build_timeline(config: GeometryConfig) -> DomainTimeline:
    """Initial lattice plus full evolution in one call."""
    return evolve_domain(build_channel_lattice(config), config)


def validate_geometry(timeline: DomainTimeline, layout) -> ValidationReport:
    """Count continuum cells per coarse block and step; flag empty ones.

    ``layout`` provides ``block_rect(p)`` cell rectangles (see cells.RveLayout).
    Report-only: never raises.
    """
    n_levels = timeline.n_steps + 1
    n_blocks = layout.n_blocks
    counts = np.zeros((n_levels, n_blocks, N_CONTINUA), dtype=np.int64)
    flags = []
    for k in range(n_levels):
        lab = timeline.labels[k]
        for p in range(n_blocks):
            x0, y0, nx, ny = layout.block_rect(p)
            block = lab[y0 : y0 + ny, x0 : x0 + nx]
            for i in range(N_CONTINUA):
                c = int((block == i + 1).sum())
                counts[k, p, i] = c
                if c == 0:
                    flags.append((p, k, i + 1))
    return ValidationReport(counts, flags)


def default_desk_config(n_steps: int = 3) -> GeometryConfig:
    """Desk-scale default: 240 cells, straddling channel lattice.

    Ten thick channels (width 12) per direction centered on the odd
    twelve-cell block boundaries 24j+12 and eleven thin channels (width 6)
    per direction at {3, 24j, 237} keep both continua present in every
    coarse block of the 10x10 and 20x20 coarse partitions through three
    shrink steps, with at least three cells of final width wherever a
    channel straddles a block boundary (one active node line per side, so
    sub-RVE constraints stay independent).
    """
    thick_centers = [24 * j + 12 for j in range(10)]
    thin_centers = [3] + [24 * j for j in range(1, 10)] + [237]
    thick = tuple(
        Channel(o, c, 12) for o in (HORIZONTAL, VERTICAL) for c in thick_centers
    )
    thin = tuple(
        Channel(o, c, 6) for o in (HORIZONTAL, VERTICAL) for c in thin_centers
    )
    return GeometryConfig(
        n_cells=240,
        thick_channels=thick,
        thin_channels=thin,
        shrink_rate=(3, 1),
        n_steps=n_steps,
    )
