"""Shared fixtures: miniature channel domains that exercise every code path
at interactive speed, plus session-scoped desk-scale pipeline runs reused by
the acceptance criteria."""

from __future__ import annotations

import numpy as np
import pytest

from mchom.config import RunConfig
from mchom.geometry import Channel, GeometryConfig, default_desk_config


def mini_geometry(n_steps: int = 3) -> GeometryConfig:
    """48-cell two-continuum lattice, both continua in every 12-cell block
    through three steps; straddling channels keep 3 cells of final width."""
    thick = tuple(
        Channel(o, c, 6) for o in ("horizontal", "vertical") for c in (12, 36)
    )
    thin = tuple(
        Channel(o, c, 3) for o in ("horizontal", "vertical") for c in (3, 24, 45)
    )
    return GeometryConfig(
        n_cells=48,
        thick_channels=thick,
        thin_channels=thin,
        shrink_rate=(1, 0),
        n_steps=n_steps,
    )


def unperforated_geometry(n_cells: int, n_steps: int = 0) -> GeometryConfig:
    """Whole square as one static continuum-1 channel."""
    return GeometryConfig(
        n_cells,
        thick_channels=(Channel("horizontal", n_cells // 2, n_cells),),
        shrink_rate=(0, 0),
        n_steps=n_steps,
    )


@pytest.fixture(scope="session")
def mini_config() -> RunConfig:
    return RunConfig(
        geometry=mini_geometry(),
        geometry_preset="custom",
        example=1,
        coarse=4,
        layers=1,
        output_dir="unused",
    )


def desk_config(example: int, coarse: int, out: str) -> RunConfig:
    layers = {10: 2, 20: 4}[coarse]
    return RunConfig(
        geometry=default_desk_config(),
        example=example,
        coarse=coarse,
        layers=layers,
        output_dir=out,
    )


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Full pipelines for examples 1-3 at both coarse sizes, run once.

    Returns {(example, coarse): RunResult}. This is the expensive part of the
    acceptance suite; everything downstream reads from here.
    """
    from mchom.pipeline import run_pipeline

    results = {}
    for example in (1, 2, 3):
        for coarse in (10, 20):
            out = tmp_path_factory.mktemp(f"desk_e{example}_H{coarse}")
            cfg = desk_config(example, coarse, str(out))
            res = run_pipeline(cfg)
            assert res.status == 0, res.manifest.get("failure")
            results[(example, coarse)] = res
    return results


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240811)
