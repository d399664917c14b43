"""Run configuration: TOML parsing, validation, defaults and the fixed
catalog of coefficient fields, forcing and initial condition."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .geometry import Channel, GeometryConfig, default_desk_config

STAGES = ("geometry", "fine", "cells", "upscale", "macro", "errors")


class ConfigError(ValueError):
    pass


def gaussian_bump(x, y, scale):
    return scale * np.exp(-100.0 * ((x - 0.5) ** 2 + (y - 0.5) ** 2))


def source_term(x, y, t=0.0):
    return gaussian_bump(x, y, 1e-3)


def initial_condition(x, y):
    return gaussian_bump(x, y, 1e-1)


def kappa2_example(example: int):
    """Smooth multiplier of the diffusion field for the three stock cases."""
    if example == 1:
        return lambda x, y: np.ones_like(np.asarray(x, dtype=float))
    if example == 2:
        return lambda x, y: 2.0 + np.sin(2 * np.pi * x) * np.sin(20 * np.pi * y)
    if example == 3:
        return lambda x, y: 2.0 + np.sin(math.sqrt(20.0) * np.pi * x) * np.sin(
            np.pi * y
        )
    raise ConfigError(f"unknown example id {example}; expected 1, 2 or 3")


@dataclass(frozen=True)
class RunConfig:
    geometry: GeometryConfig
    geometry_preset: str = "desk-default"  # "custom" when channels are explicit
    example: int = 1
    kappa2_constant: float | None = None   # overrides the example field if set
    contrast: tuple[float, float] = (1.0, 1e-2)
    n_steps: int = 3
    substeps: int = 1
    coarse: int = 10            # blocks per side, H = 1/coarse
    layers: int = 2
    grad_mass_init: bool = True
    tolerance: float = 1e-10
    output_dir: str = "out"

    def kappa2(self):
        if self.kappa2_constant is not None:
            c = self.kappa2_constant
            return lambda x, y: np.full_like(np.asarray(x, dtype=float), c)
        return kappa2_example(self.example)

    def validate(self) -> None:
        self.geometry.validate()
        if self.example not in (1, 2, 3):
            raise ConfigError(f"example must be 1, 2 or 3, got {self.example}")
        if self.geometry.n_cells % self.coarse != 0:
            raise ConfigError(
                f"coarse size 1/{self.coarse} does not divide the fine grid "
                f"of {self.geometry.n_cells} cells evenly"
            )
        if self.layers < 0:
            raise ConfigError("multiscale.layers must be >= 0")
        if self.substeps < 1:
            raise ConfigError("time.substeps must be >= 1")
        if not (0 < self.tolerance < 1e-2):
            raise ConfigError("solver.tolerance out of range")
        if self.contrast[0] <= 0 or self.contrast[1] <= 0:
            raise ConfigError("coefficient contrast values must be positive")


_SCHEMA = {
    "geometry": {
        "preset", "n_cells", "shrink_thick", "shrink_thin",
        "thick_channels", "thin_channels",
    },
    "coefficients": {"example", "kappa2_constant", "contrast_thick", "contrast_thin"},
    "time": {"n_steps", "substeps"},
    "multiscale": {"coarse", "layers", "grad_mass_init"},
    "solver": {"tolerance"},
    "output": {"directory"},
}


def _check_unknown(data: dict) -> None:
    for section, content in data.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(content, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key in content:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")


def _parse_channels(raw, section_key) -> tuple[Channel, ...]:
    channels = []
    for idx, item in enumerate(raw):
        extra = set(item) - {"orientation", "center", "width"}
        if extra:
            raise ConfigError(
                f"unknown keys {sorted(extra)} in {section_key}[{idx}]"
            )
        try:
            channels.append(
                Channel(item["orientation"], int(item["center"]), int(item["width"]))
            )
        except KeyError as exc:
            raise ConfigError(f"{section_key}[{idx}] missing key {exc}") from exc
    return tuple(channels)


def config_from_dict(data: dict) -> RunConfig:
    _check_unknown(data)
    geo = data.get("geometry", {})
    time_ = data.get("time", {})
    n_steps = int(time_.get("n_steps", 3))
    preset = geo.get("preset", "desk-default" if "n_cells" not in geo else "custom")
    if preset == "desk-default":
        geometry = default_desk_config(n_steps)
        if "n_cells" in geo or "thick_channels" in geo:
            raise ConfigError("preset 'desk-default' does not accept explicit geometry")
    elif preset == "custom":
        geometry = GeometryConfig(
            n_cells=int(geo.get("n_cells", 240)),
            thick_channels=_parse_channels(
                geo.get("thick_channels", []), "geometry.thick_channels"
            ),
            thin_channels=_parse_channels(
                geo.get("thin_channels", []), "geometry.thin_channels"
            ),
            shrink_rate=(int(geo.get("shrink_thick", 3)), int(geo.get("shrink_thin", 1))),
            n_steps=n_steps,
        )
    else:
        raise ConfigError(f"unknown geometry preset {preset!r}")

    coeff = data.get("coefficients", {})
    multi = data.get("multiscale", {})
    solver = data.get("solver", {})
    output = data.get("output", {})
    cfg = RunConfig(
        geometry=geometry,
        geometry_preset=preset,
        example=int(coeff.get("example", 1)),
        kappa2_constant=(
            float(coeff["kappa2_constant"]) if "kappa2_constant" in coeff else None
        ),
        contrast=(
            float(coeff.get("contrast_thick", 1.0)),
            float(coeff.get("contrast_thin", 1e-2)),
        ),
        n_steps=n_steps,
        substeps=int(time_.get("substeps", 1)),
        coarse=int(multi.get("coarse", 10)),
        layers=int(multi.get("layers", 2)),
        grad_mass_init=bool(multi.get("grad_mass_init", True)),
        tolerance=float(solver.get("tolerance", 1e-10)),
        output_dir=str(output.get("directory", "out")),
    )
    cfg.validate()
    return cfg


def parse_config_text(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    return config_from_dict(data)


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return str(value)


def to_toml(cfg: RunConfig) -> str:
    """Serialize a RunConfig so that parse(to_toml(cfg)) == cfg."""
    lines = ["[geometry]", f"preset = {_fmt(cfg.geometry_preset)}"]
    if cfg.geometry_preset == "custom":
        g = cfg.geometry
        lines += [
            f"n_cells = {g.n_cells}",
            f"shrink_thick = {g.shrink_rate[0]}",
            f"shrink_thin = {g.shrink_rate[1]}",
        ]
        for name, chans in (
            ("thick_channels", g.thick_channels),
            ("thin_channels", g.thin_channels),
        ):
            for ch in chans:
                lines += [
                    f"[[geometry.{name}]]",
                    f"orientation = {_fmt(ch.orientation)}",
                    f"center = {ch.center}",
                    f"width = {ch.width}",
                ]
    lines += ["", "[coefficients]", f"example = {cfg.example}"]
    if cfg.kappa2_constant is not None:
        lines.append(f"kappa2_constant = {_fmt(cfg.kappa2_constant)}")
    lines += [
        f"contrast_thick = {_fmt(cfg.contrast[0])}",
        f"contrast_thin = {_fmt(cfg.contrast[1])}",
        "",
        "[time]",
        f"n_steps = {cfg.n_steps}",
        f"substeps = {cfg.substeps}",
        "",
        "[multiscale]",
        f"coarse = {cfg.coarse}",
        f"layers = {cfg.layers}",
        f"grad_mass_init = {_fmt(cfg.grad_mass_init)}",
        "",
        "[solver]",
        f"tolerance = {_fmt(cfg.tolerance)}",
        "",
        "[output]",
        f"directory = {_fmt(cfg.output_dir)}",
        "",
    ]
    return "\n".join(lines)
