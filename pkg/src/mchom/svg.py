"""Minimal SVG heatmap emitter for field snapshots (no plotting deps)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

# Anchor colors of a perceptually ordered dark-to-bright map.
_PALETTES = {
    "viridis": [
        (68, 1, 84), (72, 40, 120), (62, 74, 137), (49, 104, 142),
        (38, 130, 142), (31, 158, 137), (53, 183, 121), (109, 205, 89),
        (180, 222, 44), (253, 231, 37),
    ],
    "grayscale": [(0, 0, 0), (255, 255, 255)],
}
_EXCLUDED_FILL = "#b4b4b4"


def _color(frac: float, anchors) -> str:
    frac = min(max(frac, 0.0), 1.0)
    pos = frac * (len(anchors) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(anchors) - 1)
    w = pos - lo
    rgb = tuple(
        int(round((1 - w) * anchors[lo][c] + w * anchors[hi][c])) for c in range(3)
    )
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def emit_heatmap(
    field: np.ndarray,
    out_path,
    palette: str = "viridis",
    caption: str = "",
    cell_px: int = 4,
    flip_y: bool = True,
) -> Path:
    """Write one SVG rectangle per grid cell with a linear color scale.

    NaN cells are rendered gray. ``flip_y`` puts row 0 at the bottom, so the
    picture uses the usual mathematical orientation.
    """
    field = np.asarray(field, dtype=float)
    if field.ndim != 2 or field.size == 0:
        raise ValueError("heatmap needs a non-empty 2D grid")
    if palette not in _PALETTES:
        raise ValueError(f"unknown palette {palette!r}")
    anchors = _PALETTES[palette]
    ny, nx = field.shape
    finite = np.isfinite(field)
    if finite.any():
        vmin = float(field[finite].min())
        vmax = float(field[finite].max())
    else:
        vmin = vmax = 0.0
    span = vmax - vmin

    bar_w = 18
    margin = 6
    caption_h = 22 if caption else 0
    width = nx * cell_px + 3 * margin + bar_w + 52
    height = ny * cell_px + 2 * margin + caption_h
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<g id="cells">',
    ]
    for iy in range(ny):
        row = ny - 1 - iy if flip_y else iy
        y = margin + row * cell_px
        for ix in range(nx):
            v = field[iy, ix]
            if not np.isfinite(v):
                fill = _EXCLUDED_FILL
            elif span == 0.0:
                fill = _color(0.5, anchors)
            else:
                fill = _color((v - vmin) / span, anchors)
            parts.append(
                f'<rect x="{margin + ix * cell_px}" y="{y}" '
                f'width="{cell_px}" height="{cell_px}" fill="{fill}"/>'
            )
    parts.append("</g>")

    bar_x = nx * cell_px + 2 * margin
    bar_h = ny * cell_px
    n_slices = 64
    parts.append('<g id="colorbar">')
    for s in range(n_slices):
        frac = (s + 0.5) / n_slices
        y = margin + bar_h - (s + 1) * bar_h / n_slices
        parts.append(
            f'<rect x="{bar_x}" y="{y:.2f}" width="{bar_w}" '
            f'height="{bar_h / n_slices + 0.5:.2f}" fill="{_color(frac, anchors)}"/>'
        )
    parts.append("</g>")
    label_x = bar_x + bar_w + 4
    parts.append(
        f'<text x="{label_x}" y="{margin + 10}" font-size="10">{vmax:.3g}</text>'
    )
    parts.append(
        f'<text x="{label_x}" y="{margin + bar_h}" font-size="10">{vmin:.3g}</text>'
    )
    if caption:
        parts.append(
            f'<text x="{margin}" y="{height - 6}" font-size="12">{caption}</text>'
        )
    parts.append("</svg>")

    out_path = Path(out_path)
    out_path.write_text("\n".join(parts))
    return out_path
