"""Self-contained SVG heatmaps of distance matrices."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from ..mapd import DistanceMatrix
from .io import read_matrix

CELL = 36
MARGIN = 40


def _color(t: float) -> str:
    # white (t=0) to dark blue (t=1)
    lo, hi = np.array([255, 255, 255]), np.array([8, 48, 107])
    r, g, b = (lo + (hi - lo) * float(np.clip(t, 0.0, 1.0))).round().astype(int)
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(dm: DistanceMatrix, title: str = "") -> str:
    v = dm.values
    if v.ndim != 2 or v.shape[0] != v.shape[1]:
        raise ValueError(f"heatmap needs a square matrix, got {v.shape}")
    if not np.array_equal(v, v.T):
        raise ValueError("heatmap input is not symmetric")
    n = v.shape[0]
    vmax = float(v.max()) if n and v.max() > 0 else 0.0
    # two decimals, more when every entry is small
    decimals = 2 if vmax == 0.0 or vmax >= 0.1 else min(6, 1 - int(np.floor(np.log10(vmax))))
    size = 2 * MARGIN + n * CELL
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}" font-family="sans-serif" font-size="10">']
    if title:
        parts.append(f'<text x="{MARGIN}" y="{MARGIN / 2:.0f}" font-size="12">{escape(title)}</text>')
    for k, a in enumerate(dm.agents):
        c = MARGIN + k * CELL + CELL / 2
        parts.append(f'<text x="{c:.0f}" y="{MARGIN - 4}" text-anchor="middle">{escape(str(a))}</text>')
        parts.append(f'<text x="{MARGIN - 4}" y="{c + 3:.0f}" text-anchor="end">{escape(str(a))}</text>')
    for i in range(n):
        for j in range(n):
            t = v[i, j] / vmax if vmax > 0 else 0.0
            x, y = MARGIN + j * CELL, MARGIN + i * CELL
            fg = "#ffffff" if t > 0.55 else "#000000"
            parts.append(f'<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{_color(t)}" '
                         f'stroke="#cccccc" stroke-width="0.5"/>')
            parts.append(f'<text x="{x + CELL / 2:.0f}" y="{y + CELL / 2 + 3:.0f}" text-anchor="middle" '
                         f'fill="{fg}">{v[i, j]:.{decimals}f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_heatmap(matrix_path, output_path, title: str | None = None) -> Path:
    dm = read_matrix(matrix_path)
    out = Path(output_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(heatmap_svg(dm, Path(matrix_path).stem if title is None else title))
    return out
