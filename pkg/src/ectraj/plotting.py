"""Minimal static SVG rendering of one predicted scene.

Lane polylines in light grey, observed histories in orange, ground-truth
futures in black and the predicted modes in six distinct colours (line
opacity grows with the mode probability).
"""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

MODE_COLORS = ("#1f77b4", "#2ca02c", "#d62728", "#9467bd", "#17becf", "#e377c2")
HISTORY_COLOR = "#ff7f0e"
GT_COLOR = "#000000"
MAP_COLOR = "#c8c8c8"


def _polyline(points: np.ndarray, to_px, color: str, width: float, opacity: float = 1.0, dash: str = "") -> str:
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (to_px(p) for p in points))
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}" '
            f'stroke-opacity="{opacity:.3f}" stroke-linecap="round"{extra}/>')


def scene_svg(histories: np.ndarray, gt: np.ndarray, modes: np.ndarray, probs: np.ndarray | None = None,
              map_polylines: np.ndarray | None = None, history_mask: np.ndarray | None = None,
              title: str = "", size: int = 480, margin: float = 5.0) -> str:
    """SVG text for histories [A, T_h, 2], gt [A, T_f, 2] and modes [K, A, T_f, 2]."""
    K, A = modes.shape[:2]
    if probs is None:
        probs = np.full((K, A), 1.0 / K)
    pts = [histories.reshape(-1, 2), gt.reshape(-1, 2), modes.reshape(-1, 2)]
    allp = np.concatenate(pts)
    allp = allp[np.isfinite(allp).all(axis=1)]
    lo, hi = allp.min(axis=0) - margin, allp.max(axis=0) + margin
    span = float(max(hi - lo))
    scale = size / span

    def to_px(p):
        return (p[0] - lo[0]) * scale, size - (p[1] - lo[1]) * scale  # y up

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    if title:
        parts.append(f'<title>{escape(title)}</title>')
    if map_polylines is not None:
        for poly in map_polylines:
            xy = poly[:, :2]
            if np.any((xy > lo - span) & (xy < hi + span)):
                parts.append(_polyline(xy, to_px, MAP_COLOR, 1.0))
    for k in range(K):
        color = MODE_COLORS[k % len(MODE_COLORS)]
        for a in range(A):
            op = 0.35 + 0.65 * float(probs[k, a]) / max(float(probs[:, a].max()), 1e-12)
            parts.append(_polyline(modes[k, a], to_px, color, 1.6, op))
    for a in range(A):
        h = histories[a] if history_mask is None else histories[a][history_mask[a]]
        if len(h) > 1:
            parts.append(_polyline(h, to_px, HISTORY_COLOR, 2.4))
        parts.append(_polyline(np.concatenate([h[-1:], gt[a]]) if len(h) else gt[a], to_px, GT_COLOR, 1.8, dash="4,3"))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def save_scene_svg(path, *args, **kwargs) -> Path:
    p = Path(path)
    p.write_text(scene_svg(*args, **kwargs))
    return p
