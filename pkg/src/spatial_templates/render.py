"""Deterministic SVG rendering of template predictions.

One scene shows the given subject box and either the regression box or the
probability-shaded heatmap grid, with the query triplet as caption. Output is
a standalone SVG 1.1 document; identical scenes produce byte-identical text.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Box
from .models import Query, RegPrediction

SUBJECT_COLOR = "#1f77b4"
OBJECT_COLOR = "#d62728"
DEFAULT_CANVAS = 512
CAPTION_HEIGHT = 24


class RenderError(ValueError):
    """Invalid scene construction."""


@dataclass
class Scene:
    query: Query
    reg: RegPrediction | None = None
    heatmap: np.ndarray | None = None
    canvas: int = DEFAULT_CANVAS

    def __post_init__(self) -> None:
        if (self.reg is None) == (self.heatmap is None):
            raise RenderError("a scene needs exactly one of reg / heatmap")
        if self.heatmap is not None:
            self.heatmap = np.asarray(self.heatmap, dtype=np.float64)
            if self.heatmap.ndim != 2:
                raise RenderError("heatmap must be a 2D grid")


def _fmt(value: float) -> str:
    return f"{value:.4f}"


def _clip01(value: float) -> float:
    return min(max(value, 0.0), 1.0)


def _rect(x0: float, y0: float, x1: float, y1: float, canvas: int,
          style: str) -> str:
    x0, y0 = _clip01(x0), _clip01(y0)
    x1, y1 = _clip01(x1), _clip01(y1)
    return (f'<rect x="{_fmt(x0 * canvas)}" y="{_fmt(y0 * canvas)}" '
            f'width="{_fmt((x1 - x0) * canvas)}" '
            f'height="{_fmt((y1 - y0) * canvas)}" {style}/>')


def _box_rect(box: Box, canvas: int, color: str) -> str:
    x0, y0, x1, y1 = box.corners()
    style = f'fill="none" stroke="{color}" stroke-width="2"'
    return _rect(x0, y0, x1, y1, canvas, style)


def _heatmap_cells(grid: np.ndarray, canvas: int) -> list[str]:
    rows, cols = grid.shape
    cells = []
    for i in range(rows):
        for j in range(cols):
            opacity = _clip01(float(grid[i, j]))
            cells.append(
                f'<rect x="{_fmt(j / cols * canvas)}" '
                f'y="{_fmt(i / rows * canvas)}" '
                f'width="{_fmt(canvas / cols)}" height="{_fmt(canvas / rows)}" '
                f'fill="{OBJECT_COLOR}" fill-opacity="{opacity:.6f}"/>')
    return cells


def _escape(text: str) -> str:
    return (text.replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;"))


def _panel(scene: Scene, reflected: bool, x_offset: int) -> list[str]:
    canvas = scene.canvas

    def flip_box(box: Box) -> Box:
        return Box(1.0 - box.center_x, box.center_y, box.half_w, box.half_h)

    subject = scene.query.subject_box
    if reflected:
        subject = flip_box(subject)
    parts = [f'<g transform="translate({x_offset} {CAPTION_HEIGHT})">']
    parts.append(_rect(0.0, 0.0, 1.0, 1.0, canvas,
                       'fill="white" stroke="#cccccc" stroke-width="1"'))
    if scene.heatmap is not None:
        grid = scene.heatmap[:, ::-1] if reflected else scene.heatmap
        parts.extend(_heatmap_cells(grid, canvas))
    else:
        obj_box = scene.reg.as_box()
        if reflected:
            obj_box = flip_box(obj_box)
        parts.append(_box_rect(obj_box, canvas, OBJECT_COLOR))
    parts.append(_box_rect(subject, canvas, SUBJECT_COLOR))
    parts.append("</g>")
    return parts


def render_scene(scene: Scene, show_reflection: bool = False) -> str:
    """Render a scene to a standalone SVG document.

    Predictions are drawn in the mirrored frame the model was trained in;
    show_reflection adds the symmetric left-right reflection beside it, which
    is an equally likely reading of the template.
    """
    canvas = scene.canvas
    panels = 2 if show_reflection else 1
    width = canvas * panels + (8 if panels == 2 else 0)
    height = canvas + CAPTION_HEIGHT
    q = scene.query
    caption = _escape(f"({q.subject_word}, {q.relation_word}, {q.object_word})")

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<text x="4" y="16" font-family="monospace" font-size="14">'
        f'{caption}</text>',
    ]
    parts.extend(_panel(scene, reflected=False, x_offset=0))
    if show_reflection:
        parts.extend(_panel(scene, reflected=True, x_offset=canvas + 8))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
