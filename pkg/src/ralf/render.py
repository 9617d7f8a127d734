"""SVG 1.1 rendering of a layout over its canvas.

Coordinates are in canvas pixels (the ``viewBox``), so an element's rectangle
is exactly ``bbox * (W, H)``. The legend sits below the canvas and uses
circles, keeping ``<rect>`` nodes one-to-one with elements.
"""

from __future__ import annotations

import base64
import io
from xml.sax.saxutils import escape

from PIL import Image

from .core import AnnotatedSample, CategorySchema, Layout, to_uint8

PALETTE = ("#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#bfef45", "#469990", "#9a6324")
LEGEND_ROW = 10.0


def category_color(category: int) -> str:
    return PALETTE[(category - 1) % len(PALETTE)]


def _png_data_uri(pixels) -> str:
    buf = io.BytesIO()
    # fixed encoder settings keep the bytes identical across runs
    Image.fromarray(to_uint8(pixels), mode="RGB").save(buf, format="PNG", optimize=False, compress_level=6)
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def _f(v: float) -> str:
    return f"{v:.3f}"


def render_svg(sample: AnnotatedSample, layout: Layout | None, schema: CategorySchema, scale: float = 4.0) -> str:
    """SVG document with the canvas, one translucent rectangle per element and a legend."""
    layout = sample.layout if layout is None else layout
    H, W = sample.canvas.H, sample.canvas.W
    legend_h = LEGEND_ROW * (schema.C + 1)
    total_h = H + legend_h
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" version="1.1" '
        f'width="{_f(W * scale)}" height="{_f(total_h * scale)}" viewBox="0 0 {W} {_f(total_h)}">',
        f'<title>{escape(sample.id)}</title>',
        f'<image x="0" y="0" width="{W}" height="{H}" preserveAspectRatio="none" xlink:href="{_png_data_uri(sample.canvas.pixels)}"/>',
    ]
    for i, e in enumerate(layout.elements):
        x0, y0, x1, y1 = e.corners()
        color = category_color(e.category)
        name = schema.names[e.category - 1] if 1 <= e.category <= schema.C else str(e.category)
        out.append(
            f'<rect x="{_f(x0 * W)}" y="{_f(y0 * H)}" width="{_f((x1 - x0) * W)}" height="{_f((y1 - y0) * H)}" '
            f'fill="{color}" fill-opacity="0.35" stroke="{color}" stroke-width="0.5" data-index="{i}" data-category="{escape(name)}"/>'
        )
    out.append(f'<g font-family="sans-serif" font-size="{_f(LEGEND_ROW * 0.7)}">')
    for c in range(1, schema.C + 1):
        y = H + LEGEND_ROW * c
        out.append(f'<circle cx="{_f(LEGEND_ROW / 2)}" cy="{_f(y - LEGEND_ROW * 0.3)}" r="{_f(LEGEND_ROW * 0.3)}" fill="{category_color(c)}"/>')
        out.append(f'<text x="{_f(LEGEND_ROW)}" y="{_f(y)}">{escape(schema.names[c - 1])}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
