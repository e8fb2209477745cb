"""
Field images: binary PPM heatmaps with optional arrow glyphs, and plotly HTML.

Scalar fields map linearly from [0, max] to black..white; vector fields show
their cell magnitude the same way with an arrow every k = max(1, nx // 16)
cells. Image row 0 is the top of the domain.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import plotly.graph_objects as go

from field_core import ScalarField, VectorField, cell_vectors, magnitude_field

ARROW_COLOR = (220, 40, 40)
TARGET_PIXELS = 256


def pixel_scale(nx: int, ny: int) -> int:
    return max(1, TARGET_PIXELS // max(nx, ny))


def grayscale(values: np.ndarray) -> np.ndarray:
    """uint8 levels over [0, max]; an all-zero (or all-negative) field is black."""
    top = float(values.max()) if values.size else 0.0
    if not top > 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint(np.clip(values / top, 0.0, 1.0) * 255.0).astype(np.uint8)


class Canvas:
    """RGB pixel buffer with (x, y) addressing, y pointing down."""

    def __init__(self, gray: np.ndarray, scale: int):
        levels = np.repeat(np.repeat(gray[::-1], scale, axis=0), scale, axis=1)
        self.pixels = np.repeat(levels[:, :, None], 3, axis=2)
        self.height, self.width = levels.shape

    def point(self, x: int, y: int, color):
        if 0 <= x < self.width and 0 <= y < self.height:
            self.pixels[y, x] = color

    def line(self, x1: int, y1: int, x2: int, y2: int, color):
        # incremental error line algorithm
        ex = abs(x2 - x1)
        ey = -abs(y2 - y1)
        dx = 1 if x1 < x2 else -1
        dy = 1 if y1 < y2 else -1
        e = ex + ey
        while True:
            self.point(x1, y1, color)
            if x1 == x2 and y1 == y2:
                break
            e2 = 2 * e
            if e2 >= ey:
                e += ey
                x1 += dx
            if e2 <= ex:
                e += ex
                y1 += dy

    def arrow(self, x: float, y: float, ax: float, ay: float, color):
        """Arrow from (x, y) along (ax, ay) in pixel units, with a two-stroke head."""
        tip_x, tip_y = x + ax, y + ay
        self.line(int(round(x)), int(round(y)), int(round(tip_x)), int(round(tip_y)), color)
        length = float(np.hypot(ax, ay))
        if length < 2.0:
            return
        ux, uy = ax / length, ay / length
        head = 0.35 * length
        for side in (1.0, -1.0):
            hx = tip_x - head * (ux * 0.866 - side * uy * 0.5)
            hy = tip_y - head * (uy * 0.866 + side * ux * 0.5)
            self.line(int(round(tip_x)), int(round(tip_y)), int(round(hx)), int(round(hy)), color)

    def to_ppm(self) -> bytes:
        header = f"P6\n{self.width} {self.height}\n255\n".encode("ascii")
        return header + self.pixels.astype(np.uint8).tobytes()


def render_scalar(f: ScalarField) -> Canvas:
    return Canvas(grayscale(f.values), pixel_scale(f.grid.nx, f.grid.ny))


def render_vector(v: VectorField) -> Canvas:
    grid = v.grid
    scale = pixel_scale(grid.nx, grid.ny)
    magnitude = magnitude_field(v).values
    canvas = Canvas(grayscale(magnitude), scale)
    top = float(magnitude.max())
    if not top > 0:
        return canvas

    k = max(1, grid.nx // 16)
    vx, vy = cell_vectors(v)
    reach = 0.8 * k * scale / top
    for j in range(k // 2, grid.ny, k):
        for i in range(k // 2, grid.nx, k):
            if magnitude[j, i] == 0.0:
                continue
            x = (i + 0.5) * scale
            y = (grid.ny - j - 0.5) * scale
            canvas.arrow(x, y, vx[j, i] * reach, -vy[j, i] * reach, ARROW_COLOR)
    return canvas


def write_ppm(canvas: Canvas, path: str | Path):
    Path(path).write_bytes(canvas.to_ppm())


def heatmap_figure(field: ScalarField | VectorField, title: str = "") -> go.Figure:
    """Interactive heatmap of a scalar field or of a vector field's magnitude."""
    grid = field.grid
    xc, yc = grid.cell_centers()
    values = field.values if isinstance(field, ScalarField) else magnitude_field(field).values
    fig = go.Figure()
    fig.add_trace(go.Heatmap(
        x=xc[0, :],
        y=yc[:, 0],
        z=values,
        colorscale="Greys_r",
        zmin=0.0,
        colorbar=dict(title="value" if isinstance(field, ScalarField) else "|v|"),
    ))
    if isinstance(field, VectorField):
        k = max(1, grid.nx // 16)
        vx, vy = cell_vectors(field)
        top = float(values.max()) or 1.0
        reach = 0.8 * k * grid.h / top
        xs, ys = [], []
        for j in range(k // 2, grid.ny, k):
            for i in range(k // 2, grid.nx, k):
                x0, y0 = xc[j, i], yc[j, i]
                xs += [x0, x0 + vx[j, i] * reach, None]
                ys += [y0, y0 + vy[j, i] * reach, None]
        fig.add_trace(go.Scatter(
            x=xs,
            y=ys,
            mode="lines",
            name="flow",
            line=dict(color="rgb(220,40,40)", width=1),
        ))
    fig.update_layout(
        title=title,
        xaxis_title="x",
        yaxis_title="y",
        yaxis=dict(scaleanchor="x"),
        height=600,
    )
    return fig


def write_html(field: ScalarField | VectorField, path: str | Path, title: str = ""):
    heatmap_figure(field, title).write_html(str(path))
