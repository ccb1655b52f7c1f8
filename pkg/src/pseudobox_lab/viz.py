"""
Static bird's-eye-view renderings as SVG documents.

Scenes are drawn with matplotlib on a canvas whose pixel scale is fixed by
the ``RenderSpec``. Every box becomes one patch carrying a stable ``gid``
(``gt-0``, ``pred-3``, ...), so documents can be inspected element by
element. Uncertainty glyphs draw a yellow footprint, a purple footprint
enlarged by the size uncertainties, and purple segments for the x, y and
theta uncertainties; z and h are not shown in BEV.
"""

import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import matplotlib
from matplotlib.figure import Figure
from matplotlib.patches import Polygon
import numpy as np

from .data_format import Scene, as_box_array, as_box_matrix
from .geometry import box_corners_bev

logger = logging.getLogger(__name__)

LAYER_NAMES = ("points", "gt", "pseudo", "pred", "uncertainty")

COLORS = {
    "gt": "#2ca02c",
    "pred": "#d62728",
    "pseudo": "#1f77b4",
    "uncertainty": "#8e44ad",
    "reference": "#f1c40f",
    "points": "#7f7f7f",
}

# SVG user units per inch; one canvas pixel is one SVG unit
SVG_DPI = 72

_HASH_SALT = "pseudobox-lab"


@dataclass
class RenderSpec:
    """
    Canvas and style of a BEV rendering.

    Attributes
    ----------
    extent : tuple of float
        (x_min, x_max, y_min, y_max) in meters
    pixels_per_meter : float
        Canvas scale
    layers : tuple of str
        Enabled layers among points, gt, pseudo, pred and uncertainty
    glyph_scale : float
        Glyph pixels per unit of uncertainty (meters or radians)
    point_size : float
        Marker area of a point in square pixels
    """
    extent: Tuple[float, float, float, float] = (-80.0, 80.0, -80.0, 80.0)
    pixels_per_meter: float = 4.0
    layers: Tuple[str, ...] = LAYER_NAMES
    glyph_scale: float = 40.0
    point_size: float = 1.0

    def __post_init__(self):
        self.extent = tuple(float(v) for v in self.extent)
        self.layers = tuple(self.layers)
        if not self.pixels_per_meter > 0:
            raise ValueError("pixels_per_meter must be positive")
        if not self.glyph_scale >= 0:
            raise ValueError("glyph_scale must be nonnegative")
        if self.extent[1] <= self.extent[0] or self.extent[3] <= self.extent[2]:
            raise ValueError("extent must be (x_min, x_max, y_min, y_max) with positive size")
        unknown = set(self.layers) - set(LAYER_NAMES)
        if unknown:
            raise ValueError(f"Unknown layers: {sorted(unknown)}")

    @property
    def colors(self) -> Dict[str, str]:
        """Fixed layer colors."""
        return COLORS

    @property
    def canvas_pixels(self) -> Tuple[float, float]:
        x0, x1, y0, y1 = self.extent
        return (x1 - x0) * self.pixels_per_meter, (y1 - y0) * self.pixels_per_meter


@dataclass
class UncertaintyGlyph:
    """
    Geometry of one box's uncertainty glyph, in meters.

    Attributes
    ----------
    base : np.ndarray
        Yellow footprint corners, shape (4, 2)
    expanded : np.ndarray
        Purple footprint corners enlarged by the l and w uncertainties
    segments : dict
        'x', 'y' and 'theta' to (start, end) points; zero-length segments
        are omitted
    lengths_px : dict
        Canvas length of every glyph part, zero-length ones included
    """
    base: np.ndarray
    expanded: np.ndarray
    segments: Dict[str, Tuple[np.ndarray, np.ndarray]]
    lengths_px: Dict[str, float]


def render_uncertainty_glyphs(box, u, spec: RenderSpec) -> UncertaintyGlyph:
    """
    Uncertainty glyph of a box.

    With k the glyph scale, the purple footprint is k*dl and k*dw pixels
    longer and wider than the yellow one; the x segment runs k*dx pixels
    horizontally from the center, the y segment k*dy pixels vertically and
    the theta segment k*dtheta pixels along the footprint diagonal.

    Parameters
    ----------
    box : Box7 or sequence of float
        Box the glyph is drawn on
    u : array_like
        Nonnegative 7-vector of uncertainties
    spec : RenderSpec
        Canvas scale and glyph scale

    Returns
    -------
    UncertaintyGlyph
        Glyph geometry, linear in u
    """
    box = as_box_array(box)
    u = np.asarray(u, dtype=float).reshape(7)
    if np.any(u < 0) or not np.all(np.isfinite(u)):
        raise ValueError("Uncertainties must be finite and nonnegative")
    k = spec.glyph_scale
    meters = k / spec.pixels_per_meter

    expanded_box = box.copy()
    expanded_box[3] += meters * u[3]
    expanded_box[4] += meters * u[4]
    center = box[:2]
    diagonal = box[6] + math.atan2(box[4], box[3])
    directions = {
        "x": np.array([1.0, 0.0]),
        "y": np.array([0.0, 1.0]),
        "theta": np.array([math.cos(diagonal), math.sin(diagonal)]),
    }
    amounts = {"x": u[0], "y": u[1], "theta": u[6]}

    segments = {}
    lengths_px = {"l": k * u[3], "w": k * u[4]}
    for name, direction in directions.items():
        lengths_px[name] = k * amounts[name]
        if lengths_px[name] > 0:
            segments[name] = (center.copy(), center + meters * amounts[name] * direction)
    return UncertaintyGlyph(
        base=box_corners_bev(box).vertices,
        expanded=box_corners_bev(expanded_box).vertices,
        segments=segments,
        lengths_px=lengths_px,
    )


def _new_figure(spec: RenderSpec) -> Tuple[Figure, "matplotlib.axes.Axes"]:
    width_px, height_px = spec.canvas_pixels
    fig = Figure(figsize=(width_px / SVG_DPI, height_px / SVG_DPI), dpi=SVG_DPI)
    ax = fig.add_axes([0.0, 0.0, 1.0, 1.0])
    x0, x1, y0, y1 = spec.extent
    ax.set_xlim(x0, x1)
    ax.set_ylim(y0, y1)
    ax.set_aspect("equal")
    ax.set_axis_off()
    return fig, ax


def _draw_box(ax, box: np.ndarray, color: str, gid: str, linestyle: str = "-") -> None:
    patch = Polygon(
        box_corners_bev(box).vertices,
        closed=True,
        fill=False,
        edgecolor=color,
        linewidth=1.0,
        linestyle=linestyle,
    )
    patch.set_gid(gid)
    ax.add_patch(patch)


def _draw_glyph(ax, glyph: UncertaintyGlyph, spec: RenderSpec, prefix: str) -> None:
    for name, corners, color in (
        ("base", glyph.base, spec.colors["reference"]),
        ("expanded", glyph.expanded, spec.colors["uncertainty"]),
    ):
        patch = Polygon(corners, closed=True, fill=False, edgecolor=color, linewidth=1.0)
        patch.set_gid(f"{prefix}-{name}")
        ax.add_patch(patch)
    for name in ("x", "y", "theta"):
        if name not in glyph.segments:
            continue
        start, end = glyph.segments[name]
        (line,) = ax.plot(
            [start[0], end[0]], [start[1], end[1]], color=spec.colors["uncertainty"], linewidth=1.0
        )
        line.set_gid(f"{prefix}-{name}")


def render_scene(
    scene: Optional[Scene],
    layers: Dict[str, np.ndarray],
    spec: Optional[RenderSpec] = None,
    uncertainties: Optional[Dict[str, np.ndarray]] = None,
) -> str:
    """
    BEV rendering of a scene and box layers as an SVG document.

    Parameters
    ----------
    scene : Scene or None
        Scene whose points are drawn (None draws no points)
    layers : dict
        Layer name ('gt', 'pseudo' or 'pred') to boxes of shape (k, 7)
    spec : RenderSpec, optional
        Canvas and layer toggles (default: RenderSpec())
    uncertainties : dict, optional
        Layer name to per-box uncertainties of shape (k, 7); drawn as glyphs
        when the 'uncertainty' layer is enabled

    Returns
    -------
    str
        SVG document; identical inputs give identical documents
    """
    spec = spec if spec is not None else RenderSpec()
    fig, ax = _new_figure(spec)

    if "points" in spec.layers and scene is not None:
        points = scene.points
        collection = ax.scatter(
            points[:, 0], points[:, 1], s=spec.point_size, c=spec.colors["points"], linewidths=0
        )
        collection.set_gid("points")

    for name in ("gt", "pseudo", "pred"):
        if name not in spec.layers or name not in layers:
            continue
        style = "--" if name == "pseudo" else "-"
        for i, box in enumerate(as_box_matrix(layers[name])):
            _draw_box(ax, box, spec.colors[name], f"{name}-{i}", style)

    if "uncertainty" in spec.layers and uncertainties:
        for name in sorted(uncertainties):
            boxes = as_box_matrix(layers.get(name, np.zeros((0, 7))))
            values = np.asarray(uncertainties[name], dtype=float).reshape(-1, 7)
            if len(values) != len(boxes):
                raise ValueError(f"Layer '{name}' needs one uncertainty row per box")
            for i, (box, u) in enumerate(zip(boxes, values)):
                if not np.all(np.isfinite(u)):
                    continue
                _draw_glyph(ax, render_uncertainty_glyphs(box, u, spec), spec, f"glyph-{name}-{i}")

    buffer = io.StringIO()
    with matplotlib.rc_context({"svg.hashsalt": _HASH_SALT, "svg.fonttype": "none"}):
        fig.savefig(buffer, format="svg", metadata={"Date": None})
    return buffer.getvalue()


def save_svg(document: str, filepath: Union[str, Path]) -> None:
    """Write an SVG document."""
    filepath = Path(filepath)
    if filepath.suffix != ".svg":
        raise ValueError("SVG files require the .svg extension")
    filepath.parent.mkdir(parents=True, exist_ok=True)
    filepath.write_text(document, encoding="utf-8")
    logger.info("Wrote %s", filepath)
