"""SVG rendering of 2-D polytope unions."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Polygon as PolygonPatch, Rectangle  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import Box, PolytopeUnion, clipped_polygon  # noqa: E402


def union_polygons(union: PolytopeUnion) -> list[np.ndarray]:
    """Vertex arrays of each member clipped to its box; empty members skipped."""
    out = []
    for p in union.polytopes:
        poly = clipped_polygon(p.box, p.halfspaces)
        if len(poly) >= 3:
            out.append(poly)
    return out


def plot_union_svg(union: PolytopeUnion, box: Box, path: str | Path,
                   points: np.ndarray | None = None, title: str | None = None) -> None:
    """Write the box, every polytope and optional preimage samples to ``path``.

    Output is byte-stable: the SVG id salt is fixed and no date is embedded.
    """
    if box.dim != 2:
        raise ValueError("plots are only available for 2-D input boxes")
    with plt.rc_context({"svg.hashsalt": "premap", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 5))
        (x0, y0), (x1, y1) = box.lower, box.upper
        ax.add_patch(Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False,
                               edgecolor="black", linewidth=1.0))
        if points is not None and len(points):
            ax.scatter(points[:, 0], points[:, 1], s=1.5, color="tab:gray", alpha=0.6,
                       linewidths=0, label="preimage samples")
        color = "tab:blue" if union.mode.value == "under" else "tab:orange"
        for poly in union_polygons(union):
            ax.add_patch(PolygonPatch(poly, closed=True, facecolor=color, alpha=0.35,
                                      edgecolor=color, linewidth=0.6))
        pad = 0.02 * max(x1 - x0, y1 - y0, 1e-12)
        ax.set_xlim(x0 - pad, x1 + pad)
        ax.set_ylim(y0 - pad, y1 + pad)
        ax.set_aspect("equal", adjustable="box")
        ax.set_xlabel("$x_1$")
        ax.set_ylabel("$x_2$")
        ax.set_title(title or f"{union.mode.value}-approximation, {len(union)} polytopes")
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
