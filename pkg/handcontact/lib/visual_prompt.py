"""
Multi-view visual prompts for the hand mesh.

The part prompt is one image row of orthographic views with faces colored by
part and each part's index printed once, in the view where most of its
vertices are visible. The full prompt adds a second row with the same views
carrying the part-wise vertex grids: a dot where each grid row starts, a line
through the row, and a connector into the next row.

Screen coordinates are continuous pixels (x right, y down); pixel (i, j)
covers [i, i+1) x [j, j+1). Depth grows toward the viewer.
"""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .errors import ConfigError, RenderError
from .hand_model import ContactVector, HandMesh, PartSegmentation, PathLike

logger = logging.getLogger(__name__)

Point = Tuple[float, float]
Color = Tuple[int, int, int]


@dataclass(frozen=True)
class ViewFrame:
    right: Tuple[float, float, float]
    up: Tuple[float, float, float]
    toward: Tuple[float, float, float]


# Right-handed frames in mesh coordinates (+y toward the fingertips, +z out of the palm,
# +x toward the pinky side for the palmar view).
VIEW_FRAMES: Dict[str, ViewFrame] = {
    "palmar": ViewFrame(right=(1.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), toward=(0.0, 0.0, 1.0)),
    "dorsal": ViewFrame(right=(-1.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), toward=(0.0, 0.0, -1.0)),
    "radial": ViewFrame(right=(0.0, 0.0, 1.0), up=(0.0, 1.0, 0.0), toward=(-1.0, 0.0, 0.0)),
    "ulnar": ViewFrame(right=(0.0, 0.0, -1.0), up=(0.0, 1.0, 0.0), toward=(1.0, 0.0, 0.0)),
}
DEFAULT_VIEWS = ("palmar", "dorsal", "radial", "ulnar")

OVERLAY_COLOR: Color = (0, 0, 0)
CONTACT_COLOR: Color = (220, 30, 30)
NO_CONTACT_COLOR: Color = (200, 200, 200)


@dataclass(frozen=True)
class ViewConfig:
    views: Tuple[str, ...] = DEFAULT_VIEWS
    image_width: int = 320
    image_height: int = 320
    margin: int = 16
    background: Color = (255, 255, 255)
    palette_seed: int = 7
    depth_tolerance: float = 1e-3
    jpeg_quality: int = 90
    dot_radius: int = 2

    def __post_init__(self) -> None:
        if not self.views:
            raise ConfigError("ViewConfig needs at least one view")
        unknown = [v for v in self.views if v not in VIEW_FRAMES]
        if unknown:
            raise ConfigError(f"Unknown views: {unknown}")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ConfigError("View dimensions must be positive")
        if self.margin < 0 or 2 * self.margin >= min(self.image_width, self.image_height):
            raise ConfigError("Margin leaves no drawable area")


@dataclass(frozen=True)
class ViewCamera:
    view: str
    frame: ViewFrame
    center: Tuple[float, float, float]
    scale: float
    width: int
    height: int

    def project_points(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(N, 3) points to (N, 2) pixel positions and (N,) depths."""
        rel = np.asarray(points, dtype=np.float64) - np.asarray(self.center)
        px = self.width / 2.0 + self.scale * (rel @ np.asarray(self.frame.right))
        py = self.height / 2.0 - self.scale * (rel @ np.asarray(self.frame.up))
        depth = np.asarray(points, dtype=np.float64) @ np.asarray(self.frame.toward)
        return np.stack([px, py], axis=1), depth


@dataclass(frozen=True)
class PanelLayout:
    name: str
    view: str
    x: int
    y: int
    width: int
    height: int

    def contains(self, point: Point) -> bool:
        px, py = point
        return self.x <= px <= self.x + self.width and self.y <= py <= self.y + self.height


@dataclass(frozen=True, eq=False)
class ProjectedView:
    panel: str
    positions: np.ndarray  # (N, 2) image coordinates
    depth: np.ndarray
    visible: np.ndarray


@dataclass(frozen=True)
class LabelPlacement:
    part_index: int
    panel: str
    position: Point


@dataclass(frozen=True)
class GridOverlay:
    part_index: int
    panel: str
    dots: Tuple[Point, ...]
    polylines: Tuple[Tuple[Point, ...], ...]
    connectors: Tuple[Tuple[Point, Point], ...]


@dataclass(frozen=True, eq=False)
class RenderedPrompt:
    image: Image.Image
    legend: Dict[int, Color]
    layout: Tuple[PanelLayout, ...]
    projected: Dict[str, ProjectedView]
    labels: Tuple[LabelPlacement, ...] = ()
    overlays: Tuple[GridOverlay, ...] = ()

    def panel(self, name: str) -> PanelLayout:
        for p in self.layout:
            if p.name == name:
                return p
        raise KeyError(name)

    def to_png_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.image.save(buf, format="PNG")
        return buf.getvalue()

    def to_sidecar(self) -> Dict[str, Any]:
        return {
            "image_size": list(self.image.size),
            "panels": [asdict(p) for p in self.layout],
            "legend": {str(k): list(v) for k, v in sorted(self.legend.items())},
            "projected": {
                name: {
                    "positions": np.round(pv.positions, 3).tolist(),
                    "visible": pv.visible.astype(int).tolist(),
                }
                for name, pv in self.projected.items()
            },
            "labels": [
                {"part_index": lab.part_index, "panel": lab.panel, "position": list(lab.position)} for lab in self.labels
            ],
            "overlays": [
                {
                    "part_index": o.part_index,
                    "panel": o.panel,
                    "dots": [list(d) for d in o.dots],
                    "polylines": [[list(p) for p in line] for line in o.polylines],
                    "connectors": [[list(a), list(b)] for a, b in o.connectors],
                }
                for o in self.overlays
            ],
        }


# ---------------------------------------------------------------------------
# Cameras and projection
# ---------------------------------------------------------------------------

def fit_camera(vertices: np.ndarray, view: str, cfg: ViewConfig) -> ViewCamera:
    """Orthographic camera whose drawable area (view minus margin) fits the mesh bounding box."""
    frame = VIEW_FRAMES[view]
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    center = (lo + hi) / 2.0
    extent_x = float(np.ptp(vertices @ np.asarray(frame.right)))
    extent_y = float(np.ptp(vertices @ np.asarray(frame.up)))
    if extent_x <= 0 and extent_y <= 0:
        raise RenderError(f"Degenerate camera for view {view}: mesh has zero extent on screen")
    scales = []
    if extent_x > 0:
        scales.append((cfg.image_width - 2 * cfg.margin) / extent_x)
    if extent_y > 0:
        scales.append((cfg.image_height - 2 * cfg.margin) / extent_y)
    return ViewCamera(
        view=view,
        frame=frame,
        center=tuple(float(c) for c in center),
        scale=min(scales),
        width=cfg.image_width,
        height=cfg.image_height,
    )


def project(position: Sequence[float], camera: ViewCamera) -> Tuple[float, float, float]:
    xy, depth = camera.project_points(np.asarray([position], dtype=np.float64))
    return float(xy[0, 0]), float(xy[0, 1]), float(depth[0])


def project_vertices(mesh: HandMesh, camera: ViewCamera) -> Tuple[np.ndarray, np.ndarray]:
    return camera.project_points(mesh.vertices)


def _orient2d(ax: float, ay: float, bx: float, by: float, px: Any, py: Any) -> Any:
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def rasterize_view(
    xy: np.ndarray,
    depth: np.ndarray,
    faces: np.ndarray,
    face_colors: np.ndarray,
    cfg: ViewConfig,
) -> Tuple[np.ndarray, np.ndarray]:
    """Z-buffered flat-color fill of projected triangles; returns (rgb, zbuf)."""
    h, w = cfg.image_height, cfg.image_width
    rgb = np.empty((h, w, 3), dtype=np.uint8)
    rgb[:] = cfg.background
    zbuf = np.full((h, w), -np.inf)

    for f, (a, b, c) in enumerate(faces.tolist()):
        (x0, y0), (x1, y1), (x2, y2) = xy[a], xy[b], xy[c]
        area = _orient2d(x0, y0, x1, y1, x2, y2)
        if abs(area) < 1e-12:
            continue
        left = max(int(math.floor(min(x0, x1, x2))), 0)
        right = min(int(math.ceil(max(x0, x1, x2))), w - 1)
        top = max(int(math.floor(min(y0, y1, y2))), 0)
        bottom = min(int(math.ceil(max(y0, y1, y2))), h - 1)
        if left > right or top > bottom:
            continue

        px, py = np.meshgrid(np.arange(left, right + 1) + 0.5, np.arange(top, bottom + 1) + 0.5)
        b0 = _orient2d(x1, y1, x2, y2, px, py) / area
        b1 = _orient2d(x2, y2, x0, y0, px, py) / area
        b2 = 1.0 - b0 - b1
        inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
        if not inside.any():
            continue
        z = b0 * depth[a] + b1 * depth[b] + b2 * depth[c]

        region = zbuf[top:bottom + 1, left:right + 1]
        closer = inside & (z > region)
        region[closer] = z[closer]
        rgb[top:bottom + 1, left:right + 1][closer] = face_colors[f]
    return rgb, zbuf


def visible_vertices(xy: np.ndarray, depth: np.ndarray, zbuf: np.ndarray, tolerance: float) -> np.ndarray:
    """A vertex is visible when it is no further than `tolerance` behind the nearest
    surface in the 2x2 pixels around it; uncovered pixels never hide a vertex."""
    h, w = zbuf.shape
    cols0 = np.clip(np.floor(xy[:, 0] - 0.5).astype(int), 0, w - 1)
    rows0 = np.clip(np.floor(xy[:, 1] - 0.5).astype(int), 0, h - 1)
    cols1 = np.clip(cols0 + 1, 0, w - 1)
    rows1 = np.clip(rows0 + 1, 0, h - 1)
    surface = np.maximum.reduce([zbuf[rows0, cols0], zbuf[rows0, cols1], zbuf[rows1, cols0], zbuf[rows1, cols1]])
    return depth >= surface - tolerance


# ---------------------------------------------------------------------------
# Colors
# ---------------------------------------------------------------------------

def part_palette(part_count: int, seed: int) -> Dict[int, Color]:
    rng = np.random.default_rng(seed)
    colors = rng.integers(40, 216, size=(part_count, 3))
    return {i: tuple(int(c) for c in colors[i]) for i in range(part_count)}


def face_parts(seg: PartSegmentation, faces: np.ndarray) -> np.ndarray:
    """Majority part of each face's three vertices; three-way ties go to the lowest index."""
    owners = seg.vertex_part[faces]
    a, b, c = owners[:, 0], owners[:, 1], owners[:, 2]
    return np.where((a == b) | (a == c), a, np.where(b == c, b, owners.min(axis=1)))


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

@dataclass
class _ViewRender:
    view: str
    rgb: np.ndarray
    xy: np.ndarray
    depth: np.ndarray
    visible: np.ndarray


def _render_views(mesh: HandMesh, face_colors: np.ndarray, cfg: ViewConfig) -> List[_ViewRender]:
    lo, hi = mesh.bounding_box()
    tolerance = cfg.depth_tolerance * float(np.linalg.norm(hi - lo))
    out = []
    for view in cfg.views:
        camera = fit_camera(mesh.vertices, view, cfg)
        xy, depth = project_vertices(mesh, camera)
        rgb, zbuf = rasterize_view(xy, depth, mesh.faces, face_colors, cfg)
        out.append(_ViewRender(view, rgb, xy, depth, visible_vertices(xy, depth, zbuf, tolerance)))
    return out


def _compose_row(
    canvas: np.ndarray,
    renders: Sequence[_ViewRender],
    cfg: ViewConfig,
    row: int,
    suffix: str,
) -> Tuple[List[PanelLayout], Dict[str, ProjectedView]]:
    layouts: List[PanelLayout] = []
    projected: Dict[str, ProjectedView] = {}
    y = row * cfg.image_height
    for i, r in enumerate(renders):
        x = i * cfg.image_width
        name = f"{r.view}{suffix}"
        canvas[y:y + cfg.image_height, x:x + cfg.image_width] = r.rgb
        layouts.append(PanelLayout(name=name, view=r.view, x=x, y=y, width=cfg.image_width, height=cfg.image_height))
        projected[name] = ProjectedView(
            panel=name,
            positions=r.xy + np.asarray([x, y], dtype=np.float64),
            depth=r.depth,
            visible=r.visible,
        )
    return layouts, projected


def _place_labels(seg: PartSegmentation, projected: Dict[str, ProjectedView], panels: Sequence[str]) -> List[LabelPlacement]:
    labels = []
    for part in seg.parts:
        ids = np.asarray(part.vertex_ids)
        best: Optional[str] = None
        best_count = 0
        for name in panels:
            count = int(projected[name].visible[ids].sum())
            if count > best_count:
                best, best_count = name, count
        if best is None:
            logger.warning("Part %s is not visible in any view; no label drawn", part.name)
            continue
        pv = projected[best]
        pts = pv.positions[ids[pv.visible[ids]]]
        cx, cy = pts.mean(axis=0)
        labels.append(LabelPlacement(part_index=part.index, panel=best, position=(float(cx), float(cy))))
    return labels


def _draw_label(draw: ImageDraw.ImageDraw, font: Any, text: str, position: Point) -> None:
    left, top, right, bottom = draw.textbbox((0, 0), text, font=font)
    x = position[0] - (right - left) / 2.0 - left
    y = position[1] - (bottom - top) / 2.0 - top
    for dx, dy in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        draw.text((x + dx, y + dy), text, fill=(0, 0, 0), font=font)
    draw.text((x, y), text, fill=(255, 255, 255), font=font)


def _grid_overlays(seg: PartSegmentation, projected: Dict[str, ProjectedView], panels: Sequence[str]) -> List[GridOverlay]:
    overlays = []
    for name in panels:
        pv = projected[name]
        for grid in seg.grids:
            visible_rows = [
                [tuple(float(c) for c in pv.positions[v]) for v in row if pv.visible[v]]
                for row in grid.row_vertex_ids
            ]
            dots = tuple(row[0] for row in visible_rows if row)
            if not dots:
                continue
            polylines = tuple(tuple(row) for row in visible_rows if len(row) > 1)
            connectors = tuple(
                (visible_rows[r][-1], visible_rows[r + 1][0])
                for r in range(len(visible_rows) - 1)
                if visible_rows[r] and visible_rows[r + 1]
            )
            overlays.append(GridOverlay(grid.part_index, name, dots, polylines, connectors))
    return overlays


def _draw_overlay(draw: ImageDraw.ImageDraw, overlay: GridOverlay, radius: int) -> None:
    for line in overlay.polylines:
        draw.line(list(line), fill=OVERLAY_COLOR, width=1)
    for a, b in overlay.connectors:
        draw.line([a, b], fill=OVERLAY_COLOR, width=1)
    for x, y in overlay.dots:
        draw.ellipse([x - radius, y - radius, x + radius, y + radius], fill=OVERLAY_COLOR)


def _part_face_colors(mesh: HandMesh, seg: PartSegmentation, cfg: ViewConfig) -> Tuple[np.ndarray, Dict[int, Color]]:
    if seg.vertex_count != mesh.vertex_count:
        raise RenderError(f"Segmentation covers {seg.vertex_count} vertices; mesh has {mesh.vertex_count}")
    legend = part_palette(seg.part_count, cfg.palette_seed)
    table = np.asarray([legend[i] for i in range(seg.part_count)], dtype=np.uint8)
    return table[face_parts(seg, mesh.faces)], legend


def _render(mesh: HandMesh, seg: PartSegmentation, cfg: ViewConfig, with_grids: bool) -> RenderedPrompt:
    face_colors, legend = _part_face_colors(mesh, seg, cfg)
    renders = _render_views(mesh, face_colors, cfg)
    rows = 2 if with_grids else 1
    canvas = np.empty((rows * cfg.image_height, len(renders) * cfg.image_width, 3), dtype=np.uint8)

    layout, projected = _compose_row(canvas, renders, cfg, 0, "")
    part_panels = [p.name for p in layout]
    grid_panels: List[str] = []
    if with_grids:
        grid_layout, grid_projected = _compose_row(canvas, renders, cfg, 1, ":grid")
        layout += grid_layout
        projected.update(grid_projected)
        grid_panels = [p.name for p in grid_layout]

    image = Image.fromarray(canvas)
    draw = ImageDraw.Draw(image)
    font = ImageFont.load_default()
    labels = _place_labels(seg, projected, part_panels)
    for label in labels:
        _draw_label(draw, font, str(label.part_index), label.position)
    overlays = _grid_overlays(seg, projected, grid_panels)
    for overlay in overlays:
        _draw_overlay(draw, overlay, cfg.dot_radius)

    return RenderedPrompt(
        image=image,
        legend=legend,
        layout=tuple(layout),
        projected=projected,
        labels=tuple(labels),
        overlays=tuple(overlays),
    )


def render_part_prompt(mesh: HandMesh, seg: PartSegmentation, cfg: Optional[ViewConfig] = None) -> RenderedPrompt:
    return _render(mesh, seg, cfg or ViewConfig(), with_grids=False)


def render_full_prompt(mesh: HandMesh, seg: PartSegmentation, cfg: Optional[ViewConfig] = None) -> RenderedPrompt:
    return _render(mesh, seg, cfg or ViewConfig(), with_grids=True)


def render_contact(mesh: HandMesh, contact: ContactVector, cfg: Optional[ViewConfig] = None) -> RenderedPrompt:
    """Contact faces (two or more contact vertices) in red, the rest grey."""
    cfg = cfg or ViewConfig()
    if contact.vertex_count != mesh.vertex_count:
        raise RenderError(f"Contact vector has {contact.vertex_count} entries; mesh has {mesh.vertex_count}")
    in_contact = contact.values[mesh.faces].sum(axis=1) >= 2
    face_colors = np.where(in_contact[:, None], np.asarray(CONTACT_COLOR), np.asarray(NO_CONTACT_COLOR)).astype(np.uint8)
    renders = _render_views(mesh, face_colors, cfg)
    canvas = np.empty((cfg.image_height, len(renders) * cfg.image_width, 3), dtype=np.uint8)
    layout, projected = _compose_row(canvas, renders, cfg, 0, "")
    return RenderedPrompt(
        image=Image.fromarray(canvas),
        legend={0: NO_CONTACT_COLOR, 1: CONTACT_COLOR},
        layout=tuple(layout),
        projected=projected,
    )


def write_prompt_images(
    part_prompt: RenderedPrompt,
    full_prompt: RenderedPrompt,
    out_dir: PathLike,
    cfg: Optional[ViewConfig] = None,
) -> Dict[str, Path]:
    """Write part.jpg, full.jpg and the projected-positions sidecar."""
    cfg = cfg or ViewConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"part": out / "part.jpg", "full": out / "full.jpg", "sidecar": out / "projected.json"}
    part_prompt.image.save(paths["part"], format="JPEG", quality=cfg.jpeg_quality)
    full_prompt.image.save(paths["full"], format="JPEG", quality=cfg.jpeg_quality)
    sidecar = {"part": part_prompt.to_sidecar(), "full": full_prompt.to_sidecar()}
    paths["sidecar"].write_text(json.dumps(sidecar) + "\n", encoding="utf-8")
    return paths
