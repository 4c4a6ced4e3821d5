"""Candidate generation, global-to-image projection and marker annotation."""
from __future__ import annotations

import base64
import enum
import io
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .errors import UnknownMarker
from .mapping import DEFAULT_MIN_CLUSTER, DEFAULT_SPACING, GlobalMap, cluster_frontiers, grid_samples, snap_to_floor
from .sensor import PANORAMA_OFFSETS, CameraModel, Observation, PanoramicObservation, colorize, extrinsics
from .scene import AgentPose

MARKER_HEIGHT = 0.1
DEFAULT_MAX_CANDIDATES = 8
DISC_RADIUS = 6
FONT_SIZE = 10
CANDIDATE_COLOR = (0, 255, 0)
VISITED_COLOR = (0, 0, 255)
LABEL_BG = (255, 255, 255)
LABEL_FG = (0, 0, 0)


class CandidateSource(enum.Enum):
    FRONTIER_CLUSTER = "FRONTIER_CLUSTER"
    GRID_SAMPLE = "GRID_SAMPLE"


class MarkerKind(enum.Enum):
    CANDIDATE = "CANDIDATE"
    VISITED = "VISITED"


@dataclass(frozen=True)
class Candidate:
    position: tuple[float, float]
    source: CandidateSource
    cluster_id: int | None = None
    size: int = 0


def generate_candidates(
    gmap: GlobalMap,
    max_n: int | None = DEFAULT_MAX_CANDIDATES,
    min_size: int = DEFAULT_MIN_CLUSTER,
    spacing: float = DEFAULT_SPACING,
) -> list[Candidate]:
    """Snapped frontier-cluster centroids (largest first), then lattice samples."""
    if not gmap.free.any():
        return []
    clusters = cluster_frontiers(gmap, min_size=min_size)
    out: list[Candidate] = []
    used = set()
    for cid, cl in enumerate(clusters):
        cell = snap_to_floor(gmap, cl.centroid)
        if cell in used:
            continue
        used.add(cell)
        out.append(Candidate(gmap.cell_center(cell), CandidateSource.FRONTIER_CLUSTER, cid, cl.size))
    for p in grid_samples(gmap, spacing, [c.centroid for c in clusters]):
        cell = gmap.cell_of(p)
        if cell in used:
            continue
        used.add(cell)
        out.append(Candidate(p, CandidateSource.GRID_SAMPLE))
    return out if max_n is None else out[:max_n]


# --------------------------------------------------------------------------
# projection


@dataclass(frozen=True)
class Projection:
    view_index: int
    uv: tuple[float, float]  # continuous pixel in the view
    pixel: tuple[int, int]  # integer pixel in the tiled image
    depth: float


def project_to_view(camera: CameraModel, pose: AgentPose, yaw_offset: float, camera_z: float, point3) -> tuple[float, float, float]:
    """Pinhole projection ``K [R|t] X``; returns (u, v, w) with w the camera depth."""
    E = extrinsics(pose, yaw_offset, camera_z)
    x, y, w = camera.K @ (E @ np.append(np.asarray(point3, dtype=float), 1.0))
    if w <= 0:
        return (math.nan, math.nan, float(w))
    return (float(x / w), float(y / w), float(w))


def project_point(
    camera: CameraModel,
    pose: AgentPose,
    global_point,
    panorama: PanoramicObservation | None = None,
    *,
    camera_z: float | None = None,
    floor_height: float | None = None,
    views=(0, 1, 2, 3),
    marker_height: float = MARKER_HEIGHT,
    tolerance: float = 0.25,
) -> Projection | None:
    """First view (in 0, pi/2, pi, 3pi/2 order) that sees a floor point.

    A view accepts the point when it lies in front of the camera, inside the
    image, and not behind the rendered depth at that pixel by more than
    ``tolerance``. Without a panorama the occlusion test is skipped.
    """
    if panorama is not None:
        camera_z = panorama.views[0].camera_z if camera_z is None else camera_z
        floor_height = panorama.views[0].floor_height if floor_height is None else floor_height
    if camera_z is None or floor_height is None:
        raise ValueError("camera_z and floor_height are required without a panorama")
    p3 = (float(global_point[0]), float(global_point[1]), floor_height + marker_height)
    for k in views:
        u, v, w = project_to_view(camera, pose, PANORAMA_OFFSETS[k], camera_z, p3)
        if not w > 0:
            continue
        iu, iv = int(round(u)), int(round(v))
        if not (0 <= iu < camera.width and 0 <= iv < camera.height):
            continue
        if panorama is not None and w > panorama.views[k].depth[iv, iu] + tolerance:
            continue
        ox = camera.width if k in (1, 3) else 0
        oy = camera.height if k in (2, 3) else 0
        return Projection(k, (u, v), (iu + ox, iv + oy), w)
    return None


# --------------------------------------------------------------------------
# annotation


@dataclass(frozen=True)
class Marker:
    marker_id: int
    pixel: tuple[int, int]
    view_index: int
    global_position: tuple[float, float]
    kind: MarkerKind


@dataclass
class MarkerTable:
    entries: dict[int, Marker] = field(default_factory=dict)

    def __contains__(self, marker_id) -> bool:
        return marker_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self, kind: MarkerKind | None = None) -> list[int]:
        return [i for i, m in self.entries.items() if kind is None or m.kind is kind]

    @property
    def candidate_ids(self) -> list[int]:
        return self.ids(MarkerKind.CANDIDATE)

    def to_json(self) -> list[dict]:
        return [
            {
                "id": m.marker_id,
                "pixel": list(m.pixel),
                "view": m.view_index,
                "global": [m.global_position[0], m.global_position[1]],
                "kind": m.kind.value,
            }
            for m in self.entries.values()
        ]


def marker_to_global(table: MarkerTable, marker_id: int) -> tuple[float, float]:
    try:
        return table.entries[marker_id].global_position
    except KeyError:
        raise UnknownMarker(marker_id) from None


@dataclass(eq=False)
class AnnotatedPanorama:
    image: Image.Image
    table: MarkerTable
    panorama: PanoramicObservation | None = None
    label_boxes: dict[int, tuple[int, int, int, int]] = field(default_factory=dict)

    def png_bytes(self) -> bytes:
        return to_png(self.image)

    def base64(self) -> str:
        return base64.b64encode(self.png_bytes()).decode("ascii")


def to_png(image: Image.Image) -> bytes:
    buf = io.BytesIO()
    image.save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def panorama_image(panorama: PanoramicObservation) -> Image.Image:
    rgb = colorize(panorama.depth, panorama.semantic, panorama.camera.max_range)
    return Image.fromarray(rgb, "RGB")


def view_image(observation: Observation) -> Image.Image:
    return Image.fromarray(colorize(observation.depth, observation.semantic, observation.camera.max_range), "RGB")


_FONT = None


def _font():
    global _FONT
    if _FONT is None:
        _FONT = ImageFont.load_default(size=FONT_SIZE)
    return _FONT


def _overlap(a, b) -> float:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return max(0, w) * max(0, h)


def _place_label(draw, text, center, placed, size):
    font = _font()
    l, t, r, b = draw.textbbox((0, 0), text, font=font)
    w, h = r - l + 2, b - t + 2
    x0 = int(center[0]) + DISC_RADIUS + 1
    if x0 + w > size[0]:
        x0 = int(center[0]) - DISC_RADIUS - 1 - w
    base_y = int(center[1]) - h // 2
    area = w * h
    for shift in [0] + [s * sign for s in range(h // 2, 4 * h, h // 2) for sign in (-1, 1)]:
        y0 = min(max(base_y + shift, 0), size[1] - h)
        box = (x0, y0, x0 + w, y0 + h)
        if all(_overlap(box, other) <= 0.25 * area for other in placed):
            return box, (x0 + 1 - l, y0 + 1 - t)
    y0 = min(max(base_y, 0), size[1] - h)
    return (x0, y0, x0 + w, y0 + h), (x0 + 1 - l, y0 + 1 - t)


def draw_markers(image: Image.Image, table: MarkerTable) -> dict[int, tuple[int, int, int, int]]:
    """Draw discs and numeric labels in place; returns label boxes by id."""
    draw = ImageDraw.Draw(image)
    boxes: dict[int, tuple[int, int, int, int]] = {}
    for m in table.entries.values():
        if m.kind is MarkerKind.CANDIDATE:
            box, origin = _place_label(draw, str(m.marker_id), m.pixel, list(boxes.values()), image.size)
            draw.rectangle(box, fill=LABEL_BG)
            draw.text(origin, str(m.marker_id), fill=LABEL_FG, font=_font())
            boxes[m.marker_id] = box
    for m in table.entries.values():
        x, y = m.pixel
        color = CANDIDATE_COLOR if m.kind is MarkerKind.CANDIDATE else VISITED_COLOR
        draw.ellipse((x - DISC_RADIUS, y - DISC_RADIUS, x + DISC_RADIUS, y + DISC_RADIUS), fill=color)
    return boxes


def build_table(projected: list[tuple[Projection, tuple[float, float]]], visits: list[tuple[Projection, tuple[float, float]]]) -> MarkerTable:
    """Number candidates by (view, pixel x); visits follow with higher ids."""
    table = MarkerTable()
    order = sorted(range(len(projected)), key=lambda i: (projected[i][0].view_index, projected[i][0].uv[0], i))
    for mid, i in enumerate(order):
        proj, pos = projected[i]
        table.entries[mid] = Marker(mid, proj.pixel, proj.view_index, pos, MarkerKind.CANDIDATE)
    nxt = len(table.entries)
    vorder = sorted(range(len(visits)), key=lambda i: (visits[i][0].view_index, visits[i][0].uv[0], i))
    for i in vorder:
        proj, pos = visits[i]
        table.entries[nxt] = Marker(nxt, proj.pixel, proj.view_index, pos, MarkerKind.VISITED)
        nxt += 1
    return table


def annotate(
    panorama: PanoramicObservation,
    candidates,
    visits=(),
    *,
    tolerance: float = 0.25,
    max_markers: int | None = None,
) -> AnnotatedPanorama:
    """Project candidates (green, numbered) and visits (blue) onto the panorama.

    With ``max_markers`` only the first that many visible candidates, in
    input order, are kept.
    """
    cam, pose = panorama.camera, panorama.pose
    projected, seen = [], set()
    for c in candidates:
        if max_markers is not None and len(projected) >= max_markers:
            break
        pos = tuple(c.position) if isinstance(c, Candidate) else (float(c[0]), float(c[1]))
        if pos in seen:
            continue
        proj = project_point(cam, pose, pos, panorama, tolerance=tolerance)
        if proj is not None:
            projected.append((proj, pos))
            seen.add(pos)
    vis = []
    for v in visits:
        pos = tuple(v.position) if hasattr(v, "position") else (float(v[0]), float(v[1]))
        if pos in seen:
            continue
        proj = project_point(cam, pose, pos, panorama, tolerance=tolerance)
        if proj is not None:
            vis.append((proj, pos))
            seen.add(pos)
    table = build_table(projected, vis)
    image = panorama_image(panorama)
    boxes = draw_markers(image, table)
    return AnnotatedPanorama(image, table, panorama, boxes)
