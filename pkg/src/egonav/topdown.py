"""Top-down images of scenes, belief maps and trajectories."""
from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .mapping import FREE, OBSTACLE, GlobalMap
from .scene import Scene
from .sensor import _palette

FLOOR_RGB = (235, 235, 228)
WALL_RGB = (70, 70, 78)
UNKNOWN_RGB = (128, 128, 128)
FRONTIER_RGB = (255, 150, 0)
VIEWPOINT_RGB = (220, 30, 30)
PATH_RGB = (20, 90, 230)
START_RGB = (0, 170, 0)


def _to_image(rgb: np.ndarray, scale: int) -> Image.Image:
    # arrays are indexed [ix, iy]; images are [row=iy, col=ix]
    img = np.repeat(np.repeat(rgb.transpose(1, 0, 2), scale, axis=0), scale, axis=1)
    return Image.fromarray(img.astype(np.uint8))


def _px(point, resolution: float, scale: int) -> tuple[float, float]:
    return (point[0] / resolution * scale, point[1] / resolution * scale)


def ground_truth_image(scene: Scene, scale: int = 8, goal_category: str | None = None) -> Image.Image:
    """Free floor, walls and objects; goal viewpoints as red dots when a goal is given."""
    nx, ny, _ = scene.dims
    rgb = np.empty((nx, ny, 3))
    rgb[:] = WALL_RGB
    rgb[scene.free_mask] = FLOOR_RGB
    for obj in scene.objects:
        cols = {(int(v[0]), int(v[1])) for v in obj.voxels}
        for c in cols:
            rgb[c] = _palette(obj.semantic_id)
    img = _to_image(rgb, scale)
    if goal_category is not None:
        draw = ImageDraw.Draw(img)
        for vp in scene.goal_viewpoints(goal_category):
            x, y = _px(vp, scene.resolution, scale)
            draw.ellipse([x - 2, y - 2, x + 2, y + 2], fill=VIEWPOINT_RGB)
    return img


def belief_image(gmap: GlobalMap, scale: int = 8) -> Image.Image:
    rgb = np.empty(gmap.shape + (3,))
    rgb[:] = UNKNOWN_RGB
    rgb[gmap.cells == FREE] = FLOOR_RGB
    rgb[gmap.cells == OBSTACLE] = WALL_RGB
    rgb[gmap.frontier_cells] = FRONTIER_RGB
    return _to_image(rgb, scale)


def draw_path(image: Image.Image, points, resolution: float, scale: int = 8, color=PATH_RGB) -> Image.Image:
    pts = [_px(p, resolution, scale) for p in points]
    draw = ImageDraw.Draw(image)
    if len(pts) > 1:
        draw.line(pts, fill=color, width=2)
    if pts:
        x, y = pts[0]
        draw.ellipse([x - 3, y - 3, x + 3, y + 3], fill=START_RGB)
    return image


def side_by_side(left: Image.Image, right: Image.Image, gap: int = 8) -> Image.Image:
    out = Image.new("RGB", (left.width + gap + right.width, max(left.height, right.height)), (255, 255, 255))
    out.paste(left, (0, 0))
    out.paste(right, (left.width + gap, 0))
    return out
