"""The agent's 2D belief map: occupancy integration, frontiers, sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _kernels, grid
from .errors import NoFreeSpace
from .sensor import Observation

UNKNOWN = 0
FREE = 1
OBSTACLE = 2

SNAPSHOT_CHARS = {UNKNOWN: "?", FREE: ".", OBSTACLE: "#"}
DEFAULT_MIN_CLUSTER = 3
DEFAULT_SPACING = 2.0

_FOUR = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=bool)
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class FrontierCluster:
    cells: tuple[tuple[int, int], ...]
    centroid: tuple[float, float]

    @property
    def size(self) -> int:
        return len(self.cells)


def extract_frontiers(cells) -> np.ndarray:
    """Boolean mask of FREE cells with at least one UNKNOWN 4-neighbour.

    Accepts a :class:`GlobalMap` or a raw cell array.
    """
    cells = getattr(cells, "cells", cells)
    unknown = cells == UNKNOWN
    near_unknown = ndimage.binary_dilation(unknown, structure=_FOUR, border_value=0)
    return (cells == FREE) & near_unknown


class GlobalMap:
    """Floor-projected belief grid with UNKNOWN / FREE / OBSTACLE cells.

    ``frontier_cells`` is refreshed after every update and always equals
    ``extract_frontiers(cells)``.
    """

    def __init__(self, shape, resolution: float, origin=(0.0, 0.0), agent_height: float = 0.75):
        self.resolution = float(resolution)
        self.origin = (float(origin[0]), float(origin[1]))
        self.agent_height = float(agent_height)
        self.cells = np.full(tuple(shape), UNKNOWN, dtype=np.uint8)
        self.frontier_cells = np.zeros(tuple(shape), dtype=bool)

    @classmethod
    def for_scene(cls, scene) -> "GlobalMap":
        return cls(scene.dims[:2], scene.resolution, agent_height=scene.agent_height)

    @classmethod
    def from_cells(cls, cells: np.ndarray, resolution: float, origin=(0.0, 0.0)) -> "GlobalMap":
        m = cls(cells.shape, resolution, origin)
        m.cells[...] = cells
        m._refresh()
        return m

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    @property
    def free(self) -> np.ndarray:
        return self.cells == FREE

    def copy(self) -> "GlobalMap":
        m = GlobalMap(self.shape, self.resolution, self.origin, self.agent_height)
        m.cells[...] = self.cells
        m.frontier_cells[...] = self.frontier_cells
        return m

    def cell_of(self, point) -> tuple[int, int]:
        return grid.point_to_cell(point, self.resolution, self.origin)

    def cell_center(self, cell) -> tuple[float, float]:
        return grid.cell_center(cell, self.resolution, self.origin)

    def in_bounds(self, cell) -> bool:
        return grid.in_bounds(cell, self.shape)

    def _refresh(self) -> None:
        self.frontier_cells = extract_frontiers(self.cells)

    def integrate(self, observation: Observation) -> "GlobalMap":
        """Fold one depth image into the map (latest observation wins)."""
        free = np.zeros(self.shape, dtype=bool)
        obst = np.zeros(self.shape, dtype=bool)
        _kernels.integrate_rays(
            observation.depth.reshape(-1),
            np.ascontiguousarray(observation.world_rays()),
            observation.origin,
            self.resolution,
            np.array(self.origin),
            free,
            obst,
            observation.floor_height,
            observation.floor_height + self.agent_height,
            float(observation.camera.max_range),
        )
        self.cells[free & ~obst] = FREE
        self.cells[obst] = OBSTACLE
        self._refresh()
        return self

    def mark_obstacle(self, cell) -> None:
        if self.in_bounds(cell):
            self.cells[cell] = OBSTACLE
            self._refresh()

    def snapshot(self) -> str:
        """Character grid, one line per ``iy`` (``?`` unknown, ``.`` free, ``#`` obstacle)."""
        lut = np.array([SNAPSHOT_CHARS[UNKNOWN], SNAPSHOT_CHARS[FREE], SNAPSHOT_CHARS[OBSTACLE]])
        return "\n".join("".join(lut[self.cells[:, iy]]) for iy in range(self.shape[1])) + "\n"

    @classmethod
    def from_snapshot(cls, text: str, resolution: float, origin=(0.0, 0.0)) -> "GlobalMap":
        rows = [r for r in text.splitlines() if r]
        inv = {v: k for k, v in SNAPSHOT_CHARS.items()}
        cells = np.array([[inv[ch] for ch in row] for row in rows], dtype=np.uint8).T
        return cls.from_cells(cells, resolution, origin)


def integrate_observation(gmap: GlobalMap, observation: Observation, camera=None) -> GlobalMap:
    # camera is carried by the observation; the argument is accepted for symmetry
    return gmap.integrate(observation)


def cluster_frontiers(gmap: GlobalMap, frontier_cells=None, min_size: int = DEFAULT_MIN_CLUSTER) -> list[FrontierCluster]:
    """8-connected frontier components, largest first."""
    mask = gmap.frontier_cells if frontier_cells is None else frontier_cells
    labels, n = ndimage.label(mask, structure=_EIGHT)
    clusters = []
    for lab in range(1, n + 1):
        cells = np.argwhere(labels == lab)
        if len(cells) < min_size:
            continue
        centers = (cells + 0.5) * gmap.resolution + np.array(gmap.origin)
        cx, cy = centers.mean(axis=0)
        clusters.append(FrontierCluster(tuple(map(tuple, cells.tolist())), (float(cx), float(cy))))
    clusters.sort(key=lambda c: (-c.size, c.cells[0]))
    return clusters


def snap_to_floor(gmap: GlobalMap, point) -> tuple[int, int]:
    """Nearest FREE cell by centre distance; ties go to the smaller (ix, iy)."""
    free = np.argwhere(gmap.cells == FREE)
    if len(free) == 0:
        raise NoFreeSpace("map has no free cells")
    centers = (free + 0.5) * gmap.resolution + np.array(gmap.origin)
    d2 = np.sum((centers - np.asarray(point, dtype=float)) ** 2, axis=1)
    best = int(np.argmin(d2))
    return (int(free[best, 0]), int(free[best, 1]))


def grid_samples(gmap: GlobalMap, spacing: float = DEFAULT_SPACING, centroids=()) -> list[tuple[float, float]]:
    """FREE cells on an origin-aligned lattice, minus those near cluster centroids."""
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    step = max(1, int(round(spacing / gmap.resolution)))
    out = []
    cents = np.asarray(list(centroids), dtype=float).reshape(-1, 2)
    for ix in range(0, gmap.shape[0], step):
        for iy in range(0, gmap.shape[1], step):
            if gmap.cells[ix, iy] != FREE:
                continue
            p = gmap.cell_center((ix, iy))
            if len(cents) and np.min(np.hypot(cents[:, 0] - p[0], cents[:, 1] - p[1])) <= spacing / 2:
                continue
            out.append(p)
    return out
