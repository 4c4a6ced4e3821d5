"""2D grid helpers shared by the scene, the belief map and the planner.

Cells are indexed ``(ix, iy)``; cell ``(ix, iy)`` spans
``[ix*res, (ix+1)*res) x [iy*res, (iy+1)*res)`` relative to the grid origin.
Eight-connected moves cost 1 (straight) or sqrt(2) (diagonal); a diagonal
move is only allowed when both orthogonal neighbours are free, so paths never
cut a wall corner.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

SQRT2 = math.sqrt(2.0)

# (dx, dy, cost) in a fixed order; planners rely on this order for tie-breaking.
NEIGHBORS_8 = (
    (1, 0, 1.0),
    (0, 1, 1.0),
    (-1, 0, 1.0),
    (0, -1, 1.0),
    (1, 1, SQRT2),
    (-1, 1, SQRT2),
    (-1, -1, SQRT2),
    (1, -1, SQRT2),
)


def point_to_cell(point, resolution: float, origin=(0.0, 0.0)) -> tuple[int, int]:
    return (
        int(math.floor((point[0] - origin[0]) / resolution)),
        int(math.floor((point[1] - origin[1]) / resolution)),
    )


def cell_center(cell, resolution: float, origin=(0.0, 0.0)) -> tuple[float, float]:
    return (
        origin[0] + (cell[0] + 0.5) * resolution,
        origin[1] + (cell[1] + 0.5) * resolution,
    )


def in_bounds(cell, shape) -> bool:
    return 0 <= cell[0] < shape[0] and 0 <= cell[1] < shape[1]


def can_step(free: np.ndarray, cell, dx: int, dy: int) -> bool:
    """True if the 8-connected move from ``cell`` by (dx, dy) is legal."""
    nx, ny = cell[0] + dx, cell[1] + dy
    if not in_bounds((nx, ny), free.shape) or not free[nx, ny]:
        return False
    if dx and dy:
        return bool(free[cell[0] + dx, cell[1]] and free[cell[0], cell[1] + dy])
    return True


def octile(a, b) -> float:
    dx = abs(a[0] - b[0])
    dy = abs(a[1] - b[1])
    return (SQRT2 - 1.0) * min(dx, dy) + max(dx, dy)


def _edges(free: np.ndarray):
    nx, ny = free.shape
    idx = np.arange(nx * ny).reshape(nx, ny)
    rows, cols, costs = [], [], []

    def add(mask, a, b, cost):
        rows.append(a[mask])
        cols.append(b[mask])
        costs.append(np.full(int(mask.sum()), cost))

    add(free[:-1, :] & free[1:, :], idx[:-1, :], idx[1:, :], 1.0)
    add(free[:, :-1] & free[:, 1:], idx[:, :-1], idx[:, 1:], 1.0)
    square = free[:-1, :-1] & free[1:, :-1] & free[:-1, 1:] & free[1:, 1:]
    add(square, idx[:-1, :-1], idx[1:, 1:], SQRT2)
    add(square, idx[1:, :-1], idx[:-1, 1:], SQRT2)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(costs)


def distance_field(free: np.ndarray, sources) -> np.ndarray:
    """Geodesic distance in cells from the nearest source to every cell.

    Unreachable and non-free cells get ``inf``. ``sources`` is an iterable of
    cells; non-free sources are ignored.
    """
    free = np.asarray(free, dtype=bool)
    nx, ny = free.shape
    src = [c[0] * ny + c[1] for c in sources if in_bounds(c, free.shape) and free[c[0], c[1]]]
    out = np.full((nx, ny), np.inf)
    if not src:
        return out
    r, c, w = _edges(free)
    graph = coo_matrix((w, (r, c)), shape=(nx * ny, nx * ny)).tocsr()
    dist = dijkstra(graph, directed=False, indices=src, min_only=True)
    out = dist.reshape(nx, ny)
    out[~free] = np.inf
    return out
