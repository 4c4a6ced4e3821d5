"""Low-level navigation: A*, a discrete path follower and Bezier smoothing."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from . import grid
from .errors import ContractViolation, NoPath, Stuck
from .scene import STEP_LENGTH, TURN_ANGLE, Action, AgentPose

GOAL_TOLERANCE = 0.15
HEADING_DEADBAND = TURN_ANGLE / 2
# once moving, keep going until the error leaves this wider band
HEADING_HOLD = TURN_ANGLE * 3 / 4
# lateral margin for the line-of-sight shortcut, in meters
SHORTCUT_CLEARANCE = 0.1
DOWNSAMPLE = 4


@dataclass(frozen=True)
class Path:
    waypoints: tuple[tuple[float, float], ...]
    cells: tuple[tuple[int, int], ...]
    straight: int = 0
    diagonal: int = 0

    @property
    def cost(self) -> float:
        """Cost in cells (1 per straight move, sqrt(2) per diagonal)."""
        return self.straight + self.diagonal * grid.SQRT2

    def length(self, resolution: float) -> float:
        return self.cost * resolution

    def __len__(self) -> int:
        return len(self.cells)


def astar(free: np.ndarray, start, goal, resolution: float = 1.0, origin=(0.0, 0.0)) -> Path:
    """Minimal-cost 8-connected path between two free cells.

    Uses the octile heuristic. Frontier ties go to the smaller f, then to the
    earlier heap insertion, so the result is fully deterministic. Costs are
    tracked as exact (straight, diagonal) move counts.
    """
    free = np.asarray(free, dtype=bool)
    start, goal = tuple(map(int, start)), tuple(map(int, goal))
    for c in (start, goal):
        if not grid.in_bounds(c, free.shape) or not free[c]:
            raise ContractViolation(f"cell {c} is not free")
    best = {start: (0, 0)}
    parent = {start: None}
    closed = set()
    counter = 0
    heap = [(grid.octile(start, goal), counter, start)]
    while heap:
        _, _, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            break
        closed.add(cur)
        a, b = best[cur]
        for dx, dy, _cost in grid.NEIGHBORS_8:
            if not grid.can_step(free, cur, dx, dy):
                continue
            nb = (cur[0] + dx, cur[1] + dy)
            if nb in closed:
                continue
            cand = (a, b + 1) if dx and dy else (a + 1, b)
            g = cand[0] + cand[1] * grid.SQRT2
            old = best.get(nb)
            if old is not None and old[0] + old[1] * grid.SQRT2 <= g:
                continue
            best[nb] = cand
            parent[nb] = cur
            counter += 1
            heapq.heappush(heap, (g + grid.octile(nb, goal), counter, nb))
    else:
        raise NoPath(f"no path from {start} to {goal}")
    cells = []
    c = goal
    while c is not None:
        cells.append(c)
        c = parent[c]
    cells.reverse()
    a, b = best[goal]
    waypoints = tuple(grid.cell_center(c, resolution, origin) for c in cells)
    return Path(waypoints, tuple(cells), a, b)


# --------------------------------------------------------------------------
# following


def _wrap(angle: float) -> float:
    return (angle + math.pi) % (2 * math.pi) - math.pi


@dataclass
class PathFollower:
    """Turns a path into discrete actions, one call per executed action.

    With a ``free`` grid the follower looks ahead to the farthest waypoint in
    straight-line sight and only picks headings whose next step lands on a
    free cell.
    """

    path: Path
    free: np.ndarray | None = None
    resolution: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)
    goal_tolerance: float = GOAL_TOLERANCE
    waypoint_tolerance: float = STEP_LENGTH
    lookahead: int = 12
    index: int = 0
    hold: float = HEADING_HOLD
    clearance: float = SHORTCUT_CLEARANCE
    _blocked: set = field(default_factory=set)
    _moving: bool = False

    def __post_init__(self):
        if not self.path.waypoints:
            raise ContractViolation("cannot follow an empty path")

    @property
    def final(self) -> tuple[float, float]:
        return self.path.waypoints[-1]

    def done(self, pose: AgentPose) -> bool:
        return math.dist(pose.position, self.final) <= self.goal_tolerance

    def _cell_free(self, point) -> bool:
        c = grid.point_to_cell(point, self.resolution, self.origin)
        if c in self._blocked:
            return False
        if self.free is None:
            return True
        return grid.in_bounds(c, self.free.shape) and bool(self.free[c])

    def _clear(self, a, b, clearance: float | None = None) -> bool:
        """Straight segment a-b plus two parallel offsets stay on free cells."""
        d = math.dist(a, b)
        if d == 0:
            return True
        n = max(1, int(math.ceil(d / (self.resolution / 4))))
        m = self.clearance if clearance is None else clearance
        nx, ny = -(b[1] - a[1]) / d * m, (b[0] - a[0]) / d * m
        for i in range(1, n + 1):
            t = i / n
            px, py = a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])
            if not self._cell_free((px, py)):
                return False
            # offsets are only checked once clear of the starting cell
            if m and t * d > m and not (self._cell_free((px + nx, py + ny)) and self._cell_free((px - nx, py - ny))):
                return False
        return True

    def target(self, pose: AgentPose) -> tuple[float, float]:
        wps = self.path.waypoints
        last = len(wps) - 1
        window = [self.index] + [
            k for k in range(self.index + 1, min(last, self.index + self.lookahead) + 1)
            if self.free is None or self._clear(pose.position, wps[k], 0.0)
        ]
        self.index = min(window, key=lambda k: (math.dist(pose.position, wps[k]), -k))
        while self.index < last and math.dist(pose.position, wps[self.index]) <= self.waypoint_tolerance:
            self.index += 1
        if self.free is None:
            return wps[self.index]
        j = self.index
        for k in range(min(last, self.index + self.lookahead), self.index, -1):
            if self._clear(pose.position, wps[k]):
                j = k
                break
        return wps[j]

    def note_blocked(self, pose: AgentPose) -> None:
        dest = (pose.x + STEP_LENGTH * math.cos(pose.yaw), pose.y + STEP_LENGTH * math.sin(pose.yaw))
        self._blocked.add(grid.point_to_cell(dest, self.resolution, self.origin))

    def next_action(self, pose: AgentPose, blocked: bool = False) -> Action:
        action = self._next(pose, blocked)
        self._moving = action is Action.MOVE_FORWARD
        return action

    def _next(self, pose: AgentPose, blocked: bool) -> Action:
        if blocked:
            self.note_blocked(pose)
            self._moving = False
        if self.done(pose):
            return Action.STOP
        tx, ty = self.target(pose)
        bearing = math.atan2(ty - pose.y, tx - pose.x)
        best_k, best_err = None, math.inf
        for k in (0, 1, -1, 2, -2, 3, -3, 4, -4, 5, -5, 6):
            h = pose.yaw + k * TURN_ANGLE
            err = abs(_wrap(h - bearing))
            if err >= best_err - 1e-12:
                continue
            dest = (pose.x + STEP_LENGTH * math.cos(h), pose.y + STEP_LENGTH * math.sin(h))
            if self._cell_free(dest):
                best_k, best_err = k, err
        if best_k is None or best_err >= math.pi / 2:
            raise Stuck(f"no free heading towards {tx:.2f},{ty:.2f} from {pose}")
        yaw_err = abs(_wrap(pose.yaw - bearing))
        band = self.hold if self._moving else HEADING_DEADBAND
        if best_k == 0 or (yaw_err <= band and self._cell_free(
            (pose.x + STEP_LENGTH * math.cos(pose.yaw), pose.y + STEP_LENGTH * math.sin(pose.yaw))
        )):
            return Action.MOVE_FORWARD
        return Action.TURN_LEFT if best_k > 0 else Action.TURN_RIGHT


def follow_path(path, pose: AgentPose, blocked: bool = False) -> Action:
    """Next action along ``path`` (a :class:`PathFollower` or a bare :class:`Path`)."""
    follower = path if isinstance(path, PathFollower) else PathFollower(path)
    return follower.next_action(pose, blocked)


# --------------------------------------------------------------------------
# smoothing


def _cubic(ctrl: np.ndarray, ts: np.ndarray) -> np.ndarray:
    p0, p1, p2, p3 = ctrl
    s = 1.0 - ts
    return (
        (s**3)[:, None] * p0
        + (3 * s**2 * ts)[:, None] * p1
        + (3 * s * ts**2)[:, None] * p2
        + (ts**3)[:, None] * p3
    )


def _elevate(ctrl: np.ndarray) -> np.ndarray:
    """Exact cubic control polygon for a line or quadratic."""
    if len(ctrl) == 2:
        a, b = ctrl
        return np.array([a, a + (b - a) / 3, a + 2 * (b - a) / 3, b])
    if len(ctrl) == 3:
        a, b, c = ctrl
        return np.array([a, a + 2 * (b - a) / 3, c + 2 * (b - c) / 3, c])
    return ctrl


def bezier_smooth(path, samples_per_segment: int = 8, free=None, resolution: float = 1.0, origin=(0.0, 0.0)) -> np.ndarray:
    """Piecewise-cubic Bezier polyline through every 4th waypoint.

    Returns the raw waypoints unchanged when any sample falls on a non-free
    cell of ``free``.
    """
    raw = np.asarray(path.waypoints if isinstance(path, Path) else path, dtype=float).reshape(-1, 2)
    if len(raw) < 2:
        raise ContractViolation("smoothing needs at least two waypoints")
    keep = list(range(0, len(raw), DOWNSAMPLE))
    if keep[-1] != len(raw) - 1:
        keep.append(len(raw) - 1)
    ctrl = raw[keep]
    ts = np.arange(samples_per_segment) / samples_per_segment
    pieces = []
    i = 0
    while i < len(ctrl) - 1:
        window = ctrl[i : i + 4]
        pieces.append(_cubic(_elevate(window), ts))
        i += len(window) - 1
    out = np.vstack(pieces + [ctrl[-1:]])
    out[0] = raw[0]
    out[-1] = raw[-1]
    if free is not None:
        for p in out:
            c = grid.point_to_cell(p, resolution, origin)
            if not grid.in_bounds(c, free.shape) or not free[c]:
                return raw.copy()
    return out
