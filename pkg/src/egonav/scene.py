"""Ground-truth voxel world, agent kinematics and success predicates.

Scene files are plain text::

    SCENE v1
    resolution 0.25
    dims 8 8 4
    floor_z 0
    agent_height 0.75
    camera_height 0.6
    legend
    _ 2 floor
    # 1 wall
    t 3 tv
    end
    layer 0
    ________
    ...
    layer 1
    #.......
    ...
    objects
    t | tv_0 | tv | 1.125,0.625; 1.375,0.625
    end

Layer lines run over ``iy`` (first line is ``iy = 0``), characters over
``ix``. ``.`` is always empty space. The optional fourth field of an object
line lists explicit viewpoints in meters; without it viewpoints are derived
from the geometry.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import grid
from .errors import (
    ContractViolation,
    InvariantViolation,
    OffMap,
    ParseError,
    UnknownCategory,
)

STEP_LENGTH = 0.25
TURN_ANGLE = math.pi / 6
SUCCESS_DISTANCE = 0.2
VIEWPOINT_RADIUS = 1.0
DEFAULT_MIN_PIXEL_FRACTION = 0.001
TWO_PI = 2.0 * math.pi
EMPTY_CHAR = "."
FORMAT_HEADER = "SCENE v1"


class Action(enum.Enum):
    STOP = "STOP"
    MOVE_FORWARD = "MOVE_FORWARD"
    TURN_LEFT = "TURN_LEFT"
    TURN_RIGHT = "TURN_RIGHT"


def wrap_yaw(yaw: float) -> float:
    y = math.fmod(yaw, TWO_PI)
    if y < 0.0:
        y += TWO_PI
    if y >= TWO_PI:
        y = 0.0
    return y


@dataclass(frozen=True)
class AgentPose:
    x: float
    y: float
    yaw: float = 0.0

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)

    def with_yaw(self, yaw: float) -> "AgentPose":
        return AgentPose(self.x, self.y, wrap_yaw(yaw))


@dataclass(eq=False)
class ObjectInstance:
    instance_id: str
    category: str
    semantic_id: int
    char: str
    voxels: np.ndarray  # (n, 3) voxel indices
    centroid: np.ndarray  # (3,) meters
    viewpoints: np.ndarray  # (m, 2) meters
    explicit_viewpoints: bool = False

    def __eq__(self, other):
        if not isinstance(other, ObjectInstance):
            return NotImplemented
        return (
            self.instance_id == other.instance_id
            and self.category == other.category
            and self.semantic_id == other.semantic_id
            and self.char == other.char
            and np.array_equal(self.voxels, other.voxels)
            and np.array_equal(self.centroid, other.centroid)
            and np.array_equal(self.viewpoints, other.viewpoints)
        )


@dataclass(eq=False)
class Scene:
    resolution: float
    voxels: np.ndarray  # (nx, ny, nz) int16 semantic ids, 0 = empty
    legend: dict[str, tuple[int, str]]
    objects: list[ObjectInstance]
    floor_z: int = 0
    agent_height: float = 0.75
    camera_height: float = 0.6
    name: str = ""
    _cache: dict = field(default_factory=dict, repr=False)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and self.floor_z == other.floor_z
            and self.agent_height == other.agent_height
            and self.camera_height == other.camera_height
            and self.legend == other.legend
            and np.array_equal(self.voxels, other.voxels)
            and self.objects == other.objects
        )

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)

    @property
    def floor_height(self) -> float:
        """World z of the walkable floor surface."""
        return (self.floor_z + 1) * self.resolution

    @property
    def camera_z(self) -> float:
        return self.floor_height + self.camera_height

    @property
    def floor_id(self) -> int:
        return int(self.voxels[0, 0, self.floor_z])

    @property
    def labels(self) -> dict[int, str]:
        """Semantic id -> human label (object category for object ids)."""
        out = {sid: label for sid, label in self.legend.values()}
        for obj in self.objects:
            out[obj.semantic_id] = obj.category
        return out

    @property
    def categories(self) -> list[str]:
        return sorted({o.category for o in self.objects})

    @property
    def free_mask(self) -> np.ndarray:
        """Cells whose column is empty from the floor up to agent height."""
        if "free" not in self._cache:
            top = self.floor_z + 1 + int(math.ceil(self.agent_height / self.resolution - 1e-9))
            band = self.voxels[:, :, self.floor_z + 1 : top]
            mask = np.all(band == 0, axis=2)
            mask.setflags(write=False)
            self._cache["free"] = mask
        return self._cache["free"]

    def cell_of(self, point) -> tuple[int, int]:
        return grid.point_to_cell(point, self.resolution)

    def cell_center(self, cell) -> tuple[float, float]:
        return grid.cell_center(cell, self.resolution)

    def in_bounds(self, cell) -> bool:
        return grid.in_bounds(cell, self.voxels.shape[:2])

    def is_free_point(self, point) -> bool:
        cell = self.cell_of(point)
        return self.in_bounds(cell) and bool(self.free_mask[cell])

    def instances(self, category: str) -> list[ObjectInstance]:
        found = [o for o in self.objects if o.category == category]
        if not found:
            raise UnknownCategory(category)
        return found

    def category_ids(self, category: str) -> list[int]:
        return [o.semantic_id for o in self.instances(category)]

    def goal_viewpoints(self, category: str) -> np.ndarray:
        return np.concatenate([o.viewpoints for o in self.instances(category)], axis=0)

    def goal_distance_field(self, category: str) -> np.ndarray:
        """Geodesic meters from every cell to the nearest goal viewpoint."""
        key = ("goal_field", category)
        if key not in self._cache:
            cells = {self.cell_of(p) for p in self.goal_viewpoints(category)}
            field_ = grid.distance_field(self.free_mask, sorted(cells)) * self.resolution
            field_.setflags(write=False)
            self._cache[key] = field_
        return self._cache[key]


# --------------------------------------------------------------------------
# viewpoints


def _line_of_sight(scene: Scene, start: np.ndarray, target_voxel, semantic_id: int) -> bool:
    res = scene.resolution
    end = (np.asarray(target_voxel, dtype=float) + 0.5) * res
    delta = end - start
    n = max(2, int(math.ceil(np.linalg.norm(delta) / (res / 8.0))))
    ts = np.linspace(0.0, 1.0, n + 1)
    pts = start[None, :] + ts[:, None] * delta[None, :]
    idx = np.floor(pts / res).astype(int)
    nx, ny, nz = scene.voxels.shape
    for i, j, k in idx:
        if not (0 <= i < nx and 0 <= j < ny and 0 <= k < nz):
            return False
        v = scene.voxels[i, j, k]
        if v != 0:
            return v == semantic_id
    return False


def _viewpoint_has_los(scene: Scene, obj: ObjectInstance, point) -> bool:
    start = np.array([point[0], point[1], scene.camera_z])
    centers = (obj.voxels[:, :2] + 0.5) * scene.resolution
    d = np.linalg.norm(centers - np.asarray(point)[None, :], axis=1)
    for vi in np.argsort(d, kind="stable"):
        if d[vi] > VIEWPOINT_RADIUS + 1e-9:
            break
        if _line_of_sight(scene, start, obj.voxels[vi], obj.semantic_id):
            return True
    return False


def generate_viewpoints(scene: Scene, obj: ObjectInstance) -> np.ndarray:
    """Free floor cells within 1 m of the object with line of sight to it."""
    res = scene.resolution
    free = scene.free_mask
    centers2d = (obj.voxels[:, :2] + 0.5) * res
    lo = np.floor((centers2d.min(axis=0) - VIEWPOINT_RADIUS) / res).astype(int)
    hi = np.ceil((centers2d.max(axis=0) + VIEWPOINT_RADIUS) / res).astype(int)
    found = []
    for ix in range(max(lo[0], 0), min(hi[0] + 1, free.shape[0])):
        for iy in range(max(lo[1], 0), min(hi[1] + 1, free.shape[1])):
            if not free[ix, iy]:
                continue
            c = np.array(grid.cell_center((ix, iy), res))
            if np.min(np.linalg.norm(centers2d - c, axis=1)) > VIEWPOINT_RADIUS + 1e-9:
                continue
            if _viewpoint_has_los(scene, obj, c):
                found.append(c)
    return np.array(found, dtype=float).reshape(-1, 2)


# --------------------------------------------------------------------------
# construction / validation


def build_scene(
    resolution: float,
    voxels: np.ndarray,
    legend: dict[str, tuple[int, str]],
    object_specs: list[tuple[str, str, str, list | None]],
    *,
    floor_z: int = 0,
    agent_height: float = 0.75,
    camera_height: float = 0.6,
    name: str = "",
) -> Scene:
    """Assemble and validate a scene.

    ``object_specs`` holds ``(char, instance_id, category, viewpoints)``
    tuples; ``viewpoints`` may be ``None`` to derive them.
    """
    if not resolution > 0:
        raise InvariantViolation(f"resolution must be positive, got {resolution}")
    voxels = np.asarray(voxels, dtype=np.int16)
    if voxels.ndim != 3 or min(voxels.shape) < 1:
        raise InvariantViolation("voxel grid must be a non-empty 3D array")
    scene = Scene(
        resolution=float(resolution),
        voxels=voxels,
        legend=dict(legend),
        objects=[],
        floor_z=int(floor_z),
        agent_height=float(agent_height),
        camera_height=float(camera_height),
        name=name,
    )
    if not 0 <= floor_z < voxels.shape[2] - 1:
        raise InvariantViolation("floor_z must leave at least one layer above the floor")
    if not agent_height > 0 or not 0 < camera_height <= agent_height:
        raise InvariantViolation("need agent_height > 0 and 0 < camera_height <= agent_height")
    floor = voxels[:, :, floor_z]
    if floor[0, 0] == 0 or np.any(floor != floor[0, 0]):
        raise InvariantViolation("floor layer must be fully occupied by one semantic id")
    ids = [sid for sid, _ in legend.values()]
    if len(set(ids)) != len(ids) or 0 in ids:
        raise InvariantViolation("legend ids must be distinct and non-zero")
    present = set(np.unique(voxels).tolist()) - {0}
    if not present <= set(ids):
        raise InvariantViolation(f"voxels use ids missing from the legend: {sorted(present - set(ids))}")

    seen_ids = set()
    for char, instance_id, category, viewpoints in object_specs:
        if char not in legend:
            raise InvariantViolation(f"object {instance_id!r} uses unknown legend char {char!r}")
        sid = legend[char][0]
        if sid == scene.floor_id:
            raise InvariantViolation("the floor cannot be an object")
        if sid in seen_ids or instance_id in {o.instance_id for o in scene.objects}:
            raise InvariantViolation(f"duplicate object {instance_id!r}")
        seen_ids.add(sid)
        vox = np.argwhere(voxels == sid)
        if len(vox) == 0:
            raise InvariantViolation(f"object {instance_id!r} has no voxels")
        centroid = (vox.astype(float) + 0.5).mean(axis=0) * resolution
        obj = ObjectInstance(
            instance_id=instance_id,
            category=category,
            semantic_id=sid,
            char=char,
            voxels=vox,
            centroid=centroid,
            viewpoints=np.zeros((0, 2)),
            explicit_viewpoints=viewpoints is not None,
        )
        if viewpoints is None:
            obj.viewpoints = generate_viewpoints(scene, obj)
        else:
            obj.viewpoints = np.asarray(viewpoints, dtype=float).reshape(-1, 2)
            for vp in obj.viewpoints:
                if not scene.is_free_point(vp):
                    raise InvariantViolation(f"viewpoint {tuple(vp)} of {instance_id!r} is not on free floor")
                if not _viewpoint_has_los(scene, obj, vp):
                    raise InvariantViolation(f"viewpoint {tuple(vp)} of {instance_id!r} cannot see the object")
        if len(obj.viewpoints) == 0:
            raise InvariantViolation(f"object {instance_id!r} has no viewpoints")
        scene.objects.append(obj)
    return scene


# --------------------------------------------------------------------------
# file format


def _fmt(x: float) -> str:
    return repr(float(x))


def loads_scene(text: str, name: str = "") -> Scene:
    lines = [ln.rstrip("\n").rstrip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln.strip()]
    if not lines or lines[0].strip() != FORMAT_HEADER:
        raise ParseError(f"missing {FORMAT_HEADER!r} header")
    header: dict[str, list[str]] = {}
    legend: dict[str, tuple[int, str]] = {}
    layers: dict[int, list[str]] = {}
    objects: list[tuple[str, str, str, list | None]] = []
    i = 1
    try:
        while i < len(lines):
            line = lines[i]
            word = line.split()[0]
            if word == "legend":
                i += 1
                while lines[i].strip() != "end":
                    parts = lines[i].split(maxsplit=2)
                    if len(parts) != 3 or len(parts[0]) != 1 or parts[0] == EMPTY_CHAR:
                        raise ParseError(f"bad legend line: {lines[i]!r}")
                    legend[parts[0]] = (int(parts[1]), parts[2].strip())
                    i += 1
                i += 1
            elif word == "layer":
                k = int(line.split()[1])
                if k in layers:
                    raise ParseError(f"layer {k} given twice")
                i += 1
                rows = []
                while i < len(lines) and lines[i].split()[0] not in ("layer", "objects", "legend"):
                    rows.append(lines[i])
                    i += 1
                layers[k] = rows
            elif word == "objects":
                i += 1
                while lines[i].strip() != "end":
                    parts = [p.strip() for p in lines[i].split("|")]
                    if len(parts) not in (3, 4) or len(parts[0]) != 1:
                        raise ParseError(f"bad object line: {lines[i]!r}")
                    vps = None
                    if len(parts) == 4 and parts[3]:
                        vps = [[float(v) for v in p.split(",")] for p in parts[3].split(";") if p.strip()]
                        if any(len(v) != 2 for v in vps):
                            raise ParseError(f"bad viewpoint list: {parts[3]!r}")
                    objects.append((parts[0], parts[1], parts[2], vps))
                    i += 1
                i += 1
            else:
                header[word] = line.split()[1:]
                i += 1
    except (IndexError, ValueError) as exc:
        raise ParseError(f"malformed scene file near line {i + 1}: {exc}") from exc

    for key in ("resolution", "dims", "floor_z", "agent_height", "camera_height"):
        if key not in header:
            raise ParseError(f"missing header field {key!r}")
    try:
        resolution = float(header["resolution"][0])
        nx, ny, nz = (int(v) for v in header["dims"])
        floor_z = int(header["floor_z"][0])
        agent_height = float(header["agent_height"][0])
        camera_height = float(header["camera_height"][0])
    except (IndexError, ValueError) as exc:
        raise ParseError(f"bad header value: {exc}") from exc
    if not layers:
        raise ParseError("scene has no voxel layers")
    if sorted(layers) != list(range(nz)):
        raise ParseError(f"expected layers 0..{nz - 1}, got {sorted(layers)}")
    lut = {EMPTY_CHAR: 0, **{c: sid for c, (sid, _) in legend.items()}}
    voxels = np.zeros((nx, ny, nz), dtype=np.int16)
    for k, rows in layers.items():
        if len(rows) != ny or any(len(r) != nx for r in rows):
            raise ParseError(f"layer {k} must be {ny} rows of {nx} characters")
        for iy, row in enumerate(rows):
            for ix, ch in enumerate(row):
                if ch not in lut:
                    raise ParseError(f"unknown voxel character {ch!r} in layer {k}")
                voxels[ix, iy, k] = lut[ch]
    return build_scene(
        resolution,
        voxels,
        legend,
        objects,
        floor_z=floor_z,
        agent_height=agent_height,
        camera_height=camera_height,
        name=name,
    )


def load_scene(path) -> Scene:
    path = Path(path)
    return loads_scene(path.read_text(), name=path.stem)


def dumps_scene(scene: Scene) -> str:
    nx, ny, nz = scene.dims
    out = [
        FORMAT_HEADER,
        f"resolution {_fmt(scene.resolution)}",
        f"dims {nx} {ny} {nz}",
        f"floor_z {scene.floor_z}",
        f"agent_height {_fmt(scene.agent_height)}",
        f"camera_height {_fmt(scene.camera_height)}",
        "legend",
    ]
    for ch, (sid, label) in scene.legend.items():
        out.append(f"{ch} {sid} {label}")
    out.append("end")
    chars = {0: EMPTY_CHAR, **{sid: ch for ch, (sid, _) in scene.legend.items()}}
    for k in range(nz):
        out.append(f"layer {k}")
        for iy in range(ny):
            out.append("".join(chars[int(v)] for v in scene.voxels[:, iy, k]))
    out.append("objects")
    for obj in scene.objects:
        line = f"{obj.char} | {obj.instance_id} | {obj.category}"
        if obj.explicit_viewpoints:
            line += " | " + "; ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in obj.viewpoints)
        out.append(line)
    out.append("end")
    return "\n".join(out) + "\n"


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(dumps_scene(scene))


# --------------------------------------------------------------------------
# kinematics and predicates


def apply_action(scene: Scene, pose: AgentPose, action: Action) -> tuple[AgentPose, bool]:
    """Execute one discrete action. Returns the new pose and a blocked flag."""
    action = Action(action)
    if action is Action.STOP:
        return pose, False
    if action is Action.TURN_LEFT:
        return pose.with_yaw(pose.yaw + TURN_ANGLE), False
    if action is Action.TURN_RIGHT:
        return pose.with_yaw(pose.yaw - TURN_ANGLE), False
    nxt = AgentPose(
        pose.x + STEP_LENGTH * math.cos(pose.yaw),
        pose.y + STEP_LENGTH * math.sin(pose.yaw),
        pose.yaw,
    )
    if not scene.is_free_point(nxt.position):
        return pose, True
    return nxt, False


def geodesic_distance(scene: Scene, a, b) -> float:
    """Shortest 8-connected free-cell path length in meters (inf if disconnected)."""
    ca, cb = scene.cell_of(a), scene.cell_of(b)
    for p, c in ((a, ca), (b, cb)):
        if not scene.in_bounds(c):
            raise OffMap(f"point {tuple(p)} lies outside the scene")
    free = scene.free_mask
    if not (free[ca] and free[cb]):
        raise ContractViolation("geodesic endpoints must lie on free floor")
    if ca == cb:
        return 0.0
    return float(grid.distance_field(free, [ca])[cb] * scene.resolution)


def geodesic_to_goal(scene: Scene, point, category: str) -> float:
    cell = scene.cell_of(point)
    if not scene.in_bounds(cell):
        raise OffMap(f"point {tuple(point)} lies outside the scene")
    return float(scene.goal_distance_field(category)[cell])


def nearest_goal_viewpoint(scene: Scene, point, category: str):
    """Goal viewpoint with the smallest geodesic distance from ``point``."""
    vps = scene.goal_viewpoints(category)
    start = scene.cell_of(point)
    dist = grid.distance_field(scene.free_mask, [start])
    costs = [dist[scene.cell_of(vp)] for vp in vps]
    best = int(np.argmin(costs))
    if not np.isfinite(costs[best]):
        return None
    return tuple(float(v) for v in vps[best])


def check_success(scene: Scene, pose: AgentPose, goal_category: str, threshold: float = SUCCESS_DISTANCE) -> bool:
    vps = scene.goal_viewpoints(goal_category)
    d = np.hypot(vps[:, 0] - pose.x, vps[:, 1] - pose.y)
    return bool(np.any(d < threshold))


def detect_goal(
    scene: Scene,
    observation,
    goal_category: str,
    min_pixel_fraction: float = DEFAULT_MIN_PIXEL_FRACTION,
) -> bool:
    """True if goal-labelled pixels exceed ``min_pixel_fraction`` of the frame."""
    ids = scene.category_ids(goal_category)
    sem = observation.semantic
    count = int(np.isin(sem, ids).sum())
    return count > min_pixel_fraction * sem.size
