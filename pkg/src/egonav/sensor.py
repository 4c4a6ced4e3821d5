"""Pinhole camera, voxel ray-cast rendering and panorama assembly."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ContractViolation, ParseError
from .scene import AgentPose, Scene

PANORAMA_OFFSETS = (0.0, math.pi / 2, math.pi, 3 * math.pi / 2)


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    max_range: float = 10.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractViolation("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ContractViolation("principal point must lie inside the image")
        if not self.max_range > 0:
            raise ContractViolation("max_range must be positive")

    @classmethod
    def default(cls, width: int = 160, height: int = 120, max_range: float = 10.0) -> "CameraModel":
        """Square-pixel camera with a 90 degree horizontal field of view."""
        f = width / 2.0
        return cls(f, f, width / 2.0, height / 2.0, width, height, max_range)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def rays(self) -> np.ndarray:
        key = (self.width, self.height, self.fx, self.fy, self.cx, self.cy)
        cached = _RAY_CACHE.get(key)
        if cached is None:
            cached = _kernels.pixel_rays(*key)
            cached.setflags(write=False)
            _RAY_CACHE[key] = cached
        return cached


_RAY_CACHE: dict = {}


def rotation(heading: float) -> np.ndarray:
    """World-to-camera rotation for a level camera looking along ``heading``.

    Camera axes: x right, y down (image rows), z forward.
    """
    s, c = math.sin(heading), math.cos(heading)
    return np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])


def extrinsics(pose: AgentPose, yaw_offset: float = 0.0, camera_z: float = 0.0) -> np.ndarray:
    """3x4 world-to-camera transform [R | t]."""
    R = rotation(pose.yaw + yaw_offset)
    C = np.array([pose.x, pose.y, camera_z])
    return np.hstack([R, (-R @ C)[:, None]])


@dataclass(eq=False)
class Observation:
    depth: np.ndarray  # (H, W) z-depth in meters
    semantic: np.ndarray  # (H, W) int16 ids, 0 = nothing hit
    pose: AgentPose
    yaw_offset: float
    camera: CameraModel
    camera_z: float
    floor_height: float
    labels: dict = field(default_factory=dict, repr=False)

    @property
    def heading(self) -> float:
        return self.pose.yaw + self.yaw_offset

    @property
    def extrinsics(self) -> np.ndarray:
        return extrinsics(self.pose, self.yaw_offset, self.camera_z)

    def world_rays(self) -> np.ndarray:
        """Per-pixel world directions scaled so that t equals z-depth."""
        return self.camera.rays() @ rotation(self.heading)

    @property
    def origin(self) -> np.ndarray:
        return np.array([self.pose.x, self.pose.y, self.camera_z])

    def back_project(self) -> np.ndarray:
        """World points of every pixel, shape (H, W, 3)."""
        pts = self.origin[None, :] + self.world_rays() * self.depth.reshape(-1, 1)
        return pts.reshape(self.camera.height, self.camera.width, 3)


def render(scene: Scene, pose: AgentPose, yaw_offset: float, camera: CameraModel) -> Observation:
    if not scene.in_bounds(scene.cell_of(pose.position)):
        raise ContractViolation("pose lies outside the scene")
    obs = Observation(
        depth=np.empty((camera.height, camera.width)),
        semantic=np.empty((camera.height, camera.width), dtype=np.int16),
        pose=pose,
        yaw_offset=yaw_offset,
        camera=camera,
        camera_z=scene.camera_z,
        floor_height=scene.floor_height,
        labels=scene.labels,
    )
    _kernels.raymarch(
        scene.voxels,
        scene.resolution,
        obs.origin,
        np.ascontiguousarray(obs.world_rays()),
        float(camera.max_range),
        obs.depth.reshape(-1),
        obs.semantic.reshape(-1),
    )
    return obs


@dataclass(eq=False)
class PanoramicObservation:
    views: list[Observation]

    def __post_init__(self):
        if len(self.views) != 4:
            raise ContractViolation("a panorama holds exactly four views")
        p0 = self.views[0].pose.position
        if any(v.pose.position != p0 for v in self.views):
            raise ContractViolation("all panorama views must share one position")

    @property
    def pose(self) -> AgentPose:
        return self.views[0].pose

    @property
    def camera(self) -> CameraModel:
        return self.views[0].camera

    @property
    def labels(self) -> dict:
        return self.views[0].labels

    @property
    def tiling(self) -> dict[int, tuple[int, int]]:
        """View index -> (x, y) pixel origin of its tile; 2x2 row-major."""
        w, h = self.camera.width, self.camera.height
        return {0: (0, 0), 1: (w, 0), 2: (0, h), 3: (w, h)}

    @property
    def size(self) -> tuple[int, int]:
        return (2 * self.camera.width, 2 * self.camera.height)

    def _tile(self, attr: str) -> np.ndarray:
        a = [getattr(v, attr) for v in self.views]
        return np.vstack([np.hstack([a[0], a[1]]), np.hstack([a[2], a[3]])])

    @property
    def depth(self) -> np.ndarray:
        return self._tile("depth")

    @property
    def semantic(self) -> np.ndarray:
        return self._tile("semantic")

    def locate(self, x: int, y: int) -> tuple[int, int, int]:
        """Tiled pixel -> (view index, local x, local y)."""
        w, h = self.camera.width, self.camera.height
        if not (0 <= x < 2 * w and 0 <= y < 2 * h):
            raise ContractViolation("pixel outside the tiled image")
        k = (1 if x >= w else 0) + (2 if y >= h else 0)
        ox, oy = self.tiling[k]
        return k, x - ox, y - oy


def capture_panorama(scene: Scene, pose: AgentPose, camera: CameraModel) -> PanoramicObservation:
    return PanoramicObservation([render(scene, pose, off, camera) for off in PANORAMA_OFFSETS])


# --------------------------------------------------------------------------
# export


def _palette(sid: int) -> tuple[int, int, int]:
    if sid == 0:
        return (24, 24, 40)
    # Channels stay inside [60, 215] so marker colours never occur in renders.
    h = (sid * 2654435761) & 0xFFFFFFFF
    return (60 + (h & 0xFF) % 156, 60 + ((h >> 8) & 0xFF) % 156, 60 + ((h >> 16) & 0xFF) % 156)


def colorize(depth: np.ndarray, semantic: np.ndarray, max_range: float) -> np.ndarray:
    """Shaded false-colour RGB image (uint8) from depth and semantics."""
    ids = np.unique(semantic)
    lut = np.zeros((int(ids.max()) + 1, 3))
    for sid in ids:
        lut[sid] = _palette(int(sid))
    rgb = lut[semantic]
    shade = 1.0 - 0.55 * np.clip(depth / max_range, 0.0, 1.0)
    rgb = np.where((semantic > 0)[..., None], rgb * shade[..., None], rgb)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def write_depth(path, depth: np.ndarray) -> None:
    h, w = depth.shape
    Path(path).write_bytes(b"EGD1" + struct.pack("<II", w, h) + depth.astype("<f4").tobytes())


def read_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != b"EGD1":
        raise ParseError("not a depth grid")
    w, h = struct.unpack("<II", data[4:12])
    return np.frombuffer(data[12:], dtype="<f4").reshape(h, w).copy()


def write_semantic(path, semantic: np.ndarray) -> None:
    h, w = semantic.shape
    Path(path).write_bytes(b"EGS1" + struct.pack("<II", w, h) + semantic.astype("<u2").tobytes())


def read_semantic(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != b"EGS1":
        raise ParseError("not a semantic grid")
    w, h = struct.unpack("<II", data[4:12])
    return np.frombuffer(data[12:], dtype="<u2").reshape(h, w).astype(np.int16)
