"""Memory-augmented egocentric object-goal navigation on synthetic voxel worlds."""
from __future__ import annotations

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def data_path(*parts: str) -> Path:
    """Path to a file bundled under ``egonav/data``."""
    return Path(str(resources.files(__name__).joinpath("data", *parts)))


def suite_manifest() -> Path:
    return data_path("suite", "manifest.yaml")


def trap_manifest() -> Path:
    return data_path("traps", "manifest.yaml")


def fixture_scene() -> Path:
    return data_path("scenes", "corridor_8x8.scene")
