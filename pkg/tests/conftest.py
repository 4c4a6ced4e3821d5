import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from egonav import fixture_scene, suite_manifest, trap_manifest  # noqa: E402
from egonav.scene import load_scene  # noqa: E402
from egonav.worldgen import plan_to_scene  # noqa: E402


@pytest.fixture(scope="session")
def corridor():
    return load_scene(fixture_scene())


@pytest.fixture(scope="session")
def suite_path():
    return suite_manifest()


@pytest.fixture(scope="session")
def trap_path():
    return trap_manifest()


def room(nx, ny, objects=None, extra=None, name="room"):
    """Walled rectangular room; ``extra`` maps (ix, iy) to a plan character."""
    rows = [["#"] * nx for _ in range(ny)]
    for iy in range(1, ny - 1):
        for ix in range(1, nx - 1):
            rows[iy][ix] = "."
    for (ix, iy), ch in (extra or {}).items():
        rows[iy][ix] = ch
    return plan_to_scene(["".join(r) for r in rows], objects or {}, name=name)


@pytest.fixture(scope="session")
def sink_room():
    """8x8 interior room with a sink column in the middle of the north wall."""
    return room(10, 10, {"s": "sink"}, {(4, 1): "s", (5, 1): "s"}, name="sink_room")
