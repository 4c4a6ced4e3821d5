"""Procedural floor plans for the bundled evaluation suite and loop-trap scenes.

Plans are lists of strings indexed ``plan[iy][ix]``: ``#`` is wall, ``.`` is
floor, and any other character is a full-height object column.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .harness import EpisodeSpec, dump_suite
from .scene import AgentPose, Scene, build_scene, save_scene

FLOOR_CHAR = "_"
WALL_CHAR = "#"
WALL_ID = 1
FLOOR_ID = 2
CATEGORIES = ("tv", "bed", "sink", "toilet", "couch", "plant", "chair", "fridge")


def plan_to_scene(plan: list[str], objects: dict[str, str], *, resolution: float = 0.25, layers: int = 3, name: str = "") -> Scene:
    """Extrude a 2D plan into a voxel scene: floor slab plus ``layers`` of walls."""
    ny, nx = len(plan), len(plan[0])
    if any(len(row) != nx for row in plan):
        raise ValueError("plan rows must have equal length")
    legend = {WALL_CHAR: (WALL_ID, "wall"), FLOOR_CHAR: (FLOOR_ID, "floor")}
    for i, ch in enumerate(sorted(objects)):
        legend[ch] = (3 + i, objects[ch])
    vox = np.zeros((nx, ny, layers + 1), dtype=np.int16)
    vox[:, :, 0] = FLOOR_ID
    for iy, row in enumerate(plan):
        for ix, ch in enumerate(row):
            if ch == ".":
                continue
            if ch not in legend:
                raise ValueError(f"plan uses undeclared char {ch!r}")
            vox[ix, iy, 1:] = legend[ch][0]
    specs = []
    counts: dict[str, int] = {}
    for ch in sorted(objects):
        cat = objects[ch]
        specs.append((ch, f"{cat}_{counts.get(cat, 0)}", cat, None))
        counts[cat] = counts.get(cat, 0) + 1
    return build_scene(resolution, vox, legend, specs, name=name)


def _blank(nx: int, ny: int) -> list[list[str]]:
    return [["#"] * nx for _ in range(ny)]


def _fill(grid, x0, y0, x1, y1, ch="."):
    for iy in range(y0, y1):
        for ix in range(x0, x1):
            grid[iy][ix] = ch


def room_grid_plan(rng: np.random.Generator, rooms_x: int, rooms_y: int, room: int = 12, door: int = 4):
    """Rooms on a lattice joined by a random spanning tree of doors.

    Returns the plan rows and the room rectangles ``(x0, y0, x1, y1)``.
    """
    nx, ny = rooms_x * (room + 1) + 1, rooms_y * (room + 1) + 1
    g = _blank(nx, ny)
    rects = {}
    for rx in range(rooms_x):
        for ry in range(rooms_y):
            x0, y0 = 1 + rx * (room + 1), 1 + ry * (room + 1)
            rects[(rx, ry)] = (x0, y0, x0 + room, y0 + room)
            _fill(g, x0, y0, x0 + room, y0 + room)
    # randomized depth-first spanning tree
    seen = {(0, 0)}
    stack = [(0, 0)]
    while stack:
        cur = stack[-1]
        nbrs = [(cur[0] + dx, cur[1] + dy) for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1))]
        nbrs = [n for n in nbrs if n in rects and n not in seen]
        if not nbrs:
            stack.pop()
            continue
        nxt = nbrs[int(rng.integers(len(nbrs)))]
        a, b = sorted([cur, nxt])
        ax0, ay0, ax1, ay1 = rects[a]
        off = int(rng.integers(1, room - door))
        if a[0] != b[0]:
            _fill(g, ax1, ay0 + off, ax1 + 1, ay0 + off + door)
        else:
            _fill(g, ax0 + off, ay1, ax0 + off + door, ay1 + 1)
        seen.add(nxt)
        stack.append(nxt)
    return g, rects


def _place_object(g, rect, ch, rng):
    """A 2x2 column against a random wall of the room, away from doors."""
    x0, y0, x1, y1 = rect
    for _ in range(100):
        side = int(rng.integers(4))
        if side in (0, 1):
            px = int(rng.integers(x0 + 2, x1 - 3))
            py = y0 if side == 0 else y1 - 2
        else:
            py = int(rng.integers(y0 + 2, y1 - 3))
            px = x0 if side == 2 else x1 - 2
        cells = [(px + dx, py + dy) for dx in (0, 1) for dy in (0, 1)]
        ring = [(px + dx, py + dy) for dx in range(-1, 3) for dy in range(-1, 3)]
        if all(g[y][x] == "." for x, y in cells) and all(g[y][x] in ".#" for x, y in ring):
            for x, y in cells:
                g[y][x] = ch
            return True
    return False


def suite_scene(seed: int) -> tuple[Scene, EpisodeSpec]:
    """One multi-room scene with its episode: start and goal in distant rooms."""
    rng = np.random.default_rng(seed)
    rooms_x, rooms_y = [(3, 1), (2, 2), (3, 2), (2, 1), (1, 3)][seed % 5]
    g, rects = room_grid_plan(rng, rooms_x, rooms_y)
    keys = sorted(rects)
    start_room = keys[0]
    far = max(keys, key=lambda k: (abs(k[0] - start_room[0]) + abs(k[1] - start_room[1]), k))
    cats = list(rng.permutation(CATEGORIES))
    goal_cat = str(cats[0])
    objects = {}
    chars = iter("abcdefghijklmnop")
    ch = next(chars)
    if not _place_object(g, rects[far], ch, rng):
        raise RuntimeError("could not place the goal object")
    objects[ch] = goal_cat
    for i, k in enumerate(keys):
        if k == far:
            continue
        ch = next(chars)
        if _place_object(g, rects[k], ch, rng):
            objects[ch] = str(cats[1 + i % (len(cats) - 1)])
    plan = ["".join(r) for r in g]
    scene = plan_to_scene(plan, objects, name=f"suite_{seed:02d}")
    x0, y0, x1, y1 = rects[start_room]
    res = scene.resolution
    cx, cy = (x0 + x1) // 2, (y0 + y1) // 2
    start = AgentPose((cx + 0.5) * res, (cy + 0.5) * res, float(rng.integers(12)) * np.pi / 6)
    return scene, EpisodeSpec(f"suite_{seed:02d}.scene", start, goal_cat, 500, seed, f"suite_{seed:02d}")


# --------------------------------------------------------------------------
# loop traps

TRAP_VARIANTS = (
    # (corridor turn direction, corridor length in cells, goal category)
    ("south", 14, "tv"),
    ("north", 14, "bed"),
    ("south", 18, "sink"),
)


def trap_plan(turn: str, corridor: int) -> tuple[list[str], tuple[int, int]]:
    """A hall holding exactly two lattice cells, with a bent corridor to the goal.

    The hall's lattice cells (8, 8) and (16, 8) are 2 m apart; everything
    past the corridor bend lies farther than that from both, so a greedy
    explorer without visit memory shuttles between them.
    """
    hall = (4, 5, 21, 12)  # x0, y0, x1, y1 (exclusive)
    east = hall[2] + 1 + corridor
    nx = east + 6
    ny = 33
    g = _blank(nx, ny)
    _fill(g, *hall)
    # door and corridor along rows 9..11, which hold no lattice cells
    _fill(g, hall[2], 9, east, 12)
    # the bend heads south; the north variant is the vertical mirror image
    _fill(g, east - 3, 12, east, 22)
    _fill(g, east - 3, 22, east + 4, 27)
    goal_cell = (east + 2, 25)
    for ix in range(east + 2, east + 4):
        for iy in range(25, 27):
            g[iy][ix] = "g"
    rows = ["".join(r) for r in g]
    if turn == "north":
        rows = rows[::-1]
        goal_cell = (goal_cell[0], ny - 1 - goal_cell[1])
    return rows, goal_cell


def trap_scene(index: int) -> tuple[Scene, EpisodeSpec]:
    turn, corridor, goal = TRAP_VARIANTS[index]
    rows, _ = trap_plan(turn, corridor)
    name = f"trap_{index:02d}"
    scene = plan_to_scene(rows, {"g": goal}, name=name)
    iy = 8 if turn == "south" else len(rows) - 1 - 8
    start = AgentPose(8.5 * scene.resolution, (iy + 0.5) * scene.resolution, 0.0)
    return scene, EpisodeSpec(f"{name}.scene", start, goal, 500, index, name)


def write_bundle(out_dir, suite_size: int = 10) -> None:
    """Write the suite and trap scene files plus their manifests."""
    out = Path(out_dir)
    (out / "suite").mkdir(parents=True, exist_ok=True)
    (out / "traps").mkdir(parents=True, exist_ok=True)
    specs = []
    for seed in range(suite_size):
        scene, spec = suite_scene(seed)
        save_scene(scene, out / "suite" / spec.scene_ref)
        specs.append(spec)
    dump_suite(specs, out / "suite" / "manifest.yaml")
    specs = []
    for i in range(len(TRAP_VARIANTS)):
        scene, spec = trap_scene(i)
        save_scene(scene, out / "traps" / spec.scene_ref)
        specs.append(spec)
    dump_suite(specs, out / "traps" / "manifest.yaml")
