import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dijkstra
from egonav import data_path
from egonav.errors import ContractViolation, NoPath, Stuck
from egonav.planner import GOAL_TOLERANCE, Path, PathFollower, astar, bezier_smooth, follow_path
from egonav.scene import STEP_LENGTH, Action, AgentPose, apply_action, load_scene


def _is_8_adjacent(a, b):
    return max(abs(a[0] - b[0]), abs(a[1] - b[1])) == 1


# -- A* ---------------------------------------------------------------------


def test_start_equals_goal():
    p = astar(np.ones((3, 3), bool), (1, 1), (1, 1))
    assert p.cells == ((1, 1),) and p.cost == 0


def test_empty_grid_diagonal():
    p = astar(np.ones((10, 10), bool), (0, 0), (9, 9))
    assert p.cost == pytest.approx(9 * math.sqrt(2))
    assert (p.straight, p.diagonal) == (0, 9)


def test_disconnected_raises():
    free = np.ones((5, 5), bool)
    free[2, :] = False
    with pytest.raises(NoPath):
        astar(free, (0, 0), (4, 4))
    with pytest.raises(ContractViolation):
        astar(free, (2, 2), (4, 4))


def test_no_corner_cutting():
    free = np.ones((3, 3), bool)
    free[1, 0] = free[0, 1] = False
    free[0, 0] = True
    # (0,0) is only reachable diagonally through a pinched corner
    with pytest.raises(NoPath):
        astar(free, (0, 0), (2, 2))


def test_matches_dijkstra_on_random_grids():
    rng = np.random.default_rng(2024)
    checked = 0
    for _ in range(200):
        free = rng.random((14, 11)) > 0.3
        cells = np.argwhere(free)
        if len(cells) < 2:
            continue
        s, g = (tuple(int(v) for v in cells[i]) for i in rng.choice(len(cells), 2, replace=False))
        ref = dijkstra(free, s)[g]
        if not math.isfinite(ref):
            with pytest.raises(NoPath):
                astar(free, s, g)
            continue
        p = astar(free, s, g)
        assert p.cost == pytest.approx(ref, abs=1e-9)
        assert p.cells[0] == s and p.cells[-1] == g
        assert all(free[c] for c in p.cells)
        assert all(_is_8_adjacent(a, b) for a, b in zip(p.cells, p.cells[1:]))
        checked += 1
    assert checked > 100


def test_astar_is_deterministic():
    free = np.ones((12, 12), bool)
    a = astar(free, (0, 0), (11, 5))
    assert a == astar(free, (0, 0), (11, 5))


def test_waypoints_are_cell_centres():
    p = astar(np.ones((4, 4), bool), (0, 0), (3, 0), resolution=0.25, origin=(1.0, 2.0))
    assert p.waypoints[0] == (1.125, 2.125) and p.waypoints[-1] == (1.875, 2.125)
    assert p.length(0.25) == pytest.approx(0.75)


# -- follower ---------------------------------------------------------------


def _path(*pts):
    return Path(tuple(pts), tuple((int(x), int(y)) for x, y in pts))


def test_waypoint_ahead_moves_forward():
    assert follow_path(_path((0.0, 0.0), (2.0, 0.0)), AgentPose(0.0, 0.0, 0.0)) is Action.MOVE_FORWARD


def test_waypoint_to_the_left_turns_left():
    assert follow_path(_path((0.0, 0.0), (0.0, 2.0)), AgentPose(0.0, 0.0, 0.0)) is Action.TURN_LEFT
    assert follow_path(_path((0.0, 0.0), (0.0, -2.0)), AgentPose(0.0, 0.0, 0.0)) is Action.TURN_RIGHT


def test_stop_within_tolerance():
    assert follow_path(_path((0.0, 0.0), (1.0, 0.0)), AgentPose(1.0 - GOAL_TOLERANCE + 0.01, 0.0, 2.0)) is Action.STOP


def test_hysteresis_keeps_moving():
    f = PathFollower(_path((0.0, 0.0), (4.0, 0.0)))
    assert f.next_action(AgentPose(0.0, 0.0, math.radians(10))) is Action.MOVE_FORWARD
    # 20 degrees is past the deadband but inside the hold band once moving
    assert f.next_action(AgentPose(0.0, 0.0, math.radians(20))) is Action.MOVE_FORWARD
    assert PathFollower(_path((0.0, 0.0), (4.0, 0.0))).next_action(AgentPose(0.0, 0.0, math.radians(20))) is Action.TURN_RIGHT


def test_small_heading_error_still_moves():
    # 10 degrees off is inside the half-turn deadband
    assert follow_path(_path((0.0, 0.0), (2.0, 0.0)), AgentPose(0.0, 0.0, math.radians(10))) is Action.MOVE_FORWARD


def test_boxed_in_is_stuck():
    free = np.zeros((3, 3), bool)
    free[1, 1] = True
    f = PathFollower(_path((0.375, 0.375), (0.625, 0.625)), free=free, resolution=0.25)
    with pytest.raises(Stuck):
        f.next_action(AgentPose(0.375, 0.375, 0.0))


def test_empty_path_rejected():
    with pytest.raises(ContractViolation):
        PathFollower(Path((), ()))


# -- execution on real scenes -----------------------------------------------


@pytest.fixture(scope="module")
def scene():
    return load_scene(data_path("suite", "suite_02.scene"))


def _execute(scene, start_cell, goal_cell, yaw):
    free = scene.free_mask
    path = astar(free, start_cell, goal_cell, scene.resolution)
    follower = PathFollower(path, free=free, resolution=scene.resolution)
    pose = AgentPose(*scene.cell_center(start_cell), yaw)
    poses, blocked = [pose], False
    for _ in range(2000):
        action = follower.next_action(pose, blocked)
        if action is Action.STOP:
            break
        pose, blocked = apply_action(scene, pose, action)
        poses.append(pose)
    return path, poses, action


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 11))
def test_following_reaches_goal_with_bounded_slack(scene, i, j, k):
    cells = np.argwhere(scene.free_mask)
    s, g = tuple(cells[i % len(cells)]), tuple(cells[j % len(cells)])
    if not math.isfinite(dijkstra(scene.free_mask, s)[g]):
        return
    path, poses, last = _execute(scene, s, g, k * math.pi / 6)
    assert last is Action.STOP
    assert math.dist(poses[-1].position, path.waypoints[-1]) <= GOAL_TOLERANCE
    lower = path.length(scene.resolution) / STEP_LENGTH
    # turning slack: at most six turns to face the first leg, then 1.5x
    assert len(poses) - 1 <= 1.5 * lower + 6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 11))
def test_following_makes_progress_every_three_actions(scene, i, j, k):
    cells = np.argwhere(scene.free_mask)
    s, g = tuple(cells[i % len(cells)]), tuple(cells[j % len(cells)])
    to_goal = dijkstra(scene.free_mask, g)
    if not math.isfinite(to_goal[s]):
        return
    _, poses, _ = _execute(scene, s, g, k * math.pi / 6)
    remaining = [to_goal[scene.cell_of(p.position)] for p in poses]
    for t in range(0, len(remaining) - 3):
        assert remaining[t + 3] <= remaining[t] + 1e-9


# -- smoothing --------------------------------------------------------------


def test_straight_path_stays_straight():
    out = bezier_smooth([(0.0, 0.0), (3.0, 0.0)])
    assert np.allclose(out[:, 1], 0.0) and np.all(np.diff(out[:, 0]) > 0)
    assert tuple(out[0]) == (0.0, 0.0) and tuple(out[-1]) == (3.0, 0.0)


def test_corridor_corner_smoothed_inside_free_space():
    free = np.zeros((14, 14), bool)
    free[1:7, 1:13] = True
    free[1:13, 7:13] = True
    p = astar(free, (2, 2), (11, 11))
    out = bezier_smooth(p, free=free)
    assert not np.array_equal(out, np.asarray(p.waypoints))
    assert all(free[int(x), int(y)] for x, y in out)


def test_clipped_corner_returns_raw():
    free = np.zeros((10, 10), bool)
    free[0, :] = True
    free[:, 9] = True
    raw = [(0.5, 0.5), (0.5, 3.5), (0.5, 6.5), (0.5, 9.5), (3.5, 9.5), (6.5, 9.5), (9.5, 9.5)]
    assert np.array_equal(bezier_smooth(raw, free=free), np.asarray(raw))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=2, max_size=30), st.integers(1, 12))
def test_bezier_keeps_endpoints(points, samples):
    out = bezier_smooth(points, samples)
    assert tuple(out[0]) == points[0] and tuple(out[-1]) == points[-1]


def test_bezier_needs_two_points():
    with pytest.raises(ContractViolation):
        bezier_smooth([(0.0, 0.0)])
