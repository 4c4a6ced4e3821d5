import math
import warnings

import numpy as np
import pytest

from egonav import fixture_scene
from egonav.errors import ConfigError, ContractViolation
from egonav.harness import (
    PANORAMA_CHARGE,
    PIVOT_CONFIG,
    DegenerateEpisode,
    EpisodeResult,
    EpisodeSpec,
    LoopConfig,
    compute_spl,
    dump_suite,
    episode_spl,
    filter_hard,
    load_suite,
    run_episode,
    run_suite,
)
from egonav.policy import FrontierGreedy, OracleGeodesic, RemoteVLM
from egonav.scene import STEP_LENGTH, AgentPose, load_scene
from egonav.wire import ScriptedClient


def _result(success, geodesic, path_length, eid="e"):
    return EpisodeResult(eid, success, 10, path_length, geodesic, episode_spl(success, geodesic, path_length))


# -- metrics ----------------------------------------------------------------


@pytest.mark.parametrize("s,l,p,expect", [(True, 10, 10, 1.0), (True, 4, 8, 0.5), (False, 4, 3, 0.0), (True, 4, 2, 1.0)])
def test_spl_cases(s, l, p, expect):
    assert abs(compute_spl([_result(s, l, p)]) - expect) <= 1e-12


def test_spl_is_mean_of_episodes():
    rs = [_result(True, 4, 8), _result(True, 10, 10), _result(False, 3, 30)]
    assert compute_spl(rs) == pytest.approx(np.mean([r.spl for r in rs]), abs=1e-12)


def test_degenerate_episode_excluded():
    rs = [_result(True, 0.0, 0.0, "zero"), _result(True, 4, 8)]
    with pytest.warns(DegenerateEpisode):
        assert compute_spl(rs) == 0.5


# -- hard filter ------------------------------------------------------------


class _FieldScene:
    """Scene stand-in whose goal distance at x = i is ``dist[i]``."""

    def __init__(self, dist):
        self.field = np.asarray(dist, dtype=float)[:, None]

    def cell_of(self, point):
        return (int(point[0]), 0)

    def in_bounds(self, cell):
        return 0 <= cell[0] < len(self.field)

    def goal_distance_field(self, category):
        return self.field


def _specs(n):
    return [EpisodeSpec("s", AgentPose(i + 0.5, 0.5, 0.0), "tv", episode_id=str(i)) for i in range(n)]


def test_filter_hard_keeps_longest_half():
    scenes = {"s": _FieldScene([2, 8, 5, 9])}
    kept = filter_hard(_specs(4), scenes, 0.5)
    assert [s.episode_id for s in kept] == ["3", "1"]


def test_filter_hard_full_and_ceiling():
    scenes = {"s": _FieldScene([2, 8, 5, 9])}
    assert len(filter_hard(_specs(4), scenes, 1.0)) == 4
    assert len(filter_hard(_specs(1), {"s": _FieldScene([3])}, 0.5)) == 1
    with pytest.raises(ContractViolation):
        filter_hard(_specs(4), scenes, 0.0)


def test_filter_hard_ties_keep_order():
    kept = filter_hard(_specs(4), {"s": _FieldScene([5, 5, 5, 1])}, 0.5)
    assert [s.episode_id for s in kept] == ["0", "1"]


# -- episodes ---------------------------------------------------------------


@pytest.fixture(scope="module")
def near_spec():
    return EpisodeSpec(fixture_scene(), AgentPose(1.625, 0.875, math.pi), "tv", 500, 7, "near")


def test_oracle_sees_goal_and_succeeds(corridor, near_spec):
    r = run_episode(near_spec, OracleGeodesic(corridor), scene=corridor)
    assert r.success and r.steps < 20
    assert r.events[0]["event"] == "header" and r.events[-1]["event"] == "result"
    assert any(e["event"] == "detect" for e in r.events)


def test_budget_of_one(corridor, near_spec):
    spec = EpisodeSpec(near_spec.scene_ref, near_spec.start, "tv", max_steps=1)
    r = run_episode(spec, OracleGeodesic(corridor), scene=corridor)
    assert not r.success and r.steps == 1 and r.spl == 0


def test_invalid_spec(corridor):
    with pytest.raises(ContractViolation):
        run_episode(EpisodeSpec(fixture_scene(), AgentPose(0.1, 0.1, 0), "tv"), FrontierGreedy(), scene=corridor)
    with pytest.raises(ContractViolation):
        run_episode(EpisodeSpec(fixture_scene(), AgentPose(1.625, 0.875, 0), "sofa"), FrontierGreedy(), scene=corridor)


@pytest.fixture(scope="module")
def suite_specs(suite_path):
    return load_suite(suite_path)


@pytest.fixture(scope="module")
def greedy_runs(suite_specs):
    return run_suite(suite_specs, FrontierGreedy())


def test_same_seed_same_trace(suite_specs):
    spec = suite_specs[3]
    a = run_episode(spec, FrontierGreedy())
    b = run_episode(spec, FrontierGreedy())
    assert a.trace_text() == b.trace_text()


def test_parallelism_does_not_change_results(suite_specs, greedy_runs):
    par = run_suite(suite_specs, FrontierGreedy(), parallelism=4)
    assert par.to_json() == greedy_runs.to_json()
    assert [r.trace_text() for r in par.results] == [r.trace_text() for r in greedy_runs.results]


def test_step_and_path_accounting(greedy_runs, suite_specs):
    for spec, r in zip(suite_specs, greedy_runs.results):
        assert r.steps <= spec.max_steps
        actions = [e for e in r.events if e["event"] == "action"]
        charged = sum(e["charged"] for e in r.events if e["event"] == "capture")
        assert r.steps == len(actions) + charged
        moves = [e for e in actions if e["action"] == "MOVE_FORWARD" and not e["blocked"]]
        assert r.path_length == pytest.approx(STEP_LENGTH * len(moves), abs=1e-9)
        assert 0 <= r.spl <= 1 and (r.success or r.spl == 0)


def test_success_ends_near_a_viewpoint(greedy_runs, suite_specs):
    for spec, r in zip(suite_specs, greedy_runs.results):
        if not r.success:
            continue
        scene = load_scene(spec.scene_ref)
        x, y, _ = r.events[-2]["pose"]
        assert np.min(np.hypot(*(scene.goal_viewpoints(spec.goal_category) - (x, y)).T)) <= 0.2 + 1e-9


def test_decisions_reference_presented_ids(greedy_runs):
    for r in greedy_runs.results:
        table, digest = None, []
        for e in r.events:
            if e["event"] == "annotate":
                table = {m["id"] for m in e["table"] if m["kind"] == "CANDIDATE"}
            elif e["event"] == "retrieve":
                digest = [i for i, _ in e["digest"]]
            elif e["event"] == "decide":
                if e["choice"] == "MARKER":
                    assert e["id"] in table
                elif e["choice"] == "LANDMARK":
                    assert e["id"] in digest


def test_header_records_charge_and_seed(greedy_runs, suite_specs):
    h = greedy_runs.results[0].events[0]
    assert h["panorama_charge"] == PANORAMA_CHARGE and h["seed"] == suite_specs[0].seed


def test_pivot_config_drops_memory_events(suite_specs):
    r = run_episode(suite_specs[0], FrontierGreedy(), config=PIVOT_CONFIG)
    kinds = {e["event"] for e in r.events}
    assert "retrieve" not in kinds and "visit" not in kinds and "describe" not in kinds
    assert r.events[0]["flags"] == {"frontier_map": False, "landmark_memory": False, "visitation_memory": False}


def test_hallucinating_endpoint_falls_back(suite_specs):
    client = ScriptedClient({"MARKER_SELECTION": "Thought: there\nAction: 77", "MARKER_DESCRIPTION": "Marker Number: 0\nDescription: x."})
    r = run_episode(suite_specs[1], RemoteVLM(client))
    assert r.events[-1]["event"] == "result"
    decides = [i for i, e in enumerate(r.events) if e["event"] == "decide"]
    assert decides
    for i in decides:
        before = [e["event"] for e in r.events[i - 2 : i]]
        assert before == ["requery", "fallback"]
        assert r.events[i]["policy"] == "frontier-greedy"


def test_erroring_endpoint_makes_two_attempts(suite_specs):
    client = ScriptedClient({"MARKER_SELECTION": {"error": "down"}, "MARKER_DESCRIPTION": {"error": "down"}})
    r = run_episode(EpisodeSpec(suite_specs[0].scene_ref, suite_specs[0].start, suite_specs[0].goal_category, 60), RemoteVLM(client))
    fallbacks = [e for e in r.events if e["event"] == "fallback"]
    assert fallbacks and all(e["wire_attempts"] == 2 for e in fallbacks)
    assert not any(e["event"] == "requery" for e in r.events)


def test_empty_suite_rejected():
    with pytest.raises(ContractViolation):
        run_suite([], FrontierGreedy())


# -- manifests --------------------------------------------------------------


def test_suite_round_trip(tmp_path, suite_specs):
    out = tmp_path / "m.yaml"
    dump_suite(suite_specs, out)
    # scene paths are absolute here, so they survive the move
    assert load_suite(out) == suite_specs


def test_max_steps_override(suite_path):
    assert {s.max_steps for s in load_suite(suite_path, max_steps=200)} == {200}


@pytest.mark.parametrize(
    "text",
    ["episodes: 3", "- a", "episodes:\n  - {scene: nope.scene, start: [0, 0, 0], goal: tv}", "episodes:\n  - {start: [0, 0]}", "{: bad"],
)
def test_bad_manifests(tmp_path, text):
    p = tmp_path / "m.yaml"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_suite(p)


def test_missing_manifest(tmp_path):
    with pytest.raises(ConfigError):
        load_suite(tmp_path / "none.yaml")


def test_loop_config_flags():
    assert LoopConfig().flags() == {"frontier_map": True, "landmark_memory": True, "visitation_memory": True}


def test_degenerate_warning_not_raised_for_normal_runs(greedy_runs):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        compute_spl(greedy_runs.results)
