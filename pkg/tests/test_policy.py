import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from conftest import room
from egonav.cues import AnnotatedPanorama, Marker, MarkerKind, MarkerTable, annotate
from egonav.errors import HallucinatedMarker, MalformedResponse, PolicyFailure
from egonav.mapping import GlobalMap
from egonav.memory import LandmarkStore, MemoryDigest, VisitEntry, record_landmarks
from egonav.policy import (
    Choice,
    Decision,
    FrontierGreedy,
    OracleGeodesic,
    PivotDegenerate,
    PolicyContext,
    RemoteVLM,
    fallback_descriptions,
    make_policy,
    parse_descriptions,
    parse_response,
)
from egonav.prompts import PromptKind, classify_prompt
from egonav.scene import AgentPose
from egonav.sensor import CameraModel, capture_panorama
from egonav.wire import ScriptedClient

CAM = CameraModel.default()


def _table(points, visited=()):
    entries = {}
    for i, p in enumerate(points):
        entries[i] = Marker(i, (10 * i, 5), 0, tuple(p), MarkerKind.CANDIDATE)
    for j, p in enumerate(visited, start=len(points)):
        entries[j] = Marker(j, (10 * j, 5), 0, tuple(p), MarkerKind.VISITED)
    return MarkerTable(entries)


def _annotated(points, visited=()):
    return AnnotatedPanorama(Image.new("RGB", (8, 8)), _table(points, visited))


DIGEST = MemoryDigest(((97, "near a sofa"), (98, "near a sink")))


# -- parse_response ---------------------------------------------------------


def test_parse_marker_with_rationale():
    d = parse_response("Thought: kitchen likely\nAction: 0", _table([(0, 0), (1, 1)]), MemoryDigest())
    assert d.choice is Choice.MARKER and d.target_id == 0 and d.rationale == "kitchen likely"


def test_parse_landmark():
    d = parse_response("Action: 97", _table([(0, 0)] * 5), DIGEST)
    assert d == Decision.landmark(97)


def test_parse_hallucination():
    with pytest.raises(HallucinatedMarker):
        parse_response("Action: 7", _table([(i, 0) for i in range(5)]), DIGEST)


def test_parse_none_and_missing():
    assert parse_response("Thought: nothing here\nAction: None", _table([(0, 0)]), DIGEST).choice is Choice.ABSTAIN
    with pytest.raises(MalformedResponse):
        parse_response("I would go left", _table([(0, 0)]), DIGEST)
    with pytest.raises(MalformedResponse):
        parse_response("Action: somewhere", _table([(0, 0)]), DIGEST)


def test_parse_takes_last_action_and_bracket_form():
    text = "Thought: Action: 1 looked good\nbut no\nAction: [0]"
    assert parse_response(text, _table([(0, 0), (1, 1)]), DIGEST).target_id == 0


def test_visited_marker_id_is_not_selectable():
    table = _table([(0, 0)], visited=[(3, 3)])
    with pytest.raises(HallucinatedMarker):
        parse_response("Action: 1", table, MemoryDigest())


def test_parse_descriptions_blocks():
    text = "Marker Number: 0\nDescription: near a bed.\n\nMarker Number: [1]\nDescription: by the\n  window."
    assert parse_descriptions(text) == {0: "near a bed.", 1: "by the window."}


# -- oracle -----------------------------------------------------------------


def _tv_room(resolution=0.25):
    from egonav.worldgen import plan_to_scene

    rows = ["#" * 32] + ["#" + "." * 30 + "#"] * 6 + ["#" * 32]
    rows[3] = "#" + "." * 28 + "tt#"
    return plan_to_scene(rows, {"t": "tv"}, resolution=resolution)


def test_oracle_picks_marker_next_to_goal():
    scene = _tv_room()
    near = tuple(scene.goal_viewpoints("tv")[0])
    far = [scene.cell_center((1, 1)), scene.cell_center((8, 5))]
    ctx = PolicyContext("tv", _annotated(far + [near]))
    d = OracleGeodesic(scene).decide(ctx)
    assert d == Decision.marker(2, d.rationale)


class _Scaled:
    """Scene view whose geodesic field is multiplied by a constant."""

    def __init__(self, scene, factor):
        self.scene, self.factor = scene, factor

    def __getattr__(self, name):
        return getattr(self.scene, name)

    def goal_distance_field(self, category):
        return self.scene.goal_distance_field(category) * self.factor


@pytest.fixture(scope="module")
def tv_room():
    return _tv_room()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 28), st.integers(1, 6)), min_size=1, max_size=6, unique=True), st.floats(1e-3, 1e3))
def test_oracle_scale_invariant(tv_room, cells, factor):
    ctx = PolicyContext("tv", _annotated([tv_room.cell_center(c) for c in cells]))
    assert OracleGeodesic(_Scaled(tv_room, factor)).decide(ctx).target_id == OracleGeodesic(tv_room).decide(ctx).target_id


# -- greedy -----------------------------------------------------------------


def _belief(scene):
    m = GlobalMap.for_scene(scene)
    m.cells[scene.free_mask] = 1
    return m


def test_greedy_abstains_when_everything_visited():
    scene = room(10, 10)
    pts = [scene.cell_center((2, 2)), scene.cell_center((6, 6))]
    visits = [VisitEntry(p, i) for i, p in enumerate(pts)]
    ctx = PolicyContext("tv", _annotated(pts), pose=AgentPose(1.125, 1.125, 0), belief=_belief(scene), visits=visits)
    assert FrontierGreedy().decide(ctx).choice is Choice.ABSTAIN
    # without memory the same options stay available
    assert PivotDegenerate().decide(ctx).choice is Choice.MARKER


def test_greedy_picks_nearest_and_uses_landmarks():
    scene = room(12, 12)
    pose = AgentPose(scene.cell_center((1, 1))[0], scene.cell_center((1, 1))[1], 0)
    pts = [scene.cell_center((9, 9)), scene.cell_center((6, 2))]
    store = record_landmarks(LandmarkStore(id_base=90), [(scene.cell_center((3, 3)), "near a chair")])
    digest = MemoryDigest(((90, "near a chair"),))
    ctx = PolicyContext("tv", _annotated(pts), digest, pose=pose, belief=_belief(scene), landmarks=store)
    assert FrontierGreedy().decide(ctx).target_id == 90
    assert PivotDegenerate().decide(ctx).target_id == 1


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.tuples(st.integers(1, 10), st.integers(1, 10)), min_size=1, max_size=8, unique=True),
    st.lists(st.tuples(st.integers(1, 10), st.integers(1, 10)), max_size=4),
)
def test_greedy_never_selects_near_a_visit(cands, visited):
    scene = room(12, 12)
    pts = [scene.cell_center(c) for c in cands]
    visits = [VisitEntry(scene.cell_center(c), i) for i, c in enumerate(visited)]
    ctx = PolicyContext("tv", _annotated(pts), pose=AgentPose(0.375, 0.375, 0), belief=_belief(scene), visits=visits)
    d = FrontierGreedy().decide(ctx)
    if d.choice is Choice.MARKER:
        p = pts[d.target_id]
        assert all(math.dist(p, v.position) > ctx.visit_radius for v in visits)


# -- remote -----------------------------------------------------------------


def test_remote_marker_choice():
    client = ScriptedClient({"MARKER_SELECTION": "Thought: the tv is probably in the living room\nAction: 2"})
    ctx = PolicyContext("tv", _annotated([(0, 0), (1, 0), (2, 0)]), DIGEST)
    d = RemoteVLM(client).decide(ctx)
    assert d.choice is Choice.MARKER and d.target_id == 2 and d.wire_attempts == 1
    assert classify_prompt(client.prompts[0]) is PromptKind.MARKER_SELECTION
    assert "97: near a sofa" in client.prompts[0]


def test_remote_always_erroring_makes_two_attempts():
    client = ScriptedClient({"MARKER_SELECTION": {"error": "down"}})
    with pytest.raises(PolicyFailure) as info:
        RemoteVLM(client).decide(PolicyContext("tv", _annotated([(0, 0)])))
    assert info.value.attempts == 2 and client.calls == 2


def test_remote_hallucination_requeries_once():
    client = ScriptedClient({"MARKER_SELECTION": ["Action: 42", "Action: 0"]})
    d = RemoteVLM(client).decide(PolicyContext("tv", _annotated([(0, 0)])))
    assert d.target_id == 0 and d.requeries == 1
    assert "42" not in client.prompts[1].split("Action:")[-1] and client.prompts[1] != client.prompts[0]

    client = ScriptedClient({"MARKER_SELECTION": "Action: 42"})
    with pytest.raises(PolicyFailure) as info:
        RemoteVLM(client).decide(PolicyContext("tv", _annotated([(0, 0)])))
    assert info.value.requeries == 1


@settings(max_examples=60, deadline=None)
@given(st.text(max_size=60), st.integers(-5, 120))
def test_remote_never_returns_illegal_id(noise, n):
    client = ScriptedClient({"MARKER_SELECTION": [f"{noise}\nAction: {n}", noise]})
    ctx = PolicyContext("tv", _annotated([(0, 0), (1, 0)]), DIGEST)
    try:
        d = RemoteVLM(client).decide(ctx)
    except PolicyFailure:
        return
    if d.choice is Choice.MARKER:
        assert d.target_id in ctx.table.candidate_ids
    elif d.choice is Choice.LANDMARK:
        assert d.target_id in DIGEST.ids


@pytest.fixture(scope="module")
def sink_view(sink_room):
    # south end of the room looking north at the sink
    pose = AgentPose(*sink_room.cell_center((5, 8)), -math.pi / 2)
    pano = capture_panorama(sink_room, pose, CAM)
    ann = annotate(pano, [sink_room.cell_center((4, 2)), sink_room.cell_center((1, 5))], tolerance=sink_room.resolution)
    assert len(ann.table.candidate_ids) == 2
    return ann


def test_fallback_describer_mentions_sink(sink_view, sink_room):
    descs = fallback_descriptions(sink_view)
    near = [i for i, m in sink_view.table.entries.items() if m.global_position == sink_room.cell_center((4, 2))][0]
    assert "sink" in descs[near]


def test_describe_two_blocks(sink_view):
    client = ScriptedClient({"MARKER_DESCRIPTION": "Marker Number: 0\nDescription: a.\nMarker Number: 1\nDescription: b."})
    assert RemoteVLM(client).describe_markers(sink_view) == [(0, "a."), (1, "b.")]


def test_describe_fills_missing_marker(sink_view):
    client = ScriptedClient({"MARKER_DESCRIPTION": "Marker Number: 1\nDescription: open floor by the wall."})
    pairs = dict(RemoteVLM(client).describe_markers(sink_view))
    assert pairs[1] == "open floor by the wall." and pairs[0] == fallback_descriptions(sink_view)[0]


def test_describe_failure_uses_fallback(sink_view):
    client = ScriptedClient({"MARKER_DESCRIPTION": {"error": "down"}})
    assert dict(RemoteVLM(client).describe_markers(sink_view)) == fallback_descriptions(sink_view)


def test_make_policy_kinds(corridor):
    assert make_policy("oracle", corridor).name == "oracle"
    assert make_policy("pivot").name == "pivot"
    with pytest.raises(ValueError):
        make_policy("nope")
