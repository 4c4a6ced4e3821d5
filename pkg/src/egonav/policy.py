"""Decision policies: scripted baselines and the remote VLM round trip."""
from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import grid
from .cues import AnnotatedPanorama, MarkerTable, marker_to_global
from .errors import HallucinatedMarker, MalformedResponse, PolicyFailure, WireError
from .memory import VISIT_RADIUS, LandmarkStore, MemoryDigest
from .prompts import correction_suffix, marker_description_prompt, marker_selection_prompt

STRUCTURE_LABELS = {"floor", "wall", "ceiling", "door"}
DESCRIBE_RADIUS = 1.5
GREEDY_MIN_DISTANCE = 0.5


class Choice(enum.Enum):
    MARKER = "MARKER"
    LANDMARK = "LANDMARK"
    ABSTAIN = "ABSTAIN"


@dataclass(frozen=True)
class Decision:
    choice: Choice
    target_id: int | None = None
    rationale: str = ""
    wire_attempts: int = 0
    requeries: int = 0

    @classmethod
    def marker(cls, marker_id: int, rationale: str = "", **kw) -> "Decision":
        return cls(Choice.MARKER, marker_id, rationale, **kw)

    @classmethod
    def landmark(cls, landmark_id: int, rationale: str = "", **kw) -> "Decision":
        return cls(Choice.LANDMARK, landmark_id, rationale, **kw)

    @classmethod
    def abstain(cls, rationale: str = "", **kw) -> "Decision":
        return cls(Choice.ABSTAIN, None, rationale, **kw)


@dataclass
class PolicyContext:
    """Everything a policy may look at for one decision.

    ``pose``, ``belief``, ``visits`` and ``landmarks`` are agent state that the
    scripted baselines use; a VLM only sees the annotated image and digest.
    """

    goal_category: str
    annotated: AnnotatedPanorama
    digest: MemoryDigest = field(default_factory=MemoryDigest)
    step: int = 0
    pose: object = None
    belief: object = None
    visits: list = field(default_factory=list)
    landmarks: LandmarkStore | None = None
    visit_radius: float = VISIT_RADIUS

    @property
    def table(self) -> MarkerTable:
        return self.annotated.table

    def landmark_position(self, landmark_id: int):
        if self.landmarks is None or landmark_id not in self.landmarks:
            return None
        return self.landmarks[landmark_id].position

    def retrieval_entries(self):
        if self.landmarks is None:
            return []
        return [(e.landmark_id, e.description) for e in sorted(self.landmarks.unexplored(), key=lambda e: e.landmark_id)]


# --------------------------------------------------------------------------
# parsing

_ACTION = re.compile(r"Action\s*:\s*\[?\s*['\"]?(None|-?\d+)\b", re.IGNORECASE)
_ACTION_ANY = re.compile(r"Action\s*:", re.IGNORECASE)
_THOUGHT = re.compile(r"(?:Thought|Think)\s*:\s*", re.IGNORECASE)


def parse_response(text: str, table: MarkerTable, digest: MemoryDigest) -> Decision:
    """Read the final ``Action:`` of a selection reply and validate the id."""
    matches = list(_ACTION.finditer(text))
    if not matches:
        if _ACTION_ANY.search(text):
            raise MalformedResponse("Action line carries no marker id or None")
        raise MalformedResponse("reply has no Action line")
    last = matches[-1]
    head = text[: last.start()]
    thought = _THOUGHT.search(head)
    rationale = (head[thought.end():] if thought else head).strip()
    value = last.group(1)
    if value.lower() == "none":
        return Decision.abstain(rationale)
    n = int(value)
    if n in table.candidate_ids:
        return Decision.marker(n, rationale)
    if n in digest.ids:
        return Decision.landmark(n, rationale)
    raise HallucinatedMarker(n, sorted(table.candidate_ids) + digest.ids)


_BLOCK = re.compile(r"Marker\s*Number\s*:\s*\[?(\d+)\]?\s*\n?\s*Description\s*:\s*(.+?)(?=\n\s*Marker\s*Number\s*:|\Z)", re.IGNORECASE | re.DOTALL)


def parse_descriptions(text: str) -> dict[int, str]:
    out = {}
    for m in _BLOCK.finditer(text):
        desc = " ".join(m.group(2).split())
        if desc:
            out.setdefault(int(m.group(1)), desc)
    return out


# --------------------------------------------------------------------------
# fallback describer


def nearby_labels(observations, point, radius: float = DESCRIBE_RADIUS) -> list[str]:
    """Object labels whose rendered surface lies within ``radius`` of ``point``."""
    counts: dict[str, int] = {}
    for obs in observations:
        pts = obs.back_project().reshape(-1, 3)
        sem = obs.semantic.reshape(-1)
        near = (sem > 0) & (np.hypot(pts[:, 0] - point[0], pts[:, 1] - point[1]) <= radius)
        for sid, n in zip(*np.unique(sem[near], return_counts=True)):
            label = obs.labels.get(int(sid), f"object {int(sid)}")
            if label in STRUCTURE_LABELS:
                continue
            counts[label] = counts.get(label, 0) + int(n)
    return sorted(counts, key=lambda k: (-counts[k], k))


def template_description(labels: list[str]) -> str:
    if not labels:
        return "Located on open floor with only walls nearby."
    text = f"Located on the floor near a {labels[0]}."
    if len(labels) > 1:
        text += " There is " + " and ".join(f"a {lab}" for lab in labels[1:3]) + " nearby."
    return text


def fallback_descriptions(annotated: AnnotatedPanorama, marker_ids=None) -> dict[int, str]:
    views = annotated.panorama.views if annotated.panorama is not None else []
    ids = annotated.table.candidate_ids if marker_ids is None else marker_ids
    return {i: template_description(nearby_labels(views, marker_to_global(annotated.table, i))) for i in ids}


# --------------------------------------------------------------------------
# policies


class Policy:
    name = "policy"

    def decide(self, context: PolicyContext) -> Decision:
        raise NotImplementedError

    def describe_markers(self, annotated: AnnotatedPanorama) -> list[tuple[int, str]]:
        return sorted(fallback_descriptions(annotated).items())


class OracleGeodesic(Policy):
    """Picks the marker closest to the goal by true geodesic distance.

    Uses privileged scene access; meant for tests and data generation.
    """

    name = "oracle"

    def __init__(self, scene):
        self.scene = scene

    def _cost(self, goal, position) -> float:
        cell = self.scene.cell_of(position)
        if not self.scene.in_bounds(cell):
            return math.inf
        return float(self.scene.goal_distance_field(goal)[cell])

    def decide(self, context: PolicyContext) -> Decision:
        options = [(self._cost(context.goal_category, marker_to_global(context.table, i)), 0, i) for i in context.table.candidate_ids]
        for lid in context.digest.ids:
            pos = context.landmark_position(lid)
            if pos is not None:
                options.append((self._cost(context.goal_category, pos), 1, lid))
        options = [o for o in options if math.isfinite(o[0])]
        if not options:
            return Decision.abstain("no reachable marker")
        cost, kind, ident = min(options)
        why = f"geodesic {cost:.3f} m to the nearest {context.goal_category} viewpoint"
        return Decision.marker(ident, why) if kind == 0 else Decision.landmark(ident, why)


class FrontierGreedy(Policy):
    """Nearest option by geodesic distance on the belief map.

    Options are the in-view candidate markers plus, with memory, the digest's
    landmarks. Options within ``visit_radius`` of a recorded visit, or closer
    than half a metre to the agent, are skipped.
    """

    name = "frontier-greedy"
    use_memory = True

    def decide(self, context: PolicyContext) -> Decision:
        belief, pose = context.belief, context.pose
        if belief is None or pose is None:
            raise ValueError(f"{self.name} needs the belief map and pose in its context")
        free = belief.free.copy()
        start = belief.cell_of(pose.position)
        if belief.in_bounds(start):
            free[start] = True
        dist = grid.distance_field(free, [start]) * belief.resolution
        options = [(0, i, marker_to_global(context.table, i)) for i in context.table.candidate_ids]
        visits = []
        if self.use_memory:
            for lid in context.digest.ids:
                pos = context.landmark_position(lid)
                if pos is not None:
                    options.append((1, lid, pos))
            visits = [v.position for v in context.visits]
        scored = []
        for kind, ident, pos in options:
            if math.dist(pos, pose.position) < GREEDY_MIN_DISTANCE:
                continue
            if any(math.dist(pos, v) <= context.visit_radius for v in visits):
                continue
            cell = belief.cell_of(pos)
            d = dist[cell] if belief.in_bounds(cell) else math.inf
            if math.isfinite(d):
                scored.append((d, kind, ident))
        if not scored:
            return Decision.abstain("every option is visited or unreachable")
        d, kind, ident = min(scored)
        why = f"nearest unvisited option at {d:.3f} m"
        return Decision.marker(ident, why) if kind == 0 else Decision.landmark(ident, why)


class FrontierGreedyNoMemory(FrontierGreedy):
    name = "frontier-greedy-nomem"
    use_memory = False


class PivotDegenerate(FrontierGreedy):
    """Greedy choice among in-view markers only, with no memory inputs."""

    name = "pivot"
    use_memory = False


class RemoteVLM(Policy):
    """Marker selection and description through a completion endpoint.

    Wire errors are retried once. A hallucinated or malformed answer gets one
    correction re-query listing the legal ids. Anything beyond that raises
    :class:`PolicyFailure` for the caller's fallback.
    """

    name = "remote-vlm"

    def __init__(self, client):
        self.client = client

    def _call(self, prompt: str, images, counter: list) -> str:
        last = None
        for _ in range(2):
            counter[0] += 1
            try:
                return self.client.complete(prompt, images=images)
            except WireError as exc:
                last = exc
        raise PolicyFailure(f"endpoint failed twice: {last}", attempts=counter[0])

    def decide(self, context: PolicyContext) -> Decision:
        prompt = marker_selection_prompt(context.goal_category, context.digest.entries)
        images = [context.annotated.png_bytes()]
        counter = [0]
        text = self._call(prompt, images, counter)
        try:
            d = parse_response(text, context.table, context.digest)
            return Decision(d.choice, d.target_id, d.rationale, counter[0], 0)
        except (HallucinatedMarker, MalformedResponse) as first:
            legal = sorted(context.table.candidate_ids) + context.digest.ids
            try:
                text = self._call(prompt + correction_suffix(legal), images, counter)
            except PolicyFailure as exc:
                raise PolicyFailure(str(exc), attempts=counter[0], requeries=1) from exc
            try:
                d = parse_response(text, context.table, context.digest)
            except (HallucinatedMarker, MalformedResponse) as second:
                raise PolicyFailure(f"invalid answer after correction: {first}; {second}", attempts=counter[0], requeries=1) from second
            return Decision(d.choice, d.target_id, d.rationale, counter[0], 1)

    def describe_markers(self, annotated: AnnotatedPanorama) -> list[tuple[int, str]]:
        ids = annotated.table.candidate_ids
        got: dict[int, str] = {}
        try:
            text = self._call(marker_description_prompt(), [annotated.png_bytes()], [0])
            got = {i: d for i, d in parse_descriptions(text).items() if i in ids}
        except PolicyFailure:
            got = {}
        missing = [i for i in ids if i not in got]
        if missing:
            got.update(fallback_descriptions(annotated, missing))
        return sorted(got.items())


POLICY_KINDS = ("oracle", "frontier-greedy", "frontier-greedy-nomem", "pivot", "remote-vlm")


def make_policy(kind: str, scene=None, client=None) -> Policy:
    if kind == "oracle":
        return OracleGeodesic(scene)
    if kind == "frontier-greedy":
        return FrontierGreedy()
    if kind == "frontier-greedy-nomem":
        return FrontierGreedyNoMemory()
    if kind == "pivot":
        return PivotDegenerate()
    if kind == "remote-vlm":
        if client is None:
            raise ValueError("remote-vlm needs a client")
        return RemoteVLM(client)
    raise ValueError(f"unknown policy kind {kind!r}; expected one of {POLICY_KINDS}")
