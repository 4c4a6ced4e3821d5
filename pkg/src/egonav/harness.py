"""Episode loop, SR/SPL metrics, difficulty filtering, suites and traces."""
from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import grid
from .cues import DEFAULT_MAX_CANDIDATES, annotate, generate_candidates, marker_to_global
from .errors import ConfigError, ContractViolation, NoPath, PolicyFailure, Stuck
from .mapping import DEFAULT_MIN_CLUSTER, DEFAULT_SPACING, OBSTACLE, GlobalMap, cluster_frontiers, snap_to_floor
from .memory import DEFAULT_K, VISIT_RADIUS, LandmarkStore, MemoryDigest, record_landmarks, record_visit, retrieve_top_k
from .planner import PathFollower, astar
from .policy import GREEDY_MIN_DISTANCE, Choice, FrontierGreedy, Policy, PolicyContext
from .scene import (
    DEFAULT_MIN_PIXEL_FRACTION,
    STEP_LENGTH,
    Action,
    AgentPose,
    Scene,
    apply_action,
    check_success,
    detect_goal,
    geodesic_to_goal,
    load_scene,
    nearest_goal_viewpoint,
)
from .sensor import CameraModel, capture_panorama, render

log = logging.getLogger(__name__)

DEFAULT_MAX_STEPS = 500
PANORAMA_CHARGE = 3
LANDMARK_ID_BASE = 90
MAX_REPLANS = 8
MAX_TURNS_IN_PLACE = 12


class DegenerateEpisode(UserWarning):
    """An episode whose start already lies in the success region (l = 0)."""


@dataclass(frozen=True)
class EpisodeSpec:
    scene_ref: str
    start: AgentPose
    goal_category: str
    max_steps: int = DEFAULT_MAX_STEPS
    seed: int = 0
    episode_id: str = ""

    def validate(self, scene: Scene) -> None:
        if self.max_steps <= 0:
            raise ContractViolation("max_steps must be positive")
        if not scene.is_free_point(self.start.position):
            raise ContractViolation(f"start {self.start.position} is not on free floor")
        if self.goal_category not in scene.categories:
            raise ContractViolation(f"goal {self.goal_category!r} is not in scene {scene.name!r}")

    def to_json(self) -> dict:
        return {
            "id": self.episode_id,
            "scene": self.scene_ref,
            "start": [self.start.x, self.start.y, self.start.yaw],
            "goal": self.goal_category,
            "max_steps": self.max_steps,
            "seed": self.seed,
        }


@dataclass
class EpisodeResult:
    episode_id: str
    success: bool
    steps: int
    path_length: float
    geodesic: float
    spl: float
    events: list[dict] = field(default_factory=list)
    reason: str = ""

    def row(self) -> dict:
        return {
            "id": self.episode_id,
            "success": self.success,
            "steps": self.steps,
            "path_length": self.path_length,
            "geodesic": self.geodesic,
            "spl": self.spl,
            "reason": self.reason,
        }

    def trace_text(self) -> str:
        return "".join(json.dumps(e, separators=(",", ":"), sort_keys=False) + "\n" for e in self.events)


@dataclass(frozen=True)
class LoopConfig:
    """Knobs of the episode loop; the three ``use_*`` flags are the ablations."""

    camera: CameraModel = field(default_factory=CameraModel.default)
    use_frontier_map: bool = True
    use_landmark_memory: bool = True
    use_visitation_memory: bool = True
    max_candidates: int = DEFAULT_MAX_CANDIDATES
    min_cluster: int = DEFAULT_MIN_CLUSTER
    spacing: float = DEFAULT_SPACING
    k: int = DEFAULT_K
    visit_radius: float = VISIT_RADIUS
    min_pixel_fraction: float = DEFAULT_MIN_PIXEL_FRACTION
    landmark_id_base: int = LANDMARK_ID_BASE

    def flags(self) -> dict:
        return {
            "frontier_map": self.use_frontier_map,
            "landmark_memory": self.use_landmark_memory,
            "visitation_memory": self.use_visitation_memory,
        }


PIVOT_CONFIG = LoopConfig(use_frontier_map=False, use_landmark_memory=False, use_visitation_memory=False)


# --------------------------------------------------------------------------
# metrics


def episode_spl(success: bool, geodesic: float, path_length: float) -> float:
    if not success:
        return 0.0
    if geodesic <= 0:
        return 1.0
    return geodesic / max(path_length, geodesic)


def compute_spl(results) -> float:
    """Mean of S * l / max(p, l); episodes with l = 0 are excluded with a warning."""
    vals = []
    for r in results:
        if not r.geodesic > 0:
            warnings.warn(f"episode {r.episode_id!r} starts inside the success region; excluded", DegenerateEpisode, stacklevel=2)
            continue
        vals.append(float(r.success) * r.geodesic / max(r.path_length, r.geodesic))
    return sum(vals) / len(vals) if vals else 0.0


def success_rate(results) -> float:
    results = list(results)
    return sum(1 for r in results if r.success) / len(results) if results else 0.0


def filter_hard(specs, scene_set, fraction: float = 0.5) -> list[EpisodeSpec]:
    """Keep the ceil(fraction * N) specs with the longest start-to-goal geodesic.

    ``scene_set`` maps ``scene_ref`` to a :class:`Scene` (or is a callable
    returning one). Ties keep spec order.
    """
    if not 0 < fraction <= 1:
        raise ContractViolation("fraction must lie in (0, 1]")
    specs = list(specs)
    lookup = scene_set if callable(scene_set) else scene_set.__getitem__
    dist = [geodesic_to_goal(lookup(s.scene_ref), s.start.position, s.goal_category) for s in specs]
    order = sorted(range(len(specs)), key=lambda i: (-dist[i], i))
    keep = math.ceil(fraction * len(specs))
    return [specs[i] for i in order[:keep]]


# --------------------------------------------------------------------------
# trace


class Trace:
    def __init__(self):
        self.events: list[dict] = []

    def emit(self, event: str, step: int, **data) -> None:
        self.events.append({"event": event, "step": step, **data})


def _pose(p: AgentPose) -> list[float]:
    return [p.x, p.y, p.yaw]


def _pt(p) -> list[float]:
    return [float(p[0]), float(p[1])]


# --------------------------------------------------------------------------
# episode loop


class _Episode:
    def __init__(self, spec: EpisodeSpec, scene: Scene, policy: Policy, retriever, config: LoopConfig, fallback: Policy):
        self.spec, self.scene, self.policy = spec, scene, policy
        self.retriever, self.cfg, self.fallback = retriever, config, fallback
        self.trace = Trace()
        self.pose = spec.start
        self.steps = 0
        self.path_length = 0.0
        self.gmap = GlobalMap.for_scene(scene)
        self.store = LandmarkStore(id_base=config.landmark_id_base)
        self.visits: list = []
        self.rng = np.random.default_rng(spec.seed)
        self.finished = None  # (success, reason)

    @property
    def budget_left(self) -> int:
        return self.spec.max_steps - self.steps

    # -- sensing ---------------------------------------------------------

    def capture(self):
        charge = min(PANORAMA_CHARGE, self.budget_left)
        self.steps += charge
        pano = capture_panorama(self.scene, self.pose, self.cfg.camera)
        self.trace.emit("capture", self.steps, pose=_pose(self.pose), charged=charge)
        if not self.cfg.use_frontier_map:
            self.gmap = GlobalMap.for_scene(self.scene)
        for view in pano.views:
            self.gmap.integrate(view)
        cells = self.gmap.cells
        self.trace.emit(
            "integrate", self.steps,
            free=int((cells == 1).sum()), obstacle=int((cells == OBSTACLE).sum()), frontier=int(self.gmap.frontier_cells.sum()),
        )
        return pano

    def sees_goal(self, observation) -> bool:
        return detect_goal(self.scene, observation, self.spec.goal_category, self.cfg.min_pixel_fraction)

    # -- decision --------------------------------------------------------

    def decide(self, pano):
        cfg = self.cfg
        # the cap applies to markers shown, so truncate after the visibility test
        candidates = generate_candidates(self.gmap, None, cfg.min_cluster, cfg.spacing)
        visits = self.visits if cfg.use_visitation_memory else []
        annotated = annotate(pano, candidates, visits, tolerance=self.scene.resolution, max_markers=cfg.max_candidates)
        self.trace.emit("annotate", self.steps, candidates=len(candidates), table=annotated.table.to_json())
        digest = MemoryDigest()
        if cfg.use_landmark_memory:
            digest = retrieve_top_k(self.store, self.spec.goal_category, cfg.k, self.retriever)
            self.trace.emit("retrieve", self.steps, source=digest.source, digest=[[i, d] for i, d in digest.entries])
        ctx = PolicyContext(
            self.spec.goal_category, annotated, digest, self.steps,
            pose=self.pose, belief=self.gmap,
            visits=list(visits), landmarks=self.store if cfg.use_landmark_memory else None,
            visit_radius=cfg.visit_radius,
        )
        used = self.policy
        try:
            decision = self.policy.decide(ctx)
        except PolicyFailure as exc:
            for _ in range(exc.requeries):
                self.trace.emit("requery", self.steps, policy=self.policy.name)
            self.trace.emit("fallback", self.steps, policy=self.fallback.name, reason=str(exc), wire_attempts=exc.attempts)
            used = self.fallback
            decision = self.fallback.decide(ctx)
        else:
            for _ in range(decision.requeries):
                self.trace.emit("requery", self.steps, policy=self.policy.name)
        self.trace.emit(
            "decide", self.steps,
            policy=used.name, choice=decision.choice.value, id=decision.target_id, rationale=decision.rationale,
            wire_attempts=decision.wire_attempts, requeries=decision.requeries,
        )
        if cfg.use_landmark_memory and annotated.table.candidate_ids:
            try:
                pairs = self.policy.describe_markers(annotated)
            except PolicyFailure:
                pairs = self.fallback.describe_markers(annotated)
            record_landmarks(self.store, [(marker_to_global(annotated.table, i), d) for i, d in pairs], self.steps)
            self.trace.emit("describe", self.steps, descriptions=[[i, d] for i, d in pairs], landmarks=len(self.store))
        return self.resolve(decision, ctx)

    def resolve(self, decision, ctx):
        if decision.choice is Choice.MARKER:
            return marker_to_global(ctx.table, decision.target_id)
        if decision.choice is Choice.LANDMARK:
            return self.store[decision.target_id].position
        if ctx.digest.entries:
            return self.store[ctx.digest.ids[0]].position
        return self.nearest_frontier()

    def nearest_frontier(self):
        clusters = cluster_frontiers(self.gmap, min_size=1)
        if not clusters:
            return None
        start = self.gmap.cell_of(self.pose.position)
        free = self.gmap.free.copy()
        free[start] = True
        dist = grid.distance_field(free, [start])
        best = None
        for cl in clusters:
            cell = snap_to_floor(self.gmap, cl.centroid)
            p = self.gmap.cell_center(cell)
            if math.dist(p, self.pose.position) < GREEDY_MIN_DISTANCE or not np.isfinite(dist[cell]):
                continue
            key = (float(dist[cell]), cell)
            if best is None or key < best[0]:
                best = (key, p)
        return None if best is None else best[1]

    # -- motion ----------------------------------------------------------

    def plan(self, target) -> PathFollower | None:
        start = self.gmap.cell_of(self.pose.position)
        goal = self.gmap.cell_of(target)
        path = None
        for grid_mask in (self.gmap.free, self.gmap.cells != OBSTACLE):
            mask = grid_mask.copy()
            mask[start] = True
            if not self.gmap.in_bounds(goal):
                break
            mask[goal] = True
            try:
                path = astar(mask, start, goal, self.gmap.resolution, self.gmap.origin)
                break
            except NoPath:
                continue
        if path is None:
            self.trace.emit("plan", self.steps, target=_pt(target), ok=False)
            return None
        # the final waypoint is the exact target, not its cell centre
        wps = path.waypoints[:-1] + (tuple(float(v) for v in target),)
        path = replace(path, waypoints=wps)
        self.trace.emit("plan", self.steps, target=_pt(target), ok=True, waypoints=[_pt(w) for w in wps])
        return PathFollower(path, self._passable(), self.gmap.resolution, self.gmap.origin)

    def _passable(self) -> np.ndarray:
        mask = self.gmap.cells != OBSTACLE
        mask[self.gmap.cell_of(self.pose.position)] = True
        return mask

    def navigate(self, target, to_goal: bool) -> str:
        follower = self.plan(target)
        if follower is None:
            return "no-path"
        blocked = False
        replans = 0
        turns = 0
        while True:
            if self.budget_left <= 0:
                return "budget"
            try:
                if turns > MAX_TURNS_IN_PLACE:
                    turns = 0
                    raise Stuck("turning in place without progress")
                action = follower.next_action(self.pose, blocked)
            except Stuck:
                replans += 1
                if replans > MAX_REPLANS:
                    return "stuck"
                follower = self.plan(target)
                if follower is None:
                    return "no-path"
                blocked = False
                continue
            if action is Action.STOP:
                if not to_goal:
                    return "arrived"
                self.steps += 1
                self.trace.emit("action", self.steps, action=action.value, pose=_pose(self.pose), blocked=False)
                return "stopped"
            before = self.pose
            self.pose, blocked = apply_action(self.scene, self.pose, action)
            self.steps += 1
            turns = 0 if action is Action.MOVE_FORWARD and not blocked else turns + 1
            if action is Action.MOVE_FORWARD and not blocked:
                self.path_length += math.dist(before.position, self.pose.position)
            self.trace.emit("action", self.steps, action=action.value, pose=_pose(self.pose), blocked=blocked)
            if blocked:
                dest = (before.x + STEP_LENGTH * math.cos(before.yaw), before.y + STEP_LENGTH * math.sin(before.yaw))
                self.gmap.mark_obstacle(self.gmap.cell_of(dest))
            obs = render(self.scene, self.pose, 0.0, self.cfg.camera)
            before_obst = self.gmap.cells == OBSTACLE
            self.gmap.integrate(obs)
            follower.free = self._passable()
            if not to_goal and self.sees_goal(obs):
                goal_vp = nearest_goal_viewpoint(self.scene, self.pose.position, self.spec.goal_category)
                if goal_vp is not None:
                    self.trace.emit("detect", self.steps, pose=_pose(self.pose), viewpoint=_pt(goal_vp))
                    target, to_goal = goal_vp, True
                    follower = self.plan(target)
                    if follower is None:
                        return "no-path"
                    blocked = False
                    continue
            new_obst = (self.gmap.cells == OBSTACLE) & ~before_obst
            if new_obst.any():
                remaining = follower.path.cells[follower.index:]
                if any(new_obst[c] for c in remaining):
                    follower = self.plan(target)
                    if follower is None:
                        return "no-path"
                    blocked = False

    # -- main loop -------------------------------------------------------

    def run(self) -> EpisodeResult:
        spec, scene, cfg = self.spec, self.scene, self.cfg
        geodesic = geodesic_to_goal(scene, spec.start.position, spec.goal_category)
        self.trace.emit(
            "header", 0,
            episode=spec.episode_id, scene=Path(spec.scene_ref).name, goal=spec.goal_category,
            start=_pose(spec.start), max_steps=spec.max_steps, seed=spec.seed, rng="numpy.default_rng",
            policy=self.policy.name, fallback=self.fallback.name,
            panorama_charge=PANORAMA_CHARGE, step_length=STEP_LENGTH, flags=cfg.flags(),
        )
        outcome = "budget"
        while self.budget_left > 0:
            pano = self.capture()
            if self.budget_left <= 0:
                break
            if any(self.sees_goal(v) for v in pano.views):
                goal_vp = nearest_goal_viewpoint(scene, self.pose.position, spec.goal_category)
                if goal_vp is not None:
                    self.trace.emit("detect", self.steps, pose=_pose(self.pose), viewpoint=_pt(goal_vp))
                    outcome = self.navigate(goal_vp, to_goal=True)
                    if outcome == "stopped":
                        break
                    continue
            target = self.decide(pano)
            if target is None:
                outcome = "abstain"
                break
            outcome = self.navigate(target, to_goal=False)
            if outcome == "stopped":
                break
            if cfg.use_visitation_memory and outcome != "budget":
                if not self.visits or self.steps > self.visits[-1].step:
                    record_visit(self.visits, self.pose.position, self.steps, self.store, cfg.visit_radius)
                    self.trace.emit("visit", self.steps, position=_pt(self.pose.position), visits=len(self.visits))
        success = outcome == "stopped" and check_success(scene, self.pose, spec.goal_category)
        spl = episode_spl(success, geodesic, self.path_length)
        reason = "success" if success else outcome
        self.trace.emit(
            "result", self.steps,
            success=success, steps=self.steps, path_length=self.path_length, geodesic=geodesic, spl=spl, reason=reason,
        )
        return EpisodeResult(spec.episode_id, success, self.steps, self.path_length, geodesic, spl, self.trace.events, reason)


def run_episode(spec: EpisodeSpec, policy: Policy, retriever=None, *, scene: Scene | None = None, config: LoopConfig | None = None, fallback: Policy | None = None) -> EpisodeResult:
    """Run one episode to success, abstention with nothing left, or budget."""
    scene = scene if scene is not None else load_scene(spec.scene_ref)
    spec.validate(scene)
    config = config or LoopConfig()
    return _Episode(spec, scene, policy, retriever, config, fallback or FrontierGreedy()).run()


# --------------------------------------------------------------------------
# suites


@dataclass
class SuiteSummary:
    sr: float
    spl: float
    results: list[EpisodeResult]

    def to_json(self) -> dict:
        return {"SR": self.sr, "SPL": self.spl, "episodes": [r.row() for r in self.results]}


class SceneCache:
    """Loads each scene file once; safe to share across worker threads after warm-up."""

    def __init__(self, scenes: dict | None = None):
        self._scenes = dict(scenes or {})

    def __call__(self, ref: str) -> Scene:
        if ref not in self._scenes:
            self._scenes[ref] = load_scene(ref)
        return self._scenes[ref]

    __getitem__ = __call__


def run_suite(specs, policy, parallelism: int = 1, *, retriever=None, config: LoopConfig | None = None, scenes=None) -> SuiteSummary:
    """Run independent episodes; results come back in spec order.

    ``policy`` is a :class:`Policy` or a factory ``(scene, spec) -> Policy``.
    """
    specs = list(specs)
    if not specs:
        raise ContractViolation("suite has no episodes")
    cache = scenes if isinstance(scenes, SceneCache) else SceneCache(scenes)
    for s in specs:
        cache(s.scene_ref)
    # warm the goal-distance caches before threads share the scenes
    for s in specs:
        cache(s.scene_ref).goal_distance_field(s.goal_category)

    def one(spec):
        scene = cache(spec.scene_ref)
        pol = policy if isinstance(policy, Policy) else policy(scene, spec)
        return run_episode(spec, pol, retriever, scene=scene, config=config)

    if parallelism <= 1:
        results = [one(s) for s in specs]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(one, specs))
    return SuiteSummary(success_rate(results), compute_spl(results), results)


def load_suite(path, max_steps: int | None = None) -> list[EpisodeSpec]:
    """Episode list from a YAML manifest; scene paths resolve relative to it."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read suite manifest {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"suite manifest {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict) or not isinstance(data.get("episodes"), list):
        raise ConfigError(f"suite manifest {path} needs an 'episodes' list")
    default_steps = int(data.get("max_steps", DEFAULT_MAX_STEPS))
    specs = []
    for i, ep in enumerate(data["episodes"]):
        try:
            scene_path = (path.parent / ep["scene"]).resolve()
            x, y, yaw = (float(v) for v in ep["start"])
            specs.append(EpisodeSpec(
                str(scene_path), AgentPose(x, y, yaw), str(ep["goal"]),
                int(max_steps or ep.get("max_steps", default_steps)), int(ep.get("seed", 0)), str(ep.get("id", f"ep{i:03d}")),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"episode {i} in {path} is malformed: {exc}") from exc
        if not scene_path.exists():
            raise ConfigError(f"episode {i} in {path} references missing scene {scene_path}")
    return specs


def dump_suite(specs, path, relative_to=None) -> None:
    base = Path(relative_to or Path(path).parent).resolve()
    rows = []
    for s in specs:
        row = s.to_json()
        try:
            row["scene"] = str(Path(s.scene_ref).resolve().relative_to(base))
        except ValueError:
            pass
        rows.append(row)
    Path(path).write_text(yaml.safe_dump({"episodes": rows}, sort_keys=False))
