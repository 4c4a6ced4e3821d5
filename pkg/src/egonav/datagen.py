"""Supervised fine-tuning data: marker-description and marker-selection VQA records."""
from __future__ import annotations

import json
import logging
import math
import re
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import ImageDraw

from .cues import Marker, MarkerKind, MarkerTable, draw_markers, project_point, project_to_view, to_png, view_image
from .errors import CategoryMissing, ContractViolation, InsufficientEdge, NoPath, RationaleRejected, WireError
from .harness import EpisodeSpec
from .mapping import FREE, GlobalMap
from .planner import astar, bezier_smooth
from .policy import nearby_labels, parse_descriptions, template_description
from .prompts import PromptKind, marker_description_prompt, rationale_filter_prompt, rationale_generation_prompt
from .scene import AgentPose, Scene, load_scene, nearest_goal_viewpoint
from .sensor import CameraModel, Observation, capture_panorama

log = logging.getLogger(__name__)

MIN_START_GEODESIC = 2.0
EDGE_SPACING = 1.0
MARKERS_PER_IMAGE = (3, 6)  # ground truth included
OVERLAY_COLOR = (255, 0, 0)
OVERLAY_WIDTH = 3
RATIONALE_ATTEMPTS = 3
BANNED_PHRASES = ("red trajectory", "red line", "the image")


@dataclass
class VqaRecord:
    record_id: str
    image_ref: str
    kind: PromptKind
    marker_table: MarkerTable
    response_text: str
    gt_marker_id: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind is PromptKind.MARKER_SELECTION:
            if self.gt_marker_id not in self.marker_table:
                raise ContractViolation("ground-truth marker missing from the table")
            if not self.response_text.rstrip().endswith(f"Action: {self.gt_marker_id}"):
                raise ContractViolation("selection response must end with the ground-truth action")

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "image": self.image_ref,
            "kind": self.kind.value,
            "markers": self.marker_table.to_json(),
            "gt_marker_id": self.gt_marker_id,
            "response": self.response_text,
            "meta": self.meta,
        }


# --------------------------------------------------------------------------
# targets and trajectories


def sample_targets(scene: Scene, categories, per_scene: int, rng: np.random.Generator, *, scene_ref: str = "", max_steps: int = 500) -> list[EpisodeSpec]:
    """Episodes with distinct free-floor starts at least 2 m (geodesic) from the goal."""
    categories = list(categories)
    if not categories:
        raise ContractViolation("need at least one category")
    for cat in categories:
        if cat not in scene.categories:
            raise CategoryMissing(f"scene {scene.name!r} has no {cat!r}")
    specs, used = [], set()
    for n in range(per_scene):
        cat = categories[n % len(categories)]
        dist = scene.goal_distance_field(cat)
        ok = np.argwhere(np.isfinite(dist) & (dist >= MIN_START_GEODESIC))
        ok = [tuple(c) for c in ok.tolist() if tuple(c) not in used]
        if not ok:
            break
        cell = ok[int(rng.integers(len(ok)))]
        used.add(cell)
        x, y = scene.cell_center(cell)
        yaw = float(rng.integers(12)) * math.pi / 6
        seed = int(rng.integers(2**31))
        ref = scene_ref or scene.name
        specs.append(EpisodeSpec(ref, AgentPose(x, y, yaw), cat, max_steps, seed, f"{Path(ref).stem}-{n:03d}"))
    return specs


def gt_trajectory(scene: Scene, start, goal_category: str, samples_per_segment: int = 8) -> np.ndarray:
    """A* to the nearest goal viewpoint, smoothed (raw path if smoothing clips)."""
    start = (float(start[0]), float(start[1]))
    vp = nearest_goal_viewpoint(scene, start, goal_category)
    if vp is None:
        raise NoPath(f"no {goal_category} viewpoint is reachable from {start}")
    free = scene.free_mask
    path = astar(free, scene.cell_of(start), scene.cell_of(vp), scene.resolution)
    if len(path.waypoints) == 1:
        return np.array([path.waypoints[0], path.waypoints[0]])
    return bezier_smooth(path, samples_per_segment, free=free, resolution=scene.resolution)


def trajectory_is_free(scene: Scene, trajectory) -> bool:
    return all(scene.is_free_point(p) for p in np.asarray(trajectory))


@dataclass(frozen=True)
class Endpoint:
    point: tuple[float, float]
    view_index: int
    pixel: tuple[int, int]  # within the single view
    tiled_pixel: tuple[int, int]
    uv: tuple[float, float]


def endpoint_pixel(camera: CameraModel, pose: AgentPose, trajectory, panorama=None, *, views=(0, 1, 2, 3), camera_z=None, floor_height=None, tolerance: float = 0.25) -> Endpoint | None:
    """The last trajectory point visible in any of ``views``."""
    traj = np.asarray(trajectory, dtype=float)
    if len(traj) == 0:
        raise ContractViolation("empty trajectory")
    for p in traj[::-1]:
        proj = project_point(camera, pose, p, panorama, camera_z=camera_z, floor_height=floor_height, views=views, tolerance=tolerance)
        if proj is not None:
            local = (int(round(proj.uv[0])), int(round(proj.uv[1])))
            return Endpoint((float(p[0]), float(p[1])), proj.view_index, local, proj.pixel, proj.uv)
    return None


# --------------------------------------------------------------------------
# distractors


def _view_uv(obs: Observation, point, tolerance: float, marker_height: float = 0.1):
    u, v, w = project_to_view(obs.camera, obs.pose, obs.yaw_offset, obs.camera_z, (point[0], point[1], obs.floor_height + marker_height))
    if not w > 0:
        return None
    iu, iv = int(round(u)), int(round(v))
    if not (0 <= iu < obs.camera.width and 0 <= iv < obs.camera.height):
        return None
    if w > obs.depth[iv, iu] + tolerance:
        return None
    return (u, v)


def sample_floor_edge_candidates(observation: Observation, gmap: GlobalMap, count: int, rng: np.random.Generator, *, exclude=(), spacing: float = EDGE_SPACING, warn: bool = True) -> list[tuple[float, float]]:
    """Visible FREE cells bordering OBSTACLE or UNKNOWN, at least ``spacing`` apart.

    Points within ``spacing`` of anything in ``exclude`` are skipped. When
    fewer than ``count`` qualify an :class:`InsufficientEdge` warning is issued
    and the shorter list returned, unless ``warn`` is false.
    """
    if count < 1:
        raise ContractViolation("count must be at least 1")
    cells = gmap.cells
    free = cells == FREE
    pad = np.pad(free, 1, constant_values=False)
    known_free_nbrs = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    edge = np.argwhere(free & ~known_free_nbrs)
    chosen: list[tuple[float, float]] = []
    taken = [tuple(map(float, e)) for e in exclude]
    for i in rng.permutation(len(edge)):
        p = gmap.cell_center(tuple(edge[i]))
        if any(math.dist(p, q) < spacing for q in taken):
            continue
        if _view_uv(observation, p, gmap.resolution) is None:
            continue
        chosen.append(p)
        taken.append(p)
        if len(chosen) == count:
            break
    if warn and len(chosen) < count:
        warnings.warn(InsufficientEdge(f"only {len(chosen)} of {count} floor-edge points available"), stacklevel=2)
    return chosen


# --------------------------------------------------------------------------
# rationales

_OBJECTS = re.compile(r"OBJECTS_RED_LINE\s*:\s*(.*?)\s*(?=LOCATION_PREDICTION_AND_REASONING\s*:|\Z)", re.DOTALL)
_REASONING = re.compile(r"LOCATION_PREDICTION_AND_REASONING\s*:\s*(.*)", re.DOTALL)


def parse_rationale(text: str) -> tuple[str, str] | None:
    """``(object list, reasoning)`` from a phase-one reply, or None."""
    if text.strip().strip('"').lower() == "none":
        return None
    objs, why = _OBJECTS.search(text), _REASONING.search(text)
    if not objs or not why:
        return None
    objects, reasoning = " ".join(objs.group(1).split()), " ".join(why.group(1).split())
    if not objects or not reasoning or objects.lower() == "none":
        return None
    return objects, reasoning


def filter_verdict(text: str) -> bool:
    if "BAD REASONINGS" in text or re.search(r"\bNONE\b", text):
        return False
    return "GOOD REASONINGS" in text


def clean_rationale(text: str) -> bool:
    low = text.lower()
    return not any(b in low for b in BANNED_PHRASES)


def template_rationale(goal: str, labels: list[str]) -> str:
    """Offline stand-in for the two-phase rationale; flagged synthetic by callers."""
    if labels:
        seen = ", ".join(f"a {lab}" for lab in labels[:3])
        return (
            f"Objects along the route: {seen}. Following the route past them leads toward the unseen part of this area, "
            f"which is where a {goal} is most likely located."
        )
    return f"The route leads through open floor toward the unseen part of this area, which is where a {goal} is most likely located."


def overlay_trajectory(image, obs: Observation, trajectory):
    """Copy of ``image`` with the trajectory drawn as a red polyline."""
    out = image.copy()
    draw = ImageDraw.Draw(out)
    pts = []
    for p in np.asarray(trajectory, dtype=float):
        u, v, w = project_to_view(obs.camera, obs.pose, obs.yaw_offset, obs.camera_z, (p[0], p[1], obs.floor_height))
        if w > 0:
            pts.append((u, v))
        elif len(pts) > 1:
            break
    if len(pts) > 1:
        draw.line(pts, fill=OVERLAY_COLOR, width=OVERLAY_WIDTH)
    return out


def generate_rationale(client, goal: str, overlay_png: bytes, attempts: int = RATIONALE_ATTEMPTS) -> str:
    """Two-phase rationale with validation; raises RationaleRejected when exhausted."""
    reasons = []
    for _ in range(attempts):
        try:
            reply = client.complete(rationale_generation_prompt(goal), images=[overlay_png])
        except WireError as exc:
            reasons.append(f"wire: {exc}")
            continue
        parsed = parse_rationale(reply)
        if parsed is None:
            reasons.append("no rationale")
            continue
        objects, reasoning = parsed
        if not clean_rationale(reasoning):
            reasons.append("mentions the overlay")
            continue
        try:
            verdict = client.complete(rationale_filter_prompt(goal, objects, reasoning), images=[overlay_png])
        except WireError as exc:
            reasons.append(f"wire: {exc}")
            continue
        if filter_verdict(verdict):
            return reasoning
        reasons.append("filter rejected")
    raise RationaleRejected("; ".join(reasons))


# --------------------------------------------------------------------------
# records


@dataclass
class DatagenStats:
    episodes: int = 0
    emitted: int = 0
    skipped: int = 0
    rejected: int = 0

    def to_json(self) -> dict:
        return {"episodes": self.episodes, "emitted": self.emitted, "skipped": self.skipped, "rejected": self.rejected}


def _describe(client, png: bytes, obs: Observation, table: MarkerTable) -> list[tuple[int, str]]:
    got = {}
    if client is not None:
        try:
            got = {i: d for i, d in parse_descriptions(client.complete(marker_description_prompt(), images=[png])).items() if i in table}
        except WireError as exc:
            log.warning("description call failed, using the fallback describer: %s", exc)
    for i in table.ids():
        if i not in got:
            got[i] = template_description(nearby_labels([obs], table.entries[i].global_position))
    return sorted(got.items())


def emit_records(scene: Scene, spec: EpisodeSpec, llm_client=None, *, camera: CameraModel | None = None, image_dir=None, image_prefix: str = "images", stats: DatagenStats | None = None) -> list[VqaRecord]:
    """Description and selection records for one episode.

    Randomness comes from ``spec.seed`` only. Without ``llm_client`` the
    rationale is a template and the record is flagged synthetic.
    """
    camera = camera or CameraModel.default()
    rng = np.random.default_rng(spec.seed)
    traj = gt_trajectory(scene, spec.start.position, spec.goal_category)
    pano = capture_panorama(scene, spec.start, camera)
    end = endpoint_pixel(camera, spec.start, traj, pano, tolerance=scene.resolution)
    if end is None:
        raise ContractViolation("no trajectory point is visible from the start")
    obs = pano.views[end.view_index]
    gmap = GlobalMap.for_scene(scene).integrate(obs)
    n = int(rng.integers(MARKERS_PER_IMAGE[0], MARKERS_PER_IMAGE[1] + 1)) - 1
    distractors = sample_floor_edge_candidates(obs, gmap, n, rng, exclude=[end.point], warn=False)
    if not distractors:
        raise ContractViolation("no distractor floor-edge point is visible")
    points = [(end.point, end.uv)] + [(p, _view_uv(obs, p, scene.resolution)) for p in distractors]
    ids = rng.permutation(len(points))
    table = MarkerTable()
    for slot in np.argsort(ids):
        (p, uv), mid = points[slot], int(ids[slot])
        table.entries[mid] = Marker(mid, (int(round(uv[0])), int(round(uv[1]))), end.view_index, p, MarkerKind.CANDIDATE)
    gt_id = int(ids[0])

    image = view_image(obs)
    base = image.copy()
    draw_markers(image, table)
    png = to_png(image)
    image_ref = f"{image_prefix}/{spec.episode_id}.png"
    if image_dir is not None:
        Path(image_dir).mkdir(parents=True, exist_ok=True)
        (Path(image_dir) / f"{spec.episode_id}.png").write_bytes(png)

    meta = {
        "scene": Path(spec.scene_ref).name,
        "goal": spec.goal_category,
        "start": [spec.start.x, spec.start.y, spec.start.yaw],
        "view_index": end.view_index,
        "gt_pixel": list(end.pixel),
        "endpoint": list(end.point),
        "trajectory": [[float(x), float(y)] for x, y in traj],
        "seed": spec.seed,
    }
    records = []
    blocks = "\n\n".join(f"Marker Number: {i}\nDescription: {d}" for i, d in _describe(llm_client, png, obs, table))
    records.append(VqaRecord(f"{spec.episode_id}-desc", image_ref, PromptKind.MARKER_DESCRIPTION, table, blocks, None, dict(meta, synthetic=llm_client is None)))

    if llm_client is None:
        labels = []
        for p in traj:
            for lab in nearby_labels([obs], p, radius=1.0):
                if lab not in labels:
                    labels.append(lab)
        rationale = template_rationale(spec.goal_category, labels)
    else:
        overlay = overlay_trajectory(base, obs, traj)
        try:
            rationale = generate_rationale(llm_client, spec.goal_category, to_png(overlay))
        except RationaleRejected as exc:
            log.info("selection record for %s rejected: %s", spec.episode_id, exc)
            if stats is not None:
                stats.rejected += 1
            rationale = None
    if rationale is not None:
        text = f"Think: {rationale}\nAction: {gt_id}"
        records.append(VqaRecord(f"{spec.episode_id}-sel", image_ref, PromptKind.MARKER_SELECTION, table, text, gt_id, dict(meta, synthetic=llm_client is None)))
    if stats is not None:
        stats.emitted += len(records)
    return records


class BoundedClient:
    """Caps the number of in-flight completion requests across threads."""

    def __init__(self, client, max_concurrent: int = 1):
        if max_concurrent < 1:
            raise ContractViolation("max_concurrent must be at least 1")
        self.client = client
        self._slots = threading.BoundedSemaphore(max_concurrent)

    def complete(self, prompt: str, images=()) -> str:
        with self._slots:
            return self.client.complete(prompt, images=images)


def run_datagen(scene_paths, out_dir, *, per_scene: int = 4, seed: int = 0, categories=None, client=None, camera: CameraModel | None = None, parallelism: int = 1, max_concurrent_requests: int = 1) -> DatagenStats:
    """Sample episodes over scenes and write ``records.jsonl``, images and a manifest.

    Episodes are generated independently; the output order follows the
    sampling order whatever ``parallelism`` is.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image_dir = out / "images"
    if client is not None:
        client = BoundedClient(client, max_concurrent_requests)
    jobs, names = [], []
    for si, path in enumerate(scene_paths):
        scene = load_scene(path)
        names.append(Path(path).name)
        cats = sorted(categories) if categories else sorted(scene.categories)
        rng = np.random.default_rng([seed, si])
        jobs.extend((scene, spec) for spec in sample_targets(scene, cats, per_scene, rng, scene_ref=str(path)))

    def one(job):
        scene, spec = job
        st = DatagenStats(episodes=1)
        try:
            recs = emit_records(scene, spec, client, camera=camera, image_dir=image_dir, stats=st)
        except (NoPath, ContractViolation) as exc:
            log.info("skipping %s: %s", spec.episode_id, exc)
            st.skipped += 1
            recs = []
        return st, recs

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        outcomes = list(pool.map(one, jobs))
    stats = DatagenStats()
    lines = []
    for st, recs in outcomes:
        stats.episodes += st.episodes
        stats.emitted += st.emitted
        stats.skipped += st.skipped
        stats.rejected += st.rejected
        lines.extend(json.dumps(r.to_json(), separators=(",", ":")) for r in recs)
    (out / "records.jsonl").write_text("".join(line + "\n" for line in lines))
    manifest = {"seed": seed, "per_scene": per_scene, "offline": client is None, "scenes": names, "counts": stats.to_json()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    if stats.emitted == 0:
        log.warning("no records were emitted")
    return stats
