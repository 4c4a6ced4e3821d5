# %% [markdown]
# One episode, step by step: load a bundled scene, look around once,
# annotate the panorama with candidate markers, then let two policies run.
# Images land in ./walkthrough_out.

# %%
from pathlib import Path

from egonav import suite_manifest
from egonav.cues import annotate, generate_candidates
from egonav.harness import load_suite, run_episode
from egonav.mapping import GlobalMap, integrate_observation
from egonav.policy import FrontierGreedy, OracleGeodesic
from egonav.scene import load_scene
from egonav.sensor import CameraModel, capture_panorama

out = Path("walkthrough_out")
out.mkdir(exist_ok=True)

spec = load_suite(suite_manifest())[0]
scene = load_scene(spec.scene_ref)
print(spec.episode_id, "goal:", spec.goal_category, "start:", spec.start)

# %% the first look: four views tiled into one panorama
camera = CameraModel.default()
pano = capture_panorama(scene, spec.start, camera)
gmap = GlobalMap.for_scene(scene)
for view in pano.views:
    integrate_observation(gmap, view)
print("known cells after one panorama:", int((gmap.cells != 0).sum()))

# %% candidates are frontier clusters first, then grid samples
candidates = generate_candidates(gmap)
annotated = annotate(pano, candidates)
annotated.image.save(out / "panorama.png")
print(len(annotated.table), "markers drawn, ids", annotated.table.candidate_ids)

# %% run the same episode with the geodesic oracle and the greedy explorer
for policy in (OracleGeodesic(scene), FrontierGreedy()):
    r = run_episode(spec, policy, scene=scene)
    print(f"{policy.name:>16}: success={r.success} steps={r.steps} spl={r.spl:.3f}")
(out / "trace.jsonl").write_text(r.trace_text())
