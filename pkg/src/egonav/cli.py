"""Command-line entry points: run, sweep, datagen, render-scene, stub-serve.

Every flag has a config-file key of the same name (dashes become
underscores); flags given on the command line override the file. The
effective configuration is written to ``config.yaml`` in the output
directory. Endpoint tokens are read from the environment only.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import data_path, suite_manifest
from .datagen import run_datagen, sample_targets
from .errors import ConfigError, EgoNavError, ScriptError
from .harness import DEFAULT_MAX_STEPS, LoopConfig, SceneCache, filter_hard, load_suite, run_suite
from .mapping import GlobalMap
from .memory import LexicalRetriever, LLMRetriever
from .policy import make_policy
from .scene import AgentPose, load_scene
from .sensor import CameraModel, capture_panorama
from .topdown import belief_image, draw_path, ground_truth_image, side_by_side
from .wire import ENDPOINT_ENV, Script, ScriptedClient, StubServer, WireClient

log = logging.getLogger("egonav")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

RUN_POLICIES = ("oracle", "frontier-greedy", "frontier-greedy-nomem", "pivot", "remote-vlm")
SWEEP_STEPS = (200, 300, 400, 500, 600)
SECRET_KEYS = {"token", "api_token", "api_key"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file whose keys mirror the flags")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true", default=None)


def _camera_flags(p):
    p.add_argument("--camera-width", type=int)
    p.add_argument("--camera-height", type=int)
    p.add_argument("--max-range", type=float)


def _episode_flags(p):
    p.add_argument("--suite", help="suite manifest (default: the bundled 10-scene suite)")
    p.add_argument("--scenes", nargs="+", help="scene files to sample episodes from instead of a suite")
    p.add_argument("--goal", help="goal category for --scenes (default: every category in turn)")
    p.add_argument("--episodes-per-scene", type=int)
    p.add_argument("--policy", choices=RUN_POLICIES)
    p.add_argument("--endpoint", help=f"completion endpoint URL (default ${ENDPOINT_ENV})")
    p.add_argument("--model")
    p.add_argument("--script", help="answer remote-vlm calls in process from a stub script")
    p.add_argument("--retriever", choices=("lexical", "llm"))
    p.add_argument("--max-steps", type=int)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--hard", type=float, help="keep this fraction of hardest episodes (0, 1]")
    p.add_argument("--no-frontier-map", dest="frontier_map", action="store_false", default=None)
    p.add_argument("--no-landmark-memory", dest="landmark_memory", action="store_false", default=None)
    p.add_argument("--no-visitation-memory", dest="visitation_memory", action="store_false", default=None)
    p.add_argument("--overlays", action="store_true", default=None, help="write a top-down image per episode")
    _camera_flags(p)


DEFAULTS = {
    "run": {
        "out": "runs/run", "seed": 0, "verbose": False, "suite": None, "scenes": None, "goal": None,
        "episodes_per_scene": 1, "policy": "oracle", "endpoint": None, "model": "default", "script": None,
        "retriever": "lexical", "max_steps": DEFAULT_MAX_STEPS, "parallelism": 1, "hard": None,
        "frontier_map": True, "landmark_memory": True, "visitation_memory": True, "overlays": False,
        "camera_width": 160, "camera_height": 120, "max_range": 10.0,
    },
    "datagen": {
        "out": "runs/datagen", "seed": 0, "verbose": False, "scenes": None, "categories": None, "per_scene": 4,
        "offline": True, "endpoint": None, "model": "default", "script": None, "parallelism": 1,
        "max_concurrent_requests": 1, "camera_width": 160, "camera_height": 120, "max_range": 10.0,
    },
    "render-scene": {"out": "runs/render", "seed": 0, "verbose": False, "scene": None, "goal": None, "pose": None, "scale": 8,
                     "camera_width": 160, "camera_height": 120, "max_range": 10.0},
    "stub-serve": {"out": None, "seed": 0, "verbose": False, "script": None, "host": "127.0.0.1", "port": 8765},
}
DEFAULTS["sweep"] = dict(DEFAULTS["run"], out="runs/sweep", policy="frontier-greedy", steps=list(SWEEP_STEPS))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="egonav", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run a suite of episodes and write SR/SPL plus traces")
    _common(p)
    _episode_flags(p)

    p = sub.add_parser("sweep", help="rerun a suite over several step budgets")
    _common(p)
    _episode_flags(p)
    p.add_argument("--steps", type=int, nargs="+", help=f"step budgets (default {' '.join(map(str, SWEEP_STEPS))})")

    p = sub.add_parser("datagen", help="generate marker description and selection records")
    _common(p)
    p.add_argument("--scenes", nargs="+", help="scene files (default: the bundled suite scenes)")
    p.add_argument("--categories", nargs="+")
    p.add_argument("--per-scene", type=int)
    p.add_argument("--online", dest="offline", action="store_false", default=None, help="call the endpoint for rationales")
    p.add_argument("--endpoint")
    p.add_argument("--model")
    p.add_argument("--script", help="answer completion calls in process from a stub script")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--max-concurrent-requests", type=int)
    _camera_flags(p)

    p = sub.add_parser("render-scene", help="top-down ground truth beside the belief map from one panorama")
    _common(p)
    p.add_argument("scene", nargs="?")
    p.add_argument("--goal")
    p.add_argument("--pose", help="x,y,yaw of the panorama (default: a free cell near the centre)")
    p.add_argument("--scale", type=int)
    _camera_flags(p)

    p = sub.add_parser("stub-serve", help="serve scripted replies over the completion protocol")
    _common(p)
    p.add_argument("script", nargs="?")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    return parser


def effective_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS[args.command])
    if args.config:
        try:
            loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {args.config} must be a mapping")
        loaded = {str(k).replace("-", "_"): v for k, v in loaded.items()}
        secrets = SECRET_KEYS & set(loaded)
        if secrets:
            raise ConfigError(f"config files may not hold secrets ({', '.join(sorted(secrets))}); use environment variables")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {', '.join(sorted(unknown))}")
        cfg.update(loaded)
    for key, value in vars(args).items():
        if key in cfg and value is not None:
            cfg[key] = value
    return cfg


def _check_range(cfg):
    hard = cfg.get("hard")
    if hard is not None and not 0 < float(hard) <= 1:
        raise ConfigError(f"--hard must lie in (0, 1], got {hard}")
    for key in ("max_steps", "parallelism", "episodes_per_scene", "per_scene", "max_concurrent_requests"):
        if key in cfg and cfg[key] is not None and int(cfg[key]) < 1:
            raise ConfigError(f"{key} must be at least 1")


def _camera(cfg) -> CameraModel:
    try:
        return CameraModel.default(int(cfg["camera_width"]), int(cfg["camera_height"]), float(cfg["max_range"]))
    except (ValueError, EgoNavError) as exc:
        raise ConfigError(f"bad camera settings: {exc}") from exc


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} {p} does not exist")
    return p


def _client(cfg):
    if cfg.get("script"):
        return ScriptedClient(Script.load(_existing(cfg["script"], "stub script")))
    endpoint = cfg.get("endpoint") or os.environ.get(ENDPOINT_ENV)
    if not endpoint:
        raise ConfigError(f"an endpoint is required: pass --endpoint, set {ENDPOINT_ENV}, or use --script")
    return WireClient(endpoint, cfg.get("model") or "default", seed=cfg.get("seed"))


def _prepare_out(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    return out


def _write_manifest(out: Path, command: str, outputs: list[str], extra: dict | None = None) -> None:
    body = {"command": command, "outputs": sorted(outputs)}
    body.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(body, indent=2) + "\n")


def _specs(cfg, cache: SceneCache):
    if cfg.get("scenes"):
        specs = []
        rng = np.random.default_rng(int(cfg["seed"]))
        for path in cfg["scenes"]:
            scene = cache(str(_existing(path, "scene")))
            cats = [cfg["goal"]] if cfg.get("goal") else scene.categories
            try:
                specs.extend(sample_targets(scene, cats, int(cfg["episodes_per_scene"]), rng, scene_ref=str(path), max_steps=int(cfg["max_steps"])))
            except EgoNavError as exc:
                raise ConfigError(f"cannot sample episodes from {path}: {exc}") from exc
    else:
        manifest = _existing(cfg.get("suite") or suite_manifest(), "suite manifest")
        specs = load_suite(manifest, max_steps=int(cfg["max_steps"]))
    if not specs:
        raise ConfigError("no episodes to run")
    if cfg.get("hard") is not None:
        specs = filter_hard(specs, cache, float(cfg["hard"]))
    return specs


def _runner(cfg):
    kind = cfg["policy"]
    config = LoopConfig(
        camera=_camera(cfg),
        use_frontier_map=bool(cfg["frontier_map"]),
        use_landmark_memory=bool(cfg["landmark_memory"]),
        use_visitation_memory=bool(cfg["visitation_memory"]),
    )
    if kind == "pivot":
        config = LoopConfig(camera=config.camera, use_frontier_map=False, use_landmark_memory=False, use_visitation_memory=False)
    client = _client(cfg) if kind == "remote-vlm" or cfg["retriever"] == "llm" else None
    retriever = LLMRetriever(client) if cfg["retriever"] == "llm" else LexicalRetriever()
    if kind == "oracle":
        factory = lambda scene, spec: make_policy("oracle", scene)  # noqa: E731
    else:
        factory = make_policy(kind, client=client)
    return factory, retriever, config


def _episode_overlay(cache, spec, result, path: Path):
    scene = cache(spec.scene_ref)
    pts = [spec.start.position] + [tuple(e["pose"][:2]) for e in result.events if e["event"] == "action"]
    img = draw_path(ground_truth_image(scene, goal_category=spec.goal_category), pts, scene.resolution)
    img.save(path)


def _run_once(cfg, out: Path, cache: SceneCache, specs) -> dict:
    factory, retriever, config = _runner(cfg)
    summary = run_suite(specs, factory, int(cfg["parallelism"]), retriever=retriever, config=config, scenes=cache)
    outputs = ["summary.json"]
    (out / "summary.json").write_text(json.dumps(summary.to_json(), indent=2) + "\n")
    (out / "traces").mkdir(exist_ok=True)
    for spec, res in zip(specs, summary.results):
        (out / "traces" / f"{res.episode_id}.jsonl").write_text(res.trace_text())
        outputs.append(f"traces/{res.episode_id}.jsonl")
        if cfg["overlays"]:
            (out / "overlays").mkdir(exist_ok=True)
            _episode_overlay(cache, spec, res, out / "overlays" / f"{res.episode_id}.png")
            outputs.append(f"overlays/{res.episode_id}.png")
    return {"SR": summary.sr, "SPL": summary.spl, "episodes": len(specs), "outputs": outputs}


def cmd_run(cfg) -> int:
    _check_range(cfg)
    cache = SceneCache()
    specs = _specs(cfg, cache)
    out = _prepare_out(cfg)
    info = _run_once(cfg, out, cache, specs)
    _write_manifest(out, "run", info.pop("outputs") + ["config.yaml"], info)
    print(f"episodes={info['episodes']} SR={info['SR']:.4f} SPL={info['SPL']:.4f} -> {out}")
    return EXIT_OK


def cmd_sweep(cfg) -> int:
    _check_range(cfg)
    steps = [int(s) for s in cfg["steps"]]
    if not steps or min(steps) < 1:
        raise ConfigError("sweep step budgets must be positive")
    cache = SceneCache()
    out = _prepare_out(cfg)
    rows, outputs = [], ["config.yaml", "sweep.json"]
    for n in steps:
        sub = dict(cfg, max_steps=n)
        specs = _specs(sub, cache)
        level = out / f"steps_{n}"
        level.mkdir(exist_ok=True)
        info = _run_once(sub, level, cache, specs)
        outputs += [f"steps_{n}/{o}" for o in info.pop("outputs")]
        rows.append({"max_steps": n, "SR": info["SR"], "SPL": info["SPL"]})
        print(f"max_steps={n:4d} SR={info['SR']:.4f} SPL={info['SPL']:.4f}")
    (out / "sweep.json").write_text(json.dumps(rows, indent=2) + "\n")
    _write_manifest(out, "sweep", outputs, {"policy": cfg["policy"]})
    return EXIT_OK


def cmd_datagen(cfg) -> int:
    _check_range(cfg)
    scenes = cfg.get("scenes") or sorted(str(p) for p in data_path("suite").glob("*.scene"))
    scenes = [str(_existing(s, "scene")) for s in scenes]
    client = None if cfg["offline"] else _client(cfg)
    out = _prepare_out(cfg)
    stats = run_datagen(
        scenes, out, per_scene=int(cfg["per_scene"]), seed=int(cfg["seed"]), categories=cfg.get("categories"),
        client=client, camera=_camera(cfg), parallelism=int(cfg["parallelism"]),
        max_concurrent_requests=int(cfg["max_concurrent_requests"]),
    )
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["config"] = "config.yaml"
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"episodes={stats.episodes} emitted={stats.emitted} skipped={stats.skipped} rejected={stats.rejected} -> {out}")
    return EXIT_OK


def _parse_pose(text: str) -> AgentPose:
    try:
        x, y, yaw = (float(v) for v in str(text).split(","))
    except ValueError:
        raise ConfigError(f"--pose expects x,y,yaw, got {text!r}") from None
    return AgentPose(x, y, yaw)


def _central_pose(scene) -> AgentPose:
    free = np.argwhere(scene.free_mask)
    mid = np.array(scene.dims[:2]) / 2.0
    cell = free[int(np.argmin(np.hypot(*(free - mid).T)))]
    x, y = scene.cell_center(tuple(cell))
    return AgentPose(x, y, 0.0)


def cmd_render_scene(cfg) -> int:
    if not cfg.get("scene"):
        raise ConfigError("render-scene needs a scene path")
    scene = load_scene(_existing(cfg["scene"], "scene"))
    if cfg.get("goal") and cfg["goal"] not in scene.categories:
        raise ConfigError(f"scene has no {cfg['goal']!r}; categories: {', '.join(scene.categories)}")
    pose = _parse_pose(cfg["pose"]) if cfg.get("pose") else _central_pose(scene)
    if not scene.is_free_point(pose.position):
        raise ConfigError(f"pose {pose.position} is not on free floor")
    scale = int(cfg["scale"])
    pano = capture_panorama(scene, pose, _camera(cfg))
    gmap = GlobalMap.for_scene(scene)
    for view in pano.views:
        gmap.integrate(view)
    left = draw_path(ground_truth_image(scene, scale, cfg.get("goal")), [pose.position], scene.resolution, scale)
    right = draw_path(belief_image(gmap, scale), [pose.position], scene.resolution, scale)
    out = _prepare_out(cfg)
    name = f"{Path(cfg['scene']).stem}.png"
    side_by_side(left, right).save(out / name)
    _write_manifest(out, "render-scene", [name, "config.yaml"], {"pose": [pose.x, pose.y, pose.yaw]})
    print(out / name)
    return EXIT_OK


def cmd_stub_serve(cfg) -> int:
    if not cfg.get("script"):
        raise ConfigError("stub-serve needs a script path")
    script = Script.load(_existing(cfg["script"], "stub script"))
    server = StubServer(script, cfg["host"], int(cfg["port"]), token=os.environ.get("EGONAV_API_TOKEN"))
    print(f"serving {server.url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.httpd.server_close()
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "datagen": cmd_datagen, "render-scene": cmd_render_scene, "stub-serve": cmd_stub_serve}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = effective_config(args)
        logging.basicConfig(level=logging.INFO if cfg.get("verbose") else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](cfg)
    except (ConfigError, ScriptError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EgoNavError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other fault is a runtime failure
        log.debug("unexpected failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
