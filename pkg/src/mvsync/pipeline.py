"""End-to-end pipeline: config file in, edited scene and metrics out.

Stages run in a fixed order (refine_depth only when enabled):

    load -> [refine_depth] -> build_graphs -> align_initial_noise ->
    synchronized_denoise -> select_anchors -> propagate -> masked_refine ->
    bake -> consistency_report

A stage failure is re-raised as StageError with the stage tag, partial
artifacts are kept and a FAILED marker is written next to them. The
run_manifest.json holds the config snapshot, per-stage timings, outputs
and seed; the content-hash manifest (manifest.tsv) is deterministic for a
fixed config and seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baker
from .correspondence import build_graphs, extract_valid_pair, graph_stats_text
from .depth_refine import observations_for_view, refine_depth
from .errors import ConfigError, StageError
from .noise_sync import DenoiseSchedule, GuidanceConfig, align_initial_noise, sigma_of
from .noise_sync import run_synchronized_denoise
from .predictors import make_builtin_predictor
from .propagation import (
    EditedView,
    masked_refine,
    propagate,
    read_scores,
    refinement_mask,
    select_anchors,
)
from .scene import (
    PipelineConfig,
    SceneBundle,
    load_colmap_scene,
    parse_config_text,
    save_artifacts,
)

STAGES = (
    "load",
    "refine_depth",
    "build_graphs",
    "align_initial_noise",
    "synchronized_denoise",
    "select_anchors",
    "propagate",
    "masked_refine",
    "bake",
    "consistency_report",
)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_layers(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace(",", " ").split())


# key -> parser; None marks required string keys handled separately
ACCEPTED_KEYS: dict[str, object] = {
    "scene.root": str,
    "scene.width": int,
    "scene.height": int,
    "scene.scores": str,
    "edit.prompt": str,
    "thresholds.tau_d": float,
    "thresholds.tau_p": float,
    "thresholds.mu": float,
    "guidance.g_I": float,
    "guidance.g_T": float,
    "mask.decay_radius": float,
    "anchors.group_size": int,
    "anchors.overlap_threshold": float,
    "predictor.endpoint": str,
    "predictor.builtin": str,
    "latent.downscale": int,
    "latent.channels": int,
    "latent.aligned_layers": _parse_layers,
    "schedule.steps": int,
    "alignment.noise": _parse_bool,
    "alignment.features": _parse_bool,
    "propagation.enabled": _parse_bool,
    "depth_refine.enabled": _parse_bool,
    "depth_refine.steps": int,
    "depth_refine.step_size": float,
    "depth_refine.lambda": float,
    "output.dir": str,
    "seed": int,
    "threads": int,
}


@dataclass
class RunConfig:
    scene_root: Path
    out_dir: Path
    raw: dict[str, str]
    pipeline: PipelineConfig
    target_size: tuple[int, int] | None = None
    scores_path: Path | None = None
    prompt: str = ""
    predictor_endpoint: str | None = None
    predictor_builtin: str = "synthetic"
    schedule_steps: int = 10
    align_noise: bool = True
    align_features: bool = True
    propagation_enabled: bool = True
    refine_enabled: bool = False
    refine_steps: int = 100
    refine_step_size: float = 1.0
    refine_lambda: float = 0.1
    seed: int = 0
    threads: int = 1


@dataclass
class RunManifest:
    config: dict[str, str]
    stage_timings_ms: dict[str, float]
    output_paths: list[str]
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config,
                "stage_timings_ms": self.stage_timings_ms,
                "output_paths": self.output_paths,
                "seed": self.seed,
            },
            indent=2,
            sort_keys=False,
        )


def load_run_config(path: str | Path) -> RunConfig:
    """Parse and validate a flat run-config file.

    Raises:
        ConfigError: unknown key, bad value, or missing scene.root.
    """
    raw = parse_config_text(path)
    values: dict[str, object] = {}
    for key, text in raw.items():
        parser = ACCEPTED_KEYS.get(key)
        if parser is None:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[key] = parser(text)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad value for {key!r}: {e}") from e

    if "scene.root" not in values:
        raise ConfigError("config must set scene.root")
    if "predictor.endpoint" in values and "predictor.builtin" in values:
        raise ConfigError("set either predictor.endpoint or predictor.builtin, not both")
    builtin = values.get("predictor.builtin", "synthetic")
    if builtin not in ("zero", "synthetic"):
        raise ConfigError(f"unknown builtin predictor {builtin!r}; expected 'zero' or 'synthetic'")
    if values.get("threads", 1) < 1:
        raise ConfigError("threads must be >= 1")

    scene_root = Path(values["scene.root"])
    out_dir = Path(values.get("output.dir", scene_root / "run"))

    target_size = None
    if ("scene.width" in values) != ("scene.height" in values):
        raise ConfigError("scene.width and scene.height must be set together")
    if "scene.width" in values:
        target_size = (values["scene.width"], values["scene.height"])

    pipeline = PipelineConfig(
        tau_d=values.get("thresholds.tau_d"),
        tau_p=values.get("thresholds.tau_p", 2.0),
        mu=values.get("thresholds.mu", 50.0),
        g_image=values.get("guidance.g_I", 1.5),
        g_text=values.get("guidance.g_T", 7.5),
        decay_radius=values.get("mask.decay_radius", 20.0),
        group_size=values.get("anchors.group_size", 10),
        overlap_threshold=values.get("anchors.overlap_threshold", 0.8),
        latent_downscale=values.get("latent.downscale", 8),
        latent_channels=values.get("latent.channels", 4),
        aligned_layers=values.get("latent.aligned_layers", (5, 8)),
    )

    return RunConfig(
        scene_root=scene_root,
        out_dir=out_dir,
        raw=raw,
        pipeline=pipeline,
        target_size=target_size,
        scores_path=Path(values["scene.scores"]) if "scene.scores" in values else None,
        prompt=values.get("edit.prompt", ""),
        predictor_endpoint=values.get("predictor.endpoint"),
        predictor_builtin=values.get("predictor.builtin", "synthetic"),
        schedule_steps=values.get("schedule.steps", 10),
        align_noise=values.get("alignment.noise", True),
        align_features=values.get("alignment.features", True),
        propagation_enabled=values.get("propagation.enabled", True),
        refine_enabled=values.get("depth_refine.enabled", False),
        refine_steps=values.get("depth_refine.steps", 100),
        refine_step_size=values.get("depth_refine.step_size", 1.0),
        refine_lambda=values.get("depth_refine.lambda", 0.1),
        seed=values.get("seed", 0),
        threads=values.get("threads", 1),
    )


def _make_predictor(cfg: RunConfig, t_max: int):
    if cfg.predictor_endpoint is not None:
        from .protocol import WirePredictor

        return WirePredictor(cfg.predictor_endpoint, latent_channels=cfg.pipeline.latent_channels)
    return make_builtin_predictor(cfg.predictor_builtin, downscale=cfg.pipeline.latent_downscale, t_max=t_max)


class _StageClock:
    def __init__(self):
        self.timings_ms: dict[str, float] = {}

    def run(self, stage: str, fn):
        start = time.perf_counter()
        try:
            result = fn()
        except Exception as e:
            raise StageError(stage, e) from e
        self.timings_ms[stage] = (time.perf_counter() - start) * 1000.0
        return result


def run(config_path: str | Path) -> RunManifest:
    """Execute the full pipeline described by a config file.

    Raises:
        StageError: a stage failed; partial artifacts and a FAILED marker
            are left in the output directory.
    """
    cfg = load_run_config(config_path)
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    clock = _StageClock()

    try:
        manifest = _run_stages(cfg, clock, out_dir)
    except StageError as e:
        (out_dir / "FAILED").write_text(f"{e.stage}: {e.cause!r}\n")
        partial = RunManifest(
            config=dict(cfg.raw),
            stage_timings_ms=clock.timings_ms,
            output_paths=[],
            seed=cfg.seed,
        )
        (out_dir / "run_manifest.json").write_text(partial.to_json())
        raise
    failed = out_dir / "FAILED"
    if failed.exists():
        failed.unlink()
    (out_dir / "run_manifest.json").write_text(manifest.to_json())
    return manifest


def _run_stages(cfg: RunConfig, clock: _StageClock, out_dir: Path) -> RunManifest:
    t_max = 1000

    def load_stage() -> SceneBundle:
        root = cfg.scene_root
        return load_colmap_scene(
            root / "cameras.txt",
            root / "images.txt",
            root / "points3D.txt",
            target_size=cfg.target_size,
            config=cfg.pipeline,
        )

    bundle = clock.run("load", load_stage)

    if cfg.refine_enabled:
        def refine_stage():
            for view in bundle.views:
                if view.depth is None:
                    continue
                obs = observations_for_view(bundle.points3d, view.id)
                if not obs:
                    continue
                view.depth = refine_depth(
                    view.depth,
                    obs,
                    view.camera,
                    smoothness_lambda=cfg.refine_lambda,
                    steps=cfg.refine_steps,
                    step_size=cfg.refine_step_size,
                )

        clock.run("refine_depth", refine_stage)

    graphs = clock.run("build_graphs", lambda: build_graphs(bundle, cfg.pipeline))

    schedule = DenoiseSchedule.uniform(cfg.schedule_steps, t_max=t_max, align=cfg.align_features)
    predictor = _make_predictor(cfg, t_max)
    channels = getattr(predictor, "latent_channels", cfg.pipeline.latent_channels)
    ds = cfg.pipeline.latent_downscale
    w, h = bundle.views[0].size

    def align_stage() -> dict[int, np.ndarray]:
        rng = np.random.default_rng(cfg.seed)
        noises = {
            view.id: rng.standard_normal((channels, h // ds, w // ds)).astype(np.float32)
            for view in bundle.views
        }
        if cfg.align_noise:
            noises = align_initial_noise(noises, graphs, ds)
        sigma0 = sigma_of(schedule.t_first, schedule.t_first)
        return {vid: (sigma0 * n).astype(np.float32) for vid, n in noises.items()}

    latents = clock.run("align_initial_noise", align_stage)

    edited_images = clock.run(
        "synchronized_denoise",
        lambda: run_synchronized_denoise(
            bundle,
            predictor,
            schedule,
            cfg.pipeline,
            graphs,
            prompt=cfg.prompt,
            initial_latents=latents,
            threads=cfg.threads,
        ),
    )

    def anchors_stage():
        if cfg.scores_path is not None:
            table = read_scores(cfg.scores_path)
            scores = [(vid, table.get(vid, 0.0)) for vid in bundle.view_ids()]
        else:
            scores = [(vid, 0.0) for vid in bundle.view_ids()]
        return select_anchors(scores, cfg.pipeline.group_size, cfg.pipeline.overlap_threshold)

    plan = clock.run("select_anchors", anchors_stage)

    edited = {vid: EditedView.fresh(vid, img) for vid, img in edited_images.items()}

    def propagate_stage():
        if not cfg.propagation_enabled:
            return
        for group in plan.groups:
            anchor = edited[group.anchor_id]
            graph = graphs[group.anchor_id]
            for vid in group.member_ids:
                if vid == group.anchor_id:
                    continue
                neighbor_view = bundle.view(vid)
                pair = extract_valid_pair(bundle, graph, group.anchor_id, vid)
                domain = (
                    neighbor_view.fore_mask
                    if neighbor_view.fore_mask is not None
                    else np.ones((h, w), dtype=bool)
                )
                coverage = len(pair) / max(1, int(domain.sum()))
                if coverage >= plan.overlap_threshold:
                    edited[vid] = propagate(anchor, edited[vid], pair)

    clock.run("propagate", propagate_stage)

    def refine_pass():
        if not cfg.propagation_enabled:
            return
        guidance = GuidanceConfig(g_image=cfg.pipeline.g_image, g_text=cfg.pipeline.g_text)
        refine_schedule = DenoiseSchedule.uniform(
            max(1, cfg.schedule_steps // 2), t_max=t_max, align=False
        )
        anchor_ids = {g.anchor_id for g in plan.groups}
        for view in bundle.views:
            if view.id in anchor_ids:
                continue
            fore = view.fore_mask if view.fore_mask is not None else np.ones((h, w), dtype=bool)
            mask = refinement_mask(fore, edited[view.id].replaced_mask)
            edited[view.id] = masked_refine(
                edited[view.id],
                predictor,
                refine_schedule,
                guidance,
                mask,
                downscale=ds,
                prompt=cfg.prompt,
                seed=cfg.seed + view.id,
            )

    clock.run("masked_refine", refine_pass)

    final_images = {vid: ev.image for vid, ev in edited.items()}
    confidence = {vid: graphs[vid].weight_mass for vid in graphs}
    point_set = clock.run("bake", lambda: baker.bake(bundle, final_images, confidence))

    report = clock.run(
        "consistency_report",
        lambda: baker.consistency_report(
            final_images,
            point_set,
            {v.id: v.camera for v in bundle.views},
            {v.id: v.fore_mask for v in bundle.views},
        ),
    )

    report_json = json.dumps(
        {
            "per_view_psnr": {str(k): report.per_view_psnr[k] for k in sorted(report.per_view_psnr)},
            "cross_view_color_variance": report.cross_view_color_variance,
            "coverage": report.coverage,
        },
        indent=2,
    )
    entries = save_artifacts(
        bundle,
        out_dir,
        images=final_images,
        stats_text=graph_stats_text(graphs),
        extra_files={
            "points.ply": baker.ply_text(point_set).encode(),
            "consistency.json": report_json.encode(),
        },
    )

    return RunManifest(
        config=dict(cfg.raw),
        stage_timings_ms=clock.timings_ms,
        output_paths=[rel for rel, _ in entries] + ["manifest.tsv", "run_manifest.json"],
        seed=cfg.seed,
    )
