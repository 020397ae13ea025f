"""End-to-end orchestration: volumes in, narrated video artifact out.

Stage order: load/resample, report analysis, segmentation, registration,
storyboard compilation, then media (narration, frame composition, mux).
Every stage is logged; provider calls go through the cache so a rerun with
an unchanged cache replays byte-identically.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import media, organ3d, report, segmentation, storyboard as sb, volume
from .cache import ArtifactCache, CachingLlmProvider, RunLog, content_key
from .config import PipelineConfig
from .errors import (
    CtNarrateError,
    EmptyMask,
    MissingUpstreamArtifact,
    PipelineFailure,
    ProviderError,
)
from .registration import GridSpec, RigidTransform, apply_transform, \
    register_rigid, transform_mask
from .segmentation import (
    BoundingBox3D,
    FileMaskProvider,
    HttpSegmentationProvider,
    OrganMask,
    PhantomSegmentationProvider,
    bounding_box,
    union_box,
    volume_content_hash,
)

log = logging.getLogger(__name__)

PROMPT_STAGE_VERSION = report.PROMPT_VERSION


@dataclass
class RunResult:
    exit_ok: bool
    storyboard: "sb.Storyboard | None"
    artifact_path: Path | None
    storyboard_path: Path | None
    run_log_path: Path | None


def build_llm_provider(cfg: PipelineConfig):
    p = cfg.providers
    if p.llm == "mock":
        return report.RecordedLlmProvider.from_file(p.llm_mock_fixture)
    return report.HttpLlmProvider(
        base_url=p.llm_base_url, model=p.llm_model, api_key_env=p.llm_api_key_env
    )


def build_seg_provider(cfg: PipelineConfig):
    p = cfg.providers
    if p.seg == "phantom":
        return PhantomSegmentationProvider()
    if p.seg == "files":
        return FileMaskProvider(cfg.paths.mask_dir)
    return HttpSegmentationProvider(
        base_url=p.seg_base_url,
        cache_dir=cfg.paths.cache_dir or None,
    )


def build_tts_provider(cfg: PipelineConfig):
    p = cfg.providers
    offline = media.OfflineNarrationProvider(
        wpm=cfg.narration.wpm,
        sample_rate=cfg.narration.sample_rate,
        fps=cfg.storyboard.fps,
    )
    if p.tts == "offline":
        return offline, None
    remote = media.HttpNarrationProvider(
        base_url=p.tts_base_url, voice=cfg.narration.voice
    )
    fallback = offline if p.tts_allow_fallback else None
    return remote, fallback


@dataclass
class PreparedStudy:
    """Everything the storyboard needs, before any media work."""

    query: volume.CtVolume
    registered_normal: volume.CtVolume
    findings: list
    boxes: list
    normal_boxes: list
    masks: dict  # organ label -> OrganMask on the query grid
    transform: RigidTransform


def _segment_or_none(vol, organ, provider, run_log) -> OrganMask | None:
    started = time.monotonic()
    try:
        mask = segmentation.segment(vol, organ, provider)
        run_log.provider_call("seg", f"{volume_content_hash(vol)[:12]}:{organ}",
                              time.monotonic() - started, cache_hit=False,
                              foreground=mask.foreground_count)
        return mask
    except EmptyMask:
        run_log.emit("warning", message=f"empty mask for organ {organ!r}; "
                                        "finding degrades to narration-only")
        return None


def prepare_study(cfg: PipelineConfig, run_log: RunLog,
                  cache: ArtifactCache) -> PreparedStudy:
    target = tuple(cfg.volume.target_spacing)

    run_log.stage("load", "start")
    query = volume.resample(volume.load_volume(cfg.paths.query_volume), target)
    normal = volume.resample(volume.load_volume(cfg.paths.normal_volume), target)
    report_text = Path(cfg.paths.report_text).read_text(encoding="utf-8")
    run_log.stage("load", "done", query_dims=list(query.dims),
                  normal_dims=list(normal.dims))

    run_log.stage("report", "start")
    llm = CachingLlmProvider(build_llm_provider(cfg), cache, run_log)
    findings = report.analyze_report(report_text, llm)
    run_log.stage("report", "done", findings=len(findings))

    run_log.stage("segment", "start")
    seg_provider = build_seg_provider(cfg)
    organs = []
    for finding in findings:
        for organ in finding.organs:
            if organ not in organs:
                organs.append(organ)
    query_masks = {
        organ: _segment_or_none(query, organ, seg_provider, run_log)
        for organ in organs
    }
    normal_masks = {
        organ: _segment_or_none(normal, organ, seg_provider, run_log)
        for organ in organs
    }
    run_log.stage("segment", "done",
                  found=sum(m is not None for m in query_masks.values()))

    run_log.stage("register", "start")
    reg_key = content_key(volume_content_hash(query), volume_content_hash(normal),
                          cfg.registration.__dict__)
    cached_transform = cache.get_json("register", reg_key)
    if cached_transform is not None:
        transform = RigidTransform.from_dict(cached_transform)
        run_log.stage("register", "done", cache_hit=True)
    else:
        result = register_rigid(query, normal, cfg.registration_config())
        transform = result.transform
        cache.put_json("register", reg_key, transform.as_dict())
        run_log.stage("register", "done", cache_hit=False,
                      final_metric=result.final_metric,
                      converged=result.converged)
    query_grid = GridSpec.from_volume(query)
    registered_normal = apply_transform(normal, transform, query_grid)

    boxes: list[BoundingBox3D | None] = []
    normal_boxes: list[BoundingBox3D | None] = []
    for finding in findings:
        finding_masks = [query_masks.get(o) for o in finding.organs]
        finding_masks = [m for m in finding_masks if m is not None]
        if finding_masks:
            boxes.append(union_box([bounding_box(m) for m in finding_masks]))
        else:
            boxes.append(None)
        nboxes = []
        for organ in finding.organs:
            nmask = normal_masks.get(organ)
            if nmask is None:
                continue
            try:
                moved = transform_mask(
                    nmask, transform, query_grid,
                    source_grid=GridSpec.from_volume(normal),
                )
                nboxes.append(bounding_box(moved))
            except EmptyMask:
                run_log.emit("warning",
                             message=f"normal-scan mask for {organ!r} fell "
                                     "outside the registered grid")
        normal_boxes.append(union_box(nboxes) if nboxes else None)

    return PreparedStudy(
        query=query,
        registered_normal=registered_normal,
        findings=findings,
        boxes=boxes,
        normal_boxes=normal_boxes,
        masks={o: m for o, m in query_masks.items() if m is not None},
        transform=transform,
    )


def compile_storyboard(cfg: PipelineConfig, study: PreparedStudy) -> sb.Storyboard:
    return sb.build_storyboard(
        study.findings, study.boxes, study.normal_boxes, cfg.storyboard_config()
    )


def _display_box(box: BoundingBox3D, dims) -> tuple[int, int, int, int]:
    """Map a 3D voxel box to (x0, y0, x1, y1) in the axial display frame.

    Axial images put the patient's right at image left and anterior at the
    top (see volume module), so both in-plane axes flip.
    """
    nx, ny, _ = dims
    x0 = nx - 1 - box.max[0]
    x1 = nx - 1 - box.min[0]
    y0 = ny - 1 - box.max[1]
    y1 = ny - 1 - box.min[1]
    return x0, y0, x1, y1


def _turntable_cycle(cfg: PipelineConfig, study: PreparedStudy,
                     organ: str | None) -> list:
    if organ is None:
        return []
    mask = study.masks.get(organ)
    if mask is None:
        return []
    size = int(cfg.media.organ_render_size)
    n_frames = max(1, int(round(cfg.storyboard.fps * cfg.media.turntable_seconds)))
    mesh = organ3d.marching_cubes(mask, spacing=study.query.spacing)
    return organ3d.turntable(mesh, n_frames, size=(size, size))


def render_video(cfg: PipelineConfig, study: PreparedStudy,
                 board: sb.Storyboard, run_log: RunLog) -> Path:
    """Narrate, compose, and mux every segment of the storyboard."""
    run_log.stage("media", "start")
    tts, tts_fallback = build_tts_provider(cfg)
    layout = media.default_layout(tuple(board.resolution))
    window_table = cfg.window_table()
    sample_rate = cfg.narration.sample_rate
    fps = board.fps

    # narration calls may run concurrently (provider contract requires
    # thread safety); results are consumed strictly in segment order
    started = time.monotonic()
    workers = max(1, int(cfg.media.narration_concurrency))
    texts = [segment.narration_text for segment in board.segments]
    if workers == 1 or len(texts) <= 1:
        clips = [media.narrate(t, tts, fallback=tts_fallback) for t in texts]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            clips = list(pool.map(
                lambda t: media.narrate(t, tts, fallback=tts_fallback), texts
            ))
    for segment, clip in zip(board.segments, clips):
        run_log.provider_call("tts", segment.finding_id + f":p{segment.phase}",
                              (time.monotonic() - started) / len(texts),
                              cache_hit=False, seconds=clip.duration)

    turntables: dict[str, list] = {}
    segment_frames: list[int] = []
    audio_parts = []
    for segment, clip in zip(board.segments, clips):
        padded_visual, _ = sb.synchronize(clip.duration, segment.duration, fps)
        frame_count = int(round(padded_visual * fps))
        segment_frames.append(frame_count)
        part = np.zeros(int(round(padded_visual * sample_rate)), dtype=np.int16)
        part[: len(clip.audio)] = clip.audio[: len(part)]
        audio_parts.append(part)
        organ = segment.panels.organ
        if organ and organ not in turntables:
            turntables[organ] = _turntable_cycle(cfg, study, organ)
    audio = np.concatenate(audio_parts) if audio_parts else np.zeros(0, np.int16)

    def frames():
        for segment, clip, frame_count in zip(board.segments, clips,
                                              segment_frames):
            preset = window_table.presets[segment.panels.window]
            schedule = segment.slice_schedule
            cycle = turntables.get(segment.panels.organ or "", [])
            query_box = (
                _display_box(segment.panels.query_box, study.query.dims)
                if segment.panels.query_box else None
            )
            normal_box = (
                _display_box(segment.panels.normal_box,
                             study.registered_normal.dims)
                if segment.panels.normal_box else None
            )
            for f in range(frame_count):
                # visuals freeze on their last frame once narration runs long
                slice_idx = None
                if schedule:
                    slice_idx = schedule[min(f, len(schedule) - 1)]
                query_panel = None
                normal_panel = None
                organ_panel = None
                if segment.panels.show_query and slice_idx is not None:
                    query_panel = (
                        volume.axial_slice(study.query, slice_idx, preset),
                        query_box,
                    )
                if segment.panels.show_normal and slice_idx is not None:
                    normal_panel = (
                        volume.axial_slice(
                            study.registered_normal, slice_idx, preset
                        ),
                        normal_box,
                    )
                if segment.panels.show_organ3d and cycle:
                    organ_panel = cycle[f % len(cycle)]
                avatar = None
                if clip.avatar_frames:
                    avatar = clip.avatar_frames[min(f, len(clip.avatar_frames) - 1)]
                caption = segment.narration_text if cfg.media.captions else ""
                yield media.compose_frame(
                    layout,
                    query=query_panel,
                    normal=normal_panel,
                    organ=organ_panel,
                    avatar=avatar,
                    caption=caption,
                )

    out_path = Path(cfg.paths.output)
    artifact = media.mux(
        frames(), audio, fps, out_path,
        encoder_cmd=cfg.media.encoder_cmd or None,
        sample_rate=sample_rate,
        frame_count=sum(segment_frames),
    )
    run_log.stage("media", "done", frames=sum(segment_frames),
                  audio_seconds=len(audio) / sample_rate)
    return artifact


def _storyboard_sidecar(out_path: Path) -> Path:
    return out_path.parent / (out_path.name + ".storyboard.json")


def run_generate(cfg: PipelineConfig) -> RunResult:
    cfg.validate_for_run()
    cache = ArtifactCache(cfg.paths.cache_dir or None)
    out_path = Path(cfg.paths.output)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    run_log_path = out_path.parent / (out_path.name + ".runlog.jsonl")
    run_log = RunLog(run_log_path)

    study = _run_stage("prepare", prepare_study, cfg, run_log, cache)
    board = _run_stage("storyboard", compile_storyboard, cfg, study)
    storyboard_path = _storyboard_sidecar(out_path)
    storyboard_path.write_text(board.to_json(), encoding="utf-8")
    artifact = _run_stage("media", render_video, cfg, study, board, run_log)
    run_log.stage("run", "done", artifact=str(artifact))
    return RunResult(
        exit_ok=True,
        storyboard=board,
        artifact_path=artifact,
        storyboard_path=storyboard_path,
        run_log_path=run_log_path,
    )


def run_storyboard(cfg: PipelineConfig) -> str:
    """Dry run: compile and serialize the storyboard, no media work."""
    cfg.validate_for_run()
    cache = ArtifactCache(cfg.paths.cache_dir or None)
    run_log = RunLog(None)
    study = _run_stage("prepare", prepare_study, cfg, run_log, cache)
    board = _run_stage("storyboard", compile_storyboard, cfg, study)
    return board.to_json()


def _run_stage(name, fn, *args):
    try:
        return fn(*args)
    except (ProviderError, CtNarrateError):
        raise
    except Exception as exc:
        raise PipelineFailure(name, exc) from exc


# --- staged commands ---------------------------------------------------------


def run_stage(cfg: PipelineConfig, stage: str) -> Path:
    """Run one stage in isolation, consuming cached upstream artifacts.

    Stages: findings, segment, register, mesh. Artifacts land in the cache
    directory, which is required for staged runs.
    """
    if stage not in ("findings", "segment", "register", "mesh"):
        raise CtNarrateError(f"unknown stage {stage!r}")
    if not cfg.paths.cache_dir:
        raise MissingUpstreamArtifact(
            "staged commands need paths.cache_dir for their artifacts"
        )
    cache = ArtifactCache(cfg.paths.cache_dir)
    run_log = RunLog(None)
    target = tuple(cfg.volume.target_spacing)

    def load_query():
        return volume.resample(volume.load_volume(cfg.paths.query_volume), target)

    findings_key = None
    if cfg.paths.report_text and Path(cfg.paths.report_text).exists():
        report_text = Path(cfg.paths.report_text).read_text(encoding="utf-8")
        findings_key = content_key(report_text, PROMPT_STAGE_VERSION,
                                   cfg.providers.llm)
    else:
        report_text = None

    if stage == "findings":
        if report_text is None:
            raise MissingUpstreamArtifact("paths.report_text is required")
        llm = CachingLlmProvider(build_llm_provider(cfg), cache, run_log)
        findings = report.analyze_report(report_text, llm)
        path = cache.put_json("findings", findings_key,
                              [f.as_dict() for f in findings])
        return path

    if stage == "segment":
        findings_doc = cache.get_json("findings", findings_key) \
            if findings_key else None
        if findings_doc is None:
            raise MissingUpstreamArtifact(
                "no cached findings; run `stage findings` first"
            )
        query = load_query()
        provider = build_seg_provider(cfg)
        out_dir = Path(cfg.paths.cache_dir) / "masks"
        out_dir.mkdir(parents=True, exist_ok=True)
        for doc in findings_doc:
            for organ in doc["organs"]:
                try:
                    mask = segmentation.segment(query, organ, provider)
                except EmptyMask:
                    continue
                segmentation.save_mask(
                    out_dir / f"{segmentation.sanitize_label(organ)}.nii.gz",
                    mask, query,
                )
        return out_dir

    if stage == "register":
        query = load_query()
        normal = volume.resample(
            volume.load_volume(cfg.paths.normal_volume), target
        )
        result = register_rigid(query, normal, cfg.registration_config())
        key = content_key(volume_content_hash(query),
                          volume_content_hash(normal),
                          cfg.registration.__dict__)
        return cache.put_json("register", key, result.transform.as_dict())

    # stage == "mesh"
    mask_dir = Path(cfg.paths.cache_dir) / "masks"
    masks = sorted(mask_dir.glob("*.nii.gz")) if mask_dir.exists() else []
    if not masks:
        raise MissingUpstreamArtifact(
            "no cached masks; run `stage segment` first"
        )
    query = load_query()
    out_dir = Path(cfg.paths.cache_dir) / "mesh"
    out_dir.mkdir(parents=True, exist_ok=True)
    for mask_path in masks:
        mask = segmentation.load_mask_file(mask_path, query)
        mesh = organ3d.marching_cubes(mask, spacing=query.spacing)
        stem = mask_path.name.replace(".nii.gz", "")
        organ3d.export_stl(mesh, out_dir / f"{stem}.stl", name=stem)
    return out_dir
