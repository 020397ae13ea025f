"""Compile findings into a fully-timed, three-phase presentation plan.

Each finding yields three segments in rank order: the abnormality
explanation over the highlighted query scan, the scan-appearance
description over the same view, and the normal-comparison narration with
the registered reference side by side. Narration drives pacing: segment
duration is the narration estimate, and the slice scroll speed is derived
from it, never the reverse. The compiled plan serializes to canonical JSON
(the dry-run output and the compositor's input).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .errors import DurationBudgetExceeded, ZeroFrames
from .media import estimate_duration
from .report import Finding
from .segmentation import BoundingBox3D
from .volume import BONE_WINDOW, LUNG_WINDOW, SOFT_TISSUE_WINDOW, WindowPreset

STORYBOARD_VERSION = 1
NO_FINDINGS_NOTICE = (
    "Good news: the scan shows no abnormal findings. All the structures the "
    "radiologist reviewed look as expected."
)


@dataclass(frozen=True)
class WindowTable:
    """Organ-family to window-preset mapping with a default preset."""

    presets: dict[str, WindowPreset]
    families: tuple[tuple[str, str], ...]  # (family substring, preset name)
    default: str

    def __post_init__(self):
        for family, preset_name in self.families:
            if preset_name not in self.presets:
                raise ValueError(
                    f"window table family {family!r} references unknown preset "
                    f"{preset_name!r}"
                )
        if self.default not in self.presets:
            raise ValueError(f"unknown default preset {self.default!r}")


def default_window_table() -> WindowTable:
    presets = {
        "lung": LUNG_WINDOW,
        "bone": BONE_WINDOW,
        "soft_tissue": SOFT_TISSUE_WINDOW,
    }
    bone_families = (
        "vertebrae", "rib", "bone", "sternum", "clavicle", "scapula",
        "humerus", "femur", "costal cartilage",
    )
    families = [("lung", "lung")]
    families += [(name, "bone") for name in bone_families]
    return WindowTable(presets=presets, families=tuple(families),
                       default="soft_tissue")


def select_window(organ: str, table: WindowTable) -> WindowPreset:
    """Longest word-boundary family match; default preset when unmatched."""
    best: tuple[int, str] | None = None
    for family, preset_name in table.families:
        if re.search(rf"\b{re.escape(family)}\b", organ):
            if best is None or len(family) > best[0]:
                best = (len(family), preset_name)
    name = best[1] if best else table.default
    return table.presets[name]


def plan_scroll(box: BoundingBox3D, duration: float, fps: float) -> tuple[int, ...]:
    """Monotone frame-to-slice map covering the box's z-range endpoints."""
    if duration <= 0 or fps <= 0:
        raise ZeroFrames(f"duration {duration}s at {fps} fps")
    frames = int(duration * fps + 0.5)
    if frames == 0:
        raise ZeroFrames(f"duration {duration}s at {fps} fps rounds to 0 frames")
    lo, hi = box.min[2], box.max[2]
    if frames == 1:
        return (lo,)
    span = hi - lo
    return tuple(lo + int(f * span / (frames - 1) + 0.5) for f in range(frames))


def synchronize(narration_duration: float, visual_duration: float,
                fps: float) -> tuple[float, float]:
    """Pad the shorter track: visuals repeat their last frame, audio gets
    trailing silence. Both come back on the same frame boundary."""
    if narration_duration < 0 or visual_duration < 0 or fps <= 0:
        raise ValueError("durations must be >= 0 and fps > 0")
    target = max(narration_duration, visual_duration)
    frames = max(1, int(target * fps + 0.5))
    padded = frames / fps
    return padded, padded


@dataclass(frozen=True)
class PanelSpec:
    """Which panels a segment shows, with their overlays."""

    show_query: bool
    show_normal: bool
    show_organ3d: bool
    query_box: BoundingBox3D | None = None
    normal_box: BoundingBox3D | None = None
    window: str = "soft_tissue"
    organ: str | None = None

    def as_dict(self) -> dict:
        return {
            "query": self.show_query,
            "normal": self.show_normal,
            "organ3d": self.show_organ3d,
            "query_box": self.query_box.as_dict() if self.query_box else None,
            "normal_box": self.normal_box.as_dict() if self.normal_box else None,
            "window": self.window,
            "organ": self.organ,
        }


@dataclass(frozen=True)
class Segment:
    finding_id: str
    phase: int  # 1 abnormality, 2 input appearance, 3 normal comparison
    narration_text: str
    panels: PanelSpec
    slice_schedule: tuple[int, ...]
    duration: float

    def __post_init__(self):
        if self.phase not in (1, 2, 3):
            raise ValueError(f"phase must be 1..3, got {self.phase}")
        if self.duration <= 0:
            raise ValueError("segment duration must be positive")

    def as_dict(self) -> dict:
        return {
            "finding_id": self.finding_id,
            "phase": self.phase,
            "narration_text": self.narration_text,
            "panels": self.panels.as_dict(),
            "slice_schedule": list(self.slice_schedule),
            "duration": self.duration,
        }


@dataclass(frozen=True)
class StoryboardConfig:
    fps: float = 10.0
    resolution: tuple[int, int] = (1280, 720)
    max_duration: float = 180.0
    wpm: float = 150.0
    window_table: WindowTable = field(default_factory=default_window_table)


@dataclass(frozen=True)
class Storyboard:
    segments: tuple[Segment, ...]
    fps: float
    resolution: tuple[int, int]
    max_duration: float

    @property
    def total_duration(self) -> float:
        return sum(s.duration for s in self.segments)

    def to_json(self) -> str:
        """Canonical serialization: building twice gives identical bytes."""
        doc = {
            "version": STORYBOARD_VERSION,
            "fps": self.fps,
            "resolution": list(self.resolution),
            "max_duration": self.max_duration,
            "total_duration": self.total_duration,
            "segments": [s.as_dict() for s in self.segments],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


PHASE_PANELS = {
    1: (True, False, True),
    2: (True, False, True),
    3: (True, True, True),
}


def _segment_duration(text: str, fps: float, wpm: float) -> float:
    """Narration estimate snapped to a whole frame count."""
    estimate = estimate_duration(text, wpm)
    frames = max(1, int(estimate * fps + 0.5))
    return frames / fps


def build_storyboard(findings: list[Finding],
                     boxes: list[BoundingBox3D | None],
                     normal_boxes: list[BoundingBox3D | None],
                     cfg: StoryboardConfig | None = None) -> Storyboard:
    """Compile ranked findings plus their boxes into the segment timeline.

    ``boxes``/``normal_boxes`` align with ``findings``; None marks a
    finding whose segmentation came back empty, which degrades to
    narration-only segments instead of aborting. Zero findings produce a
    single notice segment.
    """
    cfg = cfg or StoryboardConfig()
    if len(boxes) != len(findings) or len(normal_boxes) != len(findings):
        raise ValueError("boxes and normal_boxes must align with findings")

    ordered = sorted(zip(findings, boxes, normal_boxes), key=lambda t: t[0].rank)
    segments: list[Segment] = []

    if not findings:
        duration = _segment_duration(NO_FINDINGS_NOTICE, cfg.fps, cfg.wpm)
        segments.append(
            Segment(
                finding_id="notice",
                phase=1,
                narration_text=NO_FINDINGS_NOTICE,
                panels=PanelSpec(False, False, False,
                                 window=cfg.window_table.default),
                slice_schedule=(),
                duration=duration,
            )
        )
    for finding, box, normal_box in ordered:
        finding_id = f"f{finding.rank}"
        organ = finding.organs[0]
        window = select_window(organ, cfg.window_table)
        for phase in (1, 2, 3):
            text = finding.explanation.for_phase(phase)
            duration = _segment_duration(text, cfg.fps, cfg.wpm)
            if box is None:
                panels = PanelSpec(False, False, False, window=window.name,
                                   organ=None)
                schedule: tuple[int, ...] = ()
            else:
                show_query, show_normal, show_organ = PHASE_PANELS[phase]
                panels = PanelSpec(
                    show_query=show_query,
                    show_normal=show_normal and normal_box is not None,
                    show_organ3d=show_organ,
                    query_box=box,
                    normal_box=normal_box if phase == 3 else None,
                    window=window.name,
                    organ=organ,
                )
                schedule = plan_scroll(box, duration, cfg.fps)
            segments.append(
                Segment(
                    finding_id=finding_id,
                    phase=phase,
                    narration_text=text,
                    panels=panels,
                    slice_schedule=schedule,
                    duration=duration,
                )
            )

    board = Storyboard(
        segments=tuple(segments),
        fps=cfg.fps,
        resolution=cfg.resolution,
        max_duration=cfg.max_duration,
    )
    if board.total_duration > cfg.max_duration:
        breakdown = [(s.finding_id, s.phase, s.duration) for s in board.segments]
        raise DurationBudgetExceeded(board.total_duration, cfg.max_duration,
                                     breakdown)
    return board
