"""Declarative pipeline configuration: TOML file plus flag overrides.

Unknown keys are rejected outright (typo safety) and every default is
valid standalone. Secrets never live here: the LLM key is named by an
environment-variable name only.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .registration import RegistrationConfig
from .report import DEFAULT_API_KEY_ENV
from .storyboard import StoryboardConfig, WindowTable
from .volume import WindowPreset

PROVIDER_CHOICES = {
    "llm": ("mock", "http"),
    "seg": ("files", "http", "phantom"),
    "tts": ("offline", "http"),
}


@dataclass
class PathsConfig:
    query_volume: str = ""
    report_text: str = ""
    normal_volume: str = ""
    mask_dir: str = ""
    cache_dir: str = ""
    output: str = "video_report"


@dataclass
class ProvidersConfig:
    llm: str = "mock"
    seg: str = "phantom"
    tts: str = "offline"
    llm_base_url: str = ""
    llm_model: str = "default"
    llm_mock_fixture: str = ""
    llm_api_key_env: str = DEFAULT_API_KEY_ENV
    seg_base_url: str = ""
    tts_base_url: str = ""
    tts_allow_fallback: bool = True


@dataclass
class StoryboardSection:
    fps: float = 10.0
    resolution: list = field(default_factory=lambda: [1280, 720])
    max_duration: float = 180.0


@dataclass
class NarrationSection:
    wpm: float = 150.0
    voice: str = "default"
    sample_rate: int = 22050


@dataclass
class VolumeSection:
    target_spacing: list = field(default_factory=lambda: [1.0, 1.0, 3.0])


@dataclass
class RegistrationSection:
    levels: list = field(default_factory=lambda: [4, 2, 1])
    rot_step_rad: float = 0.02
    trans_step_mm: float = 2.0
    rot_step_min: float = 0.0005
    trans_step_min: float = 0.05
    max_sweeps_per_level: int = 80
    metric_max_samples: int = 200_000
    smoothing_sigma: float = 0.7


@dataclass
class WindowsSection:
    default: str = "soft_tissue"
    presets: dict = field(default_factory=lambda: {
        "lung": [-600.0, 1500.0],
        "bone": [400.0, 1800.0],
        "soft_tissue": [40.0, 400.0],
    })
    families: list = field(default_factory=lambda: [
        ["lung", "lung"],
        ["vertebrae", "bone"], ["rib", "bone"], ["bone", "bone"],
        ["sternum", "bone"], ["clavicle", "bone"], ["scapula", "bone"],
        ["humerus", "bone"], ["femur", "bone"], ["costal cartilage", "bone"],
    ])


@dataclass
class MediaSection:
    encoder_cmd: str = ""
    captions: bool = True
    organ_render_size: int = 256
    turntable_seconds: float = 6.0
    narration_concurrency: int = 2


_SECTIONS = {
    "paths": PathsConfig,
    "providers": ProvidersConfig,
    "storyboard": StoryboardSection,
    "narration": NarrationSection,
    "volume": VolumeSection,
    "registration": RegistrationSection,
    "windows": WindowsSection,
    "media": MediaSection,
}


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    providers: ProvidersConfig = field(default_factory=ProvidersConfig)
    storyboard: StoryboardSection = field(default_factory=StoryboardSection)
    narration: NarrationSection = field(default_factory=NarrationSection)
    volume: VolumeSection = field(default_factory=VolumeSection)
    registration: RegistrationSection = field(default_factory=RegistrationSection)
    windows: WindowsSection = field(default_factory=WindowsSection)
    media: MediaSection = field(default_factory=MediaSection)

    # --- construction ---------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        unknown = set(raw) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            section_raw = raw.get(name, {})
            if not isinstance(section_raw, dict):
                raise ConfigError(f"config section [{name}] must be a table")
            known = {f.name for f in fields(section_cls)}
            bad = set(section_raw) - known
            if bad:
                raise ConfigError(
                    f"unknown keys in [{name}]: {sorted(bad)} "
                    f"(known: {sorted(known)})"
                )
            kwargs[name] = section_cls(**section_raw)
        return cls(**kwargs)

    @classmethod
    def from_toml(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        out = {}
        for name, section_cls in _SECTIONS.items():
            section = getattr(self, name)
            out[name] = {
                f.name: getattr(section, f.name) for f in fields(section_cls)
            }
        return out

    def to_toml(self) -> str:
        """Serialize; parsing the result reproduces this config."""
        lines = []
        for section_name, values in self.to_dict().items():
            simple = {k: v for k, v in values.items() if not isinstance(v, dict)}
            tables = {k: v for k, v in values.items() if isinstance(v, dict)}
            lines.append(f"[{section_name}]")
            for key, value in simple.items():
                lines.append(f"{key} = {_toml_value(value)}")
            lines.append("")
            for key, table in tables.items():
                lines.append(f"[{section_name}.{key}]")
                for tk, tv in table.items():
                    lines.append(f"{_toml_key(tk)} = {_toml_value(tv)}")
                lines.append("")
        return "\n".join(lines)

    def override(self, dotted_key: str, value) -> None:
        """Apply one flag override like ``providers.llm = "http"``."""
        parts = dotted_key.split(".")
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ConfigError(f"unknown config key {dotted_key!r}")
        section = getattr(self, parts[0])
        if not hasattr(section, parts[1]):
            raise ConfigError(f"unknown config key {dotted_key!r}")
        current = getattr(section, parts[1])
        if isinstance(current, bool):
            value = str(value).lower() in ("1", "true", "yes", "on")
        elif isinstance(current, int) and not isinstance(current, bool):
            value = int(value)
        elif isinstance(current, float):
            value = float(value)
        elif isinstance(current, list) and isinstance(value, str):
            parsed = [part.strip() for part in value.split(",") if part.strip()]
            element = current[0] if current else ""
            if isinstance(element, float):
                value = [float(p) for p in parsed]
            elif isinstance(element, int):
                value = [int(p) for p in parsed]
            else:
                value = parsed
        setattr(section, parts[1], value)

    # --- validation and adapters -----------------------------------------

    def validate_for_run(self) -> None:
        for provider, choice in (("llm", self.providers.llm),
                                 ("seg", self.providers.seg),
                                 ("tts", self.providers.tts)):
            if choice not in PROVIDER_CHOICES[provider]:
                raise ConfigError(
                    f"providers.{provider} must be one of "
                    f"{PROVIDER_CHOICES[provider]}, got {choice!r}"
                )
        required = [("paths.query_volume", self.paths.query_volume),
                    ("paths.report_text", self.paths.report_text),
                    ("paths.normal_volume", self.paths.normal_volume)]
        for name, value in required:
            if not value:
                raise ConfigError(f"missing required config field {name}")
            if not Path(value).exists():
                raise ConfigError(f"{name} does not exist: {value}")
        if self.providers.seg == "files" and not self.paths.mask_dir:
            raise ConfigError("providers.seg = 'files' needs paths.mask_dir")
        if self.providers.llm == "http" and not self.providers.llm_base_url:
            raise ConfigError("providers.llm = 'http' needs providers.llm_base_url")
        if self.providers.llm == "mock" and not self.providers.llm_mock_fixture:
            raise ConfigError(
                "providers.llm = 'mock' needs providers.llm_mock_fixture "
                "(recorded-response JSON)"
            )
        if self.providers.seg == "http" and not self.providers.seg_base_url:
            raise ConfigError("providers.seg = 'http' needs providers.seg_base_url")
        if self.providers.tts == "http" and not self.providers.tts_base_url:
            raise ConfigError("providers.tts = 'http' needs providers.tts_base_url")
        if len(self.volume.target_spacing) != 3:
            raise ConfigError("volume.target_spacing must have 3 components")
        if len(self.storyboard.resolution) != 2:
            raise ConfigError("storyboard.resolution must be [width, height]")
        self.window_table()  # raises ConfigError on dangling references

    def window_table(self) -> WindowTable:
        try:
            presets = {
                name: WindowPreset(name, float(cw[0]), float(cw[1]))
                for name, cw in self.windows.presets.items()
            }
            return WindowTable(
                presets=presets,
                families=tuple((f, p) for f, p in self.windows.families),
                default=self.windows.default,
            )
        except (ValueError, IndexError, TypeError) as exc:
            raise ConfigError(f"invalid window table: {exc}") from exc

    def storyboard_config(self) -> StoryboardConfig:
        return StoryboardConfig(
            fps=float(self.storyboard.fps),
            resolution=tuple(int(v) for v in self.storyboard.resolution),
            max_duration=float(self.storyboard.max_duration),
            wpm=float(self.narration.wpm),
            window_table=self.window_table(),
        )

    def registration_config(self) -> RegistrationConfig:
        r = self.registration
        return RegistrationConfig(
            levels=tuple(int(f) for f in r.levels),
            rot_step_rad=r.rot_step_rad,
            trans_step_mm=r.trans_step_mm,
            rot_step_min=r.rot_step_min,
            trans_step_min=r.trans_step_min,
            max_sweeps_per_level=int(r.max_sweeps_per_level),
            metric_max_samples=int(r.metric_max_samples),
            smoothing_sigma=r.smoothing_sigma,
        )


def _toml_key(key: str) -> str:
    if key.replace("_", "").replace("-", "").isalnum() and " " not in key:
        return key
    return f'"{key}"'


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value {value!r}")
