"""Narration, frame composition, and final muxing.

Narration goes through the ``NarrationProvider`` contract: a remote
text-to-speech/avatar service or the offline fallback (silence at an
estimated pace plus a static presenter card), so the suite never needs a
network. Frame composition is pure integer pixel work: identical inputs
give identical bytes. The final container is produced by a user-configured
external encoder command; without one, mux writes numbered PNG frames, a
WAV file, and a manifest, which is a complete, inspectable artifact.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import shlex
import shutil
import subprocess
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .errors import (
    AvSyncMismatch,
    EncoderFailure,
    LayoutOverflow,
    MalformedProviderOutput,
    ProviderFailure,
)
from .volume import GrayImage

log = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 22050
DEFAULT_WPM = 150.0
MIN_NARRATION_SECONDS = 1.0

BACKGROUND_RGB = (12, 12, 18)
HIGHLIGHT_RGB = (255, 140, 0)
BOX_THICKNESS = 2
CAPTION_FONT_SIZES = (22, 18, 14, 11)  # tried in order; smallest is the floor


def estimate_duration(text: str, wpm: float = DEFAULT_WPM) -> float:
    """Speech-time estimate: word count over pace, floored at one second."""
    if wpm <= 0:
        raise ValueError("words per minute must be positive")
    words = len(text.split())
    return max(MIN_NARRATION_SECONDS, words / wpm * 60.0)


@dataclass(frozen=True)
class NarrationClip:
    """Mono 16-bit narration audio, optionally with avatar video frames."""

    audio: np.ndarray  # int16 samples
    sample_rate: int
    transcript: str
    avatar_frames: tuple | None = None  # RGB uint8 frames at ``fps``
    fps: float | None = None

    def __post_init__(self):
        audio = np.asarray(self.audio, dtype=np.int16).reshape(-1)
        audio.setflags(write=False)
        object.__setattr__(self, "audio", audio)
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")
        if self.avatar_frames is not None:
            object.__setattr__(self, "avatar_frames", tuple(self.avatar_frames))
            if self.fps is None or self.fps <= 0:
                raise ValueError("avatar frames need a positive fps")

    @property
    def duration(self) -> float:
        return len(self.audio) / self.sample_rate

    def validate(self) -> None:
        """Check the cross-field invariants; raises MalformedProviderOutput."""
        if self.avatar_frames is not None:
            expected = round(self.duration * self.fps)
            if abs(len(self.avatar_frames) - expected) > 1:
                raise MalformedProviderOutput(
                    f"{len(self.avatar_frames)} avatar frames for "
                    f"{self.duration:.2f}s at {self.fps} fps (expected ~{expected})"
                )


def presenter_card(size: int = 192) -> np.ndarray:
    """Static head-and-shoulders placeholder for the offline provider."""
    card = np.zeros((size, size, 3), dtype=np.uint8)
    card[:] = (30, 34, 44)
    yy, xx = np.mgrid[0:size, 0:size]
    head = (xx - size / 2) ** 2 + (yy - size * 0.38) ** 2 < (size * 0.17) ** 2
    torso = (
        ((xx - size / 2) / (size * 0.30)) ** 2
        + ((yy - size * 0.95) / (size * 0.35)) ** 2
    ) < 1.0
    card[head | torso] = (168, 172, 182)
    return card


class OfflineNarrationProvider:
    """Deterministic fallback: silence at the estimated pace, static card."""

    def __init__(self, wpm: float = DEFAULT_WPM,
                 sample_rate: int = DEFAULT_SAMPLE_RATE,
                 fps: float = 10.0):
        self.wpm = wpm
        self.sample_rate = sample_rate
        self.fps = fps
        self._card = presenter_card()

    def narrate(self, text: str) -> NarrationClip:
        duration = estimate_duration(text, self.wpm)
        samples = np.zeros(int(round(duration * self.sample_rate)), dtype=np.int16)
        frame_count = int(round(duration * self.fps))
        return NarrationClip(
            audio=samples,
            sample_rate=self.sample_rate,
            transcript=text,
            avatar_frames=(self._card,) * frame_count,
            fps=self.fps,
        )


class HttpNarrationProvider:
    """Client for the remote narration contract.

    Request JSON ``{"text": ..., "voice": ...}``; response JSON
    ``{"audio_b64": <base64 WAV>, "fps": ..., "frames_url": optional}``.
    Avatar video download is not implemented; when the service advertises
    frames they are ignored and the compositor falls back to the static
    card.
    """

    def __init__(self, base_url: str, voice: str = "default",
                 timeout: float = 120.0):
        self.base_url = base_url.rstrip("/")
        self.voice = voice
        self.timeout = timeout

    def narrate(self, text: str) -> NarrationClip:
        import requests

        try:
            resp = requests.post(
                f"{self.base_url}/tts",
                json={"text": text, "voice": self.voice},
                timeout=self.timeout,
            )
        except Exception as exc:
            raise ProviderFailure(f"narration service unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise ProviderFailure(
                f"narration service error {resp.status_code}: {resp.text[:200]}"
            )
        try:
            payload = resp.json()
            wav_bytes = base64.b64decode(payload["audio_b64"])
        except Exception as exc:
            raise MalformedProviderOutput(
                f"narration response is not the documented JSON: {exc}"
            ) from exc
        if payload.get("frames_url"):
            log.debug("ignoring avatar frames_url %s", payload["frames_url"])
        samples, rate = read_wav_bytes(wav_bytes)
        return NarrationClip(audio=samples, sample_rate=rate, transcript=text)


def narrate(text: str, provider, fallback=None) -> NarrationClip:
    """Run the provider and validate the clip contract.

    When ``fallback`` is given, a transport-level ProviderFailure degrades
    to the fallback provider with a logged warning; contract violations
    (MalformedProviderOutput) always raise.
    """
    if not text.strip():
        raise ValueError("narration text must be non-empty")
    try:
        clip = provider.narrate(text)
    except ProviderFailure as exc:
        if fallback is None:
            raise
        log.warning("narration provider failed (%s); using offline fallback", exc)
        clip = fallback.narrate(text)
    if clip.transcript != text:
        clip = NarrationClip(
            audio=clip.audio, sample_rate=clip.sample_rate, transcript=text,
            avatar_frames=clip.avatar_frames, fps=clip.fps,
        )
    clip.validate()
    return clip


# --- audio io ----------------------------------------------------------------


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    samples = np.asarray(samples, dtype=np.int16)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(samples.tobytes())


def wav_bytes(samples: np.ndarray, sample_rate: int) -> bytes:
    buf = io.BytesIO()
    samples = np.asarray(samples, dtype=np.int16)
    with wave.open(buf, "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(samples.tobytes())
    return buf.getvalue()


def read_wav_bytes(raw: bytes) -> tuple[np.ndarray, int]:
    with wave.open(io.BytesIO(raw), "rb") as fh:
        if fh.getsampwidth() != 2 or fh.getnchannels() != 1:
            raise MalformedProviderOutput("expected mono 16-bit PCM WAV")
        rate = fh.getframerate()
        samples = np.frombuffer(fh.readframes(fh.getnframes()), dtype=np.int16)
    return samples, rate


# --- frame composition -------------------------------------------------------


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"rect needs positive size: {self}")


@dataclass(frozen=True)
class FrameLayout:
    """Panel geometry: three panels over a caption band, avatar bottom-left."""

    resolution: tuple[int, int]  # (width, height)
    query: Rect
    normal: Rect
    organ3d: Rect
    avatar: Rect
    caption: Rect

    def __post_init__(self):
        width, height = self.resolution
        for name in ("query", "normal", "organ3d", "avatar", "caption"):
            rect = getattr(self, name)
            if (rect.x < 0 or rect.y < 0 or rect.x + rect.w > width
                    or rect.y + rect.h > height):
                raise ValueError(f"{name} panel {rect} exceeds {self.resolution}")
        if self.avatar.x > width * 0.25 or self.avatar.y + self.avatar.h < height * 0.5:
            raise ValueError("avatar must sit in the bottom-left corner")


def default_layout(resolution=(1280, 720), avatar_height_frac=0.22) -> FrameLayout:
    width, height = resolution
    caption_h = max(32, int(height * 0.14))
    margin = max(4, width // 160)
    panel_h = height - caption_h - 2 * margin
    panel_w = (width - 4 * margin) // 3
    y0 = margin
    avatar_h = max(16, int(height * avatar_height_frac))
    return FrameLayout(
        resolution=(width, height),
        query=Rect(margin, y0, panel_w, panel_h),
        normal=Rect(2 * margin + panel_w, y0, panel_w, panel_h),
        organ3d=Rect(3 * margin + 2 * panel_w, y0, panel_w, panel_h),
        avatar=Rect(margin, height - caption_h - avatar_h - margin,
                    avatar_h, avatar_h),
        caption=Rect(margin, height - caption_h,
                     width - 2 * margin, caption_h - margin),
    )


def _to_rgb(img: GrayImage) -> np.ndarray:
    gray = np.round(img.pixels * 255.0).astype(np.uint8)
    return np.repeat(gray[:, :, None], 3, axis=2)


def _scale_into(rect: Rect, rgb: np.ndarray):
    """Nearest-neighbour letterbox fit; returns (scaled, dx, dy, scale)."""
    ih, iw = rgb.shape[:2]
    scale = min(rect.w / iw, rect.h / ih)
    ow = max(1, int(iw * scale))
    oh = max(1, int(ih * scale))
    cols = np.minimum((np.floor((np.arange(ow) + 0.5) * iw / ow)).astype(int), iw - 1)
    rows = np.minimum((np.floor((np.arange(oh) + 0.5) * ih / oh)).astype(int), ih - 1)
    scaled = rgb[rows][:, cols]
    dx = rect.x + (rect.w - ow) // 2
    dy = rect.y + (rect.h - oh) // 2
    return scaled, dx, dy, ow / iw, oh / ih


def _draw_box(frame: np.ndarray, x0: int, y0: int, x1: int, y1: int,
              bound: Rect) -> None:
    """2-px highlight rectangle clamped to its panel."""
    x0 = max(bound.x, min(x0, bound.x + bound.w - 1))
    x1 = max(bound.x, min(x1, bound.x + bound.w - 1))
    y0 = max(bound.y, min(y0, bound.y + bound.h - 1))
    y1 = max(bound.y, min(y1, bound.y + bound.h - 1))
    t = BOX_THICKNESS
    frame[y0:y0 + t, x0:x1 + 1] = HIGHLIGHT_RGB
    frame[max(y0, y1 - t + 1):y1 + 1, x0:x1 + 1] = HIGHLIGHT_RGB
    frame[y0:y1 + 1, x0:x0 + t] = HIGHLIGHT_RGB
    frame[y0:y1 + 1, max(x0, x1 - t + 1):x1 + 1] = HIGHLIGHT_RGB


def _wrap_caption(draw, text: str, font, max_width: int) -> list[str]:
    lines = []
    for paragraph in text.splitlines() or [""]:
        current = ""
        for word in paragraph.split():
            trial = f"{current} {word}".strip()
            if draw.textlength(trial, font=font) <= max_width:
                current = trial
            else:
                if current:
                    lines.append(current)
                current = word
        lines.append(current)
    return lines


def compose_frame(layout: FrameLayout,
                  query: tuple | None = None,
                  normal: tuple | None = None,
                  organ: GrayImage | None = None,
                  avatar: np.ndarray | None = None,
                  caption: str = "") -> np.ndarray:
    """Assemble one RGB frame.

    ``query`` and ``normal`` are ``(GrayImage, box)`` pairs where ``box``
    is an optional (x0, y0, x1, y1) rectangle in slice-image pixels;
    ``organ`` is a rendered GrayImage; ``avatar`` an RGB uint8 array.
    Absent panels stay background. Deterministic by construction.
    """
    width, height = layout.resolution
    frame = np.empty((height, width, 3), dtype=np.uint8)
    frame[:] = BACKGROUND_RGB

    for panel, rect in ((query, layout.query), (normal, layout.normal)):
        if panel is None:
            continue
        img, box = panel
        scaled, dx, dy, sx, sy = _scale_into(rect, _to_rgb(img))
        frame[dy:dy + scaled.shape[0], dx:dx + scaled.shape[1]] = scaled
        if box is not None:
            x0, y0, x1, y1 = box
            _draw_box(
                frame,
                dx + int(x0 * sx), dy + int(y0 * sy),
                dx + int((x1 + 1) * sx) - 1, dy + int((y1 + 1) * sy) - 1,
                rect,
            )
    if organ is not None:
        scaled, dx, dy, _, _ = _scale_into(layout.organ3d, _to_rgb(organ))
        frame[dy:dy + scaled.shape[0], dx:dx + scaled.shape[1]] = scaled
    if avatar is not None:
        scaled, dx, dy, _, _ = _scale_into(layout.avatar, np.asarray(avatar))
        frame[dy:dy + scaled.shape[0], dx:dx + scaled.shape[1]] = scaled
    if caption:
        _render_caption(frame, layout.caption, caption)
    return frame


def _render_caption(frame: np.ndarray, band: Rect, text: str) -> None:
    image = Image.fromarray(frame)
    draw = ImageDraw.Draw(image)
    for size in CAPTION_FONT_SIZES:
        font = ImageFont.load_default(size=size)
        lines = _wrap_caption(draw, text, font, band.w)
        line_h = int(size * 1.3)
        if len(lines) * line_h <= band.h and all(
            draw.textlength(line, font=font) <= band.w for line in lines
        ):
            for i, line in enumerate(lines):
                draw.text((band.x, band.y + i * line_h), line,
                          fill=(235, 235, 235), font=font)
            frame[:] = np.asarray(image)
            return
    raise LayoutOverflow(
        f"caption of {len(text)} chars does not fit the {band.w}x{band.h} band"
    )


# --- muxing ------------------------------------------------------------------


def mux(frames, audio: np.ndarray, fps: float, out_path,
        encoder_cmd: str | None = None, sample_rate: int = DEFAULT_SAMPLE_RATE,
        frame_count: int | None = None) -> Path:
    """Mux frames plus audio into the final artifact.

    ``frames`` is a sequence or iterator of (H, W, 3) uint8 arrays; pass
    ``frame_count`` when it is a bare iterator. With an encoder command
    template ({fps}, {w}, {h}, {out}, {audio} placeholders) the frames are
    piped in as raw RGB; otherwise a fallback directory with numbered PNGs,
    audio.wav, and manifest.json is written. Returns the artifact path.
    """
    if frame_count is None:
        frame_count = len(frames)
    audio = np.asarray(audio, dtype=np.int16)
    audio_duration = len(audio) / sample_rate
    video_duration = frame_count / fps
    if abs(video_duration - audio_duration) >= 1.0 / fps:
        raise AvSyncMismatch(
            f"video {video_duration:.3f}s vs audio {audio_duration:.3f}s "
            f"exceeds one frame at {fps} fps"
        )
    out_path = Path(out_path)
    if encoder_cmd and shutil.which(shlex.split(encoder_cmd)[0]):
        return _mux_encoder(frames, audio, fps, out_path, encoder_cmd, sample_rate)
    if encoder_cmd:
        log.warning("encoder %r not found; writing the frame-directory fallback",
                    shlex.split(encoder_cmd)[0])
    return _mux_fallback(frames, audio, fps, out_path, sample_rate, frame_count)


def _mux_fallback(frames, audio, fps, out_path, sample_rate, frame_count) -> Path:
    out_path.mkdir(parents=True, exist_ok=True)
    resolution = None
    written = 0
    for index, frame in enumerate(frames):
        arr = np.asarray(frame, dtype=np.uint8)
        resolution = (arr.shape[1], arr.shape[0])
        Image.fromarray(arr).save(out_path / f"frame_{index:06d}.png")
        written += 1
    write_wav(out_path / "audio.wav", audio, sample_rate)
    manifest = {
        "fps": fps,
        "resolution": list(resolution) if resolution else None,
        "frame_count": written,
        "audio_file": "audio.wav",
    }
    (out_path / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return out_path


def _mux_encoder(frames, audio, fps, out_path, encoder_cmd, sample_rate) -> Path:
    frames = iter(frames)
    first = np.asarray(next(frames), dtype=np.uint8)
    height, width = first.shape[:2]
    audio_path = out_path.with_suffix(".wav")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_wav(audio_path, audio, sample_rate)
    cmd = [
        arg.format(fps=fps, w=width, h=height, out=str(out_path),
                   audio=str(audio_path))
        for arg in shlex.split(encoder_cmd)
    ]
    proc = subprocess.Popen(cmd, stdin=subprocess.PIPE, stderr=subprocess.PIPE)
    try:
        proc.stdin.write(first.tobytes())
        for frame in frames:
            proc.stdin.write(np.asarray(frame, dtype=np.uint8).tobytes())
        proc.stdin.close()
        stderr = proc.stderr.read().decode(errors="replace")
        code = proc.wait()
    finally:
        if proc.poll() is None:
            proc.kill()
    if code != 0:
        raise EncoderFailure(cmd, code, stderr)
    return out_path
