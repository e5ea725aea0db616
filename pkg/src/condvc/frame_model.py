"""Frames, raw video ingestion and coding schedules (AI / LDP / RA)."""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import ConfigurationError, IngestionError, InputError

PIXEL_FORMATS = ("yuv420p8", "rgb24")
OUTPUT_FORMATS = ("rgb24", "yuv444p8")


class ColorSpace(str, enum.Enum):
    RGB = "RGB"
    YUV444 = "YUV444"


class FrameType(str, enum.Enum):
    I = "I"  # noqa: E741
    P = "P"
    B = "B"

    @property
    def n_refs(self) -> int:
        return {"I": 0, "P": 1, "B": 2}[self.value]


FRAME_TYPE_TAGS = {FrameType.I: 0, FrameType.P: 1, FrameType.B: 2}
TAG_TO_FRAME_TYPE = {v: k for k, v in FRAME_TYPE_TAGS.items()}


@dataclass(frozen=True)
class Frame:
    """A 3xHxW image with values in [0, 1]. Values are clamped on construction."""

    data: torch.Tensor
    color_space: ColorSpace = ColorSpace.RGB

    def __post_init__(self):
        data = torch.as_tensor(self.data)
        if data.ndim != 3 or data.shape[0] != 3:
            raise InputError(f"frame data must be 3xHxW, got {tuple(data.shape)}")
        if not torch.is_floating_point(data):
            data = data.float()
        object.__setattr__(self, "data", data.clamp(0.0, 1.0))
        object.__setattr__(self, "color_space", ColorSpace(self.color_space))

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @classmethod
    def zeros(cls, height: int, width: int, color_space=ColorSpace.RGB) -> "Frame":
        return cls(torch.zeros(3, height, width), color_space)


@dataclass(frozen=True)
class RawVideo:
    frames: tuple[Frame, ...]
    fps: float

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if not self.fps > 0:
            raise InputError(f"fps must be positive, got {self.fps}")
        if frames:
            ref = frames[0]
            for i, f in enumerate(frames):
                if (f.height, f.width, f.color_space) != (ref.height, ref.width, ref.color_space):
                    raise InputError(f"frame {i} differs in size or color space from frame 0")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width

    def as_tensor(self) -> torch.Tensor:
        """Stack all frames into a Tx3xHxW tensor."""
        return torch.stack([f.data for f in self.frames])


# ---------------------------------------------------------------------------
# Ingestion


def upsample_chroma(u_plane, v_plane, height: int, width: int):
    """Bilinearly upsample two half-resolution chroma planes to ``height x width``.

    Chroma samples are co-sited with the top-left luma sample of each 2x2
    block, so output pixel ``(i, j)`` samples chroma coordinate ``(i/2, j/2)``,
    clamped to the last chroma row/column.
    """
    u = np.asarray(u_plane, dtype=np.float64)
    v = np.asarray(v_plane, dtype=np.float64)
    if height % 2 or width % 2:
        raise InputError(f"target size must be even, got {height}x{width}")
    expected = (height // 2, width // 2)
    if u.shape != expected or v.shape != expected:
        raise InputError(
            f"chroma planes must be {expected[0]}x{expected[1]}, got {u.shape} and {v.shape}"
        )

    def axis_weights(n_out, n_in):
        pos = np.minimum(np.arange(n_out) / 2.0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, wr = axis_weights(height, expected[0])
    c0, c1, wc = axis_weights(width, expected[1])

    def interp(p):
        rows = p[r0] * (1.0 - wr)[:, None] + p[r1] * wr[:, None]
        return rows[:, c0] * (1.0 - wc)[None, :] + rows[:, c1] * wc[None, :]

    return interp(u), interp(v)


def frame_bytes(width: int, height: int, pixel_format: str) -> int:
    if pixel_format in ("rgb24", "yuv444p8"):
        return width * height * 3
    if pixel_format == "yuv420p8":
        if width % 2 or height % 2:
            raise IngestionError(f"yuv420p8 requires even dimensions, got {width}x{height}")
        return width * height * 3 // 2
    raise IngestionError(f"unknown pixel format {pixel_format!r}")


def load_raw_video(path, width: int, height: int, pixel_format: str, fps: float) -> RawVideo:
    """Read a headerless rgb24, yuv420p8 or yuv444p8 file into a :class:`RawVideo`."""
    per_frame = frame_bytes(width, height, pixel_format)
    if width <= 0 or height <= 0:
        raise IngestionError(f"invalid dimensions {width}x{height}")
    try:
        buf = np.fromfile(os.fspath(path), dtype=np.uint8)
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    n_frames, rest = divmod(buf.size, per_frame)
    if rest:
        raise IngestionError(
            f"file size {buf.size} is not a multiple of the frame size {per_frame}; "
            f"trailing partial frame",
            offset=n_frames * per_frame,
        )
    if n_frames == 0:
        raise IngestionError("file contains no frames", offset=0)

    frames = []
    for k in range(n_frames):
        chunk = buf[k * per_frame:(k + 1) * per_frame]
        if pixel_format == "rgb24":
            arr = chunk.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float32) / 255.0
            frames.append(Frame(torch.from_numpy(np.ascontiguousarray(arr)), ColorSpace.RGB))
        elif pixel_format == "yuv444p8":
            arr = chunk.reshape(3, height, width).astype(np.float32) / 255.0
            frames.append(Frame(torch.from_numpy(arr), ColorSpace.YUV444))
        else:
            n_luma = width * height
            n_chroma = n_luma // 4
            y = chunk[:n_luma].reshape(height, width).astype(np.float64) / 255.0
            u = chunk[n_luma:n_luma + n_chroma].reshape(height // 2, width // 2) / 255.0
            v = chunk[n_luma + n_chroma:].reshape(height // 2, width // 2) / 255.0
            u_full, v_full = upsample_chroma(u, v, height, width)
            arr = np.stack([y, u_full, v_full]).astype(np.float32)
            frames.append(Frame(torch.from_numpy(arr), ColorSpace.YUV444))
    return RawVideo(tuple(frames), fps)


def frame_to_uint8(frame: Frame) -> np.ndarray:
    """Quantize a frame to 8 bits, returned as HxWx3."""
    arr = frame.data.detach().double().cpu().numpy()
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def save_raw_video(video: RawVideo, path, pixel_format: str = "rgb24") -> None:
    """Write frames as headerless rgb24 (interleaved) or yuv444p8 (planar)."""
    if pixel_format not in OUTPUT_FORMATS:
        raise InputError(f"unknown output pixel format {pixel_format!r}")
    with open(path, "wb") as fh:
        for frame in video.frames:
            pix = frame_to_uint8(frame)
            if pixel_format == "yuv444p8":
                pix = pix.transpose(2, 0, 1)
            fh.write(np.ascontiguousarray(pix).tobytes())


# ---------------------------------------------------------------------------
# Coding schedules


class ScheduleConfig(str, enum.Enum):
    AI = "AI"
    LDP = "LDP"
    RA = "RA"


SCHEDULE_TAGS = {ScheduleConfig.AI: 0, ScheduleConfig.LDP: 1, ScheduleConfig.RA: 2}
TAG_TO_SCHEDULE = {v: k for k, v in SCHEDULE_TAGS.items()}


@dataclass(frozen=True)
class CodingStep:
    display_index: int
    frame_type: FrameType
    past_ref: int | None = None
    future_ref: int | None = None

    def refs(self) -> list[int]:
        return [r for r in (self.past_ref, self.future_ref) if r is not None]


@dataclass(frozen=True)
class CodingSchedule:
    steps: tuple[CodingStep, ...]
    config: ScheduleConfig
    intra_period: int
    gop_size: int

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def n_frames(self) -> int:
        return len(self.steps)

    def coding_order(self) -> list[int]:
        return [s.display_index for s in self.steps]

    def count(self, frame_type: FrameType) -> int:
        return sum(s.frame_type == frame_type for s in self.steps)

    def to_text(self) -> str:
        """Line-oriented form: ``coding_pos display_idx type past future``."""
        lines = []
        for pos, s in enumerate(self.steps):
            past = "-" if s.past_ref is None else str(s.past_ref)
            future = "-" if s.future_ref is None else str(s.future_ref)
            lines.append(f"{pos} {s.display_index} {s.frame_type.value} {past} {future}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, config, intra_period: int, gop_size: int) -> "CodingSchedule":
        steps = []
        for line in text.splitlines():
            if not line.strip():
                continue
            _, disp, ftype, past, future = line.split()
            steps.append(CodingStep(
                int(disp),
                FrameType(ftype),
                None if past == "-" else int(past),
                None if future == "-" else int(future),
            ))
        return cls(tuple(steps), ScheduleConfig(config), intra_period, gop_size)


def _dyadic_b_frames(past: int, future: int) -> Iterable[CodingStep]:
    if future - past < 2:
        return
    mid = (past + future) // 2
    yield CodingStep(mid, FrameType.B, past, future)
    yield from _dyadic_b_frames(past, mid)
    yield from _dyadic_b_frames(mid, future)


def build_schedule(config, n_frames: int, intra_period: int | None = None,
                   gop_size: int | None = None, fps: float | None = None) -> CodingSchedule:
    """Plan the coding order and references for ``n_frames`` frames.

    RA uses an I frame at every multiple of ``intra_period``, a P anchor at
    the other GOP boundaries and a dyadic B pyramid inside each GOP. Frames
    after the last complete GOP form a P chain.
    """
    if not isinstance(config, ScheduleConfig):
        try:
            config = ScheduleConfig(str(config).upper())
        except ValueError as exc:
            raise ConfigurationError(f"unknown schedule configuration {config!r}") from exc
    if n_frames < 1:
        raise ConfigurationError(f"n_frames must be >= 1, got {n_frames}")
    if gop_size is None:
        gop_size = 4
    if intra_period is None:
        intra_period = max(1, round(fps)) if fps else gop_size

    if config is ScheduleConfig.AI:
        steps = [CodingStep(i, FrameType.I) for i in range(n_frames)]
    elif config is ScheduleConfig.LDP:
        steps = [CodingStep(0, FrameType.I)]
        steps += [CodingStep(i, FrameType.P, i - 1) for i in range(1, n_frames)]
    else:
        if gop_size < 1 or gop_size & (gop_size - 1):
            raise ConfigurationError(f"RA gop_size must be a power of two, got {gop_size}")
        if intra_period < gop_size or intra_period % gop_size:
            raise ConfigurationError(
                f"RA intra_period ({intra_period}) must be a positive multiple of gop_size ({gop_size})"
            )
        steps = [CodingStep(0, FrameType.I)]
        anchor = 0
        while anchor + gop_size <= n_frames - 1:
            nxt = anchor + gop_size
            if nxt % intra_period == 0:
                steps.append(CodingStep(nxt, FrameType.I))
            else:
                steps.append(CodingStep(nxt, FrameType.P, anchor))
            steps.extend(_dyadic_b_frames(anchor, nxt))
            anchor = nxt
        steps += [CodingStep(i, FrameType.P, i - 1) for i in range(anchor + 1, n_frames)]
    return CodingSchedule(tuple(steps), config, intra_period, gop_size)


def validate_schedule(schedule: CodingSchedule | Sequence[CodingStep],
                      n_frames: int | None = None) -> list[str]:
    """Return all violated schedule invariants; an empty list means valid."""
    steps = schedule.steps if isinstance(schedule, CodingSchedule) else tuple(schedule)
    config = schedule.config if isinstance(schedule, CodingSchedule) else None
    if n_frames is None:
        n_frames = len(steps)
    violations = []
    seen: set[int] = set()
    for pos, s in enumerate(steps):
        tag = f"step {pos} (display {s.display_index})"
        if s.display_index in seen:
            violations.append(f"{tag}: duplicate display index")
        if not 0 <= s.display_index < n_frames:
            violations.append(f"{tag}: display index out of range [0, {n_frames})")
        has_past, has_future = s.past_ref is not None, s.future_ref is not None
        expected = {FrameType.I: (False, False), FrameType.P: (True, False),
                    FrameType.B: (True, True)}[s.frame_type]
        if (has_past, has_future) != expected:
            violations.append(f"{tag}: references inconsistent with frame type {s.frame_type.value}")
        for ref in s.refs():
            if ref == s.display_index:
                violations.append(f"{tag}: references itself")
            elif ref not in seen:
                violations.append(f"{tag}: causality violation, reference {ref} not yet coded")
        seen.add(s.display_index)
    missing = sorted(set(range(n_frames)) - seen)
    if missing:
        violations.append(f"completeness violation: display indices {missing} missing")

    if config is ScheduleConfig.AI and any(s.frame_type is not FrameType.I for s in steps):
        violations.append("AI schedule contains non-I frames")
    if config is ScheduleConfig.LDP and steps:
        if steps[0].frame_type is not FrameType.I:
            violations.append("LDP schedule must start with an I frame")
        if any(s.frame_type is not FrameType.P for s in steps[1:]):
            violations.append("LDP schedule must contain only P frames after the first")
    if config is ScheduleConfig.RA and steps and steps[0].frame_type is not FrameType.I:
        violations.append("RA schedule must start with an I frame")
    return violations


def expected_ra_intra_count(n_frames: int, intra_period: int) -> int:
    return math.ceil(n_frames / intra_period)


__all__ = [
    "ColorSpace", "FrameType", "Frame", "RawVideo", "CodingStep", "CodingSchedule",
    "ScheduleConfig", "upsample_chroma", "load_raw_video", "save_raw_video",
    "build_schedule", "validate_schedule", "frame_bytes", "frame_to_uint8",
]
