"""Per-frame coding pipeline, video encoder/decoder, bitstream and checkpoints.

One frame is coded as follows (AIVC mode):

1. MNet (a conditional coder fed with the frame and both references,
   conditioned on the references) sends two flows, a blending weight ``beta``
   and the mode selection ``alpha``.
2. The references are warped and blended into the prediction ``x_tilde``.
3. CNet (a conditional coder fed with the frame and ``x_tilde``, conditioned
   on ``x_tilde``) produces ``c``; the decoded frame is
   ``alpha * c + (1 - alpha) * x_tilde``.

The ablation modes remove parts of this pipeline, see :data:`TABLE1`.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from . import entropy_coding as ec
from .cond_coder import HYPER_HALF_WIDTH, CondCoder
from .errors import ConfigurationError, DecodeError, InputError, VersionError
from .frame_model import (
    FRAME_TYPE_TAGS, SCHEDULE_TAGS, TAG_TO_FRAME_TYPE, TAG_TO_SCHEDULE, ColorSpace,
    CodingSchedule, Frame, FrameType, RawVideo, ScheduleConfig, build_schedule, validate_schedule,
)
from .motion import predict

FORMAT_VERSION = 1
CHECKPOINT_VERSION = 1
MAGIC = b"CCVB"


class Mode(str, enum.Enum):
    AIVC = "AIVC"
    MOTION = "Motion"
    CONDITIONAL = "Conditional"
    RESIDUAL = "Residual"


MODE_TAGS = {Mode.AIVC: 0, Mode.MOTION: 1, Mode.CONDITIONAL: 2, Mode.RESIDUAL: 3}
TAG_TO_MODE = {v: k for k, v in MODE_TAGS.items()}

_FLAG_NAMES = ("cnet_conditional", "mnet_present", "mnet_conditional", "motion_comp", "skip", "quant_gains")

# CNet CC?, MNet present?, MNet CC?, motion compensation, Skip, gains
TABLE1 = {
    Mode.AIVC: (True, True, True, True, True, True),
    Mode.MOTION: (True, True, False, True, False, True),
    Mode.CONDITIONAL: (True, False, False, False, False, True),
    Mode.RESIDUAL: (False, False, False, False, False, False),
}


@dataclass(frozen=True)
class CodecConfig:
    """Ablation mode plus the component flags it implies.

    The flags are redundant with ``mode`` and are checked against it, so a
    hand-built config cannot silently drift from the named mode.
    ``alpha_masks_input`` is a variant (default off) where alpha also masks
    CNet's inputs.
    """

    mode: Mode
    cnet_conditional: bool
    mnet_present: bool
    mnet_conditional: bool
    motion_comp: bool
    skip: bool
    quant_gains: bool
    alpha_masks_input: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        flags = tuple(getattr(self, n) for n in _FLAG_NAMES)
        if flags != TABLE1[self.mode]:
            diff = [n for n, a, b in zip(_FLAG_NAMES, flags, TABLE1[self.mode]) if a != b]
            raise ConfigurationError(f"flags {diff} inconsistent with mode {self.mode.value}")
        if self.alpha_masks_input and not self.skip:
            raise ConfigurationError("alpha_masks_input requires Skip mode")

    @classmethod
    def from_mode(cls, mode, alpha_masks_input: bool = False) -> "CodecConfig":
        mode = parse_mode(mode)
        return cls(mode, *TABLE1[mode], alpha_masks_input=alpha_masks_input)

    def flags(self) -> dict:
        return {n: getattr(self, n) for n in _FLAG_NAMES}


def parse_mode(mode) -> Mode:
    if isinstance(mode, Mode):
        return mode
    for m in Mode:
        if str(mode).lower() == m.value.lower():
            return m
    raise ConfigurationError(f"unknown codec mode {mode!r}")


@dataclass(frozen=True)
class ArchConfig:
    latent_channels: int = 32
    hyper_channels: int = 16
    hidden: int = 32
    downsampling: int = 16
    attention: bool = False
    surrogate: str = "noise"


@dataclass
class MotionBundle:
    v_p: torch.Tensor
    v_f: torch.Tensor
    beta: torch.Tensor
    alpha: torch.Tensor


@dataclass
class FramePayload:
    mnet_hyper: bytes = b""
    mnet_latent: bytes = b""
    cnet_hyper: bytes = b""
    cnet_latent: bytes = b""

    def as_tuple(self) -> tuple[bytes, bytes, bytes, bytes]:
        return (self.mnet_hyper, self.mnet_latent, self.cnet_hyper, self.cnet_latent)

    @property
    def mnet_bytes(self) -> int:
        return len(self.mnet_hyper) + len(self.mnet_latent)

    @property
    def cnet_bytes(self) -> int:
        return len(self.cnet_hyper) + len(self.cnet_latent)


@dataclass
class FrameResult:
    """Outcome of coding one frame (tensors may carry a batch dimension)."""

    reconstruction: torch.Tensor
    rate_motion_bits: torch.Tensor
    rate_texture_bits: torch.Tensor
    prediction: torch.Tensor
    bundle: MotionBundle | None = None
    frame_type: FrameType = FrameType.I
    payload: FramePayload | None = None
    cnet_output: torch.Tensor | None = None


class _Clamp01(torch.autograd.Function):
    """Clamp to [0, 1] whose backward pass is the identity.

    A plain clamp blocks the gradient of every saturated pixel, which can
    leave the synthesis transform stuck outside the valid range.
    """

    @staticmethod
    def forward(ctx, x):
        return x.clamp(0.0, 1.0)

    @staticmethod
    def backward(ctx, grad):
        return grad


def clamp01(x: torch.Tensor) -> torch.Tensor:
    return _Clamp01.apply(x) if x.requires_grad else x.clamp(0.0, 1.0)


def _pad_amount(size: int, multiple: int) -> int:
    return (-size) % multiple


def pad_frame(x: torch.Tensor, multiple: int) -> torch.Tensor:
    """Reflect-pad (replicate when too small to reflect) bottom/right to a multiple."""
    ph, pw = _pad_amount(x.shape[-2], multiple), _pad_amount(x.shape[-1], multiple)
    if not ph and not pw:
        return x
    batched = x if x.ndim == 4 else x.unsqueeze(0)
    mode = "reflect" if ph < x.shape[-2] and pw < x.shape[-1] else "replicate"
    out = F.pad(batched, (0, pw, 0, ph), mode=mode)
    return out if x.ndim == 4 else out[0]


class Codec(nn.Module):
    """MNet + motion compensation + CNet + Skip for one ablation mode."""

    def __init__(self, config: CodecConfig | str = "AIVC", arch: ArchConfig | None = None):
        super().__init__()
        if not isinstance(config, CodecConfig):
            config = CodecConfig.from_mode(config)
        self.config = config
        self.arch = arch or ArchConfig()
        a = self.arch
        common = dict(latent_channels=a.latent_channels, hyper_channels=a.hyper_channels,
                      hidden=a.hidden, downsampling=a.downsampling, attention=a.attention,
                      surrogate=a.surrogate)
        if config.mnet_present:
            if config.mnet_conditional:
                self.mnet = CondCoder(3, 6, 6, conditional=True, use_gains=config.quant_gains, **common)
            else:
                self.mnet = CondCoder(9, 0, 6, conditional=False, use_gains=config.quant_gains, **common)
        else:
            self.mnet = None
        if config.cnet_conditional:
            self.cnet = CondCoder(3, 3, 3, conditional=True, use_gains=config.quant_gains, **common)
        else:
            self.cnet = CondCoder(3, 0, 3, conditional=False, use_gains=config.quant_gains, **common)

    @property
    def downsampling(self) -> int:
        return self.arch.downsampling

    # -- reference handling -------------------------------------------------

    @staticmethod
    def _references(x, past, future, frame_type):
        frame_type = FrameType(frame_type)
        zeros = torch.zeros_like(x)
        if frame_type is FrameType.I:
            return zeros, zeros
        if past is None:
            raise InputError(f"{frame_type.value} frame requires a past reference")
        if frame_type is FrameType.P:
            return past, zeros
        if future is None:
            raise InputError("B frame requires a future reference")
        return past, future

    @staticmethod
    def _average_prediction(past, future, frame_type):
        frame_type = FrameType(frame_type)
        if frame_type is FrameType.I:
            return torch.zeros_like(past)
        if frame_type is FrameType.P:
            return past
        return 0.5 * (past + future)

    @staticmethod
    def _bundle_from_output(out) -> MotionBundle:
        return MotionBundle(out[:, 0:2], out[:, 2:4], torch.sigmoid(out[:, 4:5]), torch.sigmoid(out[:, 5:6]))

    def _prediction(self, bundle, past, future, frame_type):
        if self.config.motion_comp:
            pred = predict(past, future, bundle.v_p, bundle.v_f, bundle.beta)
        else:
            pred = self._average_prediction(past, future, frame_type)
        return pred.clamp(0.0, 1.0)

    def _mnet_inputs(self, x, past, future):
        if self.config.mnet_conditional:
            return x, torch.cat([past, future], dim=1)
        return torch.cat([x, past, future], dim=1), None

    def _cnet_inputs(self, x, pred, alpha):
        if not self.config.cnet_conditional:
            return x - pred, None
        if self.config.alpha_masks_input:
            return alpha * x, alpha * pred
        return x, pred

    def _finish(self, c, pred, alpha):
        if not self.config.cnet_conditional:
            return clamp01(pred + c)
        return clamp01(alpha * c + (1 - alpha) * pred)

    @staticmethod
    def _apply_alpha_override(alpha, override):
        if override is None:
            return alpha
        if callable(override):
            return override(alpha)
        return torch.as_tensor(override, dtype=alpha.dtype).expand_as(alpha)

    # -- training / estimation path ----------------------------------------

    def mnet_forward(self, x, past, future, frame_type, mode: str = "train"):
        """Run MNet. Returns ``(bundle, rate_bits)`` (rate per batch element)."""
        if self.mnet is None:
            raise ConfigurationError(f"mode {self.config.mode.value} has no MNet")
        past, future = self._references(x, past, future, frame_type)
        if mode == "infer":
            payload, out = self.mnet.compress(*self._mnet_inputs(x, past, future), frame_type=frame_type)
            bits = torch.tensor([8.0 * (len(payload.hyper) + len(payload.latent))])
            return self._bundle_from_output(out), bits
        res = self.mnet(*self._mnet_inputs(x, past, future), frame_type=frame_type, mode=mode)
        return self._bundle_from_output(res.output), res.bits

    def code_frame(self, x, past=None, future=None, frame_type=FrameType.I, mode: str = "train",
                   alpha_override=None) -> FrameResult:
        """Code a (batched) frame. ``mode="infer"`` performs actual range coding.

        ``alpha_override`` replaces MNet's alpha, either with a tensor/scalar
        or with a callable applied to MNet's alpha (used by alpha forcing).
        """
        frame_type = FrameType(frame_type)
        squeeze = x.ndim == 3
        if squeeze:
            x = x.unsqueeze(0)
            past = None if past is None else past.unsqueeze(0)
            future = None if future is None else future.unsqueeze(0)
        if mode == "infer":
            results = [self._encode_one(x[i:i + 1],
                                        None if past is None else past[i:i + 1],
                                        None if future is None else future[i:i + 1],
                                        frame_type, alpha_override)
                       for i in range(x.shape[0])]
            res = _stack_results(results) if len(results) > 1 else results[0]
        elif mode == "train":
            res = self._forward(x, past, future, frame_type, alpha_override)
        else:
            raise ConfigurationError(f"unknown coding mode {mode!r}")
        if squeeze:
            res.reconstruction = res.reconstruction[0]
            res.prediction = res.prediction[0]
        return res

    def _forward(self, x, past, future, frame_type, alpha_override):
        past, future = self._references(x, past, future, frame_type)
        b = x.shape[0]
        bundle = None
        if self.mnet is not None:
            mres = self.mnet(*self._mnet_inputs(x, past, future), frame_type=frame_type, mode="train")
            bundle = self._bundle_from_output(mres.output)
            rate_m = mres.bits
            pred = self._prediction(bundle, past, future, frame_type)
            alpha = bundle.alpha
        else:
            rate_m = x.new_zeros(b)
            pred = self._prediction(None, past, future, frame_type)
            alpha = x.new_ones(b, 1, *x.shape[-2:])
        if not self.config.skip:
            alpha = torch.ones_like(alpha)
        alpha = self._apply_alpha_override(alpha, alpha_override)
        if bundle is not None:
            bundle.alpha = alpha
        cres = self.cnet(*self._cnet_inputs(x, pred, alpha), frame_type=frame_type, mode="train")
        xhat = self._finish(cres.output, pred, alpha)
        return FrameResult(xhat, rate_m, cres.bits, pred, bundle, frame_type, None, cres.output)

    # -- actual coding -----------------------------------------------------

    @torch.no_grad()
    def _encode_one(self, x, past, future, frame_type, alpha_override=None) -> FrameResult:
        past, future = self._references(x, past, future, frame_type)
        payload = FramePayload()
        bundle = None
        if self.mnet is not None:
            mp, mout = self.mnet.compress(*self._mnet_inputs(x, past, future), frame_type=frame_type)
            payload.mnet_hyper, payload.mnet_latent = mp.hyper, mp.latent
            bundle = self._bundle_from_output(mout)
        pred, alpha = self._decoder_side(bundle, past, future, frame_type, x)
        alpha = self._apply_alpha_override(alpha, alpha_override)
        if bundle is not None:
            bundle.alpha = alpha
        cp, c = self.cnet.compress(*self._cnet_inputs(x, pred, alpha), frame_type=frame_type)
        payload.cnet_hyper, payload.cnet_latent = cp.hyper, cp.latent
        xhat = self._finish(c, pred, alpha)
        return FrameResult(
            xhat,
            torch.tensor([8.0 * payload.mnet_bytes]),
            torch.tensor([8.0 * payload.cnet_bytes]),
            pred, bundle, frame_type, payload, c,
        )

    def _decoder_side(self, bundle, past, future, frame_type, like):
        pred = self._prediction(bundle, past, future, frame_type)
        if bundle is not None and self.config.skip:
            alpha = bundle.alpha
        else:
            alpha = like.new_ones(like.shape[0], 1, *like.shape[-2:])
        return pred, alpha

    @torch.no_grad()
    def decode_frame(self, payload: FramePayload, shape, past, future, frame_type,
                     dtype=torch.float32) -> torch.Tensor:
        """Rebuild a padded frame (1x3xHxW) from its payloads and decoded references."""
        frame_type = FrameType(frame_type)
        like = torch.zeros(1, 3, *shape, dtype=dtype)
        past, future = self._references(like, past, future, frame_type)
        lat = (shape[0] // self.downsampling, shape[1] // self.downsampling)
        bundle = None
        if self.mnet is not None:
            dec_in = self._mnet_inputs(like, past, future)[1]
            mout = self.mnet.decompress(payload.mnet_hyper, payload.mnet_latent, lat, dec_in, frame_type, dtype)
            bundle = self._bundle_from_output(mout)
        pred, alpha = self._decoder_side(bundle, past, future, frame_type, like)
        cnet_dec = None
        if self.config.cnet_conditional:
            cnet_dec = alpha * pred if self.config.alpha_masks_input else pred
        c = self.cnet.decompress(payload.cnet_hyper, payload.cnet_latent, lat, cnet_dec, frame_type, dtype)
        return self._finish(c, pred, alpha)

    # -- manifest ------------------------------------------------------------

    def manifest(self) -> dict:
        shapes = {k: list(v.shape) for k, v in self.state_dict().items()}
        gains = {}
        for name, net in (("mnet", self.mnet), ("cnet", self.cnet)):
            if net is not None:
                gains[name] = net.gains.table()
        return {
            "checkpoint_version": CHECKPOINT_VERSION,
            "mode": self.config.mode.value,
            "flags": self.config.flags(),
            "alpha_masks_input": self.config.alpha_masks_input,
            "arch": asdict(self.arch),
            "latent_channels": self.arch.latent_channels,
            "downsampling": self.arch.downsampling,
            "cdf_precision": ec.PRECISION,
            "sigma_min": ec.SIGMA_MIN,
            "gaussian_tables": {"n_scales": ec.N_SCALES, "sigma_max": ec.SIGMA_MAX,
                                "mean_steps": ec.MEAN_STEPS, "tail_sigmas": ec.TAIL_SIGMAS},
            "hyper_half_width": HYPER_HALF_WIDTH,
            "gains": gains,
            "shapes": shapes,
        }

    def manifest_hash(self) -> bytes:
        h = hashlib.sha256()
        m = self.manifest()
        m.pop("gains")  # covered exactly by the parameter bytes below
        h.update(json.dumps(m, sort_keys=True).encode())
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
        return h.digest()


def _stack_results(results: list[FrameResult]) -> FrameResult:
    cat = torch.cat
    bundles = [r.bundle for r in results]
    bundle = None
    if bundles[0] is not None:
        bundle = MotionBundle(cat([b.v_p for b in bundles]), cat([b.v_f for b in bundles]),
                              cat([b.beta for b in bundles]), cat([b.alpha for b in bundles]))
    return FrameResult(
        cat([r.reconstruction for r in results]),
        cat([r.rate_motion_bits for r in results]),
        cat([r.rate_texture_bits for r in results]),
        cat([r.prediction for r in results]),
        bundle, results[0].frame_type, None,
        cat([r.cnet_output for r in results]),
    )


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(codec: Codec, path) -> None:
    torch.save({"manifest": codec.manifest(), "state_dict": codec.state_dict()}, path)


def load_checkpoint(path) -> Codec:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError) as exc:
        raise ConfigurationError(f"cannot load checkpoint {path}: {exc}") from exc
    man = blob["manifest"]
    if man.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {man.get('checkpoint_version')}")
    if man.get("cdf_precision") != ec.PRECISION or man.get("sigma_min") != ec.SIGMA_MIN:
        raise VersionError("checkpoint entropy-coding parameters differ from this build")
    config = CodecConfig.from_mode(man["mode"], alpha_masks_input=man.get("alpha_masks_input", False))
    codec = Codec(config, ArchConfig(**man["arch"]))
    codec.load_state_dict(blob["state_dict"])
    codec.eval()
    return codec


# ---------------------------------------------------------------------------
# Bitstream

_SEQ_FMT = ">4sBBBIIIIII32s"
_SEQ_SIZE = struct.calcsize(_SEQ_FMT)
_FRAME_FMT = ">BI4I"
_FRAME_SIZE = struct.calcsize(_FRAME_FMT)


@dataclass
class SequenceHeader:
    mode: Mode
    schedule_config: str
    height: int
    width: int
    n_frames: int
    fps: float
    intra_period: int
    gop_size: int
    manifest_hash: bytes
    version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        return struct.pack(
            _SEQ_FMT, MAGIC, self.version, MODE_TAGS[self.mode],
            SCHEDULE_TAGS[ScheduleConfig(self.schedule_config)],
            self.height, self.width, self.n_frames, int(round(self.fps * 1000)),
            self.intra_period, self.gop_size, self.manifest_hash,
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "SequenceHeader":
        if len(data) < _SEQ_SIZE:
            raise DecodeError("bitstream shorter than the sequence header")
        magic, version, mode, sched, h, w, n, fps_milli, ip, gop, mhash = struct.unpack(
            _SEQ_FMT, data[:_SEQ_SIZE])
        if magic != MAGIC:
            raise DecodeError("not a bitstream of this codec (bad magic)")
        if version != FORMAT_VERSION:
            raise VersionError(f"unsupported bitstream version {version}")
        if mode not in TAG_TO_MODE or sched not in TAG_TO_SCHEDULE:
            raise DecodeError("invalid mode or schedule tag in sequence header")
        return cls(TAG_TO_MODE[mode], TAG_TO_SCHEDULE[sched].value, h, w, n, fps_milli / 1000.0,
                   ip, gop, mhash, version)


@dataclass
class FrameBitstream:
    frame_type: FrameType
    display_index: int
    payload: FramePayload

    @property
    def payload_lengths(self) -> tuple[int, int, int, int]:
        return tuple(len(p) for p in self.payload.as_tuple())

    def to_bytes(self) -> bytes:
        head = struct.pack(_FRAME_FMT, FRAME_TYPE_TAGS[self.frame_type], self.display_index,
                           *self.payload_lengths)
        return head + b"".join(self.payload.as_tuple())

    def __len__(self) -> int:
        return _FRAME_SIZE + sum(self.payload_lengths)


@dataclass
class Bitstream:
    header: SequenceHeader
    frames: list[FrameBitstream] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        return self.header.to_bytes() + b"".join(f.to_bytes() for f in self.frames)

    def __len__(self) -> int:
        return _SEQ_SIZE + sum(len(f) for f in self.frames)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        header = SequenceHeader.from_bytes(data)
        pos = _SEQ_SIZE
        frames = []
        for coding_pos in range(header.n_frames):
            if pos + _FRAME_SIZE > len(data):
                raise DecodeError(f"truncated frame header at coding position {coding_pos}")
            tag, disp, *lengths = struct.unpack(_FRAME_FMT, data[pos:pos + _FRAME_SIZE])
            if tag not in TAG_TO_FRAME_TYPE:
                raise DecodeError(f"invalid frame type tag {tag}", disp)
            pos += _FRAME_SIZE
            chunks = []
            for ln in lengths:
                if pos + ln > len(data):
                    raise DecodeError("truncated payload", disp)
                chunks.append(data[pos:pos + ln])
                pos += ln
            frames.append(FrameBitstream(TAG_TO_FRAME_TYPE[tag], disp, FramePayload(*chunks)))
        if pos != len(data):
            raise DecodeError(f"{len(data) - pos} trailing bytes after the last frame")
        return cls(header, frames)


SEQUENCE_HEADER_BYTES = _SEQ_SIZE
FRAME_HEADER_BYTES = _FRAME_SIZE


@dataclass
class EncodeResult:
    bitstream: Bitstream
    results: dict[int, FrameResult]           # display index -> encoder-side result
    reconstructions: dict[int, torch.Tensor]  # display index -> cropped 3xHxW

    def frame_stats(self) -> list[dict]:
        rows = []
        for fb in self.bitstream.frames:
            rows.append({
                "display_index": fb.display_index,
                "frame_type": fb.frame_type.value,
                "rate_motion_bits": 8 * fb.payload.mnet_bytes,
                "rate_texture_bits": 8 * fb.payload.cnet_bytes,
                "frame_bytes": len(fb),
            })
        return rows


class _ReferenceBuffer:
    """Decoded frames kept only while a later step still references them."""

    def __init__(self, schedule: CodingSchedule):
        self._remaining = {}
        for s in schedule.steps:
            for r in s.refs():
                self._remaining[r] = self._remaining.get(r, 0) + 1
        self._frames: dict[int, torch.Tensor] = {}
        self.peak = 0

    def get(self, idx, frame_index):
        if idx is None:
            return None
        if idx not in self._frames:
            raise DecodeError(f"reference {idx} used before it was decoded", frame_index)
        self._remaining[idx] -= 1
        frame = self._frames[idx]
        if self._remaining[idx] == 0:
            del self._frames[idx]
        return frame

    def put(self, idx, frame):
        if self._remaining.get(idx, 0) > 0:
            self._frames[idx] = frame
            self.peak = max(self.peak, len(self._frames))


def encode_video(video: RawVideo, schedule: CodingSchedule, codec: Codec) -> EncodeResult:
    """Encode ``video`` in schedule order; references are the encoder's own reconstructions."""
    n = len(video)
    if schedule.n_frames != n:
        raise InputError(f"schedule covers {schedule.n_frames} frames but the video has {n}")
    problems = validate_schedule(schedule)
    if problems:
        raise InputError("invalid schedule: " + "; ".join(problems))
    h, w = video.height, video.width
    if h < 16 or w < 16:
        raise InputError(f"frames must be at least 16x16, got {h}x{w}")
    codec.eval()
    header = SequenceHeader(codec.config.mode, schedule.config.value, h, w, n, video.fps,
                            schedule.intra_period, schedule.gop_size, codec.manifest_hash())
    stream = Bitstream(header)
    dpb = _ReferenceBuffer(schedule)
    results, recons = {}, {}
    s = codec.downsampling
    for step in schedule.steps:
        x = pad_frame(video.frames[step.display_index].data, s).unsqueeze(0)
        past = dpb.get(step.past_ref, step.display_index)
        future = dpb.get(step.future_ref, step.display_index)
        res = codec._encode_one(x, past, future, step.frame_type)
        stream.frames.append(FrameBitstream(step.frame_type, step.display_index, res.payload))
        dpb.put(step.display_index, res.reconstruction)
        results[step.display_index] = res
        recons[step.display_index] = res.reconstruction[0, :, :h, :w]
    return EncodeResult(stream, results, recons)


def decode_video(bitstream, codec: Codec) -> RawVideo:
    """Decode a :class:`Bitstream` (or its bytes) into frames in display order."""
    if isinstance(bitstream, (bytes, bytearray, memoryview)):
        bitstream = Bitstream.from_bytes(bytes(bitstream))
    hdr = bitstream.header
    if hdr.manifest_hash != codec.manifest_hash():
        raise VersionError("bitstream was produced with a different checkpoint")
    if hdr.mode != codec.config.mode:
        raise VersionError(f"bitstream mode {hdr.mode.value} != checkpoint mode {codec.config.mode.value}")
    schedule = build_schedule(hdr.schedule_config, hdr.n_frames, hdr.intra_period, hdr.gop_size)
    if len(bitstream.frames) != schedule.n_frames:
        raise DecodeError(f"expected {schedule.n_frames} frames, found {len(bitstream.frames)}")
    codec.eval()
    s = codec.downsampling
    shape = (hdr.height + _pad_amount(hdr.height, s), hdr.width + _pad_amount(hdr.width, s))
    dpb = _ReferenceBuffer(schedule)
    out: dict[int, torch.Tensor] = {}
    for step, fb in zip(schedule.steps, bitstream.frames):
        if (fb.display_index, fb.frame_type) != (step.display_index, step.frame_type):
            raise DecodeError(
                f"expected {step.frame_type.value} frame {step.display_index}, found "
                f"{fb.frame_type.value} frame {fb.display_index}", fb.display_index)
        past = dpb.get(step.past_ref, step.display_index)
        future = dpb.get(step.future_ref, step.display_index)
        try:
            xhat = codec.decode_frame(fb.payload, shape, past, future, step.frame_type)
        except (ec.RangeCoderError, RuntimeError, ValueError) as exc:
            raise DecodeError(f"payload corrupted: {exc}", step.display_index) from exc
        dpb.put(step.display_index, xhat)
        out[step.display_index] = xhat[0, :, :hdr.height, :hdr.width]
    frames = tuple(Frame(out[i], ColorSpace.RGB) for i in range(hdr.n_frames))
    return RawVideo(frames, hdr.fps)


def read_bitstream(path) -> Bitstream:
    with open(path, "rb") as fh:
        return Bitstream.from_bytes(fh.read())


def write_bitstream(bitstream: Bitstream, path) -> None:
    with open(path, "wb") as fh:
        fh.write(bitstream.to_bytes())
