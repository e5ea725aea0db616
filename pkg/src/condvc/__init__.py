"""Toy-scale learned video codec built on conditional coding with a Skip mode."""

from .codec import (
    ArchConfig,
    Bitstream,
    Codec,
    CodecConfig,
    FrameResult,
    Mode,
    decode_video,
    encode_video,
    load_checkpoint,
    save_checkpoint,
)
from .errors import (
    CodecError,
    ConfigurationError,
    DecodeError,
    EvaluationError,
    IngestionError,
    InputError,
    VersionError,
)
from .evalkit import RDCurve, RDRecord, bd_rate, msssim_db, rates, run_ablation
from .frame_model import (
    ColorSpace,
    Frame,
    FrameType,
    RawVideo,
    ScheduleConfig,
    build_schedule,
    load_raw_video,
    save_raw_video,
    validate_schedule,
)
from .motion import predict, warp
from .training import AlphaForcing, LossConfig, TrainHyperparams, force_alpha, ms_ssim, rd_loss, train

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "Bitstream", "Codec", "CodecConfig", "FrameResult", "Mode", "decode_video",
    "encode_video", "load_checkpoint", "save_checkpoint",
    "CodecError", "ConfigurationError", "DecodeError", "EvaluationError", "IngestionError",
    "InputError", "VersionError",
    "RDCurve", "RDRecord", "bd_rate", "msssim_db", "rates", "run_ablation",
    "ColorSpace", "Frame", "FrameType", "RawVideo", "ScheduleConfig", "build_schedule",
    "load_raw_video", "save_raw_video", "validate_schedule",
    "predict", "warp",
    "AlphaForcing", "LossConfig", "TrainHyperparams", "force_alpha", "ms_ssim", "rd_loss", "train",
]
