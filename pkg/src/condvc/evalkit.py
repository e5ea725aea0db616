"""RD metrics, BD-rate and the ablation runner."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from scipy.interpolate import PchipInterpolator

from .codec import (
    FRAME_HEADER_BYTES,
    SEQUENCE_HEADER_BYTES,
    Codec,
    Mode,
    encode_video,
    load_checkpoint,
    parse_mode,
)
from .errors import ConfigurationError, EvaluationError, InputError
from .frame_model import RawVideo, ScheduleConfig, build_schedule
from .training import MIN_SCALE_SIZE, ms_ssim

log = logging.getLogger(__name__)


def msssim_db(value: float) -> float:
    """``-10 log10(1 - value)``; +inf for a perfect score."""
    value = float(value)
    if not value <= 1.0:
        raise EvaluationError(f"MS-SSIM above 1 is not valid: {value}")
    if value == 1.0:
        return math.inf
    # decimal arithmetic on the shortest repr keeps round inputs exact (0.99 -> 20 dB)
    return float(-10 * (1 - Decimal(repr(value))).log10())


def rates(total_bits: float, n_frames: int, height: int, width: int, fps: float) -> tuple[float, float]:
    """``(bits per pixel, Mbit/s)``."""
    if n_frames <= 0 or height <= 0 or width <= 0 or fps <= 0:
        raise EvaluationError("n_frames, height, width and fps must be positive")
    if total_bits < 0:
        raise EvaluationError("total_bits must be non-negative")
    bpp = total_bits / (n_frames * height * width)
    mbps = total_bits * fps / (n_frames * 1e6)
    return bpp, mbps


def eval_scales(height: int, width: int) -> int:
    """5 MS-SSIM scales on full-size frames, fewer (at most 3) on small ones."""
    size = min(height, width)
    if size >= 160:
        return 5
    for s in (3, 2, 1):
        if size >= MIN_SCALE_SIZE * 2 ** (s - 1):
            return s
    raise EvaluationError(f"frames of {height}x{width} are too small for MS-SSIM")


@dataclass
class RDRecord:
    rate_bpp: float
    rate_mbps: float
    msssim: float
    msssim_db: float
    label: str = ""
    lam: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        if math.isinf(d["msssim_db"]):
            d["msssim_db"] = "inf"
        return json.dumps(d)


@dataclass
class RDCurve:
    records: list[RDRecord]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.records = sorted(self.records, key=lambda r: r.rate_bpp)
        r = [rec.rate_bpp for rec in self.records]
        if any(b <= a for a, b in zip(r, r[1:])):
            raise EvaluationError("RD curve rates must be strictly increasing")

    def __len__(self):
        return len(self.records)

    @property
    def rate(self) -> np.ndarray:
        return np.array([r.rate_bpp for r in self.records])

    @property
    def quality(self) -> np.ndarray:
        return np.array([r.msssim_db for r in self.records])


def _log_rate_integral(q: np.ndarray, log_r: np.ndarray, lo: float, hi: float) -> float:
    order = np.argsort(q)
    q, log_r = q[order], log_r[order]
    if np.any(np.diff(q) <= 0):
        raise EvaluationError("BD-rate needs distinct quality values")
    if q.size >= 4:
        poly = np.polyint(np.polyfit(q, log_r, 3))
        return float(np.polyval(poly, hi) - np.polyval(poly, lo))
    return float(PchipInterpolator(q, log_r).integrate(lo, hi))


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average rate difference of ``test`` against ``anchor`` at equal MS-SSIM_dB, in percent.

    log10(rate) is fitted as a function of quality (cubic polynomial with at
    least 4 points, monotone piecewise cubic with 2 or 3) and integrated over
    the overlapping quality interval. Negative means ``test`` needs fewer bits.
    """
    for c, name in ((anchor, "anchor"), (test, "test")):
        if len(c) < 2:
            raise EvaluationError(f"{name} curve needs at least 2 points, has {len(c)}")
        if not np.all(np.isfinite(c.quality)) or np.any(c.rate <= 0):
            raise EvaluationError(f"{name} curve has non-finite quality or non-positive rate")
    qa, qt = anchor.quality, test.quality
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if not hi > lo:
        raise EvaluationError("RD curves do not overlap in quality")
    ia = _log_rate_integral(qa, np.log10(anchor.rate), lo, hi)
    it = _log_rate_integral(qt, np.log10(test.rate), lo, hi)
    return (10 ** ((it - ia) / (hi - lo)) - 1) * 100


def _frames_tensor(video) -> torch.Tensor:
    if isinstance(video, RawVideo):
        return video.as_tensor()
    t = torch.as_tensor(video)
    return t.unsqueeze(0) if t.ndim == 3 else t


def mean_msssim(recon, orig, scales: int | None = None) -> float:
    """Frame-averaged MS-SSIM, computed in float64."""
    r = _frames_tensor(recon).double()
    o = _frames_tensor(orig).double()
    if r.shape != o.shape:
        raise InputError(f"reconstruction {tuple(r.shape)} and original {tuple(o.shape)} differ")
    scales = scales or eval_scales(o.shape[-2], o.shape[-1])
    return float(ms_ssim(o, r, scales).mean())


def evaluate(recon, orig, total_bits: float | None = None, fps: float | None = None,
             label: str = "", lam: float | None = None) -> RDRecord:
    """RD record of a reconstructed video against its original."""
    o = _frames_tensor(orig)
    q = mean_msssim(recon, orig)
    if fps is None:
        fps = orig.fps if isinstance(orig, RawVideo) else 1.0
    bpp, mbps = (math.nan, math.nan)
    if total_bits is not None:
        bpp, mbps = rates(total_bits, o.shape[0], o.shape[-2], o.shape[-1], fps)
    return RDRecord(bpp, mbps, q, msssim_db(q), label, lam)


# ---------------------------------------------------------------------------
# Ablation


@dataclass
class AblationReport:
    curves: dict[str, RDCurve]
    bd_rates: dict[str, float | None]
    points: list[dict]
    frames: list[dict]
    absent: list[tuple[str, float]]
    anchor: str = Mode.RESIDUAL.value


def _load(entry):
    if entry is None or isinstance(entry, Codec):
        return entry
    path = Path(entry)
    if not path.exists():
        return None
    return load_checkpoint(path)


def run_ablation(checkpoints: Mapping[tuple[str, float], object], eval_set: Sequence[RawVideo],
                 intra_period: int = 4, gop_size: int = 4, out_dir=None,
                 anchor: str = Mode.RESIDUAL.value) -> AblationReport:
    """Encode ``eval_set`` under Random Access with every (mode, lambda) codec.

    ``checkpoints`` maps ``(mode, lambda)`` to a Codec, a checkpoint path or
    None. Missing entries are listed as absent and skipped. Bits are pooled
    over the eval set; MS-SSIM is averaged over all frames.
    """
    if not eval_set:
        raise EvaluationError("empty eval set")
    points, frames, absent = [], [], []
    by_mode: dict[str, list[RDRecord]] = {}
    for (mode, lam), entry in sorted(checkpoints.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        mode = parse_mode(mode).value
        codec = _load(entry)
        if codec is None:
            log.warning("checkpoint for %s lambda %g missing, marked absent", mode, lam)
            absent.append((mode, lam))
            continue
        if codec.config.mode.value != mode:
            raise ConfigurationError(f"checkpoint listed as {mode} is a {codec.config.mode.value} codec")
        total_bits = 0
        n_pixels = 0
        n_frames = 0
        scores = []
        seconds = 0.0
        for seq, video in enumerate(eval_set):
            sched = build_schedule(ScheduleConfig.RA, len(video), intra_period, gop_size)
            with torch.no_grad():
                enc = encode_video(video, sched, codec)
            stream_bytes = len(enc.bitstream.to_bytes())
            total_bits += 8 * stream_bytes
            n_pixels += len(video) * video.height * video.width
            n_frames += len(video)
            seconds += len(video) / video.fps
            rec = torch.stack([enc.reconstructions[i] for i in range(len(video))])
            scales = eval_scales(video.height, video.width)
            per_frame = ms_ssim(video.as_tensor().double(), rec.double(), scales)
            scores.extend(per_frame.tolist())
            for row in enc.frame_stats():
                row.update({"mode": mode, "lambda": lam, "sequence": seq,
                            "msssim": float(per_frame[row["display_index"]])})
                frames.append(row)
            header_bytes = SEQUENCE_HEADER_BYTES + FRAME_HEADER_BYTES * len(video)
            frames.append({"mode": mode, "lambda": lam, "sequence": seq, "display_index": -1,
                           "frame_type": "header", "rate_motion_bits": 0, "rate_texture_bits": 0,
                           "frame_bytes": header_bytes, "msssim": math.nan})
        q = float(np.mean(scores))
        rec = RDRecord(total_bits / n_pixels, total_bits / seconds / 1e6, q, msssim_db(q), mode, lam)
        by_mode.setdefault(mode, []).append(rec)
        points.append({"mode": mode, "lambda": lam, "rate_bpp": rec.rate_bpp,
                       "rate_mbps": rec.rate_mbps, "msssim": q, "msssim_db": rec.msssim_db,
                       "total_bits": total_bits, "n_frames": n_frames})

    curves = {}
    for mode, recs in by_mode.items():
        try:
            curves[mode] = RDCurve(recs, {"schedule": "RA", "intra_period": intra_period, "gop": gop_size})
        except EvaluationError as exc:
            log.warning("curve for %s unusable: %s", mode, exc)
    bd: dict[str, float | None] = {}
    for mode in curves:
        if anchor not in curves:
            bd[mode] = None
            continue
        try:
            bd[mode] = bd_rate(curves[anchor], curves[mode])
        except EvaluationError as exc:
            log.warning("BD-rate for %s unavailable: %s", mode, exc)
            bd[mode] = None
    report = AblationReport(curves, bd, points, frames, absent, anchor)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def _write_csv(rows: Sequence[dict], path: Path, columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def write_report(report: AblationReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(report.points, out / "rd_points.csv",
               ("mode", "lambda", "rate_bpp", "rate_mbps", "msssim", "msssim_db", "total_bits", "n_frames"))
    _write_csv(report.frames, out / "frames.csv",
               ("mode", "lambda", "sequence", "display_index", "frame_type",
                "rate_motion_bits", "rate_texture_bits", "frame_bytes", "msssim"))
    bd_rows = [{"mode": m, "anchor": report.anchor, "bd_rate_percent": "" if v is None else v}
               for m, v in report.bd_rates.items()]
    _write_csv(bd_rows, out / "bd_rates.csv", ("mode", "anchor", "bd_rate_percent"))
    summary = {
        "anchor": report.anchor,
        "bd_rates": report.bd_rates,
        "points": report.points,
        "absent": [{"mode": m, "lambda": lam} for m, lam in report.absent],
    }
    (out / "report.json").write_text(json.dumps(summary, indent=2, default=str))
    plot_curves(report.curves, out / "ablation.svg")
    return out


def plot_curves(curves: Mapping[str, RDCurve], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for mode, curve in curves.items():
        ax.plot(curve.rate, curve.quality, marker="o", label=mode)
    ax.set_xlabel("rate [bpp]")
    ax.set_ylabel("MS-SSIM [dB]")
    ax.grid(True, alpha=0.3)
    if curves:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
