"""MS-SSIM distortion, rate-distortion loss, alpha forcing and the training loop."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from collections.abc import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .codec import ArchConfig, Codec, CodecConfig, FrameResult, save_checkpoint
from .errors import ConfigurationError, InputError
from .frame_model import Frame, FrameType, RawVideo

log = logging.getLogger(__name__)

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
MIN_SCALE_SIZE = 8
SSIM_FLOOR = 1e-8


# ---------------------------------------------------------------------------
# MS-SSIM


def default_weights(scales: int) -> tuple[float, ...]:
    if not 1 <= scales <= len(MSSSIM_WEIGHTS):
        raise ConfigurationError(f"scales must be in [1, {len(MSSSIM_WEIGHTS)}], got {scales}")
    w = np.asarray(MSSSIM_WEIGHTS[:scales])
    return tuple(float(v) for v in w / w.sum())


def default_scales(size: int) -> int:
    """5 scales on frames of at least 160 px, 3 on smaller training crops."""
    return 5 if size >= 160 else 3


def window_size(h: int, w: int, win: int = SSIM_WINDOW) -> int:
    """Gaussian window used at a scale: ``win``, shrunk to the largest odd size that fits."""
    k = min(win, h, w)
    return k if k % 2 else k - 1


def gaussian_window(size: int, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - size // 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _ssim_terms(x, y, data_range):
    c = x.shape[1]
    k = window_size(x.shape[-2], x.shape[-1])
    g = gaussian_window(k, dtype=x.dtype).to(x.device)
    wh = g.view(1, 1, 1, k).repeat(c, 1, 1, 1)
    wv = g.view(1, 1, k, 1).repeat(c, 1, 1, 1)

    def blur(t):
        return F.conv2d(F.conv2d(t, wh, groups=c), wv, groups=c)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x * mu_x
    syy = blur(y * y) - mu_y * mu_y
    sxy = blur(x * y) - mu_x * mu_y
    cs_map = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    return (lum * cs_map).mean(dim=(-2, -1)), cs_map.mean(dim=(-2, -1))


def ms_ssim(x, y, scales: int | None = None, weights: Sequence[float] | None = None,
            data_range: float = 1.0):
    """Multi-scale SSIM of ``x`` and ``y`` (CxHxW or BxCxHxW, values in [0, data_range]).

    Per-scale contrast-structure terms (and the luminance term at the coarsest
    scale) are averaged over pixels, floored at a small positive value,
    combined with the scale weights, then averaged over channels. Scales are
    separated by 2x2 average pooling. Returns a scalar for unbatched inputs,
    one value per batch element otherwise.
    """
    xb = x.data if isinstance(x, Frame) else x
    yb = y.data if isinstance(y, Frame) else y
    if xb.shape != yb.shape:
        raise InputError(f"ms_ssim inputs differ in shape: {tuple(xb.shape)} vs {tuple(yb.shape)}")
    squeeze = xb.ndim == 3
    if squeeze:
        xb, yb = xb.unsqueeze(0), yb.unsqueeze(0)
    if yb.dtype != xb.dtype:
        yb = yb.to(xb.dtype)
    if scales is None:
        scales = len(weights) if weights is not None else default_scales(min(xb.shape[-2:]))
    if weights is None:
        weights = default_weights(scales)
    if len(weights) != scales:
        raise ConfigurationError(f"{len(weights)} weights given for {scales} scales")
    min_size = MIN_SCALE_SIZE * 2 ** (scales - 1)
    if min(xb.shape[-2:]) < min_size:
        raise ConfigurationError(
            f"{scales} scales need frames of at least {min_size}x{min_size}, got {tuple(xb.shape[-2:])}"
        )
    w = torch.as_tensor(weights, dtype=xb.dtype, device=xb.device)
    terms = []
    for j in range(scales):
        ssim_val, cs_val = _ssim_terms(xb, yb, data_range)
        if j < scales - 1:
            terms.append(cs_val)
            xb = F.avg_pool2d(xb, 2)
            yb = F.avg_pool2d(yb, 2)
        else:
            terms.append(ssim_val)
    stacked = torch.stack(terms, dim=0).clamp_min(SSIM_FLOOR)  # scales x B x C
    score = torch.prod(stacked ** w.view(-1, 1, 1), dim=0).mean(dim=1)
    return score[0] if squeeze else score


# ---------------------------------------------------------------------------
# Loss


@dataclass
class LossConfig:
    lam: float
    msssim_scales: int = 3
    msssim_weights: tuple[float, ...] | None = None
    distortion: str = "msssim"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be non-negative, got {self.lam}")
        if self.distortion != "msssim":
            raise ConfigurationError(f"unsupported distortion {self.distortion!r}")
        if self.msssim_weights is None:
            self.msssim_weights = default_weights(self.msssim_scales)
        self.msssim_weights = tuple(self.msssim_weights)
        if len(self.msssim_weights) != self.msssim_scales:
            raise ConfigurationError("one MS-SSIM weight per scale is required")
        if not math.isclose(sum(self.msssim_weights), 1.0, abs_tol=1e-9):
            raise ConfigurationError("MS-SSIM weights must sum to 1")


def _as_batch(t):
    t = t.data if isinstance(t, Frame) else t
    return t.unsqueeze(0) if t.ndim == 3 else t


def loss_terms(frame_results: Sequence[FrameResult], originals, cfg: LossConfig) -> list[dict]:
    """Per-frame distortion (1 - MS-SSIM) and rates in bits per pixel, batch-averaged."""
    if len(frame_results) != len(originals):
        raise InputError("frame_results and originals must be aligned")
    rows = []
    for res, orig in zip(frame_results, originals):
        x = _as_batch(orig)
        xhat = _as_batch(res.reconstruction)
        n_pix = x.shape[-2] * x.shape[-1]
        d = (1 - ms_ssim(x, xhat, cfg.msssim_scales, cfg.msssim_weights)).mean()
        r_m = torch.as_tensor(res.rate_motion_bits, dtype=d.dtype).mean() / n_pix
        r_c = torch.as_tensor(res.rate_texture_bits, dtype=d.dtype).mean() / n_pix
        rows.append({"D": d, "R_m_bpp": r_m, "R_c_bpp": r_c, "frame_type": res.frame_type})
    return rows


def rd_loss(frame_results: Sequence[FrameResult], originals, cfg: LossConfig):
    """``sum_t D(x_t, x_hat_t) + lambda * (R_m + R_c)`` with ``D = 1 - MS-SSIM`` and rates in bpp."""
    rows = loss_terms(frame_results, originals, cfg)
    dist = sum(r["D"] for r in rows)
    rate = sum(r["R_m_bpp"] + r["R_c_bpp"] for r in rows)
    if cfg.lam == 0:
        return dist
    return dist + cfg.lam * rate


# ---------------------------------------------------------------------------
# Alpha forcing

FORCE_ZERO, FORCE_ONE, FREE = 0, 1, -1


@dataclass
class AlphaForcing:
    """Override alpha during the first ``active_iterations`` iterations.

    ``layout`` is ``"halves"`` (left half Skip, right half CNet) or an
    explicit HxW integer mask with values FORCE_ZERO / FORCE_ONE / FREE.
    """

    active_iterations: int = 2000
    layout: object = "halves"

    def mask(self, height: int, width: int) -> torch.Tensor:
        if isinstance(self.layout, str):
            if self.layout != "halves":
                raise ConfigurationError(f"unknown alpha forcing layout {self.layout!r}")
            m = torch.full((height, width), FORCE_ONE, dtype=torch.int64)
            m[:, : width // 2] = FORCE_ZERO
            return m
        m = torch.as_tensor(self.layout, dtype=torch.int64)
        if m.shape != (height, width):
            raise InputError(f"forcing mask is {tuple(m.shape)}, frame is {height}x{width}")
        return m


def force_alpha(alpha, iteration: int, forcing: AlphaForcing | None):
    """Replace alpha by 0 / 1 on the forced regions while forcing is active.

    Forced pixels are constants, so no gradient reaches MNet through them;
    free pixels keep MNet's alpha (and its gradient) untouched.
    """
    if forcing is None or iteration >= forcing.active_iterations:
        return alpha
    m = forcing.mask(alpha.shape[-2], alpha.shape[-1]).to(alpha.device)
    m = m.expand_as(alpha)
    out = torch.where(m == FORCE_ONE, torch.ones_like(alpha), alpha)
    return torch.where(m == FORCE_ZERO, torch.zeros_like(alpha), out)


# ---------------------------------------------------------------------------
# Synthetic data


def _texture_clip(rng: np.random.Generator, n_frames: int, size: int, max_velocity: int,
                  fps: float) -> RawVideo:
    margin = max_velocity * n_frames
    full = size + 2 * margin
    blur = rng.uniform(1.5, 4.0)
    base = gaussian_filter(rng.standard_normal((3, full, full)), sigma=(0, blur, blur), mode="wrap")
    mix = rng.uniform(-1, 1, (3, 3)) + np.eye(3)
    tex = np.einsum("ij,jhw->ihw", mix, base)
    tex = (tex - tex.min()) / (tex.max() - tex.min() + 1e-12)
    tex = 0.1 + 0.8 * tex
    vx, vy = rng.integers(-max_velocity, max_velocity + 1, size=2)
    frames = []
    for t in range(n_frames):
        oy, ox = margin + t * vy, margin + t * vx
        patch = tex[:, oy:oy + size, ox:ox + size].astype(np.float32)
        frames.append(Frame(torch.from_numpy(np.ascontiguousarray(patch))))
    return RawVideo(tuple(frames), fps)


def translating_texture_clips(n_clips: int, n_frames: int = 8, size: int = 64,
                              max_velocity: int = 2, seed: int = 0, fps: float = 25.0) -> list[RawVideo]:
    """Clips of a smooth random color texture translating at a constant integer velocity."""
    rng = np.random.default_rng(seed)
    return [_texture_clip(rng, n_frames, size, max_velocity, fps) for _ in range(n_clips)]


class TextureClipDataset(Sequence):
    """Lazily generated translating-texture clips; clip ``i`` depends only on ``(seed, i)``.

    Behaves like a list of :class:`RawVideo` without holding the clips in
    memory, so training can draw from a practically unbounded set.
    """

    def __init__(self, n_clips: int = 100_000, n_frames: int = 3, size: int = 64,
                 max_velocity: int = 2, seed: int = 0, fps: float = 25.0):
        self.n_clips, self.n_frames, self.size = n_clips, n_frames, size
        self.max_velocity, self.seed, self.fps = max_velocity, seed, fps

    def __len__(self) -> int:
        return self.n_clips

    def __getitem__(self, idx):
        if not 0 <= idx < self.n_clips:
            raise IndexError(idx)
        rng = np.random.default_rng([self.seed, int(idx)])
        return _texture_clip(rng, self.n_frames, self.size, self.max_velocity, self.fps)


def constant_color_clips(n_clips: int, n_frames: int = 3, size: int = 64, seed: int = 0) -> list[RawVideo]:
    rng = np.random.default_rng(seed)
    clips = []
    for _ in range(n_clips):
        color = torch.from_numpy(rng.uniform(0.1, 0.9, 3).astype(np.float32)).view(3, 1, 1)
        frame = Frame(color.expand(3, size, size).clone())
        clips.append(RawVideo((frame,) * n_frames, 25.0))
    return clips


# ---------------------------------------------------------------------------
# Training

# coding order of one training sample: (position in the triplet, type, past, future)
TRAINING_STEPS = ((0, FrameType.I, None, None), (2, FrameType.P, 0, None), (1, FrameType.B, 0, 2))


@dataclass
class TrainHyperparams:
    iterations: int = 2000
    batch_size: int = 4
    crop: int = 64
    lr: float = 1e-3
    seed: int = 0
    alpha_forcing_iterations: int = 2000
    msssim_scales: int | None = None
    grad_clip: float = 1.0
    checkpoint_every: int = 100
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ArchConfig(**self.arch)
        if self.crop % self.arch.downsampling:
            raise ConfigurationError(f"crop {self.crop} must be a multiple of {self.arch.downsampling}")
        if self.msssim_scales is None:
            self.msssim_scales = default_scales(self.crop)
        if self.crop < MIN_SCALE_SIZE * 2 ** (self.msssim_scales - 1):
            raise ConfigurationError(f"crop {self.crop} too small for {self.msssim_scales} MS-SSIM scales")


@dataclass
class TrainResult:
    codecs: dict[float, Codec]
    checkpoints: dict[float, Path]
    logs: dict[float, list[dict]]
    diverged: dict[float, bool]
    seconds: float = 0.0


def sample_triplets(dataset: Sequence[RawVideo], batch_size: int, crop: int,
                    rng: np.random.Generator) -> list[torch.Tensor]:
    """Three consecutive frames from random clips with a shared random crop per sample."""
    out = [[], [], []]
    for _ in range(batch_size):
        clip = dataset[rng.integers(len(dataset))]
        if len(clip) < 3:
            raise InputError("training clips need at least 3 frames")
        if clip.height < crop or clip.width < crop:
            raise InputError(f"clip {clip.height}x{clip.width} smaller than crop {crop}")
        t = rng.integers(len(clip) - 2)
        oy = rng.integers(clip.height - crop + 1)
        ox = rng.integers(clip.width - crop + 1)
        for k in range(3):
            out[k].append(clip.frames[t + k].data[:, oy:oy + crop, ox:ox + crop])
    return [torch.stack(f) for f in out]


def code_triplet(codec: Codec, frames: Sequence[torch.Tensor], mode: str = "train",
                 iteration: int = 0, forcing: AlphaForcing | None = None) -> list[FrameResult]:
    """Code frames (0, 2, 1) as I, P, B with decoded frames as references.

    Returns results ordered by display position.
    """
    decoded: dict[int, torch.Tensor] = {}
    results: dict[int, FrameResult] = {}
    for pos, ftype, past, future in TRAINING_STEPS:
        override = None
        if forcing is not None and codec.config.skip and ftype is not FrameType.I:
            override = lambda a: force_alpha(a, iteration, forcing)  # noqa: E731
        res = codec.code_frame(
            frames[pos],
            None if past is None else decoded[past],
            None if future is None else decoded[future],
            ftype, mode=mode, alpha_override=override,
        )
        decoded[pos] = res.reconstruction
        results[pos] = res
    return [results[k] for k in range(3)]


def train_one(codec: Codec, dataset: Sequence[RawVideo], lam: float, hp: TrainHyperparams,
              progress: bool = False) -> tuple[list[dict], bool]:
    """Optimize ``codec`` in place for one lambda. Returns ``(log_rows, diverged)``."""
    rng = np.random.default_rng(hp.seed)
    loss_cfg = LossConfig(lam, hp.msssim_scales)
    forcing = AlphaForcing(hp.alpha_forcing_iterations)
    opt = torch.optim.Adam(codec.parameters(), lr=hp.lr)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=[int(hp.iterations * 0.8)], gamma=0.2)
    codec.train()
    rows: list[dict] = []
    last_good = copy.deepcopy(codec.state_dict())
    for it in range(hp.iterations):
        frames = sample_triplets(dataset, hp.batch_size, hp.crop, rng)
        results = code_triplet(codec, frames, "train", it, forcing)
        terms = loss_terms(results, frames, loss_cfg)
        loss = sum(t["D"] + lam * (t["R_m_bpp"] + t["R_c_bpp"]) for t in terms)
        if not torch.isfinite(loss):
            log.warning("non-finite loss at iteration %d, restoring last finite checkpoint", it)
            codec.load_state_dict(last_good)
            return rows, True
        opt.zero_grad()
        loss.backward()
        if hp.grad_clip:
            torch.nn.utils.clip_grad_norm_(codec.parameters(), hp.grad_clip)
        opt.step()
        sched.step()
        lv = float(loss.detach())
        for t in terms:
            rows.append({"iteration": it, "loss": lv, "D": float(t["D"].detach()),
                         "R_m_bpp": float(t["R_m_bpp"].detach()), "R_c_bpp": float(t["R_c_bpp"].detach()),
                         "frame_type": t["frame_type"].value})
        if hp.checkpoint_every and (it + 1) % hp.checkpoint_every == 0:
            last_good = copy.deepcopy(codec.state_dict())
            if progress:
                log.info("it %d loss %.4f", it + 1, lv)
    codec.eval()
    return rows, False


def train(dataset: Sequence[RawVideo], lambda_values: Sequence[float], config, hyperparams=None,
          out_dir=None, progress: bool = False) -> TrainResult:
    """Train one codec per lambda; optionally write checkpoints and CSV logs to ``out_dir``."""
    hp = hyperparams or TrainHyperparams()
    if not isinstance(config, CodecConfig):
        config = CodecConfig.from_mode(config)
    start = time.time()
    codecs, ckpts, logs, diverged = {}, {}, {}, {}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for lam in lambda_values:
        torch.manual_seed(hp.seed)
        codec = Codec(config, hp.arch)
        rows, div = train_one(codec, dataset, lam, hp, progress)
        codecs[lam], logs[lam], diverged[lam] = codec, rows, div
        if out is not None:
            stem = f"{config.mode.value.lower()}_lambda{lam:g}"
            ckpts[lam] = out / f"{stem}.pt"
            save_checkpoint(codec, ckpts[lam])
            write_log_csv(rows, out / f"{stem}.csv")
    return TrainResult(codecs, ckpts, logs, diverged, time.time() - start)


LOG_COLUMNS = ("iteration", "loss", "D", "R_m_bpp", "R_c_bpp", "frame_type")


def write_log_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def iteration_losses(rows: Sequence[dict]) -> np.ndarray:
    """One loss value per iteration from the per-frame log rows."""
    seen = {}
    for r in rows:
        seen[r["iteration"]] = r["loss"]
    return np.array([seen[k] for k in sorted(seen)])


@torch.no_grad()
def evaluate_rd(codec: Codec, clips: Sequence[RawVideo], lam: float, scales: int = 3,
                mode: str = "infer") -> dict:
    """Mean RD loss over the first I/P/B triplet of each clip (actual bits in infer mode).

    Also reports distortion and rate per frame type.
    """
    codec.eval()
    cfg = LossConfig(lam, scales)
    totals: dict[str, list[float]] = {"loss": [], "D": [], "bpp": []}
    for clip in clips:
        frames = [clip.frames[k].data.unsqueeze(0) for k in range(3)]
        results = code_triplet(codec, frames, mode)
        terms = loss_terms(results, frames, cfg)
        d = r = 0.0
        for t in terms:
            ft = t["frame_type"].value
            rate = float(t["R_m_bpp"] + t["R_c_bpp"])
            totals.setdefault(f"D_{ft}", []).append(float(t["D"]))
            totals.setdefault(f"bpp_{ft}", []).append(rate)
            d += float(t["D"])
            r += rate
        totals["loss"].append(d + lam * r)
        totals["D"].append(d)
        totals["bpp"].append(r)
    return {k: float(np.mean(v)) for k, v in totals.items()}


# ---------------------------------------------------------------------------
# Config file


def parse_config_file(path) -> dict:
    """Read a ``key = value`` training config (``#`` comments allowed)."""
    cfg: dict = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg[key] = value
    return cfg


def hyperparams_from_config(cfg: dict) -> tuple[list[float], str, TrainHyperparams]:
    """Turn a parsed config into ``(lambdas, mode, hyperparams)``."""
    known = {"lambda", "lambdas", "mode", "crop", "iterations", "seed", "alpha_forcing",
             "batch_size", "lr", "latent_channels", "hyper_channels", "hidden", "downsampling",
             "attention", "msssim_scales", "data", "clips", "frames", "size", "out"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    lams = [float(v) for v in cfg.get("lambdas", cfg.get("lambda", "0.05")).replace(",", " ").split()]
    mode = cfg.get("mode", "AIVC")
    arch = ArchConfig(
        latent_channels=int(cfg.get("latent_channels", 32)),
        hyper_channels=int(cfg.get("hyper_channels", 16)),
        hidden=int(cfg.get("hidden", 32)),
        downsampling=int(cfg.get("downsampling", 16)),
        attention=cfg.get("attention", "false").lower() in ("1", "true", "yes", "on"),
    )
    hp = TrainHyperparams(
        iterations=int(cfg.get("iterations", 2000)),
        batch_size=int(cfg.get("batch_size", 4)),
        crop=int(cfg.get("crop", 64)),
        lr=float(cfg.get("lr", 1e-3)),
        seed=int(cfg.get("seed", 0)),
        alpha_forcing_iterations=int(cfg.get("alpha_forcing", 2000)),
        msssim_scales=int(cfg["msssim_scales"]) if "msssim_scales" in cfg else None,
        arch=arch,
    )
    return lams, mode, hp


def hyperparams_dict(hp: TrainHyperparams) -> dict:
    return asdict(hp)
