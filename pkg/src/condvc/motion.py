"""Bilinear backward warping and bi-directional motion-compensated prediction.

Flows are in pixels: channel 0 is the horizontal displacement ``dx`` and
channel 1 the vertical displacement ``dy``. All functions accept unbatched
``CxHxW`` or batched ``BxCxHxW`` tensors (or :class:`Frame` objects).
"""

from __future__ import annotations

import colorsys

import numpy as np
import torch

from .errors import InputError
from .frame_model import Frame


def _as_batched(x):
    data = x.data if isinstance(x, Frame) else torch.as_tensor(x)
    if data.ndim == 3:
        return data.unsqueeze(0), True
    if data.ndim == 4:
        return data, False
    raise InputError(f"expected CxHxW or BxCxHxW tensor, got shape {tuple(data.shape)}")


def _wrap(out, squeeze, like):
    out = out[0] if squeeze else out
    if isinstance(like, Frame):
        return Frame(out, like.color_space)
    return out


def warp(frame, flow):
    """Backward-warp ``frame`` by ``flow`` with bilinear sampling and border clamp.

    ``out[c, i, j] = frame[c, i + dy[i, j], j + dx[i, j]]`` where the sampling
    position is clamped to the image and interpolated bilinearly. At zero flow
    the output is bit-identical to the input.
    """
    img, squeeze = _as_batched(frame)
    fl, _ = _as_batched(flow)
    if fl.shape[1] != 2:
        raise InputError(f"flow must have 2 channels, got {fl.shape[1]}")
    if img.shape[-2:] != fl.shape[-2:]:
        raise InputError(f"frame {tuple(img.shape[-2:])} and flow {tuple(fl.shape[-2:])} differ in size")
    if fl.shape[0] != img.shape[0]:
        fl = fl.expand(img.shape[0], -1, -1, -1)
    b, c, h, w = img.shape
    fl = fl.to(img.dtype)

    rows = torch.arange(h, dtype=img.dtype, device=img.device).view(1, h, 1)
    cols = torch.arange(w, dtype=img.dtype, device=img.device).view(1, 1, w)
    y = (rows + fl[:, 1]).clamp(0, h - 1)
    x = (cols + fl[:, 0]).clamp(0, w - 1)
    y0f = y.detach().floor()
    x0f = x.detach().floor()
    wy = (y - y0f).unsqueeze(1)
    wx = (x - x0f).unsqueeze(1)
    y0 = y0f.long()
    x0 = x0f.long()
    y1 = (y0 + 1).clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)

    flat = img.reshape(b, c, h * w)

    def tap(yy, xx):
        idx = (yy * w + xx).view(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).view(b, c, h, w)

    top = tap(y0, x0) * (1 - wx) + tap(y0, x1) * wx
    bottom = tap(y1, x0) * (1 - wx) + tap(y1, x1) * wx
    out = top * (1 - wy) + bottom * wy
    return _wrap(out, squeeze, frame)


def predict(past, future, v_p, v_f, beta):
    """Temporal prediction ``beta * warp(past, v_p) + (1 - beta) * warp(future, v_f)``.

    ``beta`` (1 channel) is broadcast across color channels.
    """
    p, squeeze = _as_batched(past)
    f, _ = _as_batched(future)
    bt, _ = _as_batched(beta)
    if p.shape != f.shape:
        raise InputError(f"reference shapes differ: {tuple(p.shape)} vs {tuple(f.shape)}")
    if bt.shape[1] != 1 or bt.shape[-2:] != p.shape[-2:]:
        raise InputError(f"beta must be 1xHxW matching the references, got {tuple(bt.shape)}")
    warped_p = warp(p, v_p)
    warped_f = warp(f, v_f)
    out = bt * warped_p + (1 - bt) * warped_f
    return _wrap(out, squeeze, past)


def flow_to_rgb(flow, max_magnitude: float | None = None) -> np.ndarray:
    """Map a 2xHxW flow to an HxWx3 uint8 image (hue = direction, value = magnitude)."""
    fl = torch.as_tensor(flow).detach().double().cpu().numpy()
    dx, dy = fl[0], fl[1]
    mag = np.hypot(dx, dy)
    scale = max_magnitude or (mag.max() if mag.max() > 0 else 1.0)
    hue = (np.arctan2(dy, dx) / (2 * np.pi)) % 1.0
    val = np.clip(mag / scale, 0.0, 1.0)
    to_rgb = np.vectorize(lambda h, v: colorsys.hsv_to_rgb(h, 1.0, v), otypes=[float, float, float])
    r, g, b = to_rgb(hue, val)
    return np.round(np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)
