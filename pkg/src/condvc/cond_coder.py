"""Conditional coder: the autoencoder block shared by the motion and texture networks.

A conditional coder has four learned transforms:

* analysis: encoder-side + decoder-side inputs -> analysis latent ``y``
* conditioning: decoder-side inputs only -> conditioning latent
* synthesis: (quantized ``y``, conditioning latent) -> output
* a mean/scale hyperprior (hyper-analysis, hyper-synthesis, factorized prior)

``y`` is scaled by a per-frame-type, per-channel encoder gain, rounded by a
unit-step quantizer and rescaled by the matching decoder gain. The entropy
model works on the integer lattice index ``k = round(y * enc)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import entropy_coding as ec
from .errors import ConfigurationError, InputError
from .frame_model import FrameType

SIGMA_MIN = ec.SIGMA_MIN
LIKELIHOOD_BOUND = 1e-9
GAIN_MIN = 1e-3
HYPER_HALF_WIDTH = 64
HYPER_DOWNSAMPLING = 4

FRAME_TYPES = (FrameType.I, FrameType.P, FrameType.B)


# ---------------------------------------------------------------------------
# Quantization gains


class QuantGains(nn.Module):
    """Per-frame-type pairs of positive channel-wise gains.

    Each frame type owns separate parameter tensors, so an update to the I
    gains never touches P or B. When disabled all gains are exactly one.
    """

    def __init__(self, channels: int, enabled: bool = True):
        super().__init__()
        self.channels = channels
        self.enabled = enabled
        if enabled:
            self.enc = nn.ParameterDict({t.value: nn.Parameter(torch.ones(channels)) for t in FRAME_TYPES})
            self.dec = nn.ParameterDict({t.value: nn.Parameter(torch.ones(channels)) for t in FRAME_TYPES})

    def get(self, frame_type) -> tuple[torch.Tensor, torch.Tensor]:
        key = FrameType(frame_type).value
        if not self.enabled:
            ones = torch.ones(self.channels)
            return ones, ones
        if key not in self.enc:
            raise ConfigurationError(f"no quantization gains for frame type {key}")
        return self.enc[key].abs().clamp_min(GAIN_MIN), self.dec[key].abs().clamp_min(GAIN_MIN)

    @torch.no_grad()
    def set(self, frame_type, enc, dec) -> None:
        if not self.enabled:
            raise ConfigurationError("quantization gains are disabled for this coder")
        key = FrameType(frame_type).value
        self.enc[key].copy_(torch.as_tensor(enc, dtype=self.enc[key].dtype).expand(self.channels))
        self.dec[key].copy_(torch.as_tensor(dec, dtype=self.dec[key].dtype).expand(self.channels))

    def table(self) -> dict:
        out = {}
        for t in FRAME_TYPES:
            enc, dec = self.get(t)
            out[t.value] = {"enc": enc.tolist(), "dec": dec.tolist()}
        return out


def _channel_view(g: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    shape = [1] * like.ndim
    shape[-3] = -1
    return g.to(like.dtype).view(shape)


def scale_latent(y, gains, frame_type, mode: str, noise=None, surrogate: str = "noise"):
    """Return ``(v, y_hat)`` where ``v`` is the lattice-domain value fed to the entropy model.

    infer: ``v = round(y * enc)``. train: ``v = y * enc + u`` with ``u ~ U(-0.5, 0.5)``
    (or straight-through rounding when ``surrogate == "ste"``). In both cases
    ``y_hat = q * dec`` where ``q`` is the quantized (or noisy) value.
    """
    if isinstance(gains, QuantGains):
        enc, dec = gains.get(frame_type)
    else:
        if FrameType(frame_type).value not in gains:
            raise ConfigurationError(f"no quantization gains for frame type {FrameType(frame_type).value}")
        enc, dec = (torch.as_tensor(g) for g in gains[FrameType(frame_type).value])
    enc = _channel_view(enc, y)
    dec = _channel_view(dec, y)
    scaled = y * enc
    if mode == "infer":
        v = torch.round(scaled)
        return v, v * dec
    if mode != "train":
        raise ConfigurationError(f"unknown quantization mode {mode!r}")
    if surrogate == "ste":
        q = scaled + (torch.round(scaled) - scaled).detach()
        return q, q * dec
    if noise is None:
        noise = torch.empty_like(scaled).uniform_(-0.5, 0.5)
    v = scaled + noise
    return v, v * dec


def quantize_with_gains(y, gains, frame_type, mode: str = "infer", noise=None):
    """Gain-scaled unit-step quantization of ``y`` (see :func:`scale_latent`)."""
    return scale_latent(y, gains, frame_type, mode, noise)[1]


# ---------------------------------------------------------------------------
# Rate


def gaussian_likelihood(v, mu, sigma):
    """Mass of ``N(mu, sigma)`` over ``[v - 0.5, v + 0.5]``, lower-bounded."""
    sigma = sigma.clamp_min(SIGMA_MIN)
    d = (v - mu).abs()
    upper = torch.special.ndtr((0.5 - d) / sigma)
    lower = torch.special.ndtr((-0.5 - d) / sigma)
    return (upper - lower).clamp_min(LIKELIHOOD_BOUND)


def rate_estimate(indices, mu, sigma):
    """Per-symbol bits ``-log2(P(k))`` under a discretized Gaussian, and their total."""
    indices = torch.as_tensor(indices, dtype=torch.float64)
    mu = torch.as_tensor(mu, dtype=indices.dtype)
    sigma = torch.as_tensor(sigma, dtype=indices.dtype)
    if torch.any(sigma < SIGMA_MIN * (1 - 1e-6)):  # tolerate float32 rounding of the floor
        raise InputError(f"sigma must be >= {SIGMA_MIN}")
    bits = -torch.log2(gaussian_likelihood(indices, mu, sigma))
    return bits, bits.sum()


# ---------------------------------------------------------------------------
# Factorized prior for the hyper-latent


class FactorizedPrior(nn.Module):
    """Per-channel learned univariate density, parameterized through its CDF."""

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.empty(channels, dims[i + 1], 1).uniform_(-0.5, 0.5)))
            if i < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def _logits_cdf(self, x):
        # x: C x 1 x N
        logits = x
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            logits = torch.matmul(F.softplus(m.to(x.dtype)), logits) + b.to(x.dtype)
            if i < len(self.factors):
                logits = logits + torch.tanh(self.factors[i].to(x.dtype)) * torch.tanh(logits)
        return logits

    def _mass(self, x):
        lower = self._logits_cdf(x - 0.5)
        upper = self._logits_cdf(x + 0.5)
        sign = -torch.sign(lower + upper).detach()
        return (torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)).abs()

    def likelihood(self, z):
        b, c, h, w = z.shape
        flat = z.permute(1, 0, 2, 3).reshape(c, 1, -1)
        p = self._mass(flat).reshape(c, b, h, w).permute(1, 0, 2, 3)
        return p.clamp_min(LIKELIHOOD_BOUND)

    @torch.no_grad()
    def tables(self, half_width: int = HYPER_HALF_WIDTH) -> list[ec.CodingTable]:
        """One coding table per channel over ``[-half_width, half_width]``."""
        x = torch.arange(-half_width, half_width + 1, dtype=torch.float64)
        x = x.view(1, 1, -1).expand(self.channels, 1, -1)
        pmf = self._mass(x)[:, 0].cpu().numpy()
        lo = torch.sigmoid(self._logits_cdf(x[:, :, :1] - 0.5))[:, 0, 0].cpu().numpy()
        hi = torch.sigmoid(-self._logits_cdf(x[:, :, -1:] + 0.5))[:, 0, 0].cpu().numpy()
        return [ec.CodingTable.from_pmf(pmf[c], float(lo[c] + hi[c])) for c in range(self.channels)]


# ---------------------------------------------------------------------------
# Transforms


def conv(cin, cout, k=3, stride=1):
    return nn.Conv2d(cin, cout, k, stride, k // 2)


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(conv(ch, ch), nn.LeakyReLU(0.1), conv(ch, ch))

    def forward(self, x):
        return x + self.body(x)


class SimpleAttention(nn.Module):
    """Reduced attention block: residual trunk gated by a sigmoid mask branch."""

    def __init__(self, ch: int):
        super().__init__()
        self.trunk = ResBlock(ch)
        self.mask = nn.Sequential(ResBlock(ch), nn.Conv2d(ch, ch, 1))

    def forward(self, x):
        return x + self.trunk(x) * torch.sigmoid(self.mask(x))


class AnalysisTransform(nn.Module):
    def __init__(self, cin: int, hidden: int, cout: int, n_down: int, attention: bool = False):
        super().__init__()
        layers: list[nn.Module] = []
        ch = cin
        for i in range(n_down):
            last = i == n_down - 1
            layers.append(conv(ch, cout if last else hidden, 3, 2))
            if not last:
                layers.append(nn.LeakyReLU(0.1))
                if i == 0:
                    layers.append(ResBlock(hidden))
            if attention and i == n_down // 2 - 1:
                layers.append(SimpleAttention(hidden))
            ch = hidden
        if attention:
            layers.append(SimpleAttention(cout))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class SynthesisTransform(nn.Module):
    def __init__(self, cin: int, hidden: int, cout: int, n_up: int, attention: bool = False):
        super().__init__()
        layers: list[nn.Module] = []
        if attention:
            layers.append(SimpleAttention(cin))
        ch = cin
        for i in range(n_up):
            last = i == n_up - 1
            out = cout if last else hidden
            layers += [conv(ch, out * 4), nn.PixelShuffle(2)]
            if not last:
                layers.append(nn.LeakyReLU(0.1))
                if i == n_up - 2:
                    layers.append(ResBlock(hidden))
            ch = hidden
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class HyperAnalysis(nn.Module):
    def __init__(self, cin: int, hidden: int, cout: int):
        super().__init__()
        self.net = nn.Sequential(
            conv(cin, hidden, 3), nn.LeakyReLU(0.1),
            conv(hidden, hidden, 5, 2), nn.LeakyReLU(0.1),
            conv(hidden, cout, 5, 2),
        )

    def forward(self, y):
        return self.net(y)


class HyperSynthesis(nn.Module):
    def __init__(self, cin: int, hidden: int, latent: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.ConvTranspose2d(cin, hidden, 5, 2, 2, output_padding=1), nn.LeakyReLU(0.1),
            nn.ConvTranspose2d(hidden, hidden, 5, 2, 2, output_padding=1), nn.LeakyReLU(0.1),
            conv(hidden, 2 * latent, 3),
        )

    def forward(self, z_hat, size):
        out = self.net(z_hat)[..., :size[0], :size[1]]
        mu, raw_sigma = out.chunk(2, dim=1)
        return mu, F.softplus(raw_sigma) + SIGMA_MIN


# ---------------------------------------------------------------------------
# Conditional coder


@dataclass
class CoderOutput:
    output: torch.Tensor
    bits: torch.Tensor        # per batch element, latent + hyper-latent
    latent_bits: torch.Tensor
    hyper_bits: torch.Tensor
    y: torch.Tensor
    y_hat: torch.Tensor
    mu: torch.Tensor
    sigma: torch.Tensor
    lattice: torch.Tensor     # v: lattice-domain values (integers in infer mode)


@dataclass
class CoderPayload:
    hyper: bytes
    latent: bytes
    latent_shape: tuple[int, ...]
    hyper_shape: tuple[int, ...]


class CondCoder(nn.Module):
    """Conditional (or plain, when ``conditional=False``) hyperprior autoencoder.

    Args:
        enc_channels: channels of encoder-only inputs (e.g. the frame to code).
        dec_channels: channels of decoder-side inputs (references, prediction).
            Ignored by a plain autoencoder.
        out_channels: channels produced by the synthesis transform.
        latent_channels: ``F``, channels of the analysis latent.
        hyper_channels: channels of the hyper-latent.
        hidden: width of the intermediate layers.
        downsampling: total spatial factor ``s`` of the analysis transform (power of two).
        conditional: add the conditioning transform.
        use_gains: learn per-frame-type quantization gains (unity otherwise).
        attention: insert the simplified attention blocks.
    """

    def __init__(self, enc_channels: int, dec_channels: int, out_channels: int,
                 latent_channels: int = 32, hyper_channels: int = 16, hidden: int = 32,
                 downsampling: int = 16, conditional: bool = True, use_gains: bool = True,
                 attention: bool = False, surrogate: str = "noise"):
        super().__init__()
        n_down = int(round(math.log2(downsampling)))
        if 2 ** n_down != downsampling or n_down < 1:
            raise ConfigurationError(f"downsampling must be a power of two >= 2, got {downsampling}")
        if surrogate not in ("noise", "ste"):
            raise ConfigurationError(f"unknown quantization surrogate {surrogate!r}")
        self.enc_channels = enc_channels
        self.dec_channels = dec_channels if conditional else 0
        self.latent_channels = latent_channels
        self.hyper_channels = hyper_channels
        self.downsampling = downsampling
        self.conditional = conditional
        self.surrogate = surrogate

        self.analysis = AnalysisTransform(enc_channels + self.dec_channels, hidden,
                                          latent_channels, n_down, attention)
        if conditional:
            # same architecture as the analysis transform, independent weights
            self.conditioning = AnalysisTransform(dec_channels, hidden, latent_channels,
                                                  n_down, attention)
        syn_in = latent_channels * (2 if conditional else 1)
        self.synthesis = SynthesisTransform(syn_in, hidden, out_channels, n_down, attention)
        self.hyper_analysis = HyperAnalysis(latent_channels, hidden, hyper_channels)
        self.hyper_synthesis = HyperSynthesis(hyper_channels, hidden, latent_channels)
        self.prior = FactorizedPrior(hyper_channels)
        self.gains = QuantGains(latent_channels, enabled=use_gains)

    # -- transforms ---------------------------------------------------------

    def _check_dims(self, x):
        h, w = x.shape[-2:]
        if h % self.downsampling or w % self.downsampling:
            raise InputError(
                f"spatial size {h}x{w} is not divisible by {self.downsampling}; pad before coding"
            )

    def analyze(self, enc_inputs, dec_inputs=None):
        self._check_dims(enc_inputs)
        if self.conditional:
            if dec_inputs is None:
                dec_inputs = enc_inputs.new_zeros(*enc_inputs.shape[:-3], self.dec_channels,
                                                  *enc_inputs.shape[-2:])
            x = torch.cat([enc_inputs, dec_inputs], dim=-3)
        else:
            x = enc_inputs
        return self.analysis(x)

    def condition(self, dec_inputs):
        if not self.conditional:
            raise ConfigurationError("plain autoencoder has no conditioning transform")
        self._check_dims(dec_inputs)
        return self.conditioning(dec_inputs)

    def synthesize(self, y_hat, cond=None):
        if self.conditional:
            if cond is None:
                raise InputError("conditional synthesis requires a conditioning latent")
            if cond.shape[-2:] != y_hat.shape[-2:]:
                raise InputError(f"latent sizes differ: {tuple(y_hat.shape)} vs {tuple(cond.shape)}")
            x = torch.cat([y_hat, cond], dim=-3)
        else:
            x = y_hat
        return self.synthesis(x)

    def entropy_params(self, z_hat, frame_type, size):
        """Gaussian mean/scale of the lattice index ``k`` (gain-scaled latent domain)."""
        mu, sigma = self.hyper_synthesis(z_hat, size)
        enc, _ = self.gains.get(frame_type)
        enc = _channel_view(enc, mu)
        return mu * enc, (sigma * enc).clamp_min(SIGMA_MIN)

    # -- training / estimation ---------------------------------------------

    def forward(self, enc_inputs, dec_inputs=None, frame_type=FrameType.I,
                mode: str = "train", noise=None, hyper_noise=None) -> CoderOutput:
        y = self.analyze(enc_inputs, dec_inputs)
        z = self.hyper_analysis(y)
        if mode == "train":
            if hyper_noise is None:
                hyper_noise = torch.empty_like(z).uniform_(-0.5, 0.5)
            z_hat = z + hyper_noise
        else:
            z_hat = torch.round(z)
        mu, sigma = self.entropy_params(z_hat, frame_type, y.shape[-2:])
        v, y_hat = scale_latent(y, self.gains, frame_type, mode, noise, self.surrogate)
        if mode == "train" and self.surrogate == "ste":
            v = y * _channel_view(self.gains.get(frame_type)[0], y) + torch.empty_like(y).uniform_(-0.5, 0.5)
        cond = self.condition(dec_inputs) if self.conditional else None
        out = self.synthesize(y_hat, cond)
        latent_bits = -torch.log2(gaussian_likelihood(v, mu, sigma)).sum(dim=(1, 2, 3))
        hyper_bits = -torch.log2(self.prior.likelihood(z_hat)).sum(dim=(1, 2, 3))
        return CoderOutput(out, latent_bits + hyper_bits, latent_bits, hyper_bits,
                           y, y_hat, mu, sigma, v)

    # -- actual coding ------------------------------------------------------

    def _reconstruct(self, k, z_hat, frame_type, dec_inputs):
        _, dec = self.gains.get(frame_type)
        y_hat = k * _channel_view(dec, k)
        cond = self.condition(dec_inputs) if self.conditional else None
        return self.synthesize(y_hat, cond)

    @torch.no_grad()
    def compress(self, enc_inputs, dec_inputs=None, frame_type=FrameType.I):
        """Code one sample (batch of 1). Returns ``(payload, output)``.

        ``output`` is computed from the decoded integers through the same
        path as :meth:`decompress`, so both sides agree bit-exactly.
        """
        if enc_inputs.shape[0] != 1:
            raise InputError("compress codes a single sample at a time")
        y = self.analyze(enc_inputs, dec_inputs)
        z_hat = torch.round(self.hyper_analysis(y))
        z_int = z_hat.to(torch.int64)
        tables = self.prior.tables()
        z_flat = z_int[0].reshape(self.hyper_channels, -1)
        hyper_tables = [tables[c] for c in range(self.hyper_channels) for _ in range(z_flat.shape[1])]
        hyper_bytes = ec.encode_values(z_flat.reshape(-1).tolist(), hyper_tables)

        z_hat = z_int.to(y.dtype)
        mu, sigma = self.entropy_params(z_hat, frame_type, y.shape[-2:])
        k_int = scale_latent(y, self.gains, frame_type, "infer")[0].to(torch.int64)
        latent_bytes = ec.encode_gaussian(k_int.cpu().numpy(),
                                          mu.double().cpu().numpy(), sigma.double().cpu().numpy())
        # rebuild from the integers (as the decoder does) so signed zeros cannot differ
        out = self._reconstruct(k_int.to(y.dtype), z_hat, frame_type, dec_inputs)
        payload = CoderPayload(hyper_bytes, latent_bytes, tuple(y.shape), tuple(z_hat.shape))
        return payload, out

    @torch.no_grad()
    def decompress(self, hyper_bytes: bytes, latent_bytes: bytes, latent_size,
                   dec_inputs=None, frame_type=FrameType.I, dtype=torch.float32):
        h, w = latent_size
        hh, hw = -(-h // HYPER_DOWNSAMPLING), -(-w // HYPER_DOWNSAMPLING)
        tables = self.prior.tables()
        hyper_tables = [tables[c] for c in range(self.hyper_channels) for _ in range(hh * hw)]
        z_vals = ec.decode_values(hyper_bytes, hyper_tables)
        z_hat = torch.tensor(z_vals, dtype=torch.int64).view(1, self.hyper_channels, hh, hw).to(dtype)
        mu, sigma = self.entropy_params(z_hat, frame_type, (h, w))
        k = ec.decode_gaussian(latent_bytes, mu.double().cpu().numpy(), sigma.double().cpu().numpy())
        k = torch.from_numpy(np.asarray(k)).view(1, self.latent_channels, h, w).to(dtype)
        return self._reconstruct(k, z_hat, frame_type, dec_inputs)

    @torch.no_grad()
    def estimate_bits(self, enc_inputs, dec_inputs=None, frame_type=FrameType.I):
        """Entropy-model estimate of the coded size (latent, hyper-latent) for one sample."""
        out = self.forward(enc_inputs, dec_inputs, frame_type, mode="infer")
        return float(out.latent_bits.sum()), float(out.hyper_bits.sum())
