"""Training objectives for both stages and the pluggable feature extractor.

All losses take batched (B, C, H, W) torch tensors and normalize every norm
by element count, so magnitudes are resolution independent.  Relativistic
GAN terms measure each score against the opposing batch mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .imaging import gaussian_kernel
from .networks import relativistic_prob

LOG_CLAMP = 1e-12
EXTRACTOR_FORMAT_VERSION = 1


@dataclass(frozen=True)
class LossWeights:
    """Composite-loss coefficients for the SR and domain stages."""

    w_per: float = 1.0
    w_gan: float = 1.0
    w_tv: float = 1.0
    w_l1: float = 10.0
    w_color: float = 1.0
    w_tex: float = 0.005
    w_per_d: float = 0.01
    highpass_gan: bool = False

    def __post_init__(self):
        for name in ("w_per", "w_gan", "w_tv", "w_l1", "w_color", "w_tex", "w_per_d"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _check_same(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _mean_abs(x: torch.Tensor):
    return x.abs().mean() if x.numel() else x.new_zeros(())


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over every element of the batch."""
    _check_same(a, b)
    return (a - b).abs().mean()


def tv_loss(sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference of forward-difference gradients, h plus v."""
    _check_same(sr, hr)
    dh = (sr[..., :, 1:] - sr[..., :, :-1]) - (hr[..., :, 1:] - hr[..., :, :-1])
    dv = (sr[..., 1:, :] - sr[..., :-1, :]) - (hr[..., 1:, :] - hr[..., :-1, :])
    return _mean_abs(dh) + _mean_abs(dv)


# ---------------------------------------------------------------------------
# Feature extractor (builtin deterministic, or adapted external weights)
# ---------------------------------------------------------------------------

class FeatureExtractor(nn.Module):
    """Fixed strided conv stack standing in for a pretrained perceptual net.

    The builtin variant draws its (frozen) weights from a seeded generator,
    so identical inputs always give identical features.  External weights in
    the documented .npz layout can be loaded through `from_npz`; `layers`
    selects which stage outputs participate.
    """

    def __init__(self, channels: int = 3, widths=(8, 16, 32), seed: int = 0, layers=None):
        super().__init__()
        self.provenance = "builtin-deterministic"
        gen = torch.Generator().manual_seed(seed)
        convs = []
        in_ch = channels
        for w in widths:
            conv = nn.Conv2d(in_ch, w, 3, stride=2, padding=1)
            fan_in = in_ch * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            convs.append(conv)
            in_ch = w
        self.convs = nn.ModuleList(convs)
        self.layers = tuple(range(len(convs))) if layers is None else tuple(layers)
        if any(i < 0 or i >= len(convs) for i in self.layers):
            raise ValueError(f"layer selection {self.layers} out of range for {len(convs)} stages")
        for p in self.parameters():
            p.requires_grad_(False)

    @classmethod
    def from_npz(cls, path, layers=None) -> "FeatureExtractor":
        """Load external feature weights (named conv{i}.weight / conv{i}.bias)."""
        data = np.load(Path(path))
        version = int(data["version"])
        if version != EXTRACTOR_FORMAT_VERSION:
            raise ValueError(
                f"feature extractor file version {version} != supported {EXTRACTOR_FORMAT_VERSION}"
            )
        n = int(data["num_stages"])
        weights = [data[f"conv{i}.weight"] for i in range(n)]
        biases = [data[f"conv{i}.bias"] for i in range(n)]
        ext = cls(
            channels=weights[0].shape[1],
            widths=tuple(w.shape[0] for w in weights),
            layers=layers,
        )
        with torch.no_grad():
            for conv, w, b in zip(ext.convs, weights, biases):
                conv.weight.copy_(torch.as_tensor(w, dtype=conv.weight.dtype))
                conv.bias.copy_(torch.as_tensor(b, dtype=conv.bias.dtype))
        ext.provenance = "external-weights"
        return ext

    def save_npz(self, path):
        arrays = {"version": EXTRACTOR_FORMAT_VERSION, "num_stages": len(self.convs)}
        for i, conv in enumerate(self.convs):
            arrays[f"conv{i}.weight"] = conv.weight.detach().cpu().numpy()
            arrays[f"conv{i}.bias"] = conv.bias.detach().cpu().numpy()
        np.savez(Path(path), **arrays)

    def forward(self, x: torch.Tensor) -> list:
        feats = []
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h.to(conv.weight.dtype)), 0.2)
            feats.append(h)
        return [feats[i] for i in self.layers]


def perceptual_loss(extractor, sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    """Mean L1 distance between feature stacks, averaged over stages."""
    _check_same(sr, hr)
    fa, fb = extractor(sr), extractor(hr)
    terms = [(a - b).abs().mean() for a, b in zip(fa, fb)]
    return sum(terms) / len(terms)


# ---------------------------------------------------------------------------
# Relativistic average GAN losses
# ---------------------------------------------------------------------------

def _as_scores(scores, name: str) -> torch.Tensor:
    t = scores.reshape(-1) if torch.is_tensor(scores) else torch.as_tensor(
        np.asarray(scores, dtype=np.float64)
    ).reshape(-1)
    if t.numel() == 0:
        raise ValueError(f"{name} score batch is empty")
    if not torch.all(torch.isfinite(t)):
        raise ValueError(f"{name} scores contain non-finite values")
    return t


def ragan_generator_loss(real_scores, fake_scores) -> torch.Tensor:
    """Push fake scores above the real batch mean and vice versa."""
    r = _as_scores(real_scores, "real")
    f = _as_scores(fake_scores, "fake")
    d_real = relativistic_prob(r, f.mean())
    d_fake = relativistic_prob(f, r.mean())
    return -(
        torch.log((1.0 - d_real).clamp_min(LOG_CLAMP)).mean()
        + torch.log(d_fake.clamp_min(LOG_CLAMP)).mean()
    )


def ragan_discriminator_loss(real_scores, fake_scores) -> torch.Tensor:
    """Standard relativistic-average counterpart of the generator objective."""
    r = _as_scores(real_scores, "real")
    f = _as_scores(fake_scores, "fake")
    d_real = relativistic_prob(r, f.mean())
    d_fake = relativistic_prob(f, r.mean())
    return -(
        torch.log(d_real.clamp_min(LOG_CLAMP)).mean()
        + torch.log((1.0 - d_fake).clamp_min(LOG_CLAMP)).mean()
    )


# ---------------------------------------------------------------------------
# Frequency-band helpers and the color loss
# ---------------------------------------------------------------------------

def gaussian_lowpass(x: torch.Tensor, kernel_size: int = 5, sigma: float = 1.5) -> torch.Tensor:
    """Depthwise Gaussian blur with reflection padding (torch mirror of imaging)."""
    k = torch.as_tensor(gaussian_kernel(kernel_size, sigma), dtype=x.dtype, device=x.device)
    c = x.shape[1]
    weight = k.expand(c, 1, kernel_size, kernel_size)
    p = kernel_size // 2
    return F.conv2d(F.pad(x, (p, p, p, p), mode="reflect"), weight, groups=c)


def gaussian_highpass(x: torch.Tensor, kernel_size: int = 5, sigma: float = 1.5) -> torch.Tensor:
    return x - gaussian_lowpass(x, kernel_size, sigma)


def color_loss(a: torch.Tensor, b: torch.Tensor, kernel_size: int = 5, sigma: float = 1.5) -> torch.Tensor:
    """L1 between low-frequency bands; insensitive to high-band differences."""
    _check_same(a, b)
    return l1_loss(gaussian_lowpass(a, kernel_size, sigma), gaussian_lowpass(b, kernel_size, sigma))


# ---------------------------------------------------------------------------
# Composite objectives
# ---------------------------------------------------------------------------

@dataclass
class SRLossTerms:
    per: object = 0.0
    gan: object = 0.0
    tv: object = 0.0
    l1: object = 0.0


@dataclass
class DomainLossTerms:
    color: object = 0.0
    tex: object = 0.0
    per: object = 0.0


def _finite(value, name: str):
    v = value if torch.is_tensor(value) else torch.as_tensor(float(value))
    if not torch.all(torch.isfinite(v)):
        raise ValueError(f"loss term {name!r} is non-finite: {value}")
    return value


def sr_composite_loss(weights: LossWeights, terms: SRLossTerms):
    """w_per*per + w_gan*gan + w_tv*tv + w_l1*l1 (weights default 1,1,1,10)."""
    return (
        weights.w_per * _finite(terms.per, "perceptual")
        + weights.w_gan * _finite(terms.gan, "gan")
        + weights.w_tv * _finite(terms.tv, "tv")
        + weights.w_l1 * _finite(terms.l1, "l1")
    )


def domain_composite_loss(weights: LossWeights, terms: DomainLossTerms):
    """w_color*color + w_tex*tex + w_per_d*per (weights default 1, 0.005, 0.01)."""
    return (
        weights.w_color * _finite(terms.color, "color")
        + weights.w_tex * _finite(terms.tex, "texture")
        + weights.w_per_d * _finite(terms.per, "perceptual")
    )
