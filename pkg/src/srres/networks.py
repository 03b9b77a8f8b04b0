"""Trainable networks: SR generator, domain generator, and discriminators.

The SR generator unrolls one proximal-gradient step: bilinear upsampling,
a constrained analysis filter bank (encoder), a learnable nonlinearity, a
synthesis stage (decoder), and a norm-ball projection whose radius is tied
to the estimated noise level.  With `analytic_mode` the middle collapses to
a single PReLU and the decoder to the exact encoder adjoint, which makes
the forward pass numerically identical to the explicit one-step solver in
`variational` and testable against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .imaging import resize_matrix
from .variational import FilterBank


# ---------------------------------------------------------------------------
# Constrained filter parametrization
# ---------------------------------------------------------------------------

def constrained_kernels(raw: torch.Tensor) -> torch.Tensor:
    """Zero-mean, unit-Frobenius-norm reparametrization of (K, C, k, k) kernels.

    Differentiable, so optimizer steps on the raw weights keep the effective
    kernels on the constraint set by construction.
    """
    centered = raw - raw.mean(dim=(1, 2, 3), keepdim=True)
    norms = centered.flatten(1).norm(dim=1)
    if torch.any(norms < 1e-12):
        bad = int(torch.argmin(norms))
        raise ValueError(f"kernel {bad} is constant; it vanishes after mean removal")
    return centered / norms.view(-1, 1, 1, 1)


def parametrize_filters(raw: np.ndarray) -> FilterBank:
    """Project unconstrained kernels onto the zero-mean unit-norm set."""
    return FilterBank.from_raw(np.asarray(raw, dtype=np.float64))


def clip_intensities(img):
    """Clamp intensities to the valid [0, 1] range (numpy or torch)."""
    if torch.is_tensor(img):
        return img.clamp(0.0, 1.0)
    return np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)


def relativistic_prob(score_a, mean_score_b):
    """sigmoid(score_a - mean_score_b): probability that a outranks the b average."""
    if torch.is_tensor(score_a) or torch.is_tensor(mean_score_b):
        return torch.sigmoid(torch.as_tensor(score_a) - torch.as_tensor(mean_score_b))
    return 1.0 / (1.0 + math.exp(-(score_a - mean_score_b)))


# ---------------------------------------------------------------------------
# Projection layer
# ---------------------------------------------------------------------------

def projection_threshold(alpha: float, sigma: float, shape) -> float:
    """Ball radius e^alpha * sigma * sqrt(C*H*W - 1) for a (C, H, W) tensor."""
    c, h, w = shape
    count = c * h * w
    if count < 2:
        raise ValueError(f"threshold needs at least 2 elements, got shape {shape}")
    return math.exp(alpha) * sigma * math.sqrt(count - 1)


def prox_ball_t(z: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Batched projection onto the L2 ball; differentiable a.e. in z and eps."""
    flat = z.reshape(z.shape[0], -1)
    norms = flat.norm(dim=1).clamp_min(1e-30)
    scale = torch.clamp(eps / norms, max=1.0)
    return z * scale.view(-1, *([1] * (z.dim() - 1)))


class ProjectionLayer(nn.Module):
    """Trainable norm-ball projection with radius e^alpha * sigma * sqrt(n - 1)."""

    def __init__(self, alpha_init: float = 2.0):
        super().__init__()
        self.alpha = nn.Parameter(torch.tensor(float(alpha_init)))

    def threshold(self, sigma: torch.Tensor, count: int) -> torch.Tensor:
        return torch.exp(self.alpha) * sigma * math.sqrt(count - 1)

    def forward(self, z: torch.Tensor, sigma) -> torch.Tensor:
        sigma = torch.as_tensor(sigma, dtype=z.dtype, device=z.device).reshape(-1)
        eps = self.threshold(sigma, z[0].numel())
        return prox_ball_t(z, eps)


# ---------------------------------------------------------------------------
# Shared layers and helpers
# ---------------------------------------------------------------------------

_MATRIX_CACHE: dict = {}


def _resize_matrix_t(n_in, n_out, kernel, dtype, device) -> torch.Tensor:
    key = (n_in, n_out, kernel, dtype, str(device))
    m = _MATRIX_CACHE.get(key)
    if m is None:
        m = torch.from_numpy(np.array(resize_matrix(n_in, n_out, kernel))).to(dtype=dtype, device=device)
        _MATRIX_CACHE[key] = m
    return m


def bilinear_upsample_t(x: torch.Tensor, scale: int) -> torch.Tensor:
    """Upscale (B, C, H, W) by an integer factor with the linear kernel."""
    if scale == 1:
        return x
    mh = _resize_matrix_t(x.shape[-2], x.shape[-2] * scale, "linear", x.dtype, x.device)
    mw = _resize_matrix_t(x.shape[-1], x.shape[-1] * scale, "linear", x.dtype, x.device)
    return torch.matmul(torch.matmul(mh, x), mw.t())


def fold_reflect_t(x: torch.Tensor, p: int) -> torch.Tensor:
    """Adjoint of reflection padding: fold border slabs back onto their sources."""
    if p == 0:
        return x
    out = x[..., p:-p, :].clone()
    out[..., 1 : p + 1, :] += x[..., :p, :].flip(-2)
    out[..., -1 - p : -1, :] += x[..., -p:, :].flip(-2)
    res = out[..., :, p:-p].clone()
    res[..., :, 1 : p + 1] += out[..., :, :p].flip(-1)
    res[..., :, -1 - p : -1] += out[..., :, -p:].flip(-1)
    return res


def _reflect_conv(x: torch.Tensor, weight: torch.Tensor, bias=None) -> torch.Tensor:
    p = weight.shape[-1] // 2
    return F.conv2d(F.pad(x, (p, p, p, p), mode="reflect"), weight, bias)


def _init_conv(weight: torch.Tensor, gen: torch.Generator, gain: float = 0.1):
    flat = torch.empty(weight.shape[0], weight[0].numel())
    nn.init.orthogonal_(flat, gain=gain, generator=gen)
    with torch.no_grad():
        weight.copy_(flat.view_as(weight))


def _check_finite_params(module: nn.Module, name: str):
    for pname, p in module.named_parameters():
        if not torch.all(torch.isfinite(p)):
            raise ValueError(f"{name} has non-finite weights in {pname}")


# ---------------------------------------------------------------------------
# SR generator
# ---------------------------------------------------------------------------

@dataclass
class GeneratorSRConfig:
    scale: int = 4
    channels: int = 3
    features: int = 64
    kernel_size: int = 5
    num_blocks: int = 5
    block_kernel: int = 3
    analytic_mode: bool = False
    alpha_init: float = 2.0  # top of the documented [1, 2] log-scale range

    def __post_init__(self):
        if self.scale not in (1, 2, 4):
            raise ValueError(f"scale must be in {{1,2,4}}, got {self.scale}")
        for name in ("channels", "features", "kernel_size", "num_blocks", "block_kernel"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.kernel_size % 2 == 0 or self.block_kernel % 2 == 0:
            raise ValueError("kernel sizes must be odd")


class PreActBlock(nn.Module):
    """Residual block with two pre-activation convolutions (PReLU first)."""

    def __init__(self, features: int, kernel: int, gen: torch.Generator):
        super().__init__()
        self.act1 = nn.PReLU(features)
        self.conv1 = nn.Conv2d(features, features, kernel, padding=0)
        self.act2 = nn.PReLU(features)
        self.conv2 = nn.Conv2d(features, features, kernel, padding=0)
        for conv in (self.conv1, self.conv2):
            _init_conv(conv.weight, gen)
            nn.init.zeros_(conv.bias)

    def forward(self, x):
        h = _reflect_conv(self.act1(x), self.conv1.weight, self.conv1.bias)
        h = _reflect_conv(self.act2(h), self.conv2.weight, self.conv2.bias)
        return x + h


class GeneratorSR(nn.Module):
    """Residual SR generator built around one proximal-gradient inference step.

    Standard mode: the decoder output (the corruption-residual estimate) is
    projected onto the noise ball and subtracted from the bilinearly upsampled
    input, then clipped to [0, 1].  Analytic mode: the decoder is the exact
    adjoint of the encoder scaled by `alpha_mult`, the middle is the bare
    nonlinearity, and the projection applies to the full candidate image with
    no extra clipping, matching `variational.one_step_inference` exactly.
    """

    def __init__(self, cfg: GeneratorSRConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        k, c, f = cfg.kernel_size, cfg.channels, cfg.features
        self.raw_enc = nn.Parameter(torch.randn(f, c, k, k, generator=gen) * 0.1)
        self.phi = nn.PReLU(f)
        self.blocks = nn.ModuleList(
            PreActBlock(f, cfg.block_kernel, gen) for _ in range(cfg.num_blocks)
        )
        self.raw_dec = nn.Parameter(torch.randn(f, c, k, k, generator=gen) * 0.1)
        # decoder magnitudes start at zero so the untrained net is the plain upsampler
        self.dec_gain = nn.Parameter(torch.zeros(f))
        self.proj = ProjectionLayer(cfg.alpha_init)
        self.register_buffer("alpha_mult", torch.tensor(1.0))

    def encoder_kernels(self) -> torch.Tensor:
        return constrained_kernels(self.raw_enc)

    def decoder_kernels(self) -> torch.Tensor:
        return constrained_kernels(self.raw_dec)

    def set_analytic(self, bank: np.ndarray, slopes: np.ndarray, alpha_mult: float, proj_alpha: float):
        """Load explicit one-step parameters (raw bank, phi slopes, alpha, proj alpha)."""
        if not self.cfg.analytic_mode:
            raise ValueError("set_analytic requires a config with analytic_mode=True")
        with torch.no_grad():
            self.raw_enc.copy_(torch.as_tensor(bank, dtype=self.raw_enc.dtype))
            self.phi.weight.copy_(torch.as_tensor(slopes, dtype=self.phi.weight.dtype))
            self.alpha_mult.fill_(float(alpha_mult))
            self.proj.alpha.fill_(float(proj_alpha))

    def forward(self, x: torch.Tensor, sigma) -> torch.Tensor:
        if x.dim() != 4:
            raise ValueError(f"expected (B, C, H, W) input, got shape {tuple(x.shape)}")
        k = self.cfg.kernel_size
        if x.shape[-2] < k or x.shape[-1] < k:
            raise ValueError(
                f"input {tuple(x.shape[-2:])} is smaller than the {k}x{k} receptive field"
            )
        p = k // 2
        u = bilinear_upsample_t(x, self.cfg.scale)
        w_enc = self.encoder_kernels()
        feats = _reflect_conv(u, w_enc)
        sigma = torch.as_tensor(sigma, dtype=x.dtype, device=x.device).reshape(-1)
        if self.cfg.analytic_mode:
            g = self.phi(feats)
            d = fold_reflect_t(F.conv_transpose2d(g, w_enc), p) * self.alpha_mult
            eps = self.proj.threshold(sigma, u[0].numel())
            return prox_ball_t(u - d, eps)
        h = feats
        for block in self.blocks:
            h = block(h)
        w_dec = self.decoder_kernels() * self.dec_gain.view(-1, 1, 1, 1)
        d = F.conv_transpose2d(h, w_dec, padding=p)
        r = self.proj(d, sigma)
        return clip_intensities(u - r)


# ---------------------------------------------------------------------------
# Domain generator
# ---------------------------------------------------------------------------

@dataclass
class DomainGeneratorConfig:
    channels: int = 3
    features: int = 64
    num_blocks: int = 8
    kernel: int = 3

    def __post_init__(self):
        for name in ("channels", "features", "num_blocks", "kernel"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


class ResBlock(nn.Module):
    """Two convolutions with a PReLU between them plus the identity skip."""

    def __init__(self, features: int, kernel: int, gen: torch.Generator):
        super().__init__()
        self.conv1 = nn.Conv2d(features, features, kernel, padding=0)
        self.act = nn.PReLU(features)
        self.conv2 = nn.Conv2d(features, features, kernel, padding=0)
        for conv in (self.conv1, self.conv2):
            _init_conv(conv.weight, gen)
            nn.init.zeros_(conv.bias)

    def forward(self, x):
        h = self.act(_reflect_conv(x, self.conv1.weight, self.conv1.bias))
        h = _reflect_conv(h, self.conv2.weight, self.conv2.bias)
        return x + h


class DomainGenerator(nn.Module):
    """Content-preserving corruption generator with a sigmoid output.

    The residual head starts at zero and is added in logit space, so the
    untrained network reproduces its input (up to the logit clamp) while the
    sigmoid keeps every output strictly inside (0, 1).
    """

    def __init__(self, cfg: DomainGeneratorConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        f = cfg.features
        self.head = nn.Conv2d(cfg.channels, f, cfg.kernel, padding=0)
        _init_conv(self.head.weight, gen)
        nn.init.zeros_(self.head.bias)
        self.blocks = nn.ModuleList(ResBlock(f, cfg.kernel, gen) for _ in range(cfg.num_blocks))
        self.tail = nn.Conv2d(f, cfg.channels, cfg.kernel, padding=0)
        # near-zero tail: the untrained generator reproduces its input while
        # keeping a symmetry-breaking gradient signal alive
        with torch.no_grad():
            self.tail.weight.copy_(torch.randn(self.tail.weight.shape, generator=gen) * 1e-3)
            self.tail.bias.zero_()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4:
            raise ValueError(f"expected (B, C, H, W) input, got shape {tuple(z.shape)}")
        zc = z.clamp(1e-6, 1.0 - 1e-6)
        logits = torch.log(zc) - torch.log1p(-zc)
        h = _reflect_conv(z, self.head.weight, self.head.bias)
        for block in self.blocks:
            h = block(h)
        return torch.sigmoid(logits + _reflect_conv(h, self.tail.weight, self.tail.bias))


# ---------------------------------------------------------------------------
# Discriminators
# ---------------------------------------------------------------------------

@dataclass
class DiscriminatorConfig:
    variant: str = "hr_discriminator"  # or "patch_discriminator"
    channels: int = 3
    base: int = 64
    patch: int = 128  # hr variant input size; must be divisible by 32

    def __post_init__(self):
        if self.variant not in ("hr_discriminator", "patch_discriminator"):
            raise ValueError(f"unknown discriminator variant {self.variant!r}")
        if self.base < 1 or self.channels < 1:
            raise ValueError("channels and base width must be positive")
        if self.variant == "hr_discriminator" and (self.patch < 32 or self.patch % 32):
            raise ValueError(f"hr discriminator patch size must be a multiple of 32, got {self.patch}")


class HRDiscriminator(nn.Module):
    """Image-level critic: 10 convolutions (5 strided) then a dense head.

    Width doubles every other layer from `base` to 8*base; 3x3 layers keep
    resolution and 4x4 stride-2 layers halve it five times, so a 128-pixel
    patch reaches 4x4 before the head.
    """

    def __init__(self, cfg: DiscriminatorConfig, seed: int = 0):
        super().__init__()
        if cfg.variant != "hr_discriminator":
            raise ValueError("config variant must be 'hr_discriminator'")
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        b = cfg.base
        widths = [b, b, 2 * b, 2 * b, 4 * b, 4 * b, 8 * b, 8 * b, 8 * b, 8 * b]
        layers = []
        in_ch = cfg.channels
        for i, out_ch in enumerate(widths):
            stride = 2 if i % 2 else 1
            ksize = 4 if i % 2 else 3
            conv = nn.Conv2d(in_ch, out_ch, ksize, stride=stride, padding=1)
            _init_conv(conv.weight, gen)
            nn.init.zeros_(conv.bias)
            layers.append(conv)
            if i > 0:
                layers.append(nn.BatchNorm2d(out_ch))
            layers.append(nn.LeakyReLU(0.2))
            in_ch = out_ch
        self.features = nn.Sequential(*layers)
        side = cfg.patch // 32
        self.fc1 = nn.Linear(8 * b * side * side, 100)
        self.fc2 = nn.Linear(100, 1)
        for fc in (self.fc1, self.fc2):
            _init_conv(fc.weight, gen)
            nn.init.zeros_(fc.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] != self.cfg.patch or x.shape[-1] != self.cfg.patch:
            raise ValueError(
                f"discriminator configured for {self.cfg.patch}x{self.cfg.patch} patches, "
                f"got {tuple(x.shape[-2:])}"
            )
        h = self.features(x)
        h = F.leaky_relu(self.fc1(h.flatten(1)), 0.2)
        return self.fc2(h).squeeze(1)


class PatchDiscriminator(nn.Module):
    """Patch-level critic: 5x5 convolutions 64->128->256 then a 1-channel map."""

    RECEPTIVE_FIELD = 17

    def __init__(self, cfg: DiscriminatorConfig, seed: int = 0):
        super().__init__()
        if cfg.variant != "patch_discriminator":
            raise ValueError("config variant must be 'patch_discriminator'")
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        b = cfg.base
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(cfg.channels, b, 5, padding=0),
                nn.Conv2d(b, 2 * b, 5, padding=0),
                nn.Conv2d(2 * b, 4 * b, 5, padding=0),
            ]
        )
        self.norms = nn.ModuleList(nn.BatchNorm2d(c.out_channels) for c in self.convs)
        self.final = nn.Conv2d(4 * b, 1, 5, padding=0)
        for conv in (*self.convs, self.final):
            _init_conv(conv.weight, gen)
            nn.init.zeros_(conv.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] < self.RECEPTIVE_FIELD or x.shape[-1] < self.RECEPTIVE_FIELD:
            raise ValueError(
                f"input {tuple(x.shape[-2:])} is smaller than the "
                f"{self.RECEPTIVE_FIELD}-pixel receptive field"
            )
        h = x
        for conv, norm in zip(self.convs, self.norms):
            h = F.leaky_relu(norm(_reflect_conv(h, conv.weight, conv.bias)), 0.2)
        return _reflect_conv(h, self.final.weight, self.final.bias)


# ---------------------------------------------------------------------------
# Functional single-image wrappers over (C, H, W) numpy arrays
# ---------------------------------------------------------------------------

def _to_batch(img: np.ndarray, module: nn.Module) -> torch.Tensor:
    p = next(module.parameters())
    return torch.as_tensor(np.asarray(img), dtype=p.dtype, device=p.device).unsqueeze(0)


def gsr_forward(model: GeneratorSR, lr: np.ndarray, sigma: float) -> np.ndarray:
    """Run the SR generator on one image; returns a (C, s*H, s*W) array."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    _check_finite_params(model, "GeneratorSR")
    model.eval()
    with torch.no_grad():
        out = model(_to_batch(lr, model), sigma)
    return out[0].cpu().double().numpy()


def gd_forward(model: DomainGenerator, z: np.ndarray) -> np.ndarray:
    """Run the domain generator on one image; dims are preserved."""
    _check_finite_params(model, "DomainGenerator")
    model.eval()
    with torch.no_grad():
        out = model(_to_batch(z, model))
    return out[0].cpu().double().numpy()


def dy_score(model: HRDiscriminator, candidate: np.ndarray) -> float:
    """Raw (pre-sigmoid) critic score for one HR-sized image."""
    model.eval()
    with torch.no_grad():
        return float(model(_to_batch(candidate, model))[0])


def dx_score(model: PatchDiscriminator, candidate: np.ndarray) -> np.ndarray:
    """Raw patch-level score map (2-D) for one image."""
    model.eval()
    with torch.no_grad():
        out = model(_to_batch(candidate, model))
    return out[0, 0].cpu().double().numpy()
