"""Explicit energy model, proximal-gradient solver, and one-step inference.

Everything here is plain float64 numpy with deterministic summation order, so
it can serve as the numerical oracle for the trainable generator.  The data
term uses the cubic downscaling operator H realized as explicit resampling
matrices, which makes the exact adjoint H^T available for free.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .imaging import as_image, resize_matrix


class DivergenceError(RuntimeError):
    """Raised when the solver's energy increases persistently."""


@dataclass(frozen=True)
class FilterBank:
    """K convolution kernels, each zero-mean with unit Frobenius norm."""

    kernels: np.ndarray  # (K, C_in, k, k)

    def __post_init__(self):
        k = np.asarray(self.kernels, dtype=np.float64)
        if k.ndim != 4 or k.shape[0] < 1:
            raise ValueError(f"expected (K, C, k, k) kernels, got shape {k.shape}")
        means = k.mean(axis=(1, 2, 3))
        norms = np.sqrt((k * k).sum(axis=(1, 2, 3)))
        if np.any(np.abs(means) > 1e-8):
            raise ValueError(f"kernels must be zero-mean, worst |mean| = {np.abs(means).max():.3e}")
        if np.any(np.abs(norms - 1.0) > 1e-8):
            raise ValueError(f"kernels must have unit norm, worst |norm-1| = {np.abs(norms - 1).max():.3e}")
        object.__setattr__(self, "kernels", k)

    @classmethod
    def from_raw(cls, raw: np.ndarray) -> "FilterBank":
        """Center and normalize unconstrained kernels."""
        r = np.asarray(raw, dtype=np.float64)
        if r.ndim != 4:
            raise ValueError(f"expected (K, C, k, k) raw kernels, got shape {r.shape}")
        centered = r - r.mean(axis=(1, 2, 3), keepdims=True)
        norms = np.sqrt((centered * centered).sum(axis=(1, 2, 3), keepdims=True))
        if np.any(norms < 1e-12):
            bad = int(np.argmin(norms.ravel()))
            raise ValueError(f"kernel {bad} is constant; it vanishes after mean removal")
        return cls(centered / norms)

    @classmethod
    def derivative_bank(cls, channels: int = 3) -> "FilterBank":
        """Default bank: first differences and a Laplacian, one copy per channel."""
        base = [
            np.array([[0, 0, 0], [0, -1, 1], [0, 0, 0]], dtype=np.float64),
            np.array([[0, 0, 0], [0, -1, 0], [0, 1, 0]], dtype=np.float64),
            np.array([[0, 0, 0], [0, -1, 0], [0, 0, 1]], dtype=np.float64),
            np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64),
        ]
        kernels = np.zeros((len(base) * channels, channels, 3, 3))
        for c in range(channels):
            for i, b in enumerate(base):
                kernels[c * len(base) + i, c] = b
        return cls.from_raw(kernels)

    @property
    def num_filters(self) -> int:
        return self.kernels.shape[0]

    @property
    def pad(self) -> int:
        return self.kernels.shape[2] // 2


@dataclass(frozen=True)
class BallConstraint:
    """L2 ball of radius epsilon around the origin."""

    epsilon: float

    def __post_init__(self):
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon}")


@dataclass
class EnergyModel:
    """Data-fidelity + filter-response prior defining the restoration energy.

    `slopes` are the per-filter negative slopes of the PReLU-family potential
    gradient; the potential itself is the exact antiderivative t^2/2 (t >= 0)
    and a*t^2/2 (t < 0), keeping energy and gradient mutually consistent.
    `upsample_mode` picks how H^T is realized in one_step_inference: the true
    matrix adjoint, or the magnitude-preserving bilinear interpolator.
    """

    scale: int
    lam: float
    bank: FilterBank
    slopes: np.ndarray
    step: float = 1.0
    upsample_mode: str = "adjoint"

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lam must be finite and >= 0, got {self.lam}")
        if not (np.isfinite(self.step) and self.step >= 0):
            raise ValueError(f"step must be finite and >= 0, got {self.step}")
        s = np.broadcast_to(np.asarray(self.slopes, dtype=np.float64), (self.bank.num_filters,)).copy()
        self.slopes = s
        if self.upsample_mode not in ("adjoint", "bilinear"):
            raise ValueError(f"unknown upsample_mode {self.upsample_mode!r}")


# ---------------------------------------------------------------------------
# Filtering operators and their exact adjoints
# ---------------------------------------------------------------------------

def _pad_reflect(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (p, p), (p, p)), mode="reflect") if p else x


def _fold_axis(a: np.ndarray, p: int, axis: int) -> np.ndarray:
    # Adjoint of 1-D reflection padding: border slabs fold back onto their
    # mirror sources (padded index p-i <-> source i, p+n-1+i <-> n-1-i).
    a = np.moveaxis(a, axis, 0)
    n = a.shape[0] - 2 * p
    core = a[p : p + n].copy()
    if p:
        core[1 : p + 1] += a[:p][::-1]
        core[n - 1 - p : n - 1] += a[p + n :][::-1]
    return np.moveaxis(core, 0, axis)


def _fold_reflect(x: np.ndarray, p: int) -> np.ndarray:
    return _fold_axis(_fold_axis(x, p, 1), p, 2)


def apply_filter_bank(bank: FilterBank, img: np.ndarray) -> np.ndarray:
    """Cross-correlate with every kernel under reflection padding -> (K, H, W)."""
    a = as_image(img)
    if a.shape[0] != bank.kernels.shape[1]:
        raise ValueError(
            f"image has {a.shape[0]} channels but kernels expect {bank.kernels.shape[1]}"
        )
    p = bank.pad
    padded = _pad_reflect(a, p)
    out = np.empty((bank.num_filters, a.shape[1], a.shape[2]))
    for k in range(bank.num_filters):
        acc = np.zeros((a.shape[1], a.shape[2]))
        for c in range(a.shape[0]):
            # correlate == convolve with the flipped kernel
            acc += convolve2d(padded[c], bank.kernels[k, c, ::-1, ::-1], mode="valid")
        out[k] = acc
    return out


def filter_bank_adjoint(bank: FilterBank, feats: np.ndarray) -> np.ndarray:
    """Exact adjoint of apply_filter_bank (full convolution + reflect fold)."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 3 or feats.shape[0] != bank.num_filters:
        raise ValueError(f"expected ({bank.num_filters}, H, W) features, got {feats.shape}")
    p = bank.pad
    channels = bank.kernels.shape[1]
    out = np.zeros((channels, feats.shape[1] + 2 * p, feats.shape[2] + 2 * p))
    for k in range(bank.num_filters):
        for c in range(channels):
            out[c] += convolve2d(feats[k], bank.kernels[k, c], mode="full")
    return _fold_reflect(out, p)


def phi(features: np.ndarray, slopes: np.ndarray) -> np.ndarray:
    """Potential gradient: identity for positive responses, slope a_k below 0."""
    a = np.asarray(slopes, dtype=np.float64)[:, None, None]
    return np.where(features >= 0, features, a * features)


def rho(features: np.ndarray, slopes: np.ndarray) -> np.ndarray:
    """Potential function (antiderivative of phi): quadratic on each side of 0."""
    a = np.asarray(slopes, dtype=np.float64)[:, None, None]
    half_sq = 0.5 * features * features
    return np.where(features >= 0, half_sq, a * half_sq)


# ---------------------------------------------------------------------------
# Downscaling operator H, adjoint, and bilinear upsampling
# ---------------------------------------------------------------------------

def downscale(img: np.ndarray, scale: int) -> np.ndarray:
    """H: cubic anti-aliased downscale by 1/scale (identity for scale 1)."""
    a = as_image(img)
    if scale == 1:
        return a.copy()
    if a.shape[1] % scale or a.shape[2] % scale:
        raise ValueError(f"dims {a.shape[1:]} not divisible by scale {scale}")
    mh = resize_matrix(a.shape[1], a.shape[1] // scale, "cubic")
    mw = resize_matrix(a.shape[2], a.shape[2] // scale, "cubic")
    return np.einsum("oh,chw,pw->cop", mh, a, mw, optimize=True)


def downscale_adjoint(y: np.ndarray, scale: int) -> np.ndarray:
    """H^T: exact matrix transpose of downscale (spreads mass, ~1/s^2 gain)."""
    a = as_image(y)
    if scale == 1:
        return a.copy()
    mh = resize_matrix(a.shape[1] * scale, a.shape[1], "cubic")
    mw = resize_matrix(a.shape[2] * scale, a.shape[2], "cubic")
    return np.einsum("ho,chw,wp->cop", mh, a, mw, optimize=True)


def upsample_bilinear(y: np.ndarray, scale: int) -> np.ndarray:
    """Magnitude-preserving bilinear upscale by `scale`."""
    a = as_image(y)
    if scale == 1:
        return a.copy()
    mh = resize_matrix(a.shape[1], a.shape[1] * scale, "linear")
    mw = resize_matrix(a.shape[2], a.shape[2] * scale, "linear")
    return np.einsum("oh,chw,pw->cop", mh, a, mw, optimize=True)


def upsample(model: EnergyModel, y: np.ndarray) -> np.ndarray:
    """Realize H^T according to the model's upsample_mode."""
    if model.upsample_mode == "bilinear":
        return upsample_bilinear(y, model.scale)
    return downscale_adjoint(y, model.scale)


# ---------------------------------------------------------------------------
# Energy, gradient, prox, solver
# ---------------------------------------------------------------------------

def _check_pair(model: EnergyModel, x: np.ndarray, y: np.ndarray):
    if y.shape[0] != x.shape[0]:
        raise ValueError(f"channel mismatch: X has {x.shape[0]}, Y has {y.shape[0]}")
    if x.shape[1] != model.scale * y.shape[1] or x.shape[2] != model.scale * y.shape[2]:
        raise ValueError(
            f"X dims {x.shape[1:]} must be {model.scale}x Y dims {y.shape[1:]}"
        )


def energy(model: EnergyModel, x: np.ndarray, y: np.ndarray) -> float:
    """0.5 * ||Y - H X||^2 + lam * sum_k sum_pixels rho_k(L_k X)."""
    x, y = as_image(x), as_image(y)
    _check_pair(model, x, y)
    resid = y - downscale(x, model.scale)
    data = 0.5 * float(np.sum(resid * resid))
    if model.lam == 0.0:
        return data
    feats = apply_filter_bank(model.bank, x)
    return data + model.lam * float(np.sum(rho(feats, model.slopes)))


def energy_grad(model: EnergyModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """H^T(H X - Y) + lam * sum_k L_k^T phi_k(L_k X)."""
    x, y = as_image(x), as_image(y)
    _check_pair(model, x, y)
    grad = downscale_adjoint(downscale(x, model.scale) - y, model.scale)
    if model.lam != 0.0:
        feats = apply_filter_bank(model.bank, x)
        grad = grad + model.lam * filter_bank_adjoint(model.bank, phi(feats, model.slopes))
    return grad


def prox_ball(z: np.ndarray, c: BallConstraint) -> np.ndarray:
    """Euclidean projection onto the epsilon-ball: identity inside, radial shrink outside."""
    z = np.asarray(z, dtype=np.float64)
    norm = float(np.sqrt(np.sum(z * z)))
    if norm <= c.epsilon:
        return z.copy()
    if norm == 0.0:
        return np.zeros_like(z)
    return z * (c.epsilon / norm)


def pgm_step(model: EnergyModel, x_prev: np.ndarray, y: np.ndarray, c: BallConstraint) -> np.ndarray:
    """One proximal-gradient update: project(x - step * grad)."""
    return prox_ball(x_prev - model.step * energy_grad(model, x_prev, y), c)


@dataclass
class SolveResult:
    image: np.ndarray
    iterations: int
    energies: list = field(default_factory=list)


def pgm_solve(
    model: EnergyModel,
    y: np.ndarray,
    c: BallConstraint,
    max_iters: int = 500,
    tol: float = 1e-6,
    trace_path=None,
) -> SolveResult:
    """Iterate pgm_step from X = 0 until the relative change drops below tol.

    Raises DivergenceError if the energy increases on 10 consecutive steps,
    which indicates the step size is too large for the instance.
    """
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    y = as_image(y)
    x = np.zeros((y.shape[0], y.shape[1] * model.scale, y.shape[2] * model.scale))
    e_prev = energy(model, x, y)
    energies = []
    bad_streak = 0
    iterations = 0
    for t in range(1, max_iters + 1):
        x_new = pgm_step(model, x, y, c)
        e_new = energy(model, x_new, y)
        energies.append(e_new)
        iterations = t
        if e_new > e_prev:
            bad_streak += 1
            if bad_streak >= 10:
                raise DivergenceError(
                    f"energy increased for {bad_streak} consecutive iterations "
                    f"(step={model.step:g}); reduce the step size"
                )
        else:
            bad_streak = 0
        norm_prev = float(np.sqrt(np.sum(x * x)))
        norm_diff = float(np.sqrt(np.sum((x_new - x) ** 2)))
        if norm_prev > 0.0:
            rel = norm_diff / norm_prev
        else:
            # undefined at the zero start; only an infinite tol accepts it
            rel = 0.0 if norm_diff == 0.0 else np.inf
        x, e_prev = x_new, e_new
        if rel < tol or tol == np.inf:
            break
    if trace_path is not None:
        with open(Path(trace_path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "energy"])
            for i, e in enumerate(energies, start=1):
                writer.writerow([i, f"{e:.17g}"])
    return SolveResult(image=x, iterations=iterations, energies=energies)


def one_step_inference(
    model: EnergyModel, y: np.ndarray, c: BallConstraint, alpha: float
) -> np.ndarray:
    """Single unrolled inference step: project(H^T Y - alpha * sum_k L_k^T phi_k(L_k H^T Y)).

    H^T is realized per model.upsample_mode; `alpha` plays the combined role
    of lam * step in the iterative update.
    """
    y = as_image(y)
    u = upsample(model, y)
    feats = apply_filter_bank(model.bank, u)
    r = filter_bank_adjoint(model.bank, phi(feats, model.slopes))
    return prox_ball(u - alpha * r, c)


def lipschitz_estimate(model: EnergyModel, shape, iters: int = 20, seed: int = 0) -> float:
    """Largest eigenvalue of H^T H + lam * sum_k L_k^T L_k by power iteration."""
    if iters < 1:
        raise ValueError("power iteration needs at least one iteration")
    rng = np.random.Generator(np.random.PCG64(seed))
    v = rng.standard_normal(shape)
    v /= np.sqrt(np.sum(v * v))
    lam_max = 0.0
    for _ in range(iters):
        w = downscale_adjoint(downscale(v, model.scale), model.scale)
        if model.lam != 0.0:
            w = w + model.lam * filter_bank_adjoint(
                model.bank, apply_filter_bank(model.bank, v)
            )
        lam_max = float(np.sqrt(np.sum(w * w)))
        if lam_max == 0.0:
            return 0.0
        v = w / lam_max
    return lam_max
