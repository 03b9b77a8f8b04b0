"""Image carriers, PNG IO, the physical degradation model, and augmentation.

Images are numpy float64 arrays of shape (C, H, W) with C in {1, 3} and
intensities in [0, 1].  All randomized operations take an explicit seed or
generator and are reproducible bit-for-bit.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

VALID_SCALES = (1, 2, 4)


def as_image(arr: np.ndarray) -> np.ndarray:
    """Validate and coerce an array to the (C, H, W) float64 image layout."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[0] not in (1, 3):
        raise ValueError(f"expected (C,H,W) with C in {{1,3}}, got shape {a.shape}")
    if a.shape[1] < 1 or a.shape[2] < 1:
        raise ValueError(f"empty spatial dims: {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("image contains non-finite values")
    return a


@dataclass(frozen=True)
class DegradationSpec:
    """Forward observation model parameters: scale, noise level, RNG seed."""

    scale: int
    noise_sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.scale not in VALID_SCALES:
            raise ValueError(f"scale must be one of {VALID_SCALES}, got {self.scale}")
        if not 0.0 <= self.noise_sigma < 1.0:
            raise ValueError(f"noise_sigma must lie in [0, 1), got {self.noise_sigma}")


@dataclass
class SamplePair:
    """An LR observation with its HR ground truth."""

    lr: np.ndarray
    hr: np.ndarray

    def check(self, scale: int) -> "SamplePair":
        if self.hr.shape[1] != scale * self.lr.shape[1] or self.hr.shape[2] != scale * self.lr.shape[2]:
            raise ValueError(
                f"hr dims {self.hr.shape[1:]} are not {scale}x lr dims {self.lr.shape[1:]}"
            )
        return self


# ---------------------------------------------------------------------------
# PNG IO
# ---------------------------------------------------------------------------

def load_png(path) -> np.ndarray:
    """Load an 8-bit gray/RGB or 16-bit gray PNG as a (C, H, W) image in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image file: {path}")
    with Image.open(path) as im:
        mode = im.mode
        if mode == "RGB":
            data = np.asarray(im, dtype=np.float64) / 255.0
            return np.moveaxis(data, -1, 0)
        if mode == "L":
            return np.asarray(im, dtype=np.float64)[None] / 255.0
        if mode in ("I;16", "I"):
            return np.asarray(im, dtype=np.float64)[None] / 65535.0
        raise ValueError(
            f"unsupported PNG color type {mode!r} in {path}; "
            "expected 8-bit gray/RGB or 16-bit gray"
        )


def save_png(img: np.ndarray, path) -> None:
    """Write an image as an 8-bit PNG (gray for C=1, RGB for C=3)."""
    a = as_image(img)
    q = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    if a.shape[0] == 1:
        pil = Image.fromarray(q[0], mode="L")
    else:
        pil = Image.fromarray(np.moveaxis(q, 0, -1), mode="RGB")
    pil.save(Path(path), format="PNG")


# ---------------------------------------------------------------------------
# Resampling: cubic (a = -0.5) and linear kernels with anti-alias widening
# ---------------------------------------------------------------------------

def _cubic(x: np.ndarray) -> np.ndarray:
    # Keys cubic convolution kernel with a = -0.5, support [-2, 2].
    a = -0.5
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    out = np.where(
        ax <= 1.0,
        (a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0,
        np.where(ax < 2.0, a * ax3 - 5.0 * a * ax2 + 8.0 * a * ax - 4.0 * a, 0.0),
    )
    return out


def _linear(x: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(x))


_KERNELS = {"cubic": (_cubic, 2.0), "linear": (_linear, 1.0)}


@functools.lru_cache(maxsize=256)
def resize_matrix(n_in: int, n_out: int, kernel: str = "cubic") -> np.ndarray:
    """1-D resampling operator as an (n_out, n_in) row-stochastic matrix.

    Output sample i is taken at input coordinate (i + 0.5) * n_in / n_out - 0.5.
    When downscaling the kernel is widened by the inverse scale (anti-alias);
    out-of-range taps are clamped to the edge and rows renormalized to sum 1.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"resize_matrix needs positive sizes, got {n_in}->{n_out}")
    kfunc, support = _KERNELS[kernel]
    scale = n_out / n_in
    kscale = min(scale, 1.0)
    reach = support / kscale
    M = np.zeros((n_out, n_in))
    for i in range(n_out):
        u = (i + 0.5) / scale - 0.5
        lo = int(np.ceil(u - reach))
        hi = int(np.floor(u + reach))
        j = np.arange(lo, hi + 1)
        w = kfunc((j - u) * kscale)
        np.add.at(M[i], np.clip(j, 0, n_in - 1), w)
    M /= M.sum(axis=1, keepdims=True)
    M.setflags(write=False)
    return M


def _resize_chw(img: np.ndarray, h_out: int, w_out: int, kernel: str) -> np.ndarray:
    mh = resize_matrix(img.shape[1], h_out, kernel)
    mw = resize_matrix(img.shape[2], w_out, kernel)
    return np.einsum("oh,chw,pw->cop", mh, img, mw, optimize=True)


def bicubic_resize(img: np.ndarray, factor: float) -> np.ndarray:
    """Resample by a positive factor with the a=-0.5 cubic kernel.

    Output dims are round(input dims * factor).  Downscaling widens the
    kernel so high frequencies are suppressed before decimation.
    """
    a = as_image(img)
    if factor <= 0:
        raise ValueError(f"resize factor must be positive, got {factor}")
    h_out = int(round(a.shape[1] * factor))
    w_out = int(round(a.shape[2] * factor))
    if h_out < 1 or w_out < 1:
        raise ValueError(f"resize factor {factor} collapses image {a.shape[1:]} to nothing")
    return _resize_chw(a, h_out, w_out, "cubic")


def bilinear_resize(img: np.ndarray, factor: float) -> np.ndarray:
    """Resample with the linear kernel; same conventions as bicubic_resize."""
    a = as_image(img)
    if factor <= 0:
        raise ValueError(f"resize factor must be positive, got {factor}")
    h_out = int(round(a.shape[1] * factor))
    w_out = int(round(a.shape[2] * factor))
    return _resize_chw(a, h_out, w_out, "linear")


def degrade(img: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Apply the observation model: bicubic downscale by 1/s plus white noise.

    With noise_sigma == 0 the result is exactly the bicubic downscale (no
    clipping), so the noiseless path is bit-identical to bicubic_resize.
    """
    a = as_image(img)
    s = spec.scale
    if a.shape[1] % s or a.shape[2] % s:
        raise ValueError(f"image dims {a.shape[1:]} not divisible by scale {s}")
    low = bicubic_resize(a, 1.0 / s) if s > 1 else a.copy()
    if spec.noise_sigma == 0.0:
        return low
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    noisy = low + rng.normal(0.0, spec.noise_sigma, size=low.shape)
    return np.clip(noisy, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Noise estimation and frequency splitting
# ---------------------------------------------------------------------------

def estimate_noise_sigma(img: np.ndarray) -> float:
    """Estimate the white-noise standard deviation of an image.

    Uses the median absolute deviation of the finest diagonal (Haar) detail
    coefficients scaled by 1/0.6745; exact 0 on constant images and blind to
    planar ramps.
    """
    a = as_image(img)
    _, h, w = a.shape
    if h < 8 or w < 8:
        raise ValueError(f"need at least 8x8 pixels to estimate noise, got {h}x{w}")
    he, we = h - h % 2, w - w % 2
    x = a[:, :he, :we]
    d = 0.5 * (x[:, 0::2, 0::2] - x[:, 0::2, 1::2] - x[:, 1::2, 0::2] + x[:, 1::2, 1::2])
    return float(np.median(np.abs(d)) / 0.6745)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian kernel of odd size."""
    if size < 3 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {size}")
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def frequency_split(img: np.ndarray, kernel_size: int = 5, sigma_blur: float = 1.5):
    """Split into (low, high) bands; low is a Gaussian blur, high = img - low."""
    a = as_image(img)
    k = gaussian_kernel(kernel_size, sigma_blur)
    low = np.stack([ndimage.correlate(c, k, mode="mirror") for c in a])
    return low, a - low


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def flip_rotate(img: np.ndarray, t: int) -> np.ndarray:
    """Apply element t of the dihedral group D4: t%4 quarter-turns, flip if t>=4."""
    if not 0 <= t <= 7:
        raise ValueError(f"transform index must be in 0..7, got {t}")
    a = as_image(img)
    if t >= 4:
        a = a[:, :, ::-1]
    return np.ascontiguousarray(np.rot90(a, k=t % 4, axes=(1, 2)))


def inverse_flip_rotate(img: np.ndarray, t: int) -> np.ndarray:
    """Inverse of flip_rotate(_, t); exact for every t."""
    if not 0 <= t <= 7:
        raise ValueError(f"transform index must be in 0..7, got {t}")
    a = np.rot90(as_image(img), k=-(t % 4), axes=(1, 2))
    if t >= 4:
        a = a[:, :, ::-1]
    return np.ascontiguousarray(a)


def mixup(a: SamplePair, b: SamplePair, lam: float) -> SamplePair:
    """Blend two training pairs with one shared coefficient on LR and HR."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup coefficient must lie in [0, 1], got {lam}")
    if a.lr.shape != b.lr.shape or a.hr.shape != b.hr.shape:
        raise ValueError(
            f"mixup needs matching dims, got lr {a.lr.shape} vs {b.lr.shape}, "
            f"hr {a.hr.shape} vs {b.hr.shape}"
        )
    return SamplePair(
        lr=lam * a.lr + (1.0 - lam) * b.lr,
        hr=lam * a.hr + (1.0 - lam) * b.hr,
    )


def extract_patches(img: np.ndarray, size: int, count: int, seed: int) -> list:
    """Crop `count` square patches at seeded uniform-random positions."""
    a = as_image(img)
    _, h, w = a.shape
    if size > min(h, w):
        raise ValueError(f"patch size {size} exceeds image dims {h}x{w}")
    rng = np.random.Generator(np.random.PCG64(seed))
    tops = rng.integers(0, h - size + 1, size=count)
    lefts = rng.integers(0, w - size + 1, size=count)
    return [a[:, t : t + size, l : l + size].copy() for t, l in zip(tops, lefts)]


# ---------------------------------------------------------------------------
# Dataset layout: <root>/{hr,lr}/NNNN.png
# ---------------------------------------------------------------------------

def list_pngs(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"no such directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")


def matched_pair_names(root) -> list:
    """Filenames present in both <root>/hr and <root>/lr, sorted."""
    root = Path(root)
    hr_names = {p.name for p in list_pngs(root / "hr")}
    lr_names = {p.name for p in list_pngs(root / "lr")}
    names = sorted(hr_names & lr_names)
    if not names:
        raise ValueError(f"no matching hr/lr PNG pairs under {root}")
    return names


def load_pair_dataset(root) -> list:
    """Load SamplePairs from <root>/hr and <root>/lr, matched by filename."""
    root = Path(root)
    return [
        SamplePair(lr=load_png(root / "lr" / n), hr=load_png(root / "hr" / n))
        for n in matched_pair_names(root)
    ]
