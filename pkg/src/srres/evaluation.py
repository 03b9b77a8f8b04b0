"""Quality metrics, self-ensembling, and dataset-level reporting."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.signal import correlate2d

from .imaging import as_image, flip_rotate, gaussian_kernel, inverse_flip_rotate
from .losses import FeatureExtractor

PSNR_CAP_DB = 100.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over all pixels ([0,1] range, cap 100)."""
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local structural similarity, 11x11 Gaussian window sigma 1.5.

    Standard constants K1=0.01, K2=0.03 at dynamic range 1; local statistics
    from valid-mode windowed means, averaged over channels.
    """
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[1] < 11 or a.shape[2] < 11:
        raise ValueError(f"need at least 11x11 pixels, got {a.shape[1:]}")
    w = gaussian_kernel(11, 1.5)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for x, y in zip(a, b):
        mu_x = correlate2d(x, w, mode="valid")
        mu_y = correlate2d(y, w, mode="valid")
        var_x = correlate2d(x * x, w, mode="valid") - mu_x * mu_x
        var_y = correlate2d(y * y, w, mode="valid") - mu_y * mu_y
        cov = correlate2d(x * y, w, mode="valid") - mu_x * mu_y
        s = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
            (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        )
        vals.append(float(s.mean()))
    return float(np.mean(vals))


def lpips_distance(extractor, a: np.ndarray, b: np.ndarray) -> float:
    """Perceptual distance: channel-normalized feature diffs, squared,
    spatially averaged, summed over stages with unit weights."""
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    with torch.no_grad():
        fa = extractor(torch.as_tensor(a).unsqueeze(0))
        fb = extractor(torch.as_tensor(b).unsqueeze(0))
        total = 0.0
        for x, y in zip(fa, fb):
            nx = x / (x.norm(dim=1, keepdim=True) + 1e-10)
            ny = y / (y.norm(dim=1, keepdim=True) + 1e-10)
            total += float(((nx - ny) ** 2).sum(dim=1).mean())
    return total


def self_ensemble(model_fn, lr: np.ndarray) -> np.ndarray:
    """Average the model over all 8 dihedral transforms, aligned back."""
    outs = []
    for t in range(8):
        out = inverse_flip_rotate(model_fn(flip_rotate(lr, t)), t)
        if outs and out.shape != outs[0].shape:
            raise ValueError(
                f"model output dims changed across transforms: {out.shape} vs {outs[0].shape}"
            )
        outs.append(out)
    return np.mean(outs, axis=0)


@dataclass
class MetricRow:
    id: str
    psnr: float = math.nan
    ssim: float = math.nan
    lpips: float = math.nan
    error: str = ""


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def write_csv(self, path):
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "psnr", "ssim", "lpips"])
            for r in self.rows:
                if r.error:
                    writer.writerow([r.id, "error", "error", r.error])
                else:
                    writer.writerow([r.id, f"{r.psnr:.6f}", f"{r.ssim:.6f}", f"{r.lpips:.6f}"])
            writer.writerow(
                [
                    "aggregate",
                    f"{self.aggregate['psnr']:.6f}",
                    f"{self.aggregate['ssim']:.6f}",
                    f"{self.aggregate['lpips']:.6f}",
                ]
            )

    def write_json(self, path):
        payload = {
            "rows": [vars(r) for r in self.rows],
            "aggregate": self.aggregate,
        }
        Path(path).write_text(json.dumps(payload, indent=2))


def evaluate_pairs(
    model_fn,
    pairs,
    ensemble: bool = False,
    border: int | None = None,
    extractor=None,
    ids=None,
    csv_path=None,
    json_path=None,
) -> MetricReport:
    """Run inference over LR/HR pairs and compute PSNR/SSIM/LPIPS per image.

    `border` crops that many pixels from each edge before the metrics; None
    uses the pair's scale factor.  Per-pair failures are recorded in the row
    instead of aborting the run.
    """
    if not pairs:
        raise ValueError("no pairs to evaluate")
    report = MetricReport()
    acc = {"psnr": [], "ssim": [], "lpips": []}
    for i, pair in enumerate(pairs):
        row = MetricRow(id=str(ids[i]) if ids is not None else f"{i:04d}")
        try:
            if extractor is None:
                extractor = FeatureExtractor(channels=pair.hr.shape[0])
            sr = self_ensemble(model_fn, pair.lr) if ensemble else model_fn(pair.lr)
            if sr.shape != pair.hr.shape:
                raise ValueError(f"output dims {sr.shape} do not match hr {pair.hr.shape}")
            b = border if border is not None else pair.hr.shape[1] // pair.lr.shape[1]
            sr_c = sr[:, b : sr.shape[1] - b, b : sr.shape[2] - b] if b else sr
            hr_c = pair.hr[:, b : pair.hr.shape[1] - b, b : pair.hr.shape[2] - b] if b else pair.hr
            row.psnr = psnr(sr_c, hr_c)
            row.ssim = ssim(sr_c, hr_c)
            row.lpips = lpips_distance(extractor, sr_c, hr_c)
            for key in acc:
                acc[key].append(getattr(row, key))
        except (ValueError, RuntimeError) as exc:
            row.error = str(exc)
        report.rows.append(row)
    report.aggregate = {
        key: (float(np.mean(vals)) if vals else math.nan) for key, vals in acc.items()
    }
    if csv_path is not None:
        report.write_csv(csv_path)
    if json_path is not None:
        report.write_json(json_path)
    return report


def evaluate_dataset(checkpoint, pairs, ensemble: bool = False, **kwargs) -> MetricReport:
    """Evaluate a trained SR checkpoint over LR/HR pairs.

    The noise level fed to the projection layer is estimated from each LR
    input; remaining keyword arguments pass through to evaluate_pairs.
    """
    from .imaging import estimate_noise_sigma
    from .networks import gsr_forward
    from .training import load_sr_generator

    model = load_sr_generator(checkpoint)

    def model_fn(lr_img):
        return gsr_forward(model, lr_img, estimate_noise_sigma(lr_img))

    return evaluate_pairs(model_fn, pairs, ensemble=ensemble, **kwargs)
