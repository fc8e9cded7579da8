"""Evaluation metrics: PSNR, single-scale SSIM, normal MAE, env-map PSNR.

All functions are pure and symmetric in their image arguments.  Inputs are
float arrays in [0, 1]; callers are responsible for any transfer-function
conversion before comparing against 8-bit ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0


@dataclass
class MetricBundle:
    """One evaluation pass worth of numbers."""

    psnr: float
    ssim: float
    mae: float | None = None
    epsnr: float | None = None
    pixel_count: int = 0
    mask_count: int = 0

    def as_dict(self) -> dict:
        return {
            "psnr": self.psnr,
            "ssim": self.ssim,
            "mae": self.mae,
            "epsnr": self.epsnr,
            "pixel_count": self.pixel_count,
            "mask_count": self.mask_count,
        }


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """10*log10(1/MSE) for unit dynamic range, capped at 99 dB."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mse = np.mean((pred - gt) ** 2)
    if mse < 1e-10:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def ssim(pred: np.ndarray, gt: np.ndarray, window: int = 11,
         sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean single-scale SSIM on channel-mean grayscale, valid windows only."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim == 3:
        pred = pred.mean(axis=2)
        gt = gt.mean(axis=2)
    if min(pred.shape) < window:
        raise ValueError("image smaller than the SSIM window")

    kern = _gaussian_kernel(window, sigma)
    half = window // 2

    def smooth(img):
        out = correlate1d(img, kern, axis=0, mode="constant")
        out = correlate1d(out, kern, axis=1, mode="constant")
        return out[half:-half or None, half:-half or None]

    mu_p = smooth(pred)
    mu_g = smooth(gt)
    var_p = smooth(pred * pred) - mu_p ** 2
    var_g = smooth(gt * gt) - mu_g ** 2
    cov = smooth(pred * gt) - mu_p * mu_g

    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2
    num = (2 * mu_p * mu_g + c1) * (2 * cov + c2)
    den = (mu_p ** 2 + mu_g ** 2 + c1) * (var_p + var_g + c2)
    return float(np.mean(num / den))


def mae_normals(pred: np.ndarray, gt: np.ndarray,
                mask: np.ndarray) -> tuple[float, int]:
    """Mean angular error in degrees over the masked pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty evaluation mask for normal MAE")
    p = pred[mask]
    g = gt[mask]
    dots = np.clip((p * g).sum(axis=-1), -1.0, 1.0)
    deg = np.degrees(np.arccos(dots))
    return float(deg.mean()), int(mask.sum())


def epsnr(pred_env: np.ndarray, gt_env: np.ndarray) -> float:
    """PSNR between environment maps after resampling to the gt resolution.

    Both maps are clamped to [0, 1]; no exposure or rotation alignment is
    attempted, matching the low absolute values this protocol reports.
    """
    pred_env = np.asarray(pred_env, dtype=np.float64)
    gt_env = np.asarray(gt_env, dtype=np.float64)
    if pred_env.shape != gt_env.shape:
        pred_env = resample_bilinear(pred_env, gt_env.shape[0], gt_env.shape[1])
    return psnr(np.clip(pred_env, 0.0, 1.0), np.clip(gt_env, 0.0, 1.0))


def resample_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize with horizontal wraparound (equirectangular)."""
    src_h, src_w = img.shape[:2]
    if (src_h, src_w) == (h, w):
        return img
    v = (np.arange(h) + 0.5) / h
    u = (np.arange(w) + 0.5) / w
    py = np.clip(v * src_h - 0.5, 0.0, src_h - 1.0)
    px = u * src_w - 0.5
    y0 = np.clip(np.floor(py).astype(int), 0, src_h - 2) if src_h > 1 \
        else np.zeros(h, dtype=int)
    fy = py - y0
    y1 = np.minimum(y0 + 1, src_h - 1)
    x0 = np.floor(px).astype(int) % src_w
    fx = px - np.floor(px)
    x1 = (x0 + 1) % src_w
    top = img[y0][:, x0] * (1 - fx)[None, :, None] \
        + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] \
        + img[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
