"""Reconstruction and flow metrics used by the benchmark and eval CLI."""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d

from .errors import NoOverlap, SizeMismatch, TooSmall

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise SizeMismatch(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(pred, ref) -> float:
    """Peak signal-to-noise ratio in dB for images valued in [0, 1].

    Identical images (MSE 0) return the 99 dB cap; everything else is
    10*log10(1/MSE), also capped.
    """
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _check_same_shape(pred, ref)
    mse = float(np.mean((pred - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def to_grayscale(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] == 1:
            return img[..., 0]
        if img.shape[2] == 3:
            return img @ LUMA_WEIGHTS
        raise SizeMismatch(f"expected 1 or 3 channels, got {img.shape[2]}")
    return img


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(pred, ref) -> float:
    """Single-scale structural similarity on grayscale-converted images.

    11x11 Gaussian window with sigma 1.5, stability constants k1 = 0.01 and
    k2 = 0.03, dynamic range 1. The mean over all fully-covered window
    positions is returned.
    """
    p = np.asarray(pred, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    _check_same_shape(p, r)
    p = to_grayscale(p)
    r = to_grayscale(r)
    if min(p.shape) < SSIM_WINDOW:
        raise TooSmall(f"image {p.shape} smaller than the {SSIM_WINDOW}px window")
    win = _gaussian_window()
    conv = lambda img: convolve2d(img, win, mode="valid")
    mu_p = conv(p)
    mu_r = conv(r)
    var_p = conv(p * p) - mu_p ** 2
    var_r = conv(r * r) - mu_r ** 2
    cov = conv(p * r) - mu_p * mu_r
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2.0 * mu_p * mu_r + c1) * (2.0 * cov + c2)
    den = (mu_p ** 2 + mu_r ** 2 + c1) * (var_p + var_r + c2)
    return float(np.mean(num / den))


def epe(pred, ref) -> float:
    """Mean Euclidean endpoint error in pixels over mutually valid cells."""
    if pred.shape != ref.shape:
        raise SizeMismatch(f"flow shapes differ: {pred.shape} vs {ref.shape}")
    both = pred.valid & ref.valid
    if not both.any():
        raise NoOverlap("no mutually valid pixels")
    du = pred.u - ref.u
    dv = pred.v - ref.v
    return float(np.hypot(du, dv)[both].mean())


def mask_iou(pred, ref, thresh: float = 0.5) -> float:
    """Intersection over union of thresholded masks; 1.0 when both empty."""
    p = np.asarray(pred, dtype=np.float64) >= thresh
    r = np.asarray(ref, dtype=np.float64) >= thresh
    _check_same_shape(p, r)
    union = np.logical_or(p, r).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, r).sum() / union)
