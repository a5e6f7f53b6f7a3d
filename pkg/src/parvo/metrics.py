"""Image-quality metrics: PSNR, SSIM, and the non-random-outcome classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray

PSNR_CAP = 100.0
PSNR_ZERO_MSE = 1e-10
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
CONVERGENCE_MARGIN_DB = 2.0
_NOISE_BASELINE_SEED = 0xC0FFEE


@dataclass
class QualityScore:
    psnr_db: float
    ssim: float
    converged_eval: bool


def _gray(a: Array) -> Array:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3:
        return a.mean(axis=0)
    if a.ndim != 2:
        raise ValueError("expected [H,W] or [C,H,W] image, got shape %s" % (a.shape,))
    return a


def psnr(a: Array, b: Array) -> float:
    """10*log10(1/MSE) for unit-range images, capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("psnr: shapes differ: %s vs %s" % (a.shape, b.shape))
    mse = float(((a - b) ** 2).mean())
    if mse < PSNR_ZERO_MSE:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gaussian_kernel(size: int, sigma: float) -> Array:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r * r) / (2.0 * sigma * sigma))
    k /= k.sum()
    return np.outer(k, k)


def _windowed_mean(img: Array, kernel: Array) -> Array:
    w = kernel.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(img, (w, w))
    return np.tensordot(view, kernel, axes=([2, 3], [0, 1]))


def ssim(a: Array, b: Array) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), range 1.0.

    RGB inputs are channel-averaged to grayscale first.
    """
    a = _gray(a)
    b = _gray(b)
    if a.shape != b.shape:
        raise ValueError("ssim: shapes differ: %s vs %s" % (a.shape, b.shape))
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(
            "ssim: image %s smaller than the %dx%d window" % (a.shape, SSIM_WINDOW, SSIM_WINDOW)
        )
    k = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu1 = _windowed_mean(a, k)
    mu2 = _windowed_mean(b, k)
    s11 = _windowed_mean(a * a, k) - mu1 * mu1
    s22 = _windowed_mean(b * b, k) - mu2 * mu2
    s12 = _windowed_mean(a * b, k) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float((num / den).mean())


def noise_baseline_psnr(target: Array) -> float:
    """PSNR of a fixed seeded uniform-noise image against the target."""
    rng = np.random.default_rng(_NOISE_BASELINE_SEED)
    return psnr(rng.random(np.asarray(target).shape), target)


def eval_convergence(x_star: Array, target: Array) -> bool:
    """True iff the reconstruction beats seeded random noise by 2 dB."""
    return psnr(x_star, target) >= noise_baseline_psnr(target) + CONVERGENCE_MARGIN_DB


def quality_score(x_star: Array, target: Array) -> QualityScore:
    return QualityScore(
        psnr_db=psnr(x_star, target),
        ssim=ssim(x_star, target),
        converged_eval=eval_convergence(x_star, target),
    )
