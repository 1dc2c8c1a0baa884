"""Image quality metrics: PSNR, SSIM, UCIQE and UIQM.

All metrics operate on ``(H, W, 3)`` float arrays with intensities in
``[0, 1]``.  The exact definitions are frozen here so scores stay
reproducible across versions:

* **PSNR** ``10*log10(1 / MSE)`` (peak 1.0); identical images report
  ``+inf``.
* **SSIM** on BT.601 luminance (``0.299 R + 0.587 G + 0.114 B``), 11x11
  Gaussian window with sigma 1.5 over valid positions only (no padding),
  ``K1 = 0.01``, ``K2 = 0.03``, dynamic range 1.
* **UCIQE** ``0.4680 * sigma_chroma + 0.2745 * contrast_l + 0.2576 *
  mean_saturation`` in CIELab (sRGB linearization, D65 white point).
  ``sigma_chroma`` and the luminance contrast use L*, a*, b* divided by
  100; saturation is ``chroma / L*`` (0 where ``L* = 0``); the contrast is
  the mean of the top 1% of L* minus the mean of the bottom 1%, with
  ``ceil(0.01 * N)`` pixels per tail.
* **UIQM** ``0.0282 * UICM + 0.2953 * UISM + 3.5753 * UIConM``.
  UICM uses the opponent channels ``RG = R - G`` and
  ``YB = (R + G) / 2 - B``: each is alpha-trimmed with
  ``floor(0.1 * N)`` pixels dropped from both ends of the sorted values
  for the mean, while the variance averages squared deviations from that
  trimmed mean over *all* pixels; then
  ``-0.0268 * sqrt(mu_RG^2 + mu_YB^2) + 0.1586 * sqrt(s_RG^2 + s_YB^2)``.
  UISM computes, per channel, the Sobel gradient magnitude (3x3 kernels,
  reflect padding) and an EME over 8x8 blocks of that edge map
  (``2/(k1*k2) * sum(ln(max/min))``, blocks with ``min <= 0`` contribute
  0), combined with BT.601 weights.  UIConM is a log-AMEE over 8x8 blocks
  of the BT.601 luminance: ``-1/(k1*k2) * sum(m * ln(m))`` with
  ``m = (max - min)/(max + min)`` and degenerate blocks contributing 0.
  Images are cropped (not padded) to block multiples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate
from scipy.signal import convolve2d

BLOCK = 8
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

UCIQE_COEFFS = (0.4680, 0.2745, 0.2576)
UIQM_COEFFS = (0.0282, 0.2953, 3.5753)
UICM_COEFFS = (-0.0268, 0.1586)

SOBEL_X = np.array([[1, 0, -1], [2, 0, -2], [1, 0, -1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T


class MetricError(ValueError):
    """Raised for malformed metric inputs."""


@dataclass(frozen=True)
class MetricReport:
    """One row of quality scores; full-reference fields may be absent."""

    psnr: float | None
    ssim: float | None
    uciqe: float
    uiqm: float
    uicm: float
    uism: float
    uiconm: float


def _check_image(img: np.ndarray, name: str) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise MetricError(f"{name} must have shape (H, W, 3), got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise MetricError(f"{name} contains non-finite values")
    return img


def _luminance(img: np.ndarray) -> np.ndarray:
    r, g, b = LUMA_WEIGHTS
    return r * img[..., 0] + g * img[..., 1] + b * img[..., 2]


# ---------------------------------------------------------------------------
# full-reference metrics
# ---------------------------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = _check_image(a, "a")
    b = _check_image(b, "b")
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(a: np.ndarray, b: np.ndarray, window_size: int = 11, sigma: float = 1.5) -> float:
    a = _check_image(a, "a")
    b = _check_image(b, "b")
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < window_size:
        raise MetricError(
            f"image {a.shape[:2]} smaller than the {window_size}x{window_size} window"
        )
    x = _luminance(a)
    y = _luminance(b)
    window = _gaussian_window(window_size, sigma)

    def filt(img: np.ndarray) -> np.ndarray:
        return convolve2d(img, window, mode="valid")

    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    mu_x = filt(x)
    mu_y = filt(y)
    sigma_x = filt(x * x) - mu_x ** 2
    sigma_y = filt(y * y) - mu_y ** 2
    sigma_xy = filt(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sigma_xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sigma_x + sigma_y + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# color space
# ---------------------------------------------------------------------------

_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_D65 = np.array([0.95047, 1.0, 1.08883])


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """sRGB in [0,1] to CIELab (D65); returns (H, W, 3) as L*, a*, b*."""
    img = _check_image(img, "img")
    linear = np.where(
        img <= 0.04045, img / 12.92, ((img + 0.055) / 1.055) ** 2.4
    )
    xyz = linear @ _RGB_TO_XYZ.T
    ratio = xyz / _D65
    eps = (6.0 / 29.0) ** 3
    f = np.where(
        ratio > eps, np.cbrt(ratio), ratio / (3.0 * (6.0 / 29.0) ** 2) + 4.0 / 29.0
    )
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


# ---------------------------------------------------------------------------
# no-reference metrics
# ---------------------------------------------------------------------------


def uciqe(img: np.ndarray) -> float:
    lab = rgb_to_lab(img)
    l_star = lab[..., 0]
    chroma = np.sqrt(lab[..., 1] ** 2 + lab[..., 2] ** 2)

    sigma_chroma = float(np.std(chroma / 100.0))

    l_flat = np.sort((l_star / 100.0).ravel())
    k = math.ceil(0.01 * l_flat.size)
    contrast = float(np.mean(l_flat[-k:]) - np.mean(l_flat[:k]))

    with np.errstate(divide="ignore", invalid="ignore"):
        saturation = np.where(l_star > 0.0, chroma / l_star, 0.0)
    mean_sat = float(np.mean(saturation))

    c1, c2, c3 = UCIQE_COEFFS
    return c1 * sigma_chroma + c2 * contrast + c3 * mean_sat


def _trimmed_stats(values: np.ndarray, alpha: float = 0.1) -> tuple[float, float]:
    """Alpha-trimmed mean plus full-population variance about it."""
    flat = np.sort(values.ravel())
    n = flat.size
    k = int(alpha * n)
    core = flat[k : n - k] if n - 2 * k > 0 else flat
    mu = float(np.mean(core))
    var = float(np.mean((values - mu) ** 2))
    return mu, var


def _crop_to_blocks(plane: np.ndarray, block: int = BLOCK) -> np.ndarray:
    h = (plane.shape[0] // block) * block
    w = (plane.shape[1] // block) * block
    if h == 0 or w == 0:
        raise MetricError(
            f"image {plane.shape} smaller than one {block}x{block} block"
        )
    return plane[:h, :w]


def _block_minmax(plane: np.ndarray, block: int = BLOCK) -> tuple[np.ndarray, np.ndarray]:
    h, w = plane.shape
    tiles = plane.reshape(h // block, block, w // block, block)
    return tiles.max(axis=(1, 3)), tiles.min(axis=(1, 3))


def _sobel_magnitude(plane: np.ndarray) -> np.ndarray:
    # Work on the 0..255 scale: 8-bit grid values become exact float64
    # integers, so gradients that cancel mathematically come out as exact
    # zeros instead of ~1e-16 residues that would explode the max/min
    # ratio below.  The ratio itself is scale-free, so this changes
    # nothing else.
    plane = plane * 255.0
    gx = correlate(plane, SOBEL_X, mode="reflect")
    gy = correlate(plane, SOBEL_Y, mode="reflect")
    return np.sqrt(gx * gx + gy * gy)


def _eme(plane: np.ndarray, block: int = BLOCK) -> float:
    plane = _crop_to_blocks(plane, block)
    bmax, bmin = _block_minmax(plane, block)
    valid = bmin > 0.0
    ratio = np.ones_like(bmax)
    np.divide(bmax, bmin, out=ratio, where=valid)
    terms = np.where(valid & (bmax > 0.0), np.log(ratio), 0.0)
    k1k2 = bmax.size
    return float(2.0 / k1k2 * np.sum(terms))


def _log_amee(plane: np.ndarray, block: int = BLOCK) -> float:
    plane = _crop_to_blocks(plane, block)
    bmax, bmin = _block_minmax(plane, block)
    total = bmax + bmin
    spread = bmax - bmin
    valid = (total > 0.0) & (spread > 0.0)
    m = np.zeros_like(spread)
    np.divide(spread, total, out=m, where=valid)
    terms = np.where(valid, m * np.log(m, out=np.zeros_like(m), where=valid), 0.0)
    k1k2 = bmax.size
    return float(-np.sum(terms) / k1k2)


def uicm(img: np.ndarray) -> float:
    img = _check_image(img, "img")
    rg = img[..., 0] - img[..., 1]
    yb = (img[..., 0] + img[..., 1]) / 2.0 - img[..., 2]
    mu_rg, var_rg = _trimmed_stats(rg)
    mu_yb, var_yb = _trimmed_stats(yb)
    c_mu, c_sigma = UICM_COEFFS
    return c_mu * math.hypot(mu_rg, mu_yb) + c_sigma * math.sqrt(var_rg + var_yb)


def uism(img: np.ndarray) -> float:
    img = _check_image(img, "img")
    total = 0.0
    for channel, weight in enumerate(LUMA_WEIGHTS):
        edges = _sobel_magnitude(img[..., channel])
        total += weight * _eme(edges)
    return total


def uiconm(img: np.ndarray) -> float:
    img = _check_image(img, "img")
    return _log_amee(_luminance(img))


def uiqm(img: np.ndarray) -> tuple[float, float, float, float]:
    """Returns ``(uiqm, uicm, uism, uiconm)``."""
    img = _check_image(img, "img")
    colour = uicm(img)
    sharp = uism(img)
    contrast = uiconm(img)
    c1, c2, c3 = UIQM_COEFFS
    return c1 * colour + c2 * sharp + c3 * contrast, colour, sharp, contrast


def metric_report(img: np.ndarray, reference: np.ndarray | None = None) -> MetricReport:
    """All scores for one image, with PSNR/SSIM when a reference exists."""
    score, colour, sharp, contrast = uiqm(img)
    return MetricReport(
        psnr=psnr(img, reference) if reference is not None else None,
        ssim=ssim(img, reference) if reference is not None else None,
        uciqe=uciqe(img),
        uiqm=score,
        uicm=colour,
        uism=sharp,
        uiconm=contrast,
    )
