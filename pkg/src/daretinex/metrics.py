"""Full-reference and no-reference image quality metrics.

Full-reference metrics take ``(pred, gt)`` as ``(H, W, 3)`` arrays in
[0, 1] of identical shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import gammaincinv

from .errors import DegenerateInputError, ShapeError
from .image_io import srgb_to_lab

PSNR_CAP = 100.0
SRER_CAP = 100.0
NORM_EPS = 1e-6

SAM_NOTE = "SAM reported as mean spectral angle in degrees (lower is better)"


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} differ")
    return pred, gt


def _channels(img):
    return img[..., None] if img.ndim == 2 else img


def mse(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.mean((pred - gt) ** 2))


def psnr(pred, gt) -> float:
    """Peak signal-to-noise ratio in dB for data range 1; capped at 100."""
    err = mse(pred, gt)
    if err == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / err)))


def rmse(pred, gt) -> float:
    return float(np.sqrt(mse(pred, gt)))


def srer(pred, gt) -> float:
    """Signal to reconstruction error ratio, 10 log10(mean(gt^2) / MSE)."""
    pred, gt = _pair(pred, gt)
    err = mse(pred, gt)
    if err == 0:
        return SRER_CAP
    return float(min(SRER_CAP, 10.0 * np.log10(np.mean(gt**2) / err)))


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, taps):
    """Separable 'valid' correlation of a 2-D array with a 1-D kernel."""
    rows = sliding_window_view(img, len(taps), axis=0) @ taps
    return sliding_window_view(rows, len(taps), axis=1) @ taps


def _ssim_channel(x, y, window, c1, c2):
    mu_x = _filter_valid(x, window)
    mu_y = _filter_valid(y, window)
    xx = _filter_valid(x * x, window) - mu_x * mu_x
    yy = _filter_valid(y * y, window) - mu_y * mu_y
    xy = _filter_valid(x * y, window) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def ssim(pred, gt, win_size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0) -> float:
    """Gaussian-window SSIM averaged over channels (valid region only)."""
    pred, gt = _pair(pred, gt)
    pred, gt = _channels(pred), _channels(gt)
    if min(pred.shape[:2]) < win_size:
        raise ShapeError(f"image {pred.shape[:2]} smaller than the {win_size}x{win_size} SSIM window")
    window = _gaussian_window(win_size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    return float(np.mean([
        _ssim_channel(pred[..., c], gt[..., c], window, c1, c2) for c in range(pred.shape[2])
    ]))


def _uqi_channel(x, y, block):
    n = block * block
    taps = np.ones(block)
    sx = _filter_valid(x, taps)
    sy = _filter_valid(y, taps)
    sxx = _filter_valid(x * x, taps)
    syy = _filter_valid(y * y, taps)
    sxy = _filter_valid(x * y, taps)
    num = 4 * (n * sxy - sx * sy) * sx * sy
    den_var = n * (sxx + syy) - sx * sx - sy * sy
    den_mean = sx * sx + sy * sy
    den = den_var * den_mean
    q = np.ones_like(den)
    flat = (den_var == 0) & (den_mean != 0)
    q[flat] = 2 * sx[flat] * sy[flat] / den_mean[flat]
    ok = den != 0
    q[ok] = num[ok] / den[ok]
    return float(np.mean(q))


def uqi(pred, gt, block=8) -> float:
    """Universal quality index over sliding ``block`` x ``block`` windows.

    Windows where both images are flat use the mean-luminance term alone;
    windows that are flat and black in both count as a perfect match.
    """
    pred, gt = _pair(pred, gt)
    pred, gt = _channels(pred), _channels(gt)
    if min(pred.shape[:2]) < block:
        raise ShapeError(f"image {pred.shape[:2]} smaller than the UQI window")
    return float(np.mean([_uqi_channel(gt[..., c], pred[..., c], block) for c in range(pred.shape[2])]))


def _angles_deg(pred, gt):
    p = pred.reshape(-1, 3)
    g = gt.reshape(-1, 3)
    keep = (np.linalg.norm(p, axis=1) >= NORM_EPS) & (np.linalg.norm(g, axis=1) >= NORM_EPS)
    p, g = p[keep], g[keep]
    cross = np.linalg.norm(np.cross(p, g), axis=1)
    dot = np.sum(p * g, axis=1)
    return np.degrees(np.arctan2(cross, dot))


def angular_error(pred, gt):
    """Per-pixel RGB angle in degrees: ``(mean, median, (mean + median) / 2)``."""
    pred, gt = _pair(pred, gt)
    if pred.shape[-1] != 3:
        raise ShapeError("angular error needs 3-channel images")
    ang = _angles_deg(pred, gt)
    if ang.size == 0:
        raise DegenerateInputError("every pixel has a (near) zero RGB vector")
    mean, median = float(np.mean(ang)), float(np.median(ang))
    return mean, median, (mean + median) / 2.0


def sam(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    ang = _angles_deg(pred, gt)
    if ang.size == 0:
        raise DegenerateInputError("every pixel has a (near) zero RGB vector")
    return float(np.mean(ang))


def colorfulness(img) -> float:
    """Hasler-Suesstrunk colorfulness on the 0-255 scale."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"colorfulness needs an H x W x 3 image, got {img.shape}")
    r, g, b = (img[..., c] * 255.0 for c in range(3))
    rg = r - g
    yb = 0.5 * (r + g) - b
    return float(np.sqrt(rg.var() + yb.var()) + 0.3 * np.sqrt(rg.mean() ** 2 + yb.mean() ** 2))


def ciede2000(lab1, lab2, kL=1.0, kC=1.0, kH=1.0):
    """Per-element CIEDE2000 difference of two ``(..., 3)`` L*a*b* arrays."""
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    L1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    L2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    C1 = np.hypot(a1, b1)
    C2 = np.hypot(a2, b2)
    Cbar7 = ((C1 + C2) / 2.0) ** 7
    G = 0.5 * (1 - np.sqrt(Cbar7 / (Cbar7 + 25.0**7)))
    a1p, a2p = (1 + G) * a1, (1 + G) * a2
    C1p, C2p = np.hypot(a1p, b1), np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360.0
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360.0

    dLp = L2 - L1
    dCp = C2p - C1p
    zero_chroma = (C1p * C2p) == 0
    dh = h2p - h1p
    dh = np.where(dh > 180, dh - 360, np.where(dh < -180, dh + 360, dh))
    dh = np.where(zero_chroma, 0.0, dh)
    dHp = 2 * np.sqrt(C1p * C2p) * np.sin(np.radians(dh) / 2)

    Lbar = (L1 + L2) / 2
    Cbarp = (C1p + C2p) / 2
    hsum = h1p + h2p
    hbar = np.where(
        np.abs(h1p - h2p) <= 180,
        hsum / 2,
        np.where(hsum < 360, (hsum + 360) / 2, (hsum - 360) / 2),
    )
    hbar = np.where(zero_chroma, hsum, hbar)

    T = (
        1
        - 0.17 * np.cos(np.radians(hbar - 30))
        + 0.24 * np.cos(np.radians(2 * hbar))
        + 0.32 * np.cos(np.radians(3 * hbar + 6))
        - 0.20 * np.cos(np.radians(4 * hbar - 63))
    )
    dtheta = 30 * np.exp(-(((hbar - 275) / 25) ** 2))
    Cbarp7 = Cbarp**7
    RC = 2 * np.sqrt(Cbarp7 / (Cbarp7 + 25.0**7))
    SL = 1 + 0.015 * (Lbar - 50) ** 2 / np.sqrt(20 + (Lbar - 50) ** 2)
    SC = 1 + 0.045 * Cbarp
    SH = 1 + 0.015 * Cbarp * T
    RT = -np.sin(np.radians(2 * dtheta)) * RC

    tl = dLp / (kL * SL)
    tc = dCp / (kC * SC)
    th = dHp / (kH * SH)
    return np.sqrt(tl**2 + tc**2 + th**2 + RT * tc * th)


def delta_e2000(pred, gt) -> float:
    """Mean CIEDE2000 difference after sRGB -> Lab conversion."""
    pred, gt = _pair(pred, gt)
    return float(np.mean(ciede2000(srgb_to_lab(pred), srgb_to_lab(gt))))


def secondary_full_reference(pred, gt) -> Dict[str, float]:
    return {
        "rmse": rmse(pred, gt),
        "uqi": uqi(pred, gt),
        "sam_deg": sam(pred, gt),
        "srer_db": srer(pred, gt),
    }


# ---------------------------------------------------------------------------
# noise level


def _gradient_operator(patch: int):
    """Rows of the horizontal and vertical [-1/2, 0, 1/2] derivative operators
    acting on a vectorized ``patch`` x ``patch`` block (valid positions only)."""
    rows = []
    for r in range(patch):
        for c in range(patch - 2):
            v = np.zeros((patch, patch))
            v[r, c], v[r, c + 2] = -0.5, 0.5
            rows.append(v.ravel())
    for r in range(patch - 2):
        for c in range(patch):
            v = np.zeros((patch, patch))
            v[r, c], v[r + 2, c] = -0.5, 0.5
            rows.append(v.ravel())
    return np.array(rows)


def _texture_threshold(patch: int, confidence: float) -> float:
    D = _gradient_operator(patch)
    DD = D.T @ D
    rank = np.linalg.matrix_rank(DD)
    trace = np.trace(DD)
    # inverse CDF of Gamma(shape=rank/2, scale=2*trace/rank)
    return float(gammaincinv(rank / 2.0, confidence) * 2.0 * trace / rank)


def noise_level_estimate(
    img,
    patch: int = 7,
    confidence: float = 1 - 1e-6,
    max_iter: int = 10,
    tol: float = 1e-4,
) -> float:
    """Gaussian noise standard deviation from weak-texture patches.

    Patch covariance's smallest eigenvalue gives a noise variance estimate;
    patches whose summed squared gradient exceeds that variance times a
    chi-square style confidence threshold are treated as textured and dropped,
    and the two steps alternate until the estimate settles. Color input is
    averaged to gray first.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    if min(img.shape) < 32:
        raise ShapeError(f"noise estimation needs at least 32x32 pixels, got {img.shape}")

    tau0 = _texture_threshold(patch, confidence)
    X = sliding_window_view(img, (patch, patch)).reshape(-1, patch * patch)
    gh = (img[:, 2:] - img[:, :-2]) / 2.0
    gv = (img[2:, :] - img[:-2, :]) / 2.0
    texture = (
        sliding_window_view(gh**2, (patch, patch - 2)).sum(axis=(2, 3))[:, :].reshape(-1)
        + sliding_window_view(gv**2, (patch - 2, patch)).sum(axis=(2, 3)).reshape(-1)
    )

    def smallest_eig(rows):
        centered = rows - rows.mean(axis=0)
        cov = centered.T @ centered / (len(rows) - 1)
        return max(float(np.linalg.eigvalsh(cov)[0]), 0.0)

    var = smallest_eig(X)
    sigma = np.sqrt(var)
    for _ in range(max_iter):
        selected = texture <= var * tau0
        if selected.sum() < patch * patch:
            break
        var = smallest_eig(X[selected])
        new_sigma = np.sqrt(var)
        done = abs(new_sigma - sigma) < tol
        sigma = new_sigma
        if done:
            break
    return float(sigma)


# ---------------------------------------------------------------------------
# reports


METRIC_NAMES = (
    "psnr", "ssim", "rmse", "delta_e", "ae_mean", "ae_median", "ae_avg",
    "uqi", "sam_deg", "srer_db", "colorfulness", "noise_level",
)


def full_battery(pred, gt) -> Dict[str, float]:
    """Every metric for one prediction/ground-truth pair."""
    ae_mean, ae_median, ae_avg = angular_error(pred, gt)
    values = {
        "psnr": psnr(pred, gt),
        "ssim": ssim(pred, gt),
        "delta_e": delta_e2000(pred, gt),
        "ae_mean": ae_mean,
        "ae_median": ae_median,
        "ae_avg": ae_avg,
        "colorfulness": colorfulness(pred),
        "noise_level": noise_level_estimate(pred),
    }
    values.update(secondary_full_reference(pred, gt))
    return {k: values[k] for k in METRIC_NAMES}


@dataclass
class MetricReport:
    per_image: Dict[str, Dict[str, float]] = field(default_factory=dict)
    notes: Dict[str, str] = field(default_factory=dict)

    def add(self, image_id: str, values: Dict[str, float]) -> None:
        if self.per_image:
            keys = set(next(iter(self.per_image.values())))
            if set(values) != keys:
                raise ValueError(f"metric keys for {image_id!r} differ from earlier images")
        self.per_image[image_id] = dict(values)

    @property
    def aggregate(self) -> Dict[str, float]:
        if not self.per_image:
            return {}
        names = sorted(next(iter(self.per_image.values())))
        return {n: float(np.mean([v[n] for v in self.per_image.values()])) for n in names}
