"""Image-quality metrics: PSNR, SSIM / D-SSIM (with gradients), region PSNR.

SSIM follows the common reference formulation: 11x11 Gaussian window with
sigma 1.5, c1 = 0.01^2 and c2 = 0.03^2 on unit dynamic range, sample means
(not sample covariance), computed per channel over fully-interior windows
and averaged. PSNR of identical images is reported as the capped sentinel
99.0 dB.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import correlate

from .errors import DimensionMismatch, EmptyMask

PSNR_CAP = 99.0
_WIN_SIZE = 11
_SIGMA = 1.5
_C1 = 0.01**2
_C2 = 0.03**2


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for images on [0, 1]; capped at 99 dB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def region_psnr(a: np.ndarray, b: np.ndarray, pixel_mask: np.ndarray) -> float:
    """PSNR over masked pixels only. pixel_mask is (H, W) boolean."""
    a, b = _check_pair(a, b)
    mask = np.asarray(pixel_mask, dtype=bool)
    if mask.shape != a.shape[:2]:
        raise DimensionMismatch(f"mask shape {mask.shape} vs image {a.shape[:2]}")
    if not mask.any():
        raise EmptyMask("pixel mask selects no pixels")
    diff = (a - b)[mask]
    mse = float(np.mean(diff**2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def gaussian_window(size: int = _WIN_SIZE, sigma: float = _SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _corr_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    return correlate(x, win, mode="valid")


def _corr_adjoint(g: np.ndarray, win: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    pad = win.shape[0] - 1
    padded = np.zeros((g.shape[0] + 2 * pad, g.shape[1] + 2 * pad))
    padded[pad:-pad, pad:-pad] = g
    out = correlate(padded, win[::-1, ::-1], mode="valid")
    assert out.shape == shape
    return out


def _ssim_channel(x: np.ndarray, y: np.ndarray, win: np.ndarray, with_grad: bool):
    """SSIM map over interior windows for one channel.

    Returns (map, grad_x) where grad_x is d(mean(map))/dx, or (map, None).
    """
    ux = _corr_valid(x, win)
    uy = _corr_valid(y, win)
    exx = _corr_valid(x * x, win)
    eyy = _corr_valid(y * y, win)
    exy = _corr_valid(x * y, win)
    vx = exx - ux * ux
    vy = eyy - uy * uy
    cxy = exy - ux * uy

    a1 = 2.0 * ux * uy + _C1
    a2 = 2.0 * cxy + _C2
    b1 = ux * ux + uy * uy + _C1
    b2 = vx + vy + _C2
    smap = (a1 * a2) / (b1 * b2)
    if not with_grad:
        return smap, None

    npix = smap.size
    d_a1 = a2 / (b1 * b2)
    d_a2 = a1 / (b1 * b2)
    d_b1 = -smap / b1
    d_b2 = -smap / b2
    # raw filter outputs: ux, exx, exy
    g_ux = 2.0 * uy * d_a1 - 2.0 * uy * d_a2 + 2.0 * ux * d_b1 - 2.0 * ux * d_b2
    g_exx = d_b2
    g_exy = 2.0 * d_a2
    grad = (
        _corr_adjoint(g_ux, win, x.shape)
        + _corr_adjoint(g_exx, win, x.shape) * 2.0 * x
        + _corr_adjoint(g_exy, win, x.shape) * y
    )
    return smap, grad / npix


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of two images, per-channel then averaged. Symmetric in (a, b)."""
    a, b = _check_pair(a, b)
    if min(a.shape[0], a.shape[1]) < _WIN_SIZE:
        raise DimensionMismatch(f"images must be at least {_WIN_SIZE} pixels per side")
    win = gaussian_window()
    vals = [
        float(_ssim_channel(a[:, :, c], b[:, :, c], win, with_grad=False)[0].mean())
        for c in range(a.shape[2])
    ]
    return float(np.mean(vals))


def dssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural dissimilarity (1 - SSIM) / 2 in [0, 1]."""
    return (1.0 - ssim(a, b)) / 2.0


def dssim_with_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """D-SSIM value and its gradient w.r.t. the first image."""
    a, b = _check_pair(a, b)
    if min(a.shape[0], a.shape[1]) < _WIN_SIZE:
        raise DimensionMismatch(f"images must be at least {_WIN_SIZE} pixels per side")
    win = gaussian_window()
    n_ch = a.shape[2]
    total = 0.0
    grad = np.zeros_like(a)
    for c in range(n_ch):
        smap, g = _ssim_channel(a[:, :, c], b[:, :, c], win, with_grad=True)
        total += float(smap.mean())
        grad[:, :, c] = g
    ssim_val = total / n_ch
    return (1.0 - ssim_val) / 2.0, grad * (-0.5 / n_ch)


# ---------------------------------------------------------------------------
# Evaluation report.


@dataclass
class EvalEntry:
    frame_index: int
    view_index: int
    psnr: float
    ssim: float
    region_psnr: float | None = None


@dataclass
class EvalReport:
    entries: list[EvalEntry] = field(default_factory=list)

    def add(self, entry: EvalEntry) -> None:
        self.entries.append(entry)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([e.psnr for e in self.entries]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([e.ssim for e in self.entries]))

    @property
    def mean_region_psnr(self) -> float:
        vals = [e.region_psnr for e in self.entries if e.region_psnr is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def to_json(self, path) -> None:
        payload = {
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "entries": [
                {
                    "frame": e.frame_index,
                    "view": e.view_index,
                    "psnr": e.psnr,
                    "ssim": e.ssim,
                    "region_psnr": e.region_psnr,
                }
                for e in self.entries
            ],
        }
        vals = [e.region_psnr for e in self.entries if e.region_psnr is not None]
        if vals:
            payload["mean_region_psnr"] = float(np.mean(vals))
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "view", "psnr", "ssim", "region_psnr"])
            for e in self.entries:
                writer.writerow(
                    [e.frame_index, e.view_index, f"{e.psnr:.6f}", f"{e.ssim:.6f}",
                     "" if e.region_psnr is None else f"{e.region_psnr:.6f}"]
                )
