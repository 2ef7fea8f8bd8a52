"""Counting and density-map quality metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import bilinear_resize

# PSNR reported for identical maps
PSNR_INFINITE = math.inf


@dataclass
class EvalPair:
    predicted: np.ndarray
    ground_truth: np.ndarray
    ground_truth_count: Optional[float] = None

    @property
    def gt_count(self) -> float:
        if self.ground_truth_count is not None:
            return float(self.ground_truth_count)
        return estimated_count(self.ground_truth)

    @property
    def error(self) -> float:
        return estimated_count(self.predicted) - self.gt_count


def estimated_count(density: np.ndarray) -> float:
    return float(np.asarray(density, dtype=np.float64).sum())


def _errors(pairs: Sequence[EvalPair]) -> np.ndarray:
    if not pairs:
        raise ValueError("no evaluation pairs")
    return np.array([p.error for p in pairs])


def mae(pairs: Sequence[EvalPair]) -> float:
    return float(np.abs(_errors(pairs)).mean())


def mse(pairs: Sequence[EvalPair]) -> float:
    """Root of the mean squared count error (the crowd-counting 'MSE')."""
    return float(np.sqrt((_errors(pairs) ** 2).mean()))


def _bounds(size: int, parts: int) -> list[int]:
    step = size // parts
    # the last region absorbs the remainder
    return [i * step for i in range(parts)] + [size]


def region_sums(density: np.ndarray, level: int) -> np.ndarray:
    """Sums over a 2^L x 2^L grid of non-overlapping regions."""
    if level < 0:
        raise ValueError("GAME level must be >= 0")
    density = np.asarray(density, dtype=np.float64)
    parts = 2 ** level
    rb, cb = _bounds(density.shape[0], parts), _bounds(density.shape[1], parts)
    return np.array([[density[rb[i]:rb[i + 1], cb[j]:cb[j + 1]].sum() for j in range(parts)]
                     for i in range(parts)])


def game(pred: np.ndarray, gt: np.ndarray, level: int) -> float:
    """Grid average mean absolute error for one image."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.abs(region_sums(pred, level) - region_sums(gt, level)).sum())


def game_mean(pairs: Sequence[EvalPair], level: int) -> float:
    if not pairs:
        raise ValueError("no evaluation pairs")
    return float(np.mean([game(p.predicted, p.ground_truth, level) for p in pairs]))


def quality_preprocess(pred: np.ndarray, gt: np.ndarray, original_h: int, original_w: int,
                       eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Resize both maps to the input size, then divide both by the GT peak."""
    def resize(m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape == (original_h, original_w):
            return m.copy()
        return bilinear_resize(m[None, None], original_h, original_w)[0, 0]

    pred_r, gt_r = resize(pred), resize(gt)
    scale = max(float(gt_r.max()), eps)
    return pred_r / scale, gt_r / scale


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    err = float(((a - b) ** 2).mean())
    if err == 0.0:
        return PSNR_INFINITE
    return 10.0 * math.log10(data_range ** 2 / err)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return g


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable weighted window mean over every fully-contained position
    rows = np.lib.stride_tricks.sliding_window_view(img, len(g), axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, len(g), axis=1) @ g


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, win_size: int = 11,
         sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all valid positions of a Gaussian-weighted window."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < win_size:
        raise ValueError(f"SSIM needs 2-D maps at least {win_size}x{win_size}, got {a.shape}")
    g = gaussian_window(win_size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())
