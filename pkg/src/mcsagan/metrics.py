"""Evaluation metrics: PSNR, SSIM, MS-SSIM, MSE, feature distance, Dice.

These are plain-float evaluation functions over numpy volumes; the
differentiable SSIM machinery lives in ``ssim`` and is wrapped here
without gradient tracking.  Feature-distance statistics come from the
same frozen extractor the perceptual loss uses, so swapping in external
backbone weights changes both consistently.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from mcsagan.engine import Tensor, no_grad
from mcsagan import ssim as _ssim


def _vol5d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3:
        return a[None, None]
    if a.ndim == 5:
        return a
    raise ValueError(f"expected (D,H,W) or (B,C,D,H,W) volume, got {a.shape}")


def mse(y_hat, y) -> float:
    a, b = _vol5d(y_hat), _vol5d(y)
    if a.shape != b.shape:
        raise ValueError(f"mse shapes disagree: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(y_hat, y, data_range: float = 2.0) -> float:
    """10 log10(range^2 / MSE); identical volumes give the +inf sentinel."""
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    err = mse(y_hat, y)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / err)


def ssim(y_hat, y) -> float:
    with no_grad():
        return float(_ssim.ssim(Tensor(_vol5d(y_hat)), Tensor(_vol5d(y))).item())


def msssim(y_hat, y) -> float:
    with no_grad():
        return float(_ssim.ms_ssim(Tensor(_vol5d(y_hat)),
                                   Tensor(_vol5d(y))).item())


def dice(pred_mask, gt_mask) -> float:
    """2|A n B| / (|A| + |B|) on binary masks; both empty counts as 1."""
    a = np.asarray(pred_mask)
    b = np.asarray(gt_mask)
    if a.shape != b.shape:
        raise ValueError(f"dice shapes disagree: {a.shape} vs {b.shape}")
    for m in (a, b):
        vals = np.unique(m)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("dice expects binary masks")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


# --------------------------------------------------------------------------
# feature distance
# --------------------------------------------------------------------------

@dataclass
class FeatureStats:
    """Gaussian summary (mean, covariance, count) of pooled features."""

    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.ndim != 1 or self.sigma.shape != (self.mu.size, self.mu.size):
            raise ValueError("mu must be (d,), sigma (d,d)")
        if self.n < 2:
            raise ValueError("need n >= 2 samples for a covariance")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-8):
            raise ValueError("covariance must be symmetric")

    @staticmethod
    def from_features(feats: np.ndarray) -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError("expected (n, d) feature matrix")
        n, d = feats.shape
        if n < d + 1:
            warnings.warn(
                f"covariance from {n} samples in {d} dims is rank deficient",
                stacklevel=2)
        mu = feats.mean(axis=0)
        sigma = np.cov(feats, rowvar=False)
        sigma = np.atleast_2d(sigma)
        return FeatureStats(mu=mu, sigma=(sigma + sigma.T) / 2.0, n=n)


def _psd_eigvals(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(m)
    if vals.min() < -1e-8:
        raise ValueError(f"{what} has eigenvalue {vals.min():.3e} < -1e-8")
    return np.clip(vals, 0.0, None), vecs


def mfd(stats_a: FeatureStats, stats_b: FeatureStats) -> float:
    """Frechet distance ||mu1-mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))."""
    if stats_a.mu.shape != stats_b.mu.shape:
        raise ValueError("feature dimensions disagree")
    for s in (stats_a, stats_b):
        if not np.isfinite(s.mu).all() or not np.isfinite(s.sigma).all():
            raise ValueError("non-finite feature statistics")
    diff = stats_a.mu - stats_b.mu
    vals, vecs = _psd_eigvals(stats_a.sigma, "covariance")
    root_a = (vecs * np.sqrt(vals)) @ vecs.T
    inner = root_a @ stats_b.sigma @ root_a
    inner_vals, _ = _psd_eigvals((inner + inner.T) / 2.0, "product matrix")
    tr_sqrt = np.sqrt(inner_vals).sum()
    val = float(diff @ diff + np.trace(stats_a.sigma)
                + np.trace(stats_b.sigma) - 2.0 * tr_sqrt)
    return max(val, 0.0)


def pooled_features(volumes, extractor) -> np.ndarray:
    """(n, d) matrix of pooled final-stage features for an iterable of volumes."""
    rows = []
    with no_grad():
        for v in volumes:
            t = Tensor(np.asarray(v, dtype=np.float32)[None, None])
            rows.append(extractor.pooled_final(t).numpy()[0])
    return np.stack(rows, axis=0)
