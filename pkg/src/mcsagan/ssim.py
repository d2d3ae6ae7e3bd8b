"""Differentiable 3-D SSIM and multi-scale SSIM.

Local statistics come from a separable Gaussian blur applied in *valid*
mode: one dense band matrix per axis, pushed through the shared
``axis_matmul`` op so the adjoint falls out of the matmul VJP.  The map
therefore shrinks by ``window - 1`` per axis and no boundary padding
artifacts enter the statistics.

Scale handling for MS-SSIM: volumes are halved by 2x2x2 mean pooling
between scales; the number of scales is the largest n (capped at 5)
with min_dim / 2^(n-1) >= window.  Standard five-scale weights are
truncated to that n and renormalized, and the result is the signed
weighted arithmetic mean of the per-scale mean SSIM values, so
anti-correlated inputs keep their negative sign instead of being
silently clamped.
"""

from __future__ import annotations

import numpy as np

from mcsagan.engine import Tensor, ops

WINDOW = 7
SIGMA = 1.5
K1 = 0.01
K2 = 0.03
DATA_RANGE = 2.0

# Wang et al. five-scale weights; truncated + renormalized when the
# volume supports fewer scales.
SCALE_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

_matrix_cache: dict[int, np.ndarray] = {}


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-0.5 * (t / sigma) ** 2)
    return w / w.sum()


def _valid_blur_matrix(n: int) -> np.ndarray:
    """(n-window+1, n) band matrix applying the Gaussian in valid mode."""
    m = _matrix_cache.get(n)
    if m is None:
        w = gaussian_window()
        rows = n - WINDOW + 1
        m = np.zeros((rows, n), dtype=np.float64)
        for i in range(rows):
            m[i, i:i + WINDOW] = w
        _matrix_cache[n] = m
    return m


def blur_valid(x: Tensor) -> Tensor:
    """Separable valid-mode Gaussian blur over the three spatial axes."""
    for axis in (2, 3, 4):
        x = ops.axis_matmul(x, _valid_blur_matrix(x.shape[axis]), axis)
    return x


def ssim_map(a: Tensor, b: Tensor) -> Tensor:
    """Local SSIM map on (B, C, D, H, W) volumes; dims shrink by window-1."""
    a, b = ops.as_tensor(a), ops.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim shapes disagree: {a.shape} vs {b.shape}")
    if min(a.shape[2:]) < WINDOW:
        raise ValueError(
            f"volume {a.shape[2:]} smaller than the {WINDOW}^3 window")
    c1 = (K1 * DATA_RANGE) ** 2
    c2 = (K2 * DATA_RANGE) ** 2
    mu_a = blur_valid(a)
    mu_b = blur_valid(b)
    mu_aa = ops.mul(mu_a, mu_a)
    mu_bb = ops.mul(mu_b, mu_b)
    mu_ab = ops.mul(mu_a, mu_b)
    var_a = ops.sub(blur_valid(ops.mul(a, a)), mu_aa)
    var_b = ops.sub(blur_valid(ops.mul(b, b)), mu_bb)
    cov = ops.sub(blur_valid(ops.mul(a, b)), mu_ab)
    num = ops.mul(ops.add(ops.mul(mu_ab, 2.0), c1), ops.add(ops.mul(cov, 2.0), c2))
    den = ops.mul(ops.add(ops.add(mu_aa, mu_bb), c1),
                  ops.add(ops.add(var_a, var_b), c2))
    return ops.div(num, den)


def ssim(a: Tensor, b: Tensor) -> Tensor:
    """Scalar mean SSIM; differentiable in both inputs."""
    return ops.mean(ssim_map(a, b))


def scale_count(dims: tuple[int, ...]) -> int:
    n = 0
    d = min(dims)
    while d >= WINDOW and n < len(SCALE_WEIGHTS):
        n += 1
        d //= 2
    return n


def ms_ssim(a: Tensor, b: Tensor, scales: int | None = None) -> Tensor:
    """Signed multi-scale SSIM in [-1, 1]; differentiable in both inputs."""
    a, b = ops.as_tensor(a), ops.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"ms_ssim shapes disagree: {a.shape} vs {b.shape}")
    avail = scale_count(a.shape[2:])
    if avail < 1:
        raise ValueError(
            f"volume {a.shape[2:]} smaller than the {WINDOW}^3 window")
    n = avail if scales is None else scales
    if n < 1 or n > avail:
        raise ValueError(f"requested {n} scales, volume supports {avail}")
    weights = np.asarray(SCALE_WEIGHTS[:n], dtype=np.float64)
    weights = weights / weights.sum()
    total = None
    for i in range(n):
        if i > 0:
            a = ops.pool_nd(a, (2, 2, 2))
            b = ops.pool_nd(b, (2, 2, 2))
        term = ops.mul(ops.mean(ssim_map(a, b)), float(weights[i]))
        total = term if total is None else ops.add(total, term)
    return total
