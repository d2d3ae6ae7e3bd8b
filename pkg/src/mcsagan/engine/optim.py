"""Adam with bias correction, plus the milestone LR schedule.

The training recipe uses beta1 = 0 (first moment equals the current
gradient after bias correction) and beta2 = 0.9; both are plain
arguments here.  Moment buffers are part of checkpoint state so resumed
runs continue bitwise.
"""

from __future__ import annotations

import numpy as np

from mcsagan.engine.module import Parameter

try:  # pragma: no cover - exercised implicitly by whichever env runs
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


if HAVE_NUMBA:
    @njit(cache=True)
    def _adam_fused(p, g, m, v, lr, b1, b2, eps, bc1, bc2):  # pragma: no cover
        for i in range(p.size):
            gi = g[i]
            mi = b1 * m[i] + (1.0 - b1) * gi
            vi = b2 * v[i] + (1.0 - b2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] -= lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)


class Adam:
    def __init__(self, params: list[Parameter], lr: float = 1e-4,
                 beta1: float = 0.0, beta2: float = 0.9, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("Adam: lr must be positive")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.data
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("Adam: non-finite gradient")
            if HAVE_NUMBA and p.data.dtype == g.dtype:
                # single fused pass; the chained numpy form touches every
                # buffer several times and dominated step cost at scale
                _adam_fused(p.data.reshape(-1),
                            np.ascontiguousarray(g).reshape(-1),
                            m.reshape(-1), v.reshape(-1), self.lr,
                            self.beta1, self.beta2, self.eps, bc1, bc2)
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    # ---- checkpoint state ------------------------------------------------
    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}.m.{i}"] = m
            out[f"{prefix}.v.{i}"] = v
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray],
                          step_count: int) -> None:
        for i in range(len(self.params)):
            self.m[i][...] = arrays[f"{prefix}.m.{i}"]
            self.v[i][...] = arrays[f"{prefix}.v.{i}"]
        self.step_count = int(step_count)


class MultiStepLR:
    """lr(epoch) = base * factor^(number of milestones <= epoch), 1-based.

    The reduction takes effect during the milestone epoch itself, e.g.
    milestones (80, 140, 200) with factor 0.5 give 2.5e-5 for epochs
    140..199 at base 1e-4.
    """

    def __init__(self, optimizers, base_lr: float,
                 milestones: tuple[int, ...], factor: float = 0.5):
        ms = tuple(sorted(int(m) for m in milestones))
        if any(a >= b for a, b in zip(ms, ms[1:])):
            raise ValueError("MultiStepLR: milestones must be strictly increasing")
        self.optimizers = list(optimizers)
        self.base_lr = float(base_lr)
        self.milestones = ms
        self.factor = float(factor)

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for m in self.milestones if m <= epoch)
        return self.base_lr * self.factor ** passed

    def apply(self, epoch: int) -> float:
        lr = self.lr_at(epoch)
        for opt in self.optimizers:
            opt.lr = lr
        return lr
