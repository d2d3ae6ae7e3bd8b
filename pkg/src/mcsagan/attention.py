"""Memory-bounded hybrid attention and full 3D self-attention.

The hybrid block routes between a pooled non-local branch and an SE-only
fail-safe based on explicit token/affinity budgets:

* tokens after stride-s pooling: prod(max(floor(d/s), 1)) per axis —
  axes shorter than s collapse to 1 and the stride scan continues on the
  clamped count, so the planner is total for anisotropic volumes;
* fail-safe triggers when the full token count exceeds kappa * T_q, or
  when even the pooled affinity would exceed T_attn.

Plans are cached per spatial dims (resolution changes across stages).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mcsagan.engine import ops
from mcsagan.engine.module import Module
from mcsagan.engine.tensor import Tensor
from mcsagan.layers import Conv3d, SEGate

SE_ONLY = "SE_ONLY"
POOLED_ATTENTION = "POOLED_ATTENTION"


@dataclass(frozen=True)
class AttentionBudget:
    """Caps and residual scales for the hybrid attention block."""

    t_q: int = 4096
    t_kv: int = 4096
    t_attn: int = 2 ** 22
    kappa: int = 8
    alpha: float = 0.2
    beta: float = 0.2
    r: int = 8

    def __post_init__(self):
        if min(self.t_q, self.t_kv, self.t_attn) < 1:
            raise ValueError("attention budget caps must be >= 1")
        if self.kappa < 1:
            raise ValueError("kappa must be >= 1")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (0 < v <= 1):
                raise ValueError(f"{name} must lie in (0, 1]")


@dataclass(frozen=True)
class AttentionPlan:
    """Resolved routing decision for one spatial resolution.

    In SE_ONLY mode triggered by the kappa test, the stride/pool fields
    are 0 (stride selection never ran).
    """

    n_full: int
    mode: str
    s_q: int
    s_kv: int
    q_dims: tuple[int, int, int]
    k_dims: tuple[int, int, int]
    n_q: int
    m_k: int


def pooled_dims(dims: tuple[int, int, int], s: int) -> tuple[int, int, int]:
    return tuple(max(d // s, 1) for d in dims)


def plan_stride(dims: tuple[int, int, int], t: int) -> int:
    """Smallest stride whose (clamped) pooled token count fits the cap."""
    if min(dims) < 1 or t < 1:
        raise ValueError(f"plan_stride: invalid dims {dims} or cap {t}")
    s = 1
    while True:
        p = pooled_dims(dims, s)
        if p[0] * p[1] * p[2] <= t:
            return s
        s += 1  # bounded: at s = max(dims) the count is 1


def plan_attention(dims: tuple[int, int, int],
                   budget: AttentionBudget) -> AttentionPlan:
    if min(dims) < 1:
        raise ValueError(f"plan_attention: invalid dims {dims}")
    d, h, w = dims
    n_full = d * h * w
    if n_full > budget.kappa * budget.t_q:
        return AttentionPlan(n_full, SE_ONLY, 0, 0, (0, 0, 0), (0, 0, 0), 0, 0)
    s_q = plan_stride(dims, budget.t_q)
    s_kv = plan_stride(dims, budget.t_kv)
    q_dims = pooled_dims(dims, s_q)
    k_dims = pooled_dims(dims, s_kv)
    n_q = q_dims[0] * q_dims[1] * q_dims[2]
    m_k = k_dims[0] * k_dims[1] * k_dims[2]
    mode = SE_ONLY if n_q * m_k > budget.t_attn else POOLED_ATTENTION
    return AttentionPlan(n_full, mode, s_q, s_kv, q_dims, k_dims, n_q, m_k)


def _pool_to(x: Tensor, dims: tuple[int, int, int], s: int) -> Tensor:
    """Stride-s average pooling with per-axis clamping to >= 1 output."""
    if s <= 1:
        return x
    kernel = tuple(min(s, d) for d in dims)
    return ops.pool_nd(x, kernel)


class MBHABlock(Module):
    """Budgeted pooled self-attention with SE residual and fail-safe.

    y = x + alpha * x_NL + beta * x_SE   (pooled path)
    y = x + beta * x_SE                  (fail-safe)

    Projections are spectral-normalized 1x1x1 convs sharing the reduced
    width C' = max(C / r, 8) with the SE gate.  ``last_plan`` and
    ``last_affinity_elems`` expose the routing decision and the realized
    affinity allocation for instrumentation.
    """

    def __init__(self, rng: np.random.Generator, channels: int,
                 budget: AttentionBudget | None = None):
        super().__init__()
        self.budget = budget if budget is not None else AttentionBudget()
        self.channels = channels
        self.reduced = max(channels // self.budget.r, 8)
        self.se = SEGate(rng, channels, r=self.budget.r)
        self.theta = Conv3d(rng, channels, self.reduced, k=1, spectral=True)
        self.phi = Conv3d(rng, channels, self.reduced, k=1, spectral=True)
        self.g_proj = Conv3d(rng, channels, self.reduced, k=1, spectral=True)
        self.w_o = Conv3d(rng, self.reduced, channels, k=1, spectral=True)
        self._plan_cache: dict[tuple[int, int, int], AttentionPlan] = {}
        self.last_plan: AttentionPlan | None = None
        self.last_affinity_elems: int = 0

    def set_power_iterations(self, n: int) -> None:
        for conv in (self.theta, self.phi, self.g_proj, self.w_o):
            conv.n_power_iterations = n

    def plan_for(self, dims: tuple[int, int, int]) -> AttentionPlan:
        plan = self._plan_cache.get(dims)
        if plan is None:
            plan = plan_attention(dims, self.budget)
            self._plan_cache[dims] = plan
        return plan

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(
                f"MBHABlock: expected {self.channels} channels, got {x.shape[1]}")
        dims = x.shape[2:]
        plan = self.plan_for(dims)
        self.last_plan = plan
        x_se = self.se(x)
        if plan.mode == SE_ONLY:
            self.last_affinity_elems = 0
            return ops.add(x, ops.mul(x_se, self.budget.beta))
        B = x.shape[0]
        x_q = _pool_to(x, dims, plan.s_q)
        x_kv = _pool_to(x, dims, plan.s_kv)
        q = ops.transpose(ops.reshape(self.theta(x_q),
                                      (B, self.reduced, plan.n_q)), (0, 2, 1))
        k = ops.reshape(self.phi(x_kv), (B, self.reduced, plan.m_k))
        v = ops.transpose(ops.reshape(self.g_proj(x_kv),
                                      (B, self.reduced, plan.m_k)), (0, 2, 1))
        aff = ops.mul(ops.matmul(q, k), float(1.0 / np.sqrt(self.reduced)))
        if not np.all(np.isfinite(aff.data)):
            raise FloatingPointError("MBHABlock: non-finite affinity")
        self.last_affinity_elems = plan.n_q * plan.m_k
        attn = ops.softmax(aff, axis=-1)
        y = ops.matmul(attn, v)                               # (B, N_q, C')
        y = ops.reshape(ops.transpose(y, (0, 2, 1)),
                        (B, self.reduced, *plan.q_dims))
        if plan.q_dims != dims:
            y = ops.trilinear_upsample(y, dims)
        x_nl = self.w_o(y)
        return ops.add(ops.add(x, ops.mul(x_nl, self.budget.alpha)),
                       ops.mul(x_se, self.budget.beta))


class SelfAttention3D(Module):
    """Unpooled self-attention residual block: y = x + alpha * x_NL.

    Intended for low resolutions; refuses to run when the dense N x N
    affinity would exceed ``max_affinity`` (hard error, never a silent
    fallback).
    """

    def __init__(self, rng: np.random.Generator, channels: int, r: int = 8,
                 alpha: float = 0.2, max_affinity: int = 2 ** 22):
        super().__init__()
        self.channels = channels
        self.reduced = max(channels // r, 8)
        self.alpha = alpha
        self.max_affinity = max_affinity
        self.theta = Conv3d(rng, channels, self.reduced, k=1, spectral=True)
        self.phi = Conv3d(rng, channels, self.reduced, k=1, spectral=True)
        self.g_proj = Conv3d(rng, channels, self.reduced, k=1, spectral=True)
        self.w_o = Conv3d(rng, self.reduced, channels, k=1, spectral=True)
        self.last_affinity_elems: int = 0

    def set_power_iterations(self, n: int) -> None:
        for conv in (self.theta, self.phi, self.g_proj, self.w_o):
            conv.n_power_iterations = n

    def forward(self, x: Tensor) -> Tensor:
        B, C, D, H, W = x.shape
        n = D * H * W
        if n * n > self.max_affinity:
            raise ValueError(
                f"SelfAttention3D: affinity {n}x{n} exceeds hard cap "
                f"{self.max_affinity}; use the budgeted block instead")
        q = ops.transpose(ops.reshape(self.theta(x), (B, self.reduced, n)),
                          (0, 2, 1))
        k = ops.reshape(self.phi(x), (B, self.reduced, n))
        v = ops.transpose(ops.reshape(self.g_proj(x), (B, self.reduced, n)),
                          (0, 2, 1))
        aff = ops.mul(ops.matmul(q, k), float(1.0 / np.sqrt(self.reduced)))
        if not np.all(np.isfinite(aff.data)):
            raise FloatingPointError("SelfAttention3D: non-finite affinity")
        self.last_affinity_elems = n * n
        y = ops.matmul(ops.softmax(aff, axis=-1), v)
        y = ops.reshape(ops.transpose(y, (0, 2, 1)), (B, self.reduced, D, H, W))
        return ops.add(x, ops.mul(self.w_o(y), self.alpha))
