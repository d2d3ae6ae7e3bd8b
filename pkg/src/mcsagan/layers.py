"""Reusable volumetric network blocks.

All constructors take an explicit ``numpy.random.Generator`` so that
model construction is deterministic and reproducible from a run seed.
Leaky-ReLU slope defaults to 0.2 throughout.
"""

from __future__ import annotations

import numpy as np

from mcsagan.engine import ops
from mcsagan.engine.module import Buffer, Module, Parameter
from mcsagan.engine.tensor import Tensor

LEAKY_SLOPE = 0.2


def conv_init(rng: np.random.Generator, c_out: int, c_in: int,
              k: int) -> np.ndarray:
    """Kaiming-normal weights for a cubic conv kernel."""
    fan_in = c_in * k ** 3
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal((c_out, c_in, k, k, k)) * std).astype(np.float32)


class Conv3d(Module):
    """Cubic-kernel convolution, optionally spectral-normalized.

    Spectral normalization keeps a persistent power-iteration vector
    (checkpointed buffer) plus the last sigma estimate.  Setting
    ``n_power_iterations`` to 0 reuses the cached sigma without updating
    it — finite-difference checks rely on that to freeze the estimator,
    since backward deliberately treats sigma as a constant.  An all-zero
    weight bypasses normalization (continuous extension to zero), while
    the functional op itself still rejects zero matrices.
    """

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int,
                 k: int = 3, stride: int = 1, padding: int | None = None,
                 bias: bool = True, spectral: bool = False,
                 n_power_iterations: int = 1):
        super().__init__()
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        self.spectral = spectral
        self.n_power_iterations = n_power_iterations
        self.weight = Parameter(conv_init(rng, c_out, c_in, k))
        if bias:
            self.bias = Parameter(np.zeros(c_out, dtype=np.float32))
        else:
            self.bias = None
        if spectral:
            u = rng.standard_normal(c_out)
            self.u_state = Buffer((u / np.linalg.norm(u)))
            self.sigma = Buffer(np.ones(1))

    def effective_weight(self) -> Tensor:
        if not self.spectral:
            return self.weight
        if not np.any(self.weight.data):
            return self.weight  # zero weight: w / sigma -> 0 continuously
        if self.n_power_iterations > 0:
            w2d = self.weight.data.reshape(self.c_out, -1)
            s, u = ops.power_iteration(w2d, self.u_state.data.astype(np.float64),
                                       self.n_power_iterations)
            self.u_state.data[...] = u.astype(self.u_state.dtype)
            self.sigma.data[...] = s
        return ops.mul(self.weight, float(1.0 / self.sigma.data[0]))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.effective_weight(), self.bias,
                          stride=self.stride, padding=self.padding)


class ChannelNorm(Module):
    """Instance or group normalization with learnable affine."""

    def __init__(self, channels: int, mode: str = "instance",
                 groups: int = 8, eps: float = 1e-5):
        super().__init__()
        if mode == "group" and channels < groups:
            groups = channels  # degenerate width: one channel per group
        self.mode, self.groups, self.eps = mode, groups, eps
        self.weight = Parameter(np.ones(channels, dtype=np.float32))
        self.bias = Parameter(np.zeros(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.normalize(x, mode=self.mode, groups=self.groups,
                             eps=self.eps, weight=self.weight, bias=self.bias)


class ResidualBlock(Module):
    """Two 3x3x3 convs with norm + leaky-ReLU and an identity/projection skip.

    No output activation: with zero weights and an identity skip the block
    is exactly the identity.
    """

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int,
                 norm: str = "instance", groups: int = 8):
        super().__init__()
        self.conv1 = Conv3d(rng, c_in, c_out, k=3)
        self.norm1 = ChannelNorm(c_out, mode=norm, groups=groups)
        self.conv2 = Conv3d(rng, c_out, c_out, k=3)
        self.norm2 = ChannelNorm(c_out, mode=norm, groups=groups)
        if c_in != c_out:
            self.proj = Conv3d(rng, c_in, c_out, k=1, bias=False)
        else:
            self.proj = None

    def forward(self, x: Tensor) -> Tensor:
        h = ops.leaky_relu(self.norm1(self.conv1(x)), LEAKY_SLOPE)
        h = self.norm2(self.conv2(h))
        skip = self.proj(x) if self.proj is not None else x
        return ops.add(skip, h)


class SEGate(Module):
    """Squeeze-and-excitation channel gating, reduction r (width floor 8)."""

    def __init__(self, rng: np.random.Generator, channels: int, r: int = 8):
        super().__init__()
        self.channels = channels
        self.reduced = max(channels // r, 8)
        self.fc1 = Conv3d(rng, channels, self.reduced, k=1)
        self.fc2 = Conv3d(rng, self.reduced, channels, k=1)

    def gate(self, x: Tensor) -> Tensor:
        """s(x) with shape (B, C, 1, 1, 1), values in (0, 1)."""
        z = ops.mean(x, axis=(2, 3, 4), keepdims=True)
        return ops.sigmoid(self.fc2(ops.relu(self.fc1(z))))

    def forward(self, x: Tensor) -> Tensor:
        return ops.mul(x, self.gate(x))


class AttentionGate(Module):
    """Additive attention over skip features, driven by decoder context.

    The gating signal is trilinearly resampled to the skip's grid when
    their dims differ; the single-channel sigmoid map broadcasts over
    skip channels.
    """

    def __init__(self, rng: np.random.Generator, c_skip: int, c_gate: int):
        super().__init__()
        inter = max(c_skip // 2, 4)
        self.proj_skip = Conv3d(rng, c_skip, inter, k=1)
        self.proj_gate = Conv3d(rng, c_gate, inter, k=1)
        self.psi = Conv3d(rng, inter, 1, k=1)

    def attention_map(self, skip: Tensor, gating: Tensor) -> Tensor:
        if gating.shape[0] != skip.shape[0]:
            raise ValueError("AttentionGate: batch mismatch")
        if gating.shape[2:] != skip.shape[2:]:
            gating = ops.trilinear_upsample(gating, skip.shape[2:])
        h = ops.relu(ops.add(self.proj_skip(skip), self.proj_gate(gating)))
        return ops.sigmoid(self.psi(h))

    def forward(self, skip: Tensor, gating: Tensor) -> Tensor:
        return ops.mul(skip, self.attention_map(skip, gating))
