"""Model assembly: generator, critic, segmenter, frozen feature extractor.

Shared conventions:

* domain/contrast codes are one-hot length-3 vectors over (t2f, t1c,
  t1n), broadcast to three constant channels and concatenated onto the
  single-channel volume;
* every constructor takes a ``numpy.random.Generator`` so whole-model
  initialization is reproducible from one seed;
* architecture hyperparameters live in dataclass configs that serialize
  to JSON for checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mcsagan.attention import AttentionBudget, MBHABlock, SelfAttention3D
from mcsagan.engine import ops
from mcsagan.engine.module import Module, ModuleList
from mcsagan.engine.tensor import Tensor
from mcsagan.layers import (
    LEAKY_SLOPE,
    AttentionGate,
    ChannelNorm,
    Conv3d,
    ResidualBlock,
)

CONTRASTS = ("t2f", "t1c", "t1n")
CONTRAST_INDEX = {name: i for i, name in enumerate(CONTRASTS)}

ATTN_NONE = "none"
ATTN_MBHA = "mbha"
ATTN_FULL = "full"


def one_hot_code(contrast: "str | int") -> np.ndarray:
    """Length-3 one-hot f32 vector for a contrast name or index."""
    if isinstance(contrast, str):
        contrast = CONTRAST_INDEX[contrast]
    if not 0 <= int(contrast) < 3:
        raise ValueError(f"invalid contrast index {contrast}")
    code = np.zeros(3, dtype=np.float32)
    code[int(contrast)] = 1.0
    return code


def validate_codes(codes: np.ndarray, batch: int) -> np.ndarray:
    """Accept (3,) or (B, 3) one-hot codes; always return (B, 3)."""
    codes = np.asarray(codes, dtype=np.float32)
    if codes.shape == (3,):
        codes = np.broadcast_to(codes, (batch, 3)).copy()
    if codes.shape != (batch, 3):
        raise ValueError(f"codes must be (3,) or ({batch}, 3), got {codes.shape}")
    ok = np.all(np.isin(codes, (0.0, 1.0))) and np.all(codes.sum(axis=1) == 1.0)
    if not ok:
        raise ValueError("codes must be exact one-hot vectors")
    return codes


def concat_code_channels(x: Tensor, codes: np.ndarray) -> Tensor:
    """Concatenate (B,1,D,H,W) with the code broadcast to (B,3,D,H,W)."""
    B, _, D, H, W = x.shape
    codes = validate_codes(codes, B)
    grid = np.broadcast_to(codes.astype(x.dtype)[:, :, None, None, None],
                           (B, 3, D, H, W))
    return ops.concat([x, ops.constant(np.ascontiguousarray(grid))], axis=1)


def _attention_block(rng: np.random.Generator, kind: str, channels: int,
                     budget: AttentionBudget) -> Module | None:
    if kind == ATTN_MBHA:
        return MBHABlock(rng, channels, budget)
    if kind == ATTN_FULL:
        return SelfAttention3D(rng, channels, r=budget.r, alpha=budget.alpha)
    if kind == ATTN_NONE:
        return None
    raise ValueError(f"unknown attention kind {kind!r}")


# --------------------------------------------------------------------------
# generator
# --------------------------------------------------------------------------

@dataclass
class GeneratorConfig:
    in_channels: int = 4          # source volume + 3 code channels
    out_channels: int = 1
    widths: tuple[int, ...] = (16, 32, 64, 128)
    enc_attention: tuple[str, ...] = (ATTN_MBHA, ATTN_MBHA, ATTN_MBHA, ATTN_FULL)
    dec_attention: tuple[str, ...] = (ATTN_FULL, ATTN_FULL, ATTN_MBHA, ATTN_MBHA)
    bottleneck_blocks: int = 2
    bottleneck_groups: int = 8
    budget: AttentionBudget = field(default_factory=AttentionBudget)

    def __post_init__(self):
        n = len(self.widths)
        if len(self.enc_attention) != n or len(self.dec_attention) != n:
            raise ValueError("attention placement must list one entry per stage")

    @property
    def depth(self) -> int:
        return len(self.widths)


class _DownStage(Module):
    """stride-2 conv -> norm -> leaky -> residual -> optional attention."""

    def __init__(self, rng, c_in, c_out, attn_kind, budget):
        super().__init__()
        self.down = Conv3d(rng, c_in, c_out, k=3, stride=2)
        self.norm = ChannelNorm(c_out)
        self.res = ResidualBlock(rng, c_out, c_out)
        self.attn = _attention_block(rng, attn_kind, c_out, budget)

    def forward(self, x):
        h = ops.leaky_relu(self.norm(self.down(x)), LEAKY_SLOPE)
        h = self.res(h)
        if self.attn is not None:
            h = self.attn(h)
        return h


class _UpStage(Module):
    """upsample -> conv -> attention-gated skip -> concat -> residual."""

    def __init__(self, rng, c_in, c_skip, c_out, attn_kind, budget):
        super().__init__()
        self.conv = Conv3d(rng, c_in, c_out, k=3)
        self.norm = ChannelNorm(c_out)
        self.gate = AttentionGate(rng, c_skip, c_out)
        self.res = ResidualBlock(rng, c_out + c_skip, c_out)
        self.attn = _attention_block(rng, attn_kind, c_out, budget)

    def forward(self, x, skip):
        x = ops.trilinear_upsample(x, skip.shape[2:])
        x = ops.leaky_relu(self.norm(self.conv(x)), LEAKY_SLOPE)
        gated = self.gate(skip, x)
        h = self.res(ops.concat([x, gated], axis=1))
        if self.attn is not None:
            h = self.attn(h)
        return h


class Generator(Module):
    """Attention U-Net translating a source volume to a requested contrast.

    Encoder stages halve resolution; the bottleneck applies group-norm
    residual blocks plus full self-attention; decoder stages upsample
    with attention-gated skips.  Output head is a 1x1x1 conv + tanh, so
    values always lie in [-1, 1].
    """

    def __init__(self, rng: np.random.Generator, config: GeneratorConfig):
        super().__init__()
        self.config = config
        w = config.widths
        self.stem = Conv3d(rng, config.in_channels, w[0], k=3)
        self.stem_norm = ChannelNorm(w[0])
        enc = []
        for i, kind in enumerate(config.enc_attention):
            c_in = w[0] if i == 0 else w[i - 1]
            enc.append(_DownStage(rng, c_in, w[i], kind, config.budget))
        self.encoder = ModuleList(enc)
        mid = []
        for _ in range(config.bottleneck_blocks):
            mid.append(ResidualBlock(rng, w[-1], w[-1], norm="group",
                                     groups=config.bottleneck_groups))
        self.bottleneck = ModuleList(mid)
        self.bottleneck_attn = SelfAttention3D(rng, w[-1], r=config.budget.r,
                                               alpha=config.budget.alpha)
        dec = []
        # decoder runs deepest-first: stage i consumes the encoder skip one
        # resolution level up; the final stage uses the stem features.
        skip_ch = [w[0]] + list(w[:-1])
        c_prev = w[-1]
        for i, kind in enumerate(config.dec_attention):
            c_skip = skip_ch[config.depth - 1 - i]
            dec.append(_UpStage(rng, c_prev, c_skip, c_skip, kind, config.budget))
            c_prev = c_skip
        self.decoder = ModuleList(dec)
        self.head = Conv3d(rng, c_prev, config.out_channels, k=1)

    def forward(self, x_s: Tensor, codes: np.ndarray) -> Tensor:
        if x_s.ndim != 5 or x_s.shape[1] != 1:
            raise ValueError("generator expects (B,1,D,H,W) input")
        divisor = 2 ** self.config.depth
        for d in x_s.shape[2:]:
            if d % divisor:
                raise ValueError(
                    f"spatial dims {x_s.shape[2:]} must be divisible by {divisor}")
        x = concat_code_channels(x_s, codes)
        h = ops.leaky_relu(self.stem_norm(self.stem(x)), LEAKY_SLOPE)
        skips = [h]
        for stage in self.encoder:
            h = stage(h)
            skips.append(h)
        skips.pop()  # deepest output feeds the bottleneck, not a skip
        for block in self.bottleneck:
            h = block(h)
        h = self.bottleneck_attn(h)
        for stage, skip in zip(self.decoder, reversed(skips)):
            h = stage(h, skip)
        return ops.tanh(self.head(h))

    def set_power_iterations(self, n: int) -> None:
        for _, m in self.named_modules():
            if isinstance(m, (MBHABlock, SelfAttention3D)):
                m.set_power_iterations(n)


# --------------------------------------------------------------------------
# critic
# --------------------------------------------------------------------------

@dataclass
class CriticConfig:
    in_channels: int = 2          # candidate volume + source volume
    widths: tuple[int, ...] = (16, 32, 64, 128)
    kernel: int = 4


class Critic(Module):
    """Spectral-normalized strided conv stack with two heads.

    The trunk produces patch features; the realism head maps them to a
    spatial score map (patch-level judgment), and the classification
    head global-pools the same features into three contrast logits.
    No normalization layers: the gradient penalty assumes per-sample
    Lipschitz behavior and batch-coupled norms would break it.
    """

    def __init__(self, rng: np.random.Generator, config: CriticConfig):
        super().__init__()
        self.config = config
        convs = []
        c_prev = config.in_channels
        for w in config.widths:
            convs.append(Conv3d(rng, c_prev, w, k=config.kernel, stride=2,
                                padding=(config.kernel - 1) // 2, spectral=True))
            c_prev = w
        self.trunk = ModuleList(convs)
        self.realism_head = Conv3d(rng, c_prev, 1, k=1, spectral=True)
        self.class_head = Conv3d(rng, c_prev, 3, k=1)

    def set_power_iterations(self, n: int) -> None:
        for conv in self.trunk:
            conv.n_power_iterations = n
        self.realism_head.n_power_iterations = n

    def features(self, y: Tensor, x_s: Tensor) -> Tensor:
        if y.shape != x_s.shape:
            raise ValueError("critic inputs must share shape")
        h = ops.concat([y, x_s], axis=1)
        for conv in self.trunk:
            h = ops.leaky_relu(conv(h), LEAKY_SLOPE)
        return h

    def forward(self, y: Tensor, x_s: Tensor) -> tuple[Tensor, Tensor]:
        h = self.features(y, x_s)
        realism_map = self.realism_head(h)
        pooled = ops.mean(h, axis=(2, 3, 4), keepdims=True)
        logits = ops.reshape(self.class_head(pooled), (h.shape[0], 3))
        return realism_map, logits


def realism_score_mean(realism_map: Tensor) -> Tensor:
    """(B,) adversarial scores: spatial mean of the patch map."""
    return ops.reshape(ops.mean(realism_map, axis=(1, 2, 3, 4)),
                       (realism_map.shape[0],))


def realism_score_sum(realism_map: Tensor) -> Tensor:
    """(B,) gradient-penalty scores: spatial sum of the patch map."""
    return ops.reshape(ops.sum_(realism_map, axis=(1, 2, 3, 4)),
                       (realism_map.shape[0],))


# --------------------------------------------------------------------------
# segmenter
# --------------------------------------------------------------------------

@dataclass
class SegmenterConfig:
    in_channels: int = 4          # volume + 3 contrast-code channels
    base: int = 8


class Segmenter(Module):
    """Conditional 3-level U-Net emitting voxelwise tumour logits.

    Two usages share this class: the consistency-loss variant feeds one
    volume plus its broadcast contrast code (``forward``), and the
    downstream-evaluation variant feeds four stacked volumes with no
    code (``forward_channels`` directly).
    """

    def __init__(self, rng: np.random.Generator, config: SegmenterConfig):
        super().__init__()
        self.config = config
        b = config.base
        self.stem = Conv3d(rng, config.in_channels, b, k=3)
        self.stem_norm = ChannelNorm(b)
        self.down1 = Conv3d(rng, b, 2 * b, k=3, stride=2)
        self.norm1 = ChannelNorm(2 * b)
        self.conv1 = Conv3d(rng, 2 * b, 2 * b, k=3)
        self.norm1b = ChannelNorm(2 * b)
        self.down2 = Conv3d(rng, 2 * b, 4 * b, k=3, stride=2)
        self.norm2 = ChannelNorm(4 * b)
        self.conv2 = Conv3d(rng, 4 * b, 4 * b, k=3)
        self.norm2b = ChannelNorm(4 * b)
        self.up1 = Conv3d(rng, 4 * b, 2 * b, k=3)
        self.norm3 = ChannelNorm(2 * b)
        self.fuse1 = Conv3d(rng, 4 * b, 2 * b, k=3)
        self.norm3b = ChannelNorm(2 * b)
        self.up2 = Conv3d(rng, 2 * b, b, k=3)
        self.norm4 = ChannelNorm(b)
        self.fuse2 = Conv3d(rng, 2 * b, b, k=3)
        self.norm4b = ChannelNorm(b)
        self.head = Conv3d(rng, b, 1, k=1)

    def _act(self, norm, x):
        return ops.leaky_relu(norm(x), LEAKY_SLOPE)

    def forward_channels(self, x: Tensor) -> Tensor:
        """Run the U-Net on an already-assembled channel stack."""
        for d in x.shape[2:]:
            if d % 4:
                raise ValueError(f"spatial dims {x.shape[2:]} must be divisible by 4")
        s0 = self._act(self.stem_norm, self.stem(x))
        h1 = self._act(self.norm1, self.down1(s0))
        s1 = self._act(self.norm1b, self.conv1(h1))
        h2 = self._act(self.norm2, self.down2(s1))
        h2 = self._act(self.norm2b, self.conv2(h2))
        u1 = ops.trilinear_upsample(h2, s1.shape[2:])
        u1 = self._act(self.norm3, self.up1(u1))
        u1 = self._act(self.norm3b, self.fuse1(ops.concat([u1, s1], axis=1)))
        u2 = ops.trilinear_upsample(u1, s0.shape[2:])
        u2 = self._act(self.norm4, self.up2(u2))
        u2 = self._act(self.norm4b, self.fuse2(ops.concat([u2, s0], axis=1)))
        return self.head(u2)

    def forward(self, y: Tensor, codes: np.ndarray) -> Tensor:
        if y.ndim != 5 or y.shape[1] != 1:
            raise ValueError("segmenter expects (B,1,D,H,W) input")
        return self.forward_channels(concat_code_channels(y, codes))


# --------------------------------------------------------------------------
# frozen feature extractor
# --------------------------------------------------------------------------

@dataclass
class FeatureExtractorConfig:
    base: int = 8
    seed: int = 7321              # fixed: features must be deterministic


class _ExtractorStage(Module):
    """stride-2 conv + residual refinement, no normalization."""

    def __init__(self, rng, c_in, c_out):
        super().__init__()
        self.down = Conv3d(rng, c_in, c_out, k=3, stride=2)
        self.conv_a = Conv3d(rng, c_out, c_out, k=3)
        self.conv_b = Conv3d(rng, c_out, c_out, k=3)

    def forward(self, x):
        h = ops.leaky_relu(self.down(x), LEAKY_SLOPE)
        r = self.conv_b(ops.leaky_relu(self.conv_a(h), LEAKY_SLOPE))
        return ops.add(h, r)


class FeatureExtractor(Module):
    """Fixed-seed frozen four-stage feature pyramid.

    Stands in for a pretrained medical backbone: stages sit at strides
    4, 8, 16, 32 with doubling widths.  Weights are deterministic given
    the config seed; ``load_external`` swaps in externally converted
    weights (same names/shapes) for users who have them.  The module is
    frozen at construction — inputs receive gradients, weights never do.
    """

    def __init__(self, config: FeatureExtractorConfig | None = None):
        super().__init__()
        self.config = config if config is not None else FeatureExtractorConfig()
        rng = np.random.default_rng(self.config.seed)
        b = self.config.base
        self.stem = Conv3d(rng, 1, b, k=3, stride=2)
        self.stage1 = _ExtractorStage(rng, b, 2 * b)
        self.stage2 = _ExtractorStage(rng, 2 * b, 4 * b)
        self.stage3 = _ExtractorStage(rng, 4 * b, 8 * b)
        self.stage4 = _ExtractorStage(rng, 8 * b, 16 * b)
        self.freeze()

    def forward(self, x: Tensor) -> list[Tensor]:
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError("feature extractor expects (B,1,D,H,W)")
        if min(x.shape[2:]) < 16:
            raise ValueError(
                f"volume {x.shape[2:]} too small: all dims must be >= 16")
        h = ops.leaky_relu(self.stem(x), LEAKY_SLOPE)
        f1 = self.stage1(h)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        f4 = self.stage4(f3)
        return [f1, f2, f3, f4]

    def pooled_final(self, x: Tensor) -> Tensor:
        """(B, C4) globally averaged final-stage features (distance metric)."""
        return ops.reshape(ops.mean(self.forward(x)[3], axis=(2, 3, 4)),
                           (x.shape[0], 16 * self.config.base))

    def load_external(self, arrays: dict[str, np.ndarray]) -> None:
        """Hook for externally converted backbone weights (strict names)."""
        was_frozen = self.frozen
        self.load_state(arrays)
        if was_frozen:
            self.freeze()
