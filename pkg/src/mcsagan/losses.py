"""Loss terms for the translation GAN and the segmenter.

All functions build engine graphs, so each is differentiable end to end;
the gradient penalty additionally differentiates through its own
backward pass.  Conventions fixed here and relied on by the trainer:

- adversarial scores are the spatial *mean* of the critic's realism
  map, while the gradient-penalty norm is taken on the spatial *sum*;
- the interpolation coefficient for the penalty is drawn once per
  batch element, not per voxel;
- classification cross-entropy targets are integer contrast indices;
- soft Dice terms use eps = 1e-6 and are computed per volume, then
  averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from mcsagan.engine import Tensor, grad, ops
from mcsagan import ssim as _ssim

DICE_EPS = 1e-6
PERC_WEIGHTS = (1.0, 0.5, 0.25, 0.1)


@dataclass
class LossWeights:
    """Generator/critic loss weights; defaults follow the training recipe."""

    rec: float = 29.8016
    msssim: float = 13.7866
    perc: float = 1.7760
    seg: float = 1.0421
    cls: float = 0.4613
    gp: float = 10.0
    alpha_mask: float = 4.0

    def replace(self, **kw) -> "LossWeights":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return LossWeights(**d)


@dataclass
class LossReport:
    """Scalar record of one generator update, serializable to JSON."""

    adv: float
    cls: float
    rec: float
    seg: float
    perc: float
    msssim: float
    total: float

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def from_dict(d: dict) -> "LossReport":
        return LossReport(**{f.name: float(d[f.name]) for f in fields(LossReport)})


# --------------------------------------------------------------------------
# critic side
# --------------------------------------------------------------------------

def critic_wgan_loss(score_real: Tensor, score_fake: Tensor) -> Tensor:
    """E[score_fake] - E[score_real]; scores are (B,) adversarial means."""
    score_real, score_fake = ops.as_tensor(score_real), ops.as_tensor(score_fake)
    if score_real.ndim != 1 or score_fake.ndim != 1:
        raise ValueError("wgan loss expects (B,) score vectors")
    return ops.sub(ops.mean(score_fake), ops.mean(score_real))


def gradient_penalty(score_fn: Callable[[Tensor], Tensor],
                     real: Tensor, fake: Tensor,
                     u: np.ndarray) -> Tensor:
    """E[(||d score/d interp||_2 - 1)^2] on per-sample interpolates.

    ``score_fn`` maps a (B, ...) volume tensor to (B,) scores (for the
    critic: the spatial sum of the realism map).  ``u`` holds one draw
    in [0,1] per batch element.  The norm graph is built with
    create_graph so the penalty backpropagates into score_fn's weights.
    """
    real, fake = ops.as_tensor(real), ops.as_tensor(fake)
    if real.shape != fake.shape:
        raise ValueError("gradient penalty inputs must share shape")
    u = np.asarray(u, dtype=real.data.dtype)
    if u.shape != (real.shape[0],):
        raise ValueError(f"u must have shape ({real.shape[0]},)")
    if np.any(u < 0) or np.any(u > 1):
        raise ValueError("interpolation coefficients must lie in [0,1]")
    ub = u.reshape((-1,) + (1,) * (real.ndim - 1))
    interp = Tensor(ub * real.data + (1.0 - ub) * fake.data, requires_grad=True)
    score = score_fn(interp)
    if score.shape != (real.shape[0],):
        raise ValueError(f"score_fn returned shape {score.shape}, wanted (B,)")
    (g,) = grad(ops.sum_(score), (interp,), create_graph=True)
    axes = tuple(range(1, g.ndim))
    norm = ops.sqrt(ops.sum_(ops.mul(g, g), axis=axes))
    gap = ops.sub(norm, 1.0)
    return ops.mean(ops.mul(gap, gap))


def classification_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of (B, 3) contrast logits vs integer labels."""
    logits = ops.as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError("classification loss expects (B, n_classes) logits")
    if labels.shape != (logits.shape[0],):
        raise ValueError("one integer label per batch element required")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label outside class range")
    logp = ops.log_softmax(logits, axis=1)
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    picked = ops.sum_(ops.mul(logp, ops.constant(onehot, dtype=logits.dtype)),
                      axis=1)
    return ops.neg(ops.mean(picked))


def critic_total(wgan: Tensor, gp: Tensor, cls: Tensor,
                 weights: LossWeights) -> Tensor:
    """L_C = L_wgan + lambda_gp * L_gp + lambda_cls * L_cls."""
    return ops.add(ops.as_tensor(wgan),
                   ops.add(ops.mul(ops.as_tensor(gp), weights.gp),
                           ops.mul(ops.as_tensor(cls), weights.cls)))


# --------------------------------------------------------------------------
# generator side
# --------------------------------------------------------------------------

def reconstruction_loss(y_hat: Tensor, y: Tensor, mask: Tensor,
                        alpha_mask: float = 4.0) -> Tensor:
    """Mask-emphasized mean absolute error: mean((1 + alpha*m) |y - y_hat|)."""
    y_hat, y = ops.as_tensor(y_hat), ops.as_tensor(y)
    mask = ops.as_tensor(mask)
    if y_hat.shape != y.shape or mask.shape != y.shape:
        raise ValueError("reconstruction loss inputs must share shape")
    w = ops.add(ops.mul(mask, float(alpha_mask)), 1.0)
    return ops.mean(ops.mul(w, ops.abs_(ops.sub(y, y_hat))))


def perceptual_loss(y_hat: Tensor, y: Tensor, extractor,
                    stage_weights: Sequence[float] = PERC_WEIGHTS) -> Tensor:
    """Weighted mean-abs distance between frozen pyramid features.

    The target branch is detached, so gradients reach the synthesized
    volume only.
    """
    y_hat, y = ops.as_tensor(y_hat), ops.as_tensor(y)
    if y_hat.shape != y.shape:
        raise ValueError("perceptual loss inputs must share shape")
    feats_hat = extractor(y_hat)
    feats_ref = extractor(y.detach())
    if len(feats_hat) != len(stage_weights):
        raise ValueError(
            f"{len(stage_weights)} stage weights for {len(feats_hat)} stages")
    total = None
    for w, fh, fr in zip(stage_weights, feats_hat, feats_ref):
        term = ops.mul(ops.mean(ops.abs_(ops.sub(fr.detach(), fh))), float(w))
        total = term if total is None else ops.add(total, term)
    return total


def msssim_loss(y_hat: Tensor, y: Tensor) -> Tensor:
    """1 - MS-SSIM(y, y_hat), in [0, 2]."""
    return ops.sub(1.0, _ssim.ms_ssim(ops.as_tensor(y), ops.as_tensor(y_hat)))


def _bce_with_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Elementwise stable binary cross-entropy from logits."""
    # max(l,0) - l*t + log(1 + exp(-|l|)): exp argument is <= 0, no overflow
    soft = ops.log(ops.add(ops.exp(ops.neg(ops.abs_(logits))), 1.0))
    return ops.add(ops.sub(ops.relu(logits), ops.mul(logits, target)), soft)


def _soft_dice_terms(probs: Tensor, mask: Tensor) -> Tensor:
    """(B,) soft Dice *loss* per volume: 1 - (2<p,m>+eps)/(sum p + sum m + eps)."""
    axes = tuple(range(1, probs.ndim))
    inter = ops.sum_(ops.mul(probs, mask), axis=axes)
    sums = ops.add(ops.sum_(probs, axis=axes), ops.sum_(mask, axis=axes))
    coeff = ops.div(ops.add(ops.mul(inter, 2.0), DICE_EPS),
                    ops.add(sums, DICE_EPS))
    return ops.sub(1.0, coeff)


def segmenter_pretrain_loss(logits: Tensor, mask: Tensor) -> Tensor:
    """Dice + 0.5 * BCE on voxel logits vs the binary tumour mask."""
    logits, mask = ops.as_tensor(logits), ops.as_tensor(mask)
    if logits.shape != mask.shape:
        raise ValueError("segmenter loss inputs must share shape")
    dice = ops.mean(_soft_dice_terms(ops.sigmoid(logits), mask))
    bce = ops.mean(_bce_with_logits(logits, mask))
    return ops.add(dice, ops.mul(bce, 0.5))


def seg_consistency_loss(y_hat: Tensor, codes: np.ndarray, mask: Tensor,
                         segmenter) -> Tensor:
    """0.5 * BCE + 0.5 * soft Dice of the frozen segmenter on a fake volume."""
    for name, p in segmenter.named_parameters():
        if p.requires_grad:
            raise RuntimeError(
                f"segmenter must be frozen for the consistency loss "
                f"(parameter '{name}' still requires grad)")
    y_hat, mask = ops.as_tensor(y_hat), ops.as_tensor(mask)
    logits = segmenter(y_hat, codes)
    if logits.shape != mask.shape:
        raise ValueError("mask shape must match segmenter output")
    bce = ops.mean(_bce_with_logits(logits, mask))
    dice = ops.mean(_soft_dice_terms(ops.sigmoid(logits), mask))
    return ops.add(ops.mul(bce, 0.5), ops.mul(dice, 0.5))


def generator_total(adv: Tensor, cls: Tensor, rec: Tensor, seg: Tensor,
                    perc: Tensor, msssim: Tensor,
                    weights: LossWeights) -> tuple[Tensor, LossReport]:
    """Weighted sum of the six generator terms plus its scalar report."""
    parts = {"adv": adv, "cls": cls, "rec": rec, "seg": seg,
             "perc": perc, "msssim": msssim}
    for name, t in parts.items():
        if t is None:
            raise ValueError(f"missing generator loss part '{name}'")
    adv, cls, rec = map(ops.as_tensor, (adv, cls, rec))
    seg, perc, msssim = map(ops.as_tensor, (seg, perc, msssim))
    total = adv
    for term, lam in ((cls, weights.cls), (rec, weights.rec),
                      (seg, weights.seg), (perc, weights.perc),
                      (msssim, weights.msssim)):
        total = ops.add(total, ops.mul(term, float(lam)))
    report = LossReport(adv=adv.item(), cls=cls.item(), rec=rec.item(),
                        seg=seg.item(), perc=perc.item(),
                        msssim=msssim.item(), total=total.item())
    return total, report
