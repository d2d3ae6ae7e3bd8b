"""Training orchestration: segmenter pretraining and the adversarial loop.

Determinism contract: given one integer seed, every random draw comes
from named substreams (model init, per-epoch data order, per-step
contrast choice, per-update interpolation coefficients), all of which
are checkpointed, so a rerun reproduces the metrics log bitwise in
single-threaded mode and a resumed run continues bitwise.

Update protocol per outer step: one batch is drawn and one fake batch
synthesized from it; each of the ``n_critic`` critic updates draws an
independent real batch and fresh interpolation coefficients against
that shared (detached) fake; then the generator takes one update
through the refreshed critic.  Sharing the fake keeps the outer step
at a single generator forward, which is what lets smoke training fit
its CPU budget.
"""

from __future__ import annotations

import dataclasses
import gc
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mcsagan import checkpoint as ckpt
from mcsagan import losses as L
from mcsagan.data import Sample
from mcsagan.engine import Adam, MultiStepLR, Tensor, no_grad, ops
from mcsagan.networks import (
    ATTN_NONE,
    CONTRASTS,
    Critic,
    CriticConfig,
    FeatureExtractor,
    FeatureExtractorConfig,
    Generator,
    GeneratorConfig,
    Segmenter,
    SegmenterConfig,
    one_hot_code,
    realism_score_mean,
    realism_score_sum,
)


@dataclass
class TrainConfig:
    epochs: int = 210
    batch_size: int = 2
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    lr_milestones: tuple[int, ...] = (80, 140, 200)
    lr_factor: float = 0.5
    n_critic: int = 3
    seed: int = 0
    use_mbha: bool = True
    use_perc: bool = True
    use_seg: bool = True
    val_interval: int = 10        # generator steps between validation passes
    val_volumes: int = 4
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    extractor: FeatureExtractorConfig = field(
        default_factory=FeatureExtractorConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        ms = self.lr_milestones
        if any(a >= b for a, b in zip(ms, ms[1:])):
            raise ValueError("lr_milestones must be strictly increasing")
        if ms and ms[-1] >= self.epochs:
            raise ValueError("lr_milestones must lie below epochs")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def train_config_from_dict(d: dict) -> TrainConfig:
    """TrainConfig from a JSON-shaped dict (nested configs, lists as tuples)."""
    from mcsagan.attention import AttentionBudget

    d = {k: v for k, v in d.items() if not k.startswith("_")}
    for key, cls in (("weights", L.LossWeights), ("critic", CriticConfig),
                     ("extractor", FeatureExtractorConfig)):
        if key in d and isinstance(d[key], dict):
            d[key] = cls(**d[key])
    if "generator" in d and isinstance(d["generator"], dict):
        g = dict(d["generator"])
        if isinstance(g.get("budget"), dict):
            g["budget"] = AttentionBudget(**g["budget"])
        for k in ("widths", "enc_attention", "dec_attention"):
            if k in g:
                g[k] = tuple(g[k])
        d["generator"] = GeneratorConfig(**g)
    if "critic" in d and isinstance(d["critic"].widths, list):
        d["critic"] = dataclasses.replace(d["critic"],
                                          widths=tuple(d["critic"].widths))
    if "lr_milestones" in d:
        d["lr_milestones"] = tuple(d["lr_milestones"])
    return TrainConfig(**d)


def generator_config_for(cfg: TrainConfig) -> GeneratorConfig:
    """The generator architecture after applying the MBHA ablation flag."""
    g = cfg.generator
    if cfg.use_mbha:
        return g
    n = len(g.widths)
    return dataclasses.replace(g, enc_attention=(ATTN_NONE,) * n,
                               dec_attention=(ATTN_NONE,) * n)


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------

def _stack(vols) -> Tensor:
    return Tensor(np.stack([np.asarray(v, dtype=np.float32)[None]
                            for v in vols], axis=0))


def assemble_batch(samples: list[Sample], contrast_idx: np.ndarray):
    """(x_s, y_real, mask, codes, labels) tensors for chosen target contrasts."""
    xs = _stack([s.x_s for s in samples])
    ys = _stack([s.targets[CONTRASTS[c]] for s, c in zip(samples, contrast_idx)])
    masks = _stack([s.mask for s in samples])
    codes = np.stack([one_hot_code(int(c)) for c in contrast_idx], axis=0)
    return xs, ys, masks, codes, np.asarray(contrast_idx, dtype=np.int64)


class _JsonlLog:
    def __init__(self, path):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a")
        self.records: list[dict] = []

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self.path is not None:
            self._fh.close()


def _check_finite(value: float, term: str, step: int) -> float:
    if not math.isfinite(value):
        raise FloatingPointError(
            f"non-finite loss term '{term}' ({value}) at generator step {step}")
    return value


# --------------------------------------------------------------------------
# segmenter pretraining
# --------------------------------------------------------------------------

def pretrain_segmenter(train_samples: list[Sample],
                       val_samples: list[Sample],
                       epochs: int = 30,
                       batch_size: int = 2,
                       lr: float = 1e-4,
                       config: SegmenterConfig | None = None,
                       seed: int = 0,
                       checkpoint_path=None,
                       log_path=None,
                       stop_dice: float | None = None
                       ) -> tuple[Segmenter, list[dict]]:
    """Train the conditional segmenter on real volumes of random contrasts.

    Returns the (unfrozen) segmenter and a per-epoch history of mean
    held-out Dice at threshold 0.5.  With ``stop_dice`` set, training
    ends at the first epoch whose held-out Dice exceeds it.
    """
    from mcsagan.metrics import dice as hard_dice

    config = config if config is not None else SegmenterConfig()
    seg = Segmenter(np.random.default_rng((seed, 3)), config)
    # standard Adam momentum: the zero-beta1 setting is critic-specific
    opt = Adam(seg.parameters(), lr=lr, beta1=0.9, beta2=0.999)
    data_rng = np.random.default_rng((seed, 4))
    contrast_rng = np.random.default_rng((seed, 5))
    log = _JsonlLog(log_path)
    history: list[dict] = []
    step = 0
    for epoch in range(1, epochs + 1):
        order = data_rng.permutation(len(train_samples))
        for at in range(0, len(order) - batch_size + 1, batch_size):
            batch = [train_samples[i] for i in order[at:at + batch_size]]
            cidx = contrast_rng.integers(0, 3, len(batch))
            vols = _stack([s.targets[CONTRASTS[c]]
                           for s, c in zip(batch, cidx)])
            masks = _stack([s.mask for s in batch])
            codes = np.stack([one_hot_code(int(c)) for c in cidx], axis=0)
            logits = seg(vols, codes)
            loss = L.segmenter_pretrain_loss(logits, masks)
            seg.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            log.write({"kind": "seg_step", "epoch": epoch, "step": step,
                       "loss": _check_finite(loss.item(), "segmenter", step)})
            if step % 16 == 0:
                gc.collect()
        scores = []
        with no_grad():
            for s in val_samples:
                c = CONTRASTS[0]
                logits = seg(_stack([s.targets[c]]), one_hot_code(c))
                pred = (logits.numpy()[0, 0] > 0.0).astype(np.int64)
                scores.append(hard_dice(pred, s.mask.astype(np.int64)))
        entry = {"kind": "seg_epoch", "epoch": epoch,
                 "val_dice": float(np.mean(scores)) if scores else float("nan")}
        history.append(entry)
        log.write(entry)
        if stop_dice is not None and entry["val_dice"] > stop_dice:
            break
    log.close()
    if checkpoint_path is not None:
        meta = {"config": dataclasses.asdict(config), "epochs": epochs,
                "seed": seed, "history": history}
        ckpt.save_checkpoint(checkpoint_path, meta,
                             {f"segmenter.{k}": v
                              for k, v in seg.state_arrays().items()})
    return seg, history


def load_segmenter(path) -> Segmenter:
    """Frozen segmenter from a pretraining checkpoint."""
    meta, arrays = ckpt.load_checkpoint(path)
    config = SegmenterConfig(**meta["config"])
    seg = Segmenter(np.random.default_rng(0), config)
    seg.load_state({k.removeprefix("segmenter."): v for k, v in arrays.items()})
    seg.freeze()
    return seg


# --------------------------------------------------------------------------
# adversarial training
# --------------------------------------------------------------------------

class GanTrainer:
    """Owns models, optimizers, RNG streams, and the step loop."""

    def __init__(self, cfg: TrainConfig, segmenter: Segmenter | None = None):
        if cfg.use_seg:
            if segmenter is None:
                raise ValueError("use_seg=True requires a pretrained segmenter")
            for name, p in segmenter.named_parameters():
                if p.requires_grad:
                    raise ValueError(f"segmenter must be frozen ({name})")
        self.cfg = cfg
        self.segmenter = segmenter
        self.generator = Generator(np.random.default_rng((cfg.seed, 1)),
                                   generator_config_for(cfg))
        self.critic = Critic(np.random.default_rng((cfg.seed, 2)), cfg.critic)
        self.extractor = FeatureExtractor(cfg.extractor) if cfg.use_perc else None
        self.opt_g = Adam(self.generator.parameters(), lr=cfg.lr,
                          beta1=cfg.beta1, beta2=cfg.beta2)
        self.opt_c = Adam(self.critic.parameters(), lr=cfg.lr,
                          beta1=cfg.beta1, beta2=cfg.beta2)
        self.sched = MultiStepLR((self.opt_g, self.opt_c), cfg.lr,
                                 cfg.lr_milestones, cfg.lr_factor)
        self.data_rng = np.random.default_rng((cfg.seed, 10))
        self.contrast_rng = np.random.default_rng((cfg.seed, 11))
        self.gp_rng = np.random.default_rng((cfg.seed, 12))
        self.critic_rng = np.random.default_rng((cfg.seed, 13))
        self.epoch = 0            # completed epochs
        self.gen_steps = 0
        self.critic_steps = 0

    # ---- persistence -----------------------------------------------------
    def _arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, model in (("generator", self.generator),
                              ("critic", self.critic)):
            for k, v in model.state_arrays().items():
                out[f"{prefix}.{k}"] = v
        out.update(self.opt_g.state_arrays("opt_g"))
        out.update(self.opt_c.state_arrays("opt_c"))
        return out

    def save(self, path, mid_epoch: bool = False) -> None:
        meta = {
            "config": self.cfg.to_dict(),
            "config_hash": ckpt.config_hash(self.cfg.to_dict()),
            "epoch": self.epoch,
            "mid_epoch": mid_epoch,
            "gen_steps": self.gen_steps,
            "critic_steps": self.critic_steps,
            "opt_steps": {"g": self.opt_g.step_count, "c": self.opt_c.step_count},
            "rng": {"data": self.data_rng.bit_generator.state,
                    "contrast": self.contrast_rng.bit_generator.state,
                    "gp": self.gp_rng.bit_generator.state,
                    "critic": self.critic_rng.bit_generator.state},
        }
        ckpt.save_checkpoint(path, meta, self._arrays())

    def load(self, path) -> None:
        meta, arrays = ckpt.load_checkpoint(path)
        want = ckpt.config_hash(self.cfg.to_dict())
        if meta["config_hash"] != want:
            raise ValueError(
                f"checkpoint config hash {meta['config_hash']} does not match "
                f"current config {want}; refusing to resume")
        if meta.get("mid_epoch"):
            raise ValueError(
                "checkpoint was written mid-epoch (step-budget stop); "
                "resume is only supported from epoch boundaries")
        self.generator.load_state(
            {k.removeprefix("generator."): v for k, v in arrays.items()
             if k.startswith("generator.")})
        self.critic.load_state(
            {k.removeprefix("critic."): v for k, v in arrays.items()
             if k.startswith("critic.")})
        self.opt_g.load_state_arrays("opt_g", arrays, meta["opt_steps"]["g"])
        self.opt_c.load_state_arrays("opt_c", arrays, meta["opt_steps"]["c"])
        self.data_rng.bit_generator.state = meta["rng"]["data"]
        self.contrast_rng.bit_generator.state = meta["rng"]["contrast"]
        self.gp_rng.bit_generator.state = meta["rng"]["gp"]
        self.critic_rng.bit_generator.state = meta["rng"]["critic"]
        self.epoch = meta["epoch"]
        self.gen_steps = meta["gen_steps"]
        self.critic_steps = meta["critic_steps"]

    # ---- single outer step ----------------------------------------------
    def outer_step(self, train_samples: list[Sample],
                   batch_idx: np.ndarray, log: _JsonlLog) -> None:
        cfg = self.cfg
        w = cfg.weights
        batch = [train_samples[i] for i in batch_idx]
        cidx = self.contrast_rng.integers(0, 3, len(batch))
        xs, ys, masks, codes, labels = assemble_batch(batch, cidx)

        fake = self.generator(xs, codes)
        fake_const = Tensor(fake.data)     # critic phase sees a constant fake

        crit_log = {}
        for _ in range(cfg.n_critic):
            # independent real batch for each critic update
            ridx = self.critic_rng.integers(0, len(train_samples), len(batch))
            rbatch = [train_samples[i] for i in ridx]
            rcidx = self.contrast_rng.integers(0, 3, len(rbatch))
            xr, yr, _, _, rlabels = assemble_batch(rbatch, rcidx)
            map_real, logits_real = self.critic(yr, xr)
            map_fake, _ = self.critic(fake_const, xs)
            wgan = L.critic_wgan_loss(realism_score_mean(map_real),
                                      realism_score_mean(map_fake))
            u = self.gp_rng.uniform(0.0, 1.0, len(batch))
            gp = L.gradient_penalty(
                lambda v: realism_score_sum(self.critic(v, xr)[0]),
                yr, fake_const, u)
            cls_real = L.classification_loss(logits_real, rlabels)
            total_c = L.critic_total(wgan, gp, cls_real, w)
            self.critic.zero_grad()
            total_c.backward()
            self.opt_c.step()
            self.critic_steps += 1
            crit_log = {
                "critic_wgan": _check_finite(wgan.item(), "critic_wgan",
                                             self.gen_steps),
                "critic_gp": _check_finite(gp.item(), "critic_gp",
                                           self.gen_steps),
                "critic_cls": _check_finite(cls_real.item(), "critic_cls",
                                            self.gen_steps),
                "critic_total": total_c.item(),
                "wasserstein": -wgan.item(),
            }

        map_fake, logits_fake = self.critic(fake, xs)
        adv = ops.neg(ops.mean(realism_score_mean(map_fake)))
        cls = L.classification_loss(logits_fake, labels)
        rec = L.reconstruction_loss(fake, ys, masks, w.alpha_mask)
        zero = ops.constant(np.float32(0.0))
        seg = (L.seg_consistency_loss(fake, codes, masks, self.segmenter)
               if cfg.use_seg else zero)
        perc = (L.perceptual_loss(fake, ys, self.extractor)
                if cfg.use_perc else zero)
        msssim = L.msssim_loss(fake, ys)
        total, report = L.generator_total(adv, cls, rec, seg, perc, msssim, w)
        for term, value in report.to_dict().items():
            _check_finite(value, term, self.gen_steps + 1)
        self.generator.zero_grad()
        total.backward()
        self.opt_g.step()
        self.gen_steps += 1

        record = {"kind": "step", "step": self.gen_steps, "epoch": self.epoch + 1,
                  "lr": self.opt_g.lr, "critic_steps": self.critic_steps}
        record.update(report.to_dict())
        record.update(crit_log)
        log.write(record)
        if self.gen_steps % 16 == 0:
            gc.collect()  # consumed graphs free by refcount; this is hygiene

    # ---- validation ------------------------------------------------------
    def validation_masked_l1(self, val_samples: list[Sample]) -> float:
        cfg = self.cfg
        vols = val_samples[:cfg.val_volumes]
        if not vols:
            return float("nan")
        losses = []
        with no_grad():
            for i, s in enumerate(vols):
                c = i % 3                      # fixed rotation, no rng
                xs, ys, masks, codes, _ = assemble_batch([s], np.array([c]))
                fake = self.generator(xs, codes)
                losses.append(L.reconstruction_loss(
                    fake, ys, masks, cfg.weights.alpha_mask).item())
        return float(np.mean(losses))


def train_gan(cfg: TrainConfig,
              train_samples: list[Sample],
              val_samples: list[Sample],
              out_dir,
              segmenter: Segmenter | None = None,
              max_generator_steps: int | None = None,
              resume_from=None) -> GanTrainer:
    """Run (or continue) adversarial training; returns the trainer.

    Writes ``metrics.jsonl`` and per-epoch ``epoch_XXX.mckp`` checkpoints
    under ``out_dir``; ``latest.mckp`` always mirrors the newest state.
    """
    if len(train_samples) < cfg.batch_size:
        raise ValueError("not enough training samples for one batch")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = GanTrainer(cfg, segmenter=segmenter)
    if resume_from is not None:
        trainer.load(resume_from)
    log = _JsonlLog(out_dir / "metrics.jsonl")

    def step_budget_left() -> bool:
        return (max_generator_steps is None
                or trainer.gen_steps < max_generator_steps)

    try:
        while trainer.epoch < cfg.epochs and step_budget_left():
            epoch = trainer.epoch + 1
            lr = trainer.sched.apply(epoch)
            order = trainer.data_rng.permutation(len(train_samples))
            completed = True
            for at in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
                if not step_budget_left():
                    completed = False
                    break
                trainer.outer_step(train_samples, order[at:at + cfg.batch_size],
                                   log)
                if trainer.gen_steps % cfg.val_interval == 0:
                    val = trainer.validation_masked_l1(val_samples)
                    log.write({"kind": "val", "step": trainer.gen_steps,
                               "epoch": epoch, "lr": lr, "masked_l1": val})
            if completed:
                trainer.epoch = epoch
                trainer.save(out_dir / f"epoch_{epoch:03d}.mckp")
                trainer.save(out_dir / "latest.mckp")
            else:
                # budget stop inside an epoch: usable for inference only
                trainer.save(out_dir / "latest.mckp", mid_epoch=True)
    finally:
        log.close()
    return trainer


def load_generator(path) -> tuple[Generator, TrainConfig]:
    """Generator (eval-ready) plus its training config from a checkpoint."""
    meta, arrays = ckpt.load_checkpoint(path)
    cfg = train_config_from_dict(meta["config"])
    gen = Generator(np.random.default_rng(0), generator_config_for(cfg))
    gen.load_state({k.removeprefix("generator."): v for k, v in arrays.items()
                    if k.startswith("generator.")})
    return gen, cfg
