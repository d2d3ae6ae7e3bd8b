#!/usr/bin/env python3
"""Paired ablation: does the consistency loss help downstream Dice?

For each seed, trains the full config and a use_seg=false twin on the
same phantoms, then scores both with one fixed 4-channel segmenter
fitted on real stacks.  Prints the per-seed Dice pairs and the means.

Usage: python3 scripts/seg_ablation.py [--seeds 3] [--steps 60] [--dims 16]
"""

import argparse
import dataclasses
import pathlib
import sys
import tempfile
import time

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from mcsagan.runtime import apply_thread_cap

apply_thread_cap()

import numpy as np  # noqa: E402

from mcsagan import evaluate as E  # noqa: E402
from mcsagan.data import PhantomSpec, generate_phantom  # noqa: E402
from mcsagan.networks import (ATTN_FULL, ATTN_MBHA, CriticConfig,  # noqa: E402
                              GeneratorConfig, SegmenterConfig)
from mcsagan.train import (TrainConfig, pretrain_segmenter,  # noqa: E402
                           train_gan)


def small_config(seed: int, use_seg: bool) -> TrainConfig:
    return TrainConfig(
        epochs=64, batch_size=2, seed=seed, use_seg=use_seg,
        val_interval=10 ** 6,
        generator=GeneratorConfig(widths=(8, 16, 32),
                                  enc_attention=(ATTN_MBHA,) * 3,
                                  dec_attention=(ATTN_MBHA,) * 3,
                                  bottleneck_groups=8),
        critic=CriticConfig(widths=(8, 16)))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--steps", type=int, default=60)
    ap.add_argument("--dims", type=int, default=16)
    args = ap.parse_args()

    dims = (args.dims,) * 3
    train_s = [generate_phantom(PhantomSpec(dims=dims, seed=s))
               for s in range(12)]
    ds_s = [generate_phantom(PhantomSpec(dims=dims, seed=100 + s))
            for s in range(8)]
    test_s = [generate_phantom(PhantomSpec(dims=dims, seed=200 + s))
              for s in range(6)]

    seg, hist = pretrain_segmenter(train_s, test_s[:2], epochs=12, lr=1e-3,
                                   config=SegmenterConfig(base=4), seed=0)
    seg.freeze()
    print(f"consistency segmenter dice: {hist[-1]['val_dice']:.3f}")
    seg4, h4 = E.train_downstream_segmenter(ds_s, test_s[:2], epochs=12,
                                            lr=1e-3, base=4, seed=0)
    print(f"downstream segmenter dice (real stacks): {h4[-1]['val_dice']:.3f}")

    rows = []
    for seed in range(args.seeds):
        pair = {}
        for use_seg in (True, False):
            cfg = small_config(seed, use_seg)
            t0 = time.time()
            with tempfile.TemporaryDirectory() as tmp:
                tr = train_gan(cfg, train_s, [], tmp,
                               segmenter=seg if use_seg else None,
                               max_generator_steps=args.steps)
                dd = E.downstream_dice(tr.generator, seg4, test_s)
            pair[use_seg] = dd["mean"]
            print(f"seed {seed} use_seg={use_seg}: dice {dd['mean']:.4f} "
                  f"({time.time() - t0:.0f}s)", flush=True)
        rows.append(pair)
    full = np.mean([r[True] for r in rows])
    able = np.mean([r[False] for r in rows])
    print(f"\nmean downstream dice: full {full:.4f} vs use_seg=false {able:.4f}"
          f"  (delta {full - able:+.4f})")


if __name__ == "__main__":
    main()
