"""Command-line entry points.

Heavy imports happen inside the command handlers so that the BLAS
thread cap from ``MCSAGAN_THREADS`` is in place before numpy loads.

Exit codes: 0 success, 1 usage error, 2 data/file error, 3 numeric
failure (non-finite loss, failed matrix decomposition).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from mcsagan.runtime import apply_thread_cap

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse variant that reports usage problems via exit code 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_json(path, what: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise ValueError(f"cannot read {what} {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ValueError(f"{what} {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ValueError(f"{what} {path} must hold a JSON object")
    return doc


def _manifest_path(data_dir) -> Path:
    p = Path(data_dir)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise ValueError(f"no dataset manifest at {p}")
    return p


def _split_train_val(samples, val_count: int):
    if val_count < 0 or val_count >= len(samples):
        raise ValueError(
            f"val-count {val_count} must leave at least one of "
            f"{len(samples)} samples for training")
    if val_count == 0:
        return samples, []
    return samples[:-val_count], samples[-val_count:]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from mcsagan.data import build_phantom_dataset

    overrides = _read_json(args.spec, "phantom spec") if args.spec else {}
    dims = tuple(overrides.pop("dims", (32, 32, 32)))
    sigma = overrides.pop("noise_sigma", 0.02)
    manifest = build_phantom_dataset(args.out, args.count, dims=dims,
                                     seed=args.seed, noise_sigma=sigma,
                                     spec_overrides=overrides)
    print(f"wrote {args.count} samples; manifest: {manifest}")
    return EXIT_OK


def cmd_pretrain_seg(args) -> int:
    from mcsagan.data import load_dataset
    from mcsagan.networks import SegmenterConfig
    from mcsagan.train import pretrain_segmenter

    cfg = _read_json(args.config, "config") if args.config else {}
    samples = load_dataset(_manifest_path(args.data))
    train_s, val_s = _split_train_val(samples, cfg.pop("val_count", 4))
    seg_cfg = SegmenterConfig(base=cfg.pop("base", 8))
    _, history = pretrain_segmenter(
        train_s, val_s,
        epochs=cfg.pop("epochs", 30),
        batch_size=cfg.pop("batch_size", 2),
        lr=cfg.pop("lr", 1e-4),
        config=seg_cfg,
        seed=cfg.pop("seed", 0),
        checkpoint_path=args.out,
        log_path=cfg.pop("log_path", None),
        stop_dice=cfg.pop("stop_dice", None))
    if cfg:
        raise ValueError(f"unknown pretrain config keys: {sorted(cfg)}")
    last = history[-1] if history else {}
    print(f"segmenter checkpoint: {args.out} "
          f"(epochs run: {len(history)}, val dice: {last.get('val_dice')})")
    return EXIT_OK


def cmd_train(args) -> int:
    from mcsagan.data import load_dataset
    from mcsagan.train import load_segmenter, train_config_from_dict, train_gan

    doc = _read_json(args.config, "config")
    val_count = doc.pop("val_count", 4)
    cfg = train_config_from_dict(doc)
    samples = load_dataset(_manifest_path(args.data))
    train_s, val_s = _split_train_val(samples, val_count)
    segmenter = None
    if cfg.use_seg:
        if args.seg is None:
            raise UsageError("--seg is required unless use_seg is false")
        segmenter = load_segmenter(args.seg)
    trainer = train_gan(cfg, train_s, val_s, args.out, segmenter=segmenter,
                        max_generator_steps=args.max_steps,
                        resume_from=args.resume)
    print(f"trained {trainer.gen_steps} generator steps "
          f"({trainer.critic_steps} critic steps, epoch {trainer.epoch}); "
          f"checkpoints in {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from mcsagan.data import read_volume, write_volume
    from mcsagan.evaluate import synthesize
    from mcsagan.train import load_generator

    generator, _ = load_generator(args.ckpt)
    volume = read_volume(args.input)
    out = synthesize(generator, volume, args.contrast)
    write_volume(args.out, out)
    print(f"synthesized {args.contrast} volume: {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from mcsagan.data import load_dataset
    from mcsagan.evaluate import (evaluate_generator, sanitize_for_json,
                                  train_downstream_segmenter)
    from mcsagan.networks import FeatureExtractor
    from mcsagan.train import load_generator

    generator, cfg = load_generator(args.ckpt)
    samples = load_dataset(_manifest_path(args.data))
    extractor = None if args.no_mfd else FeatureExtractor(cfg.extractor)
    seg4 = None
    if args.downstream_data is not None:
        ds_samples = load_dataset(_manifest_path(args.downstream_data))
        seg4, _ = train_downstream_segmenter(ds_samples,
                                             epochs=args.downstream_epochs,
                                             seed=cfg.seed)
    report = evaluate_generator(generator, samples, extractor=extractor,
                                downstream_segmenter=seg4)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(
        json.dumps(sanitize_for_json(report), indent=2) + "\n")
    line = ", ".join(
        f"{c} psnr {report['contrasts'][c]['psnr']['mean']:.2f}"
        for c in report["contrasts"])
    print(f"evaluated {report['n']} samples ({line}); report: {args.report}")
    return EXIT_OK


def _parse_dims_list(text: str) -> list[tuple[int, int, int]]:
    if text.strip() == "":
        return []
    out = []
    for chunk in text.split(","):
        parts = chunk.strip().lower().split("x")
        if len(parts) != 3:
            raise UsageError(f"bad dims '{chunk}': expected DxHxW")
        try:
            dims = tuple(int(p) for p in parts)
        except ValueError:
            raise UsageError(f"bad dims '{chunk}': expected integers") from None
        if min(dims) < 1:
            raise UsageError(f"bad dims '{chunk}': axes must be positive")
        out.append(dims)
    return out


def cmd_plan_attention(args) -> int:
    from mcsagan.attention import AttentionBudget, plan_attention

    dims_list = _parse_dims_list(args.dims)
    budget = AttentionBudget(t_q=args.tq, t_kv=args.tkv, t_attn=args.tattn,
                             kappa=args.kappa)
    header = (f"{'dims':>12} {'n_full':>8} {'mode':>17} {'s_q':>4} {'s_kv':>4} "
              f"{'q_dims':>12} {'k_dims':>12} {'n_q':>6} {'m_k':>6}")
    print(header)
    for dims in dims_list:
        p = plan_attention(dims, budget)
        fmt = "x".join(str(d) for d in dims)
        print(f"{fmt:>12} {p.n_full:>8} {p.mode:>17} {p.s_q:>4} {p.s_kv:>4} "
              f"{'x'.join(str(d) for d in p.q_dims):>12} "
              f"{'x'.join(str(d) for d in p.k_dims):>12} "
              f"{p.n_q:>6} {p.m_k:>6}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser wiring
# --------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="mcsagan",
                     description="desk-scale multi-contrast synthesis toolkit")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-data", help="generate a phantom dataset")
    p.add_argument("--spec", default=None, help="JSON phantom spec overrides")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-seg", help="pretrain the tumour segmenter")
    p.add_argument("--config", default=None, help="JSON training options")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.set_defaults(func=cmd_pretrain_seg)

    p = sub.add_parser("train", help="adversarial training")
    p.add_argument("--config", required=True, help="JSON TrainConfig")
    p.add_argument("--data", required=True)
    p.add_argument("--seg", default=None, help="pretrained segmenter checkpoint")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--max-steps", type=int, default=None,
                   help="stop after this many generator steps")
    p.add_argument("--resume", default=None,
                   help="epoch-boundary checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize one target contrast")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="source volume (MCSV)")
    p.add_argument("--contrast", required=True, choices=("t2f", "t1c", "t1n"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="fidelity/MFD/downstream report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="JSON report to write")
    p.add_argument("--no-mfd", action="store_true",
                   help="skip feature-distance computation")
    p.add_argument("--downstream-data", default=None,
                   help="real dataset used to fit the 4-channel segmenter")
    p.add_argument("--downstream-epochs", type=int, default=20)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plan-attention", help="tabulate attention routing")
    p.add_argument("--dims", required=True, help="DxHxW[,DxHxW...]")
    p.add_argument("--tq", type=int, required=True)
    p.add_argument("--tkv", type=int, required=True)
    p.add_argument("--tattn", type=int, required=True)
    p.add_argument("--kappa", type=int, default=8)
    p.set_defaults(func=cmd_plan_attention)
    return parser


def main(argv=None) -> int:
    apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        import numpy as np
        try:
            return args.func(args)
        except (FloatingPointError, np.linalg.LinAlgError) as e:
            print(f"numeric failure: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        except (OSError, ValueError, KeyError) as e:
            print(f"data error: {e}", file=sys.stderr)
            return EXIT_DATA
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
