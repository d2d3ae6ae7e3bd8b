#!/usr/bin/env python3
"""End-to-end desk-scale pipeline: data -> segmenter -> GAN -> report.

Runs the whole toolchain at smoke scale (32^3 phantoms, width-16 model,
200 generator steps) and prints stage timings plus the final fidelity
report path.  Expect roughly 15-25 minutes on one CPU core.

Usage: python3 scripts/smoke_pipeline.py [workdir]
"""

import json
import pathlib
import sys
import time

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from mcsagan.runtime import apply_thread_cap

apply_thread_cap()

from mcsagan.cli import main as cli  # noqa: E402


def stage(name, argv):
    t0 = time.time()
    code = cli(argv)
    print(f"[{name}] exit {code} in {time.time() - t0:.0f}s", flush=True)
    if code != 0:
        sys.exit(code)


def run(workdir="runs/smoke"):
    work = pathlib.Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    data = work / "data"
    seg = work / "segmenter.mckp"
    train = work / "train"
    report = work / "report.json"

    stage("gen-data", ["gen-data", "--out", str(data),
                       "--count", "68", "--seed", "0"])
    stage("pretrain-seg", ["pretrain-seg", "--data", str(data),
                           "--out", str(seg),
                           "--config", str(_write_json(work / "seg.json", {
                               "epochs": 30, "stop_dice": 0.6, "lr": 1e-3}))])
    stage("train", ["train", "--config", "configs/desk.json",
                    "--data", str(data), "--seg", str(seg),
                    "--out", str(train), "--max-steps", "200"])
    stage("eval", ["eval", "--ckpt", str(train / "latest.mckp"),
                   "--data", str(data), "--report", str(report)])
    print(json.dumps(json.loads(report.read_text()), indent=1)[:800])


def _write_json(path, doc):
    path.write_text(json.dumps(doc, indent=2))
    return path


if __name__ == "__main__":
    run(*sys.argv[1:])
