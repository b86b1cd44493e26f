#!/usr/bin/env python3
"""Calibration run behind the toy-training accuracy bar.

Trains the default configuration on a fresh seeded synthetic split
(256 train / 64 held-out, 64x64, 5 classes, 1000 iterations) and prints
the held-out mIoU and wall-clock time. The acceptance threshold
(mIoU >= 0.85 within 15 minutes) was frozen from the numbers this
script produces; see pilot_results.txt for the recorded runs.

Usage: python3 scripts/pilot_threshold.py [--seed N] [--out DIR]
"""

import argparse
import tempfile
import time

import numpy as np

from segrefine import trainer
from segrefine.config import LossConfig, ModelConfig, TrainConfig
from segrefine.datagen import Dataset, SceneSpec, generate
from segrefine.model import SegModel


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None, help="work dir (default: temporary)")
    args = parser.parse_args()

    work = args.out or tempfile.mkdtemp(prefix="pilot-")
    print(f"work dir: {work}")
    generate(SceneSpec(num_classes=5, seed=args.seed + 100), 256, f"{work}/train")
    generate(SceneSpec(num_classes=5, seed=args.seed + 200), 64, f"{work}/val")

    model = SegModel(ModelConfig(num_classes=5), rng=np.random.default_rng(args.seed))
    start = time.perf_counter()
    trainer.train(
        model,
        Dataset(f"{work}/train"),
        TrainConfig(seed=args.seed),
        LossConfig(lam=1.0, tau=0.1),
        out_dir=f"{work}/run",
    )
    elapsed = time.perf_counter() - start
    miou, per_class = trainer.evaluate(model, Dataset(f"{work}/val"))
    for c, iou in enumerate(per_class):
        print(f"class {c}: IoU {iou:.4f}")
    print(f"seed={args.seed} held-out mIoU={miou:.4f} train_time={elapsed / 60:.2f} min")


if __name__ == "__main__":
    main()
