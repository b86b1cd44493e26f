"""Command-line entry point: gen, train, eval, gradcheck, oracle, bench, infer.

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 I/O or
format error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import datagen, gradcheck, profiler, trainer
from .config import ConfigError, RunConfig, apply_settings, dump_settings, parse_config_file
from .model import SegModel, load_checkpoint
from .refine import DisentangledAttention, attention_reference
from .tensor import FormatError, Tensor, load_tensor_file, no_grad


def _build_parser():
    parser = argparse.ArgumentParser(prog="segrefine")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--data", default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--context-head", choices=["frm", "ppm", "dappm"], default=None)
        p.add_argument("--size", default=None, help="HxW input size")
        p.add_argument("--checkpoint", default=None)
        return p

    gen = common(sub.add_parser("gen", help="generate a synthetic dataset"))
    gen.add_argument("--count", type=int, default=256)
    gen.add_argument("--classes", type=int, default=5)

    train = common(sub.add_parser("train", help="train a model"))
    train.add_argument("--val", default=None, help="held-out dataset directory")

    ev = common(sub.add_parser("eval", help="evaluate a checkpoint"))

    gc = common(sub.add_parser("gradcheck", help="finite-difference gradient suite"))
    gc.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)

    common(sub.add_parser("oracle", help="literal attention oracle comparison"))
    common(sub.add_parser("bench", help="cost comparison of the context heads"))

    infer = common(sub.add_parser("infer", help="segment one FRMT image to a PGM mask"))
    infer.add_argument("input", help="input image (.frmt)")
    infer.add_argument("output", help="output mask (.pgm)")
    return parser


def _resolve(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        apply_settings(cfg, parse_config_file(args.config))
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.data is not None:
        overrides["data"] = args.data
    if args.out is not None:
        overrides["out"] = args.out
    if args.context_head is not None:
        overrides["context_head"] = args.context_head
    if args.size is not None:
        overrides["size"] = args.size
    if args.checkpoint is not None:
        overrides["checkpoint"] = args.checkpoint
    apply_settings(cfg, overrides)
    cfg.validate()
    return cfg


def _write_provenance(cfg: RunConfig):
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "run.txt"), "w", encoding="utf-8") as f:
        f.write(dump_settings(cfg))


def cmd_gen(cfg: RunConfig, args):
    h, w = cfg.size if args.size else (64, 64)
    spec = datagen.SceneSpec(height=h, width=w, num_classes=args.classes, seed=cfg.train.seed)
    datagen.generate(spec, args.count, cfg.out)
    print(f"wrote {args.count} samples to {cfg.out}")
    return 0


def cmd_train(cfg: RunConfig, args):
    if not os.path.isdir(cfg.data):
        print(f"dataset not found: {cfg.data}", file=sys.stderr)
        return 2
    dataset = datagen.Dataset(cfg.data)
    if dataset.num_classes != cfg.model.num_classes:
        cfg.model = replace(cfg.model, num_classes=dataset.num_classes)
    start_iter = 0
    if cfg.checkpoint:
        model, header = load_checkpoint(cfg.checkpoint)
        start_iter = int(header.get("iteration", 0))
    else:
        model = SegModel(cfg.model, rng=np.random.default_rng(cfg.train.seed))
    val = datagen.Dataset(args.val) if args.val else None
    history = trainer.train(
        model, dataset, cfg.train, cfg.loss,
        out_dir=cfg.out, val_dataset=val, start_iter=start_iter,
    )
    final = history[-1] if history else None
    with open(os.path.join(cfg.out, "summary.txt"), "w", encoding="utf-8") as f:
        if final:
            f.write(f"final_iteration={final[0]}\nfinal_loss={final[2]}\n")
            if final[5] != "":
                f.write(f"final_val_miou={final[5]}\n")
    print(f"checkpoint written to {os.path.join(cfg.out, 'checkpoint.srcp')}")
    return 0


def cmd_eval(cfg: RunConfig, args):
    model, _ = load_checkpoint(cfg.checkpoint)
    dataset = datagen.Dataset(cfg.data)
    if dataset.num_classes != model.cfg.num_classes:
        raise ConfigError(
            f"dataset has {dataset.num_classes} classes, model {model.cfg.num_classes}"
        )
    miou, per_class = trainer.evaluate(model, dataset, ignore_index=cfg.loss.ignore_index)
    for c, iou in enumerate(per_class):
        print(f"class {c}: IoU {iou:.4f}")
    print(f"mIoU {miou:.4f}")
    with open(os.path.join(cfg.out, "eval.txt"), "w", encoding="utf-8") as f:
        f.write(f"miou={miou}\n")
        for c, iou in enumerate(per_class):
            f.write(f"iou_{c}={iou}\n")
    return 0


def cmd_gradcheck(cfg: RunConfig, args):
    ok = gradcheck.run_suite(seed=cfg.train.seed, fault=args.inject_fault)
    return 0 if ok else 1


def cmd_oracle(cfg: RunConfig, args):
    """Vectorized attention vs the literal per-pair evaluation."""
    rng = np.random.default_rng(cfg.train.seed)
    worst = 0.0
    for channels in (4, 8):
        for h in range(1, 5):
            for w in range(1, 5):
                block = DisentangledAttention(channels, rng=rng)
                x = Tensor(rng.standard_normal((2, channels, h, w)).astype(np.float32))
                with no_grad():
                    got = block.attend(
                        x, block.query(x), block.key(x), block.unary(x), block.value(x)
                    ).data
                want = attention_reference(
                    x.data,
                    block.query.weight.data[:, :, 0, 0], block.key.weight.data[:, :, 0, 0],
                    block.unary.weight.data[:, :, 0, 0], block.value.weight.data[:, :, 0, 0],
                    block.query.bias.data, block.key.bias.data,
                    block.unary.bias.data, block.value.bias.data,
                )
                worst = max(worst, float(np.abs(got - want).max()))
    print(f"max deviation vs literal oracle: {worst:.3e}")
    if worst >= 1e-5:
        return 1
    return 0


def cmd_bench(cfg: RunConfig, args):
    reports = profiler.bench_heads(cfg.model, cfg.size, seed=cfg.train.seed)
    print(profiler.bench_table(reports, cfg.size))
    for name, report in reports.items():
        print()
        print(report.to_text())
        with open(os.path.join(cfg.out, f"costs_{name}.csv"), "w", encoding="utf-8") as f:
            f.write(report.to_csv() + "\n")
    return 0


def cmd_infer(cfg: RunConfig, args):
    model, _ = load_checkpoint(cfg.checkpoint)
    image = load_tensor_file(args.input)
    if image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"{args.input}: expected a 3xHxW image tensor")
    model.eval()
    with no_grad():
        logits = model(Tensor(image[None]), train_mode=False)["logits"]
    mask = np.argmax(logits.data[0], axis=0)
    datagen.save_pgm(args.output, mask)
    print(f"wrote mask to {args.output}")
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "oracle": cmd_oracle,
    "bench": cmd_bench,
    "infer": cmd_infer,
}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        _write_provenance(cfg)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
