"""Training loop: SGD with momentum, poly learning-rate schedule,
augmentation (flip / scale / crop), and confusion-matrix mIoU evaluation.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .config import LossConfig, TrainConfig
from .layers import _bilinear_weights
from .losses import hybrid_loss
from .model import SegModel, save_checkpoint
from .tensor import ContractError, Tensor, no_grad


class SGD:
    """v <- mu*v + g + wd*p ; p <- p - lr*v  (decay folded into the velocity).

    Weight decay applies only to parameters tagged decay=True (conv weights;
    BN scale/shift and biases are exempt).
    """

    def __init__(self, params, momentum=0.9, weight_decay=1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                raise ContractError("sgd_step: parameter has no gradient")
            g = p.grad
            if self.weight_decay and getattr(p, "decay", False):
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


@dataclass
class TrainSchedule:
    lr0: float
    total_iters: int
    power: float = 0.9
    iteration: int = 0

    def lr(self):
        if self.iteration > self.total_iters:
            raise ContractError("schedule exhausted")
        frac = 1.0 - self.iteration / self.total_iters
        return self.lr0 * frac**self.power


def poly_lr(sched: TrainSchedule):
    return sched.lr()


def _resize_image(image, out_h, out_w):
    c, h, w = image.shape
    y0, y1, fy = _bilinear_weights(h, out_h, image.dtype)
    x0, x1, fx = _bilinear_weights(w, out_w, image.dtype)
    fy = fy[:, None]
    fx = fx[None, :]
    top = image[:, y0][:, :, x0] * (1 - fx) + image[:, y0][:, :, x1] * fx
    bot = image[:, y1][:, :, x0] * (1 - fx) + image[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def _resize_labels(labels, out_h, out_w):
    h, w = labels.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.intp), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.intp), w - 1)
    return labels[rows[:, None], cols[None, :]]


def augment(image, labels, rng, crop, scale_range=(0.5, 2.0), ignore_index=255):
    """Random horizontal flip, random resize, random crop (ignore-padded)."""
    if rng.random() < 0.5:
        image = image[:, :, ::-1]
        labels = labels[:, ::-1]
    scale = rng.uniform(*scale_range)
    h, w = labels.shape
    nh, nw = max(int(round(h * scale)), 1), max(int(round(w * scale)), 1)
    if (nh, nw) != (h, w):
        image = _resize_image(image, nh, nw)
        labels = _resize_labels(labels, nh, nw)
    if nh < crop or nw < crop:
        pad_h, pad_w = max(crop - nh, 0), max(crop - nw, 0)
        image = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)))
        labels = np.pad(labels, ((0, pad_h), (0, pad_w)), constant_values=ignore_index)
        nh, nw = labels.shape
    top = rng.integers(0, nh - crop + 1)
    left = rng.integers(0, nw - crop + 1)
    return (
        np.ascontiguousarray(image[:, top : top + crop, left : left + crop], dtype=np.float32),
        np.ascontiguousarray(labels[top : top + crop, left : left + crop]),
    )


class ConfusionMatrix:
    def __init__(self, num_classes):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, target, ignore_index=255):
        pred = np.asarray(pred).ravel()
        target = np.asarray(target).ravel()
        valid = target != ignore_index
        idx = target[valid] * self.num_classes + pred[valid]
        self.counts += np.bincount(idx, minlength=self.num_classes**2).reshape(
            self.num_classes, self.num_classes
        )

    def miou(self):
        """(mean IoU, per-class IoU list with nan for absent classes)."""
        if self.counts.sum() == 0:
            return float("nan"), [float("nan")] * self.num_classes
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        denom = tp + fp + fn
        with np.errstate(invalid="ignore"):
            iou = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
        present = denom > 0
        mean = float(iou[present].mean()) if present.any() else float("nan")
        return mean, iou.tolist()


def evaluate(model: SegModel, dataset, indices=None, ignore_index=255, batch=8):
    """mIoU of the model over a dataset (inference mode, no embedding head)."""
    was_training = model.training
    model.eval()
    cm = ConfusionMatrix(model.cfg.num_classes)
    if indices is None:
        indices = range(len(dataset))
    indices = list(indices)
    with no_grad():
        for lo in range(0, len(indices), batch):
            chunk = indices[lo : lo + batch]
            images = np.stack([dataset[i][0] for i in chunk])
            labels = np.stack([dataset[i][1] for i in chunk])
            logits = model(Tensor(images), train_mode=False)["logits"]
            cm.update(np.argmax(logits.data, axis=1), labels, ignore_index)
    model.train(was_training)
    return cm.miou()


def train(model: SegModel, dataset, train_cfg: TrainConfig, loss_cfg: LossConfig,
          out_dir=None, val_dataset=None, start_iter=0, log=print):
    """Run the optimization loop; returns the per-interval history rows."""
    rng = np.random.default_rng(train_cfg.seed)
    opt = SGD(model.parameters(), train_cfg.momentum, train_cfg.weight_decay)
    sched = TrainSchedule(train_cfg.lr0, train_cfg.iters, train_cfg.poly_power, start_iter)
    model.train()
    history = []
    running = []
    writer = None
    csv_file = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        csv_file = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        writer = csv.writer(csv_file)
        writer.writerow(["iteration", "lr", "loss", "ce", "cl", "val_miou"])
    try:
        for it in range(start_iter, train_cfg.iters):
            sched.iteration = it
            lr = sched.lr()
            picks = rng.integers(0, len(dataset), size=train_cfg.batch)
            images, labels = [], []
            for idx in picks:
                img, lab = dataset[int(idx)]
                img, lab = augment(
                    img, lab, rng, train_cfg.crop,
                    (train_cfg.scale_min, train_cfg.scale_max), loss_cfg.ignore_index,
                )
                images.append(img)
                labels.append(lab)
            batch_images = Tensor(np.stack(images))
            batch_labels = np.stack(labels)
            out = model(batch_images, train_mode=True)
            total, report = hybrid_loss(
                out["logits"], out["embeddings"], batch_labels, loss_cfg, rng
            )
            opt.zero_grad()
            total.backward()
            opt.step(lr)
            running.append(report)
            if (it + 1) % train_cfg.eval_interval == 0 or it + 1 == train_cfg.iters:
                mean_loss = float(np.mean([r.total for r in running]))
                mean_ce = float(np.mean([r.ce_term for r in running]))
                mean_cl = float(np.mean([r.cl_term for r in running]))
                running = []
                val_miou = ""
                if val_dataset is not None:
                    n_val = min(train_cfg.eval_count, len(val_dataset))
                    val_miou, _ = evaluate(
                        model, val_dataset, range(n_val), loss_cfg.ignore_index
                    )
                row = [it + 1, lr, mean_loss, mean_ce, mean_cl, val_miou]
                history.append(row)
                if writer:
                    writer.writerow(row)
                    csv_file.flush()
                log(
                    f"iter {it + 1}/{train_cfg.iters} lr {lr:.5f} "
                    f"loss {mean_loss:.4f} (ce {mean_ce:.4f} cl {mean_cl:.4f})"
                    + (f" val mIoU {val_miou:.4f}" if val_miou != "" else "")
                )
        if out_dir:
            save_checkpoint(
                os.path.join(out_dir, "checkpoint.srcp"), model,
                extra={"iteration": train_cfg.iters, "seed": train_cfg.seed},
            )
    finally:
        if csv_file:
            csv_file.close()
    return history
