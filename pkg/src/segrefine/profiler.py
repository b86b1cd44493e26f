"""Analytic parameter and FLOP accounting per named submodule.

Counting rules: conv/matmul cost multiply-accumulates x 2; batch norm,
activations, pooling, and interpolation cost one op per output element.
A dummy forward at the requested size records output shapes; counts are
then computed from the layer formulas.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baselines import DappmHead, PpmHead
from .layers import BatchNorm2d, Conv2d, Module, ReLU
from .model import SegModel
from .refine import DisentangledAttention
from .tensor import Tensor, no_grad


@dataclass
class CostRow:
    path: str
    params: int
    flops: int


@dataclass
class CostReport:
    rows: list
    input_size: tuple
    mode: str

    @property
    def total_params(self):
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self):
        return sum(r.flops for r in self.rows)

    def row(self, path):
        for r in self.rows:
            if r.path == path:
                return r
        raise KeyError(path)

    def subtotal(self, prefix):
        params = sum(r.params for r in self.rows if r.path.startswith(prefix))
        flops = sum(r.flops for r in self.rows if r.path.startswith(prefix))
        return params, flops

    def to_text(self):
        width = max([len(r.path) for r in self.rows] + [len("TOTAL")]) + 2
        h, w = self.input_size
        lines = [f"# cost report at {h}x{w}, mode={self.mode}"]
        lines.append(f"{'module':<{width}}{'params':>12}{'flops':>16}")
        for r in self.rows:
            lines.append(f"{r.path:<{width}}{r.params:>12}{r.flops:>16}")
        lines.append(f"{'TOTAL':<{width}}{self.total_params:>12}{self.total_flops:>16}")
        return "\n".join(lines)

    def to_csv(self):
        lines = ["module,params,flops"]
        for r in self.rows:
            lines.append(f"{r.path},{r.params},{r.flops}")
        lines.append(f"TOTAL,{self.total_params},{self.total_flops}")
        return "\n".join(lines)


def _reset_shapes(model: Module):
    for _, child in model.named_children():
        if hasattr(child, "last_out_shape"):
            child.last_out_shape = None
        if isinstance(child, DisentangledAttention):
            child.last_attn_shape = None


def _elements(shape):
    return int(np.prod(shape)) if shape else 0


def count_costs(model: SegModel, input_size, mode="inference"):
    """Cost report for a batch-1 forward at input_size (h, w)."""
    h, w = input_size
    was_training = model.training
    model.eval()
    _reset_shapes(model)
    with no_grad():
        model(Tensor(np.zeros((1, 3, h, w), dtype=np.float32)), train_mode=(mode == "training"))
    model.train(was_training)

    rows = []
    for path, child in model.named_children():
        if isinstance(child, (Conv2d, BatchNorm2d, ReLU)):
            if child.last_out_shape is None:
                continue  # embedding head never ran in inference mode
            rows.append(CostRow(path, child.param_count(), child.flops()))
        if isinstance(child, DisentangledAttention):
            rows.append(CostRow(path + ".pairwise", 0, child.attention_flops()))

    f_shapes = [
        model.backbone.stem_b.act.last_out_shape,
        model.backbone.stage2.act.last_out_shape,
        model.backbone.stage3.act.last_out_shape,
        model.backbone.stage4.act.last_out_shape,
    ]
    n, _, h4, w4 = f_shapes[3]

    head = model.context_head
    agg_pool = sum(n * s[1] * h4 * w4 for s in f_shapes[:3])
    rows.append(CostRow("context_head.aggregate.pool", 0, agg_pool))
    in_c = head.in_channels
    if isinstance(head, PpmHead):
        resample = 0
        for bin_size in head.bins:
            resample += n * in_c * bin_size * bin_size  # adaptive pool
            resample += n * head.branch_channels * h4 * w4  # upsample back
        rows.append(CostRow("context_head.resample", 0, resample))
    elif isinstance(head, DappmHead):
        resample = 0
        for scale in head.scales:
            ph = pw = 1
            if scale:
                ph, pw = max(h4 // scale, 1), max(w4 // scale, 1)
            resample += n * in_c * ph * pw
            resample += n * head.branch_channels * h4 * w4
        rows.append(CostRow("context_head.resample", 0, resample))

    dec = model.decoder
    upsample = 0
    for lateral in (dec.lateral3, dec.lateral2, dec.lateral1):
        upsample += _elements(lateral.last_out_shape)
    upsample += n * model.cfg.num_classes * h * w  # final logits upsample
    rows.append(CostRow("decoder.upsample", 0, upsample))
    return CostReport(rows=rows, input_size=(h, w), mode=mode)


def bench_heads(base_cfg, input_size, mode="inference", heads=("frm", "ppm", "dappm"), seed=0):
    """CostReport per context head; identical backbone/decoder across heads."""
    from dataclasses import replace

    reports = {}
    for head in heads:
        cfg = replace(base_cfg, context_head=head)
        model = SegModel(cfg, rng=np.random.default_rng(seed))
        reports[head] = count_costs(model, input_size, mode)
    return reports


def bench_table(reports, input_size):
    h, w = input_size
    lines = [f"# context-head comparison at {h}x{w} (identical concatenated multi-stage input)"]
    lines.append(f"{'head':<8}{'head params':>14}{'head flops':>16}{'total params':>14}{'total flops':>16}")
    for name, rep in reports.items():
        hp, hf = rep.subtotal("context_head")
        lines.append(f"{name:<8}{hp:>14}{hf:>16}{rep.total_params:>14}{rep.total_flops:>16}")
    return "\n".join(lines)
