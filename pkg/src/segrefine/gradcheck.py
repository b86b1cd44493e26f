"""Central finite-difference verification of every backward rule.

Checks rebuild each component in float64 (single-precision finite
differences are too noisy) and compare analytic gradients element by
element. Relative error uses max(|analytic|, |numeric|, 1e-2) as the
denominator so near-zero gradients are judged on an absolute scale.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import LossConfig, ModelConfig
from .layers import BatchNorm2d, Conv2d, adaptive_avg_pool, bilinear_upsample
from .losses import cross_entropy, hybrid_loss
from .model import SegModel
from .refine import DisentangledAttention, FeatureRefineHead, FeaturePyramid
from .tensor import Tensor

TOLERANCE = 1e-5


def finite_difference(f, tensors, step=1e-4, max_elements=None, rng=None, grad_scale=1.0):
    """Worst relative error of analytic vs central-difference gradients.

    f is a deterministic closure returning a scalar Tensor built from
    `tensors` (float64). `max_elements` subsamples large tensors (seeded);
    `grad_scale` is a fault-injection hook used by tests and the CLI.
    """
    for t in tensors:
        t.zero_grad()
    f().backward()
    analytic = [np.array(t.grad if t.grad is not None else np.zeros_like(t.data)) for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n_el = flat.size
        idx = np.arange(n_el)
        if max_elements is not None and n_el > max_elements:
            r = rng if rng is not None else np.random.default_rng(0)
            idx = r.choice(n_el, max_elements, replace=False)
        aflat = a.reshape(-1) * grad_scale
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            hi = f().item()
            flat[i] = orig - step
            lo = f().item()
            flat[i] = orig
            numeric = (hi - lo) / (2 * step)
            err = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-2)
            worst = max(worst, err)
    return worst


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _module_check(module, make_input, loss_of, step=1e-4, max_elements=None, rng=None, grad_scale=1.0):
    module.cast(np.float64)
    x = make_input()
    tensors = [x] + module.parameters()

    def f():
        return loss_of(module, x)

    return finite_difference(f, tensors, step=step, max_elements=max_elements, rng=rng, grad_scale=grad_scale)


def _weighted_sum(out, rng):
    # fixed random weights make the scalar sensitive to every output element
    w = Tensor(rng.standard_normal(out.shape))
    return T.tsum(out * w)


def component_checks(seed=0, fault=None):
    """Run the finite-difference suite; yields (component, worst error).

    `fault` names a component whose analytic gradient is deliberately
    scaled, to prove the checker catches broken backward rules.
    """
    results = []

    def run(name, fn):
        rng = np.random.default_rng(seed + len(results))
        scale = 1.01 if fault == name else 1.0
        results.append((name, fn(rng, scale)))

    def simple(build):
        def fn(rng, scale):
            tensors, f = build(rng)
            return finite_difference(f, tensors, grad_scale=scale)

        return fn

    run("matmul", simple(lambda rng: (
        [a := _rand(rng, 5, 7), b := _rand(rng, 7, 3)],
        lambda: _weighted_sum(T.matmul(a, b), np.random.default_rng(1)),
    )))
    run("softmax", simple(lambda rng: (
        [x := _rand(rng, 3, 9)],
        lambda: _weighted_sum(T.softmax(x, axis=1), np.random.default_rng(2)),
    )))
    run("elementwise", simple(lambda rng: (
        [a := _rand(rng, 2, 3, 4, 4), b := _rand(rng, 2, 3, 4, 4)],
        lambda: T.tsum(a * b + T.exp(T.mul(a, 0.3)) - T.powi(b * b + 1.0, 0.5)),
    )))
    run("reductions", simple(lambda rng: (
        [x := _rand(rng, 2, 5, 3, 3)],
        lambda: T.tsum(
            T.tmean(x, axis=(2, 3)) * Tensor(np.random.default_rng(3).standard_normal((2, 5)))
        ) + T.tmean(x) * T.tsum(x),
    )))
    run("concat_reshape", simple(lambda rng: (
        [a := _rand(rng, 1, 2, 3, 3), b := _rand(rng, 1, 4, 3, 3)],
        lambda: _weighted_sum(
            T.concat([a, b], axis=1).reshape(1, 6, 9).transpose(0, 2, 1),
            np.random.default_rng(4),
        ),
    )))

    def conv_check(rng, scale, **kwargs):
        conv = Conv2d(rng=rng, **kwargs)
        return _module_check(
            conv,
            lambda: _rand(rng, 2, kwargs["in_c"], 6, 6),
            lambda m, x: _weighted_sum(m(x), np.random.default_rng(5)),
            grad_scale=scale,
        )

    run("conv1x1", lambda rng, s: conv_check(rng, s, in_c=3, out_c=5, kernel=1))
    run("conv3x3", lambda rng, s: conv_check(rng, s, in_c=3, out_c=4, kernel=3, stride=2, pad=1))
    run("depthwise", lambda rng, s: conv_check(rng, s, in_c=4, out_c=4, kernel=3, pad=1, groups=4))

    def bn_check(rng, scale):
        bn = BatchNorm2d(4)
        return _module_check(
            bn,
            lambda: _rand(rng, 3, 4, 5, 5),
            lambda m, x: _weighted_sum(m(x), np.random.default_rng(6)),
            grad_scale=scale,
        )

    run("batchnorm", bn_check)
    run("adaptive_pool", simple(lambda rng: (
        [x := _rand(rng, 1, 3, 7, 7)],
        lambda: _weighted_sum(adaptive_avg_pool(x, 3, 3), np.random.default_rng(7)),
    )))
    run("bilinear_upsample", simple(lambda rng: (
        [x := _rand(rng, 1, 2, 3, 3)],
        lambda: _weighted_sum(bilinear_upsample(x, 7, 5), np.random.default_rng(8)),
    )))
    run("relu", simple(lambda rng: (
        # keep inputs away from the kink so central differences are valid
        [x := Tensor(rng.standard_normal((2, 3, 4, 4)) + 0.5 * np.sign(rng.standard_normal((2, 3, 4, 4))), requires_grad=True)],
        lambda: _weighted_sum(T.relu(x), np.random.default_rng(9)),
    )))

    def attention_check(rng, scale):
        block = DisentangledAttention(8, rng=rng)
        return _module_check(
            block,
            lambda: _rand(rng, 1, 8, 3, 3),
            lambda m, x: _weighted_sum(m(x), np.random.default_rng(10)),
            grad_scale=scale,
        )

    run("attention", attention_check)

    def refine_check(rng, scale):
        head = FeatureRefineHead((2, 2, 2, 2), 4, ffn_expansion=2, rng=rng)
        head.cast(np.float64)
        pyr = FeaturePyramid(
            _rand(rng, 1, 2, 8, 8), _rand(rng, 1, 2, 4, 4),
            _rand(rng, 1, 2, 2, 2), _rand(rng, 1, 2, 1, 1),
        )
        tensors = pyr.stages() + head.parameters()
        return finite_difference(
            lambda: _weighted_sum(head(pyr), np.random.default_rng(11)),
            tensors, grad_scale=scale,
        )

    run("refine_head", refine_check)

    def ce_check(rng, scale):
        logits = _rand(rng, 1, 4, 3, 3)
        labels = rng.integers(0, 4, size=(1, 3, 3))
        labels[0, 0, 0] = 255
        return finite_difference(
            lambda: cross_entropy(logits, labels, 255)[0], [logits], grad_scale=scale
        )

    run("cross_entropy", ce_check)

    def hybrid_check(rng, scale):
        logits = _rand(rng, 1, 3, 8, 8)
        emb = _rand(rng, 1, 4, 4, 4)
        labels = rng.integers(0, 3, size=(1, 8, 8))
        cfg = LossConfig(lam=1.0, tau=0.5)

        def f():
            return hybrid_loss(logits, emb, labels, cfg, np.random.default_rng(12))[0]

        return finite_difference(f, [logits, emb], grad_scale=scale)

    run("hybrid_loss", hybrid_check)

    def model_check(rng, scale):
        cfg = ModelConfig(channels=(4, 4, 4, 4), decoder_channels=8, num_classes=3,
                          ffn_expansion=2, embed_dim=4)
        model = SegModel(cfg, rng=rng).cast(np.float64)
        model.train()
        # 64x64 keeps the last stage at 2x2: with a 1x1 stage, batch norm
        # collapses to its zero shift, parking the ReLU exactly on its kink
        image = _rand(rng, 1, 3, 64, 64)
        labels = rng.integers(0, 3, size=(1, 64, 64))
        loss_cfg = LossConfig(lam=1.0, tau=0.5)

        def f():
            out = model(image, train_mode=True)
            return hybrid_loss(out["logits"], out["embeddings"], labels, loss_cfg,
                               np.random.default_rng(13))[0]

        # smaller step: embedding L2-normalization has high curvature when a
        # sampled embedding's norm is small; 1e-4 is not in its linear regime
        return finite_difference(
            f, [image] + model.parameters(), step=1e-6,
            max_elements=6, rng=np.random.default_rng(14), grad_scale=scale,
        )

    run("full_model", model_check)
    return results


def run_suite(seed=0, fault=None, log=print):
    """Print one line per component; returns True iff all pass TOLERANCE."""
    results = component_checks(seed=seed, fault=fault)
    ok = True
    for name, err in results:
        status = "ok" if err < TOLERANCE else "FAIL"
        log(f"{name:<20} worst rel err {err:.3e}  {status}")
        if err >= TOLERANCE:
            ok = False
    worst_name, worst_err = max(results, key=lambda kv: kv[1])
    log(f"worst component: {worst_name} ({worst_err:.3e})")
    return ok
