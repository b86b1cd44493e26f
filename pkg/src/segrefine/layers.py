"""Neural building blocks: convolutions, batch norm, pooling, upsampling.

Convolutions run as im2col + matmul; the small pooling/upsampling kernels
use index arithmetic. Every layer registers its parameters on a light
Module tree so checkpoints and the cost profiler can walk named tensors.
"""

from __future__ import annotations

import numpy as np

from .tensor import ContractError, ShapeError, Tensor, _make


class Parameter(Tensor):
    """Trainable tensor; `decay` marks it for weight decay (conv weights only)."""

    __slots__ = ("decay",)

    def __init__(self, data, decay=False):
        super().__init__(data, requires_grad=True)
        self.decay = decay


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name if prefix else name), p
        for name, child in self._children.items():
            sub = prefix + name + "." if prefix else name + "."
            yield from child.named_parameters(sub)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_children(self, prefix=""):
        for name, child in self._children.items():
            path = prefix + name if prefix else name
            yield path, child
            yield from child.named_children(path + ".")

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def cast(self, dtype):
        """Cast all parameters (and batch-norm buffers) in place; gradcheck uses float64."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for _, child in self.named_children():
            if isinstance(child, BatchNorm2d):
                child.running_mean = child.running_mean.astype(dtype)
                child.running_var = child.running_var.astype(dtype)
        if isinstance(self, BatchNorm2d):
            self.running_mean = self.running_mean.astype(dtype)
            self.running_var = self.running_var.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def init_kaiming(rng, out_c, in_c, kh, kw):
    """Fan-in normal initialization for conv weights."""
    fan_in = in_c * kh * kw
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal((out_c, in_c, kh, kw)) * std).astype(np.float32)


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # n,c,oh,ow,kh,kw
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols_grad, x_shape, kh, kw, stride, pad, oh, ow):
    n, c, h, w = x_shape
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols_grad.dtype)
    cg = cols_grad.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cg[:, :, i, j]
    if pad:
        gx = gx[:, :, pad : pad + h, pad : pad + w]
    return gx


class Conv2d(Module):
    def __init__(self, in_c, out_c, kernel, stride=1, pad=0, groups=1, bias=True, rng=None):
        super().__init__()
        if in_c % groups or out_c % groups:
            raise ContractError(f"groups={groups} must divide in_c={in_c} and out_c={out_c}")
        self.in_c, self.out_c = in_c, out_c
        self.kernel, self.stride, self.pad, self.groups = kernel, stride, pad, groups
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(
            init_kaiming(rng, out_c, in_c // groups, kernel, kernel), decay=True
        )
        self.bias = Parameter(np.zeros(out_c, dtype=np.float32)) if bias else None
        self.last_out_shape = None

    def forward(self, x):
        if x.shape[1] != self.in_c:
            raise ShapeError(f"conv expects {self.in_c} channels, got {x.shape[1]}")
        w, b = self.weight, self.bias
        n = x.shape[0]
        k, s, p, g = self.kernel, self.stride, self.pad, self.groups
        cols, oh, ow = _im2col(x.data, k, k, s, p)
        kg = (self.in_c // g) * k * k
        cols_g = cols.reshape(n, g, kg, oh * ow)
        w_mat = w.data.reshape(g, self.out_c // g, kg)
        out = np.matmul(w_mat[None], cols_g).reshape(n, self.out_c, oh, ow)
        if b is not None:
            out = out + b.data[None, :, None, None]
        self.last_out_shape = out.shape
        x_shape = x.data.shape

        def backward(grad):
            gmat = grad.reshape(n, g, self.out_c // g, oh * ow)
            if w.requires_grad:
                gw = np.matmul(gmat, cols_g.transpose(0, 1, 3, 2)).sum(axis=0)
                w._accumulate(gw.reshape(w.shape))
            if b is not None and b.requires_grad:
                b._accumulate(grad.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gcols = np.matmul(w_mat.transpose(0, 2, 1)[None], gmat)
                gx = _col2im(gcols.reshape(n, self.in_c * k * k, oh * ow), x_shape, k, k, s, p, oh, ow)
                x._accumulate(gx)

        parents = (x, w) if b is None else (x, w, b)
        return _make(out, parents, backward)

    def param_count(self):
        return self.weight.size + (self.bias.size if self.bias is not None else 0)

    def flops(self):
        if self.last_out_shape is None:
            return 0
        n, oc, oh, ow = self.last_out_shape
        f = 2 * n * oh * ow * oc * (self.in_c // self.groups) * self.kernel * self.kernel
        if self.bias is not None:
            f += n * oh * ow * oc
        return f


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels = channels
        self.eps, self.momentum = eps, momentum
        self.scale = Parameter(np.ones(channels, dtype=np.float32))
        self.shift = Parameter(np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.last_out_shape = None

    def forward(self, x):
        gamma, beta = self.scale, self.shift
        self.last_out_shape = x.shape
        if self.training:
            axes = (0, 2, 3)
            mean = x.data.mean(axis=axes)
            var = x.data.var(axis=axes)
            invstd = 1.0 / np.sqrt(var + self.eps)
            xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean.astype(self.running_mean.dtype)
            self.running_var = (1 - m) * self.running_var + m * var.astype(self.running_var.dtype)
            out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
            count = x.data.size // self.channels

            def backward(g):
                gsum = g.sum(axis=axes)
                gxhat_sum = (g * xhat).sum(axis=axes)
                if gamma.requires_grad:
                    gamma._accumulate(gxhat_sum)
                if beta.requires_grad:
                    beta._accumulate(gsum)
                if x.requires_grad:
                    coef = (gamma.data * invstd / count)[None, :, None, None]
                    gx = coef * (
                        count * g
                        - gsum[None, :, None, None]
                        - xhat * gxhat_sum[None, :, None, None]
                    )
                    x._accumulate(gx)

            return _make(out, (x, gamma, beta), backward)

        invstd = 1.0 / np.sqrt(self.running_var + self.eps)
        scale = gamma.data * invstd
        out = scale[None, :, None, None] * (x.data - self.running_mean[None, :, None, None])
        out = out + beta.data[None, :, None, None]

        def backward(g):
            if gamma.requires_grad:
                xhat = (x.data - self.running_mean[None, :, None, None]) * invstd[None, :, None, None]
                gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                x._accumulate(g * scale[None, :, None, None])

        return _make(out, (x, gamma, beta), backward)

    def param_count(self):
        return 2 * self.channels

    def flops(self):
        if self.last_out_shape is None:
            return 0
        return int(np.prod(self.last_out_shape))


def _pool_bounds(in_size, out_size):
    starts = (np.arange(out_size) * in_size) // out_size
    ends = -((-(np.arange(out_size) + 1) * in_size) // out_size)  # ceil division
    return starts, ends


def adaptive_avg_pool(x, out_h, out_w):
    """Mean over floor/ceil-partitioned windows that tile the input exactly."""
    if out_h < 1 or out_w < 1:
        raise ContractError(f"output extents must be positive, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if out_h > h or out_w > w:
        raise ContractError(f"pool output {out_h}x{out_w} exceeds input {h}x{w}")
    hs, he = _pool_bounds(h, out_h)
    ws, we = _pool_bounds(w, out_w)
    out = np.empty((n, c, out_h, out_w), dtype=x.data.dtype)
    for i in range(out_h):
        for j in range(out_w):
            out[:, :, i, j] = x.data[:, :, hs[i] : he[i], ws[j] : we[j]].mean(axis=(2, 3))

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i in range(out_h):
                for j in range(out_w):
                    area = (he[i] - hs[i]) * (we[j] - ws[j])
                    gx[:, :, hs[i] : he[i], ws[j] : we[j]] += g[:, :, i, j, None, None] / area
            x._accumulate(gx)

    return _make(out, (x,), backward)


def _bilinear_weights(in_size, out_size, dtype):
    # align_corners = False
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0, in_size - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = (src - i0).astype(dtype)
    return i0, i1, frac


def bilinear_upsample(x, out_h, out_w):
    if out_h < 1 or out_w < 1:
        raise ContractError("output extents must be positive")
    n, c, h, w = x.shape
    dt = x.data.dtype
    y0, y1, fy = _bilinear_weights(h, out_h, dt)
    x0, x1, fx = _bilinear_weights(w, out_w, dt)
    fy_col = fy[:, None]
    fx_row = fx[None, :]
    d = x.data
    top = d[:, :, y0][:, :, :, x0] * (1 - fx_row) + d[:, :, y0][:, :, :, x1] * fx_row
    bot = d[:, :, y1][:, :, :, x0] * (1 - fx_row) + d[:, :, y1][:, :, :, x1] * fx_row
    out = top * (1 - fy_col) + bot * fy_col

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            wts = [
                (y0, x0, (1 - fy_col) * (1 - fx_row)),
                (y0, x1, (1 - fy_col) * fx_row),
                (y1, x0, fy_col * (1 - fx_row)),
                (y1, x1, fy_col * fx_row),
            ]
            for yi, xi, wgt in wts:
                contrib = g * wgt
                yy = np.repeat(yi, out_w)
                xx = np.tile(xi, out_h)
                np.add.at(
                    gx.transpose(2, 3, 0, 1),
                    (yy, xx),
                    contrib.transpose(2, 3, 0, 1).reshape(out_h * out_w, n, c),
                )
            x._accumulate(gx)

    return _make(out, (x,), backward)


class ReLU(Module):
    def __init__(self):
        super().__init__()
        self.last_out_shape = None

    def forward(self, x):
        self.last_out_shape = x.shape
        from .tensor import relu

        return relu(x)

    def param_count(self):
        return 0

    def flops(self):
        return int(np.prod(self.last_out_shape)) if self.last_out_shape else 0


class ConvBnRelu(Module):
    """conv3x3/1x1 + batch norm + ReLU, the backbone's stage block."""

    def __init__(self, in_c, out_c, kernel=3, stride=1, rng=None):
        super().__init__()
        self.conv = Conv2d(in_c, out_c, kernel, stride=stride, pad=kernel // 2, bias=False, rng=rng)
        self.bn = BatchNorm2d(out_c)
        self.act = ReLU()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))
