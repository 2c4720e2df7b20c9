"""Layer primitives: convolution, linear, batch-norm, (masked) ReLU, pooling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor


class ConfigError(ValueError):
    """Raised for an unsupported configuration value (e.g. unknown width tag)."""


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, Hp-kh+1, Wp-kw+1, kh, kw) view, strided down to the output grid
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """Cross-correlation of an N×Cin×H×W batch with a Cout×Cin×kh×kw kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels but weight expects {wcin}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} / padding={padding}")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} does not fit a {h}x{w} input with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if weight.requires_grad:
            weight._accumulate((gm.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gm.sum(axis=0))
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, ho, wo, cin, kh, kw)
            # col2im accumulated channels-last, transposed once at the end
            gxp = np.zeros((n, xp.shape[2], xp.shape[3], cin), dtype=xp.dtype)
            hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + hs:stride, j:j + ws:stride, :] += gcols[:, :, :, :, i, j]
            gxp = gxp[:, padding:padding + h, padding:padding + w, :]
            x._accumulate(gxp.transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T (+ bias)`` for an N×F input and O×F weight."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"linear expects rank-2 input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input has {x.shape[1]} features but weight expects {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, back)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.data.dtype.type(0))

    def back(g):
        x._accumulate(np.where(pos, g, 0))

    return Tensor.from_op(out, (x,), back)


def masked_relu(x: Tensor, mask: np.ndarray) -> Tensor:
    """ReLU where ``mask`` is 1, identity where it is 0; mask broadcasts over the batch."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[1:]:
        raise ValueError(f"masked_relu: mask shape {mask.shape} != activation shape {x.shape[1:]}")
    # gate is True where the gradient passes through unchanged
    gate = ~mask | (x.data > 0)
    out = np.where(gate, x.data, x.data.dtype.type(0))

    def back(g):
        x._accumulate(np.where(gate, g, 0))

    return Tensor.from_op(out, (x,), back)


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    n, c, h, w = x.shape
    ho, wo = _out_size(h, kernel, stride, 0), _out_size(w, kernel, stride, 0)
    if ho < 1 or wo < 1:
        raise ValueError(f"avg_pool2d: kernel {kernel} larger than {h}x{w}")
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = win.mean(axis=(4, 5)).astype(x.dtype, copy=False)
    inv = x.data.dtype.type(1.0 / (kernel * kernel))

    def back(g):
        gx = np.zeros_like(x.data)
        gs = g * inv
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i:i + (ho - 1) * stride + 1:stride, j:j + (wo - 1) * stride + 1:stride] += gs
        x._accumulate(gx)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), back)


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    n, c, h, w = x.shape
    ho, wo = _out_size(h, kernel, stride, 0), _out_size(w, kernel, stride, 0)
    if ho < 1 or wo < 1:
        raise ValueError(f"max_pool2d: kernel {kernel} larger than {h}x{w}")
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros_like(x.data)
        di, dj = np.divmod(arg, kernel)
        rows = np.arange(ho)[:, None] * stride + di
        cols = np.arange(wo)[None, :] * stride + dj
        nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        np.add.at(gx, (nn_[:, :, None, None], cc[:, :, None, None], rows, cols), g)
        x._accumulate(gx)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), back)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.1,
              eps: float = 1e-5, update_stats: bool = True) -> Tensor:
    """Per-channel normalization over the batch (and spatial) axes.

    Works on N×C×H×W and N×F inputs.  The channel count may be a prefix of the
    stored statistics; running buffers are updated in place on the prefix.
    """
    c = x.shape[1]
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    bshape = (1, c, 1, 1) if x.ndim == 4 else (1, c)
    if gamma.shape[0] < c:
        raise ValueError(f"batchnorm: {c} channels exceed stored {gamma.shape[0]}")
    g = gamma.data[:c].reshape(bshape)
    dt = x.data.dtype.type
    if training:
        mean = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mean
        var = (xc * xc).mean(axis=axes, keepdims=True)
        if update_stats:
            m = x.data.size // c
            unbiased = var.reshape(c) * (m / max(m - 1, 1))
            running_mean[:c] = (1 - momentum) * running_mean[:c] + momentum * mean.reshape(c)
            running_var[:c] = (1 - momentum) * running_var[:c] + momentum * unbiased
    else:
        mean = running_mean[:c].reshape(bshape).astype(x.dtype)
        var = running_var[:c].reshape(bshape).astype(x.dtype)
        xc = x.data - mean
    inv = (1.0 / np.sqrt(var + dt(eps))).astype(x.dtype)
    xhat = xc * inv
    out = xhat * g + beta.data[:c].reshape(bshape)

    def back(gout):
        if gamma.requires_grad:
            gg = np.zeros_like(gamma.data)
            gg[:c] = (gout * xhat).sum(axis=axes)
            gamma._accumulate(gg)
        if beta.requires_grad:
            gb = np.zeros_like(beta.data)
            gb[:c] = gout.sum(axis=axes)
            beta._accumulate(gb)
        if x.requires_grad:
            gxhat = gout * g
            if training:
                gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                            - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
            else:
                gx = gxhat * inv
            x._accumulate(gx)

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), back)


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray


def _tag_key(tag: float) -> float:
    return round(float(tag), 9)


@dataclass
class MultiBatchNorm:
    """Batch-norm with a separate parameter/statistics set per width tag."""

    channels: int
    tags: tuple[float, ...]
    momentum: float = 0.1
    eps: float = 1e-5
    dtype: type = np.float32
    states: dict[float, BatchNormState] = field(default_factory=dict)

    def __post_init__(self):
        if not self.states:
            for t in self.tags:
                self.states[_tag_key(t)] = BatchNormState(
                    gamma=Tensor(np.ones(self.channels, self.dtype), requires_grad=True),
                    beta=Tensor(np.zeros(self.channels, self.dtype), requires_grad=True),
                    running_mean=np.zeros(self.channels, self.dtype),
                    running_var=np.ones(self.channels, self.dtype),
                )

    def state(self, tag: float) -> BatchNormState:
        try:
            return self.states[_tag_key(tag)]
        except KeyError:
            raise ConfigError(f"rate not supported: width tag {tag} not in {list(self.tags)}") from None

    def __call__(self, x: Tensor, tag: float, training: bool, update_stats: bool = True) -> Tensor:
        st = self.state(tag)
        if x.shape[1] > self.channels:
            raise ValueError(f"batchnorm: {x.shape[1]} channels exceed stored {self.channels}")
        return batchnorm(x, st.gamma, st.beta, st.running_mean, st.running_var, training,
                         self.momentum, self.eps, update_stats)
