"""Differentiable array operations with explicit vector-Jacobian products.

Every operation here is a pure function on float64 numpy arrays. Each one
has a companion ``*_vjp`` function that applies the exact transpose of the
forward Jacobian to an upstream gradient, so a network can be trained by
chaining these calls without any taped autograd machinery.

Layout conventions: batched images are ``(batch, channels, height, width)``,
dense activations are ``(batch, features)``, convolution weights are
``(out_channels, in_channels, kernel_h, kernel_w)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, InputError, ShapeError

__all__ = [
    "ConvSpec",
    "conv2d",
    "conv2d_vjp",
    "affine",
    "affine_vjp",
    "relu",
    "relu_vjp",
    "maxpool2d",
    "maxpool2d_vjp",
    "softmax_cross_entropy",
]


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-d convolution (cross-correlation) layer.

    ``padding`` is symmetric zero padding applied to both spatial axes.
    Output height is ``(H + 2*padding - kernel_h) // stride + 1`` and
    analogously for width; both must come out positive.
    """

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"ConvSpec.{name} must be a positive integer, got {v!r}")
        if not isinstance(self.padding, (int, np.integer)) or self.padding < 0:
            raise ConfigError(f"ConvSpec.padding must be a non-negative integer, got {self.padding!r}")

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        """Output spatial dims for an input of height h and width w."""
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"conv output spatial axes would be {oh}x{ow} for input {h}x{w} "
                f"with kernel {self.kernel_h}x{self.kernel_w}, stride {self.stride}, "
                f"padding {self.padding}"
            )
        return oh, ow


def _as_f64(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr


def _pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(x: np.ndarray, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    # One large strided slice per kernel position; the copies are contiguous
    # slabs, which is much cheaper than gathering per-window patches.
    b, c, _, _ = x.shape
    kh, kw, s = spec.kernel_h, spec.kernel_w, spec.stride
    xp = _pad2d(x, spec.padding)
    col = np.empty((b, oh, ow, c, kh, kw))
    for u in range(kh):
        for v in range(kw):
            col[:, :, :, :, u, v] = xp[:, :, u : u + oh * s : s, v : v + ow * s : s].transpose(0, 2, 3, 1)
    return col.reshape(b * oh * ow, c * kh * kw)


def _col2im(dcol: np.ndarray, x_shape: tuple, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    b, c, h, w = x_shape
    kh, kw, s, p = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    dxp = np.zeros((b, c, h + 2 * p, w + 2 * p))
    d6 = dcol.reshape(b, oh, ow, c, kh, kw)
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u : u + oh * s : s, v : v + ow * s : s] += d6[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    if p == 0:
        return dxp
    return dxp[:, :, p : p + h, p : p + w]


def _check_conv_args(x: np.ndarray, spec: ConvSpec, weight: np.ndarray, bias: np.ndarray | None):
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must have 4 axes (batch, channel, height, width), got {x.ndim}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv2d input channel axis has size {x.shape[1]}, spec expects {spec.in_channels}"
        )
    expect_w = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
    if weight.shape != expect_w:
        raise ShapeError(f"conv2d weight has shape {weight.shape}, spec expects {expect_w}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(
            f"conv2d bias axis has size {bias.shape}, spec expects ({spec.out_channels},)"
        )


def conv2d(x, spec: ConvSpec, weight, bias) -> np.ndarray:
    """Strided 2-d cross-correlation with per-channel bias.

    x: (b, in_channels, H, W); returns (b, out_channels, H', W') where the
    primed dims follow the floor formula in ConvSpec.out_hw.
    """
    x = _as_f64(x, "x")
    weight = _as_f64(weight, "weight")
    bias = _as_f64(bias, "bias")
    _check_conv_args(x, spec, weight, bias)
    b = x.shape[0]
    oh, ow = spec.out_hw(x.shape[2], x.shape[3])
    col = _im2col(x, spec, oh, ow)
    out = col @ weight.reshape(spec.out_channels, -1).T
    out += bias
    return out.reshape(b, oh, ow, spec.out_channels).transpose(0, 3, 1, 2)


def conv2d_vjp(x, spec: ConvSpec, weight, upstream, need_input_grad: bool = True):
    """Transpose-Jacobian application for conv2d.

    upstream: gradient w.r.t. the conv output, shape (b, out_channels, H', W').
    Returns (d_input, d_weight, d_bias); d_input is None when
    need_input_grad is False (useful at the first layer of a network).
    """
    x = _as_f64(x, "x")
    weight = _as_f64(weight, "weight")
    upstream = _as_f64(upstream, "upstream")
    _check_conv_args(x, spec, weight, None)
    b = x.shape[0]
    oh, ow = spec.out_hw(x.shape[2], x.shape[3])
    if upstream.shape != (b, spec.out_channels, oh, ow):
        raise ShapeError(
            f"conv2d upstream has shape {upstream.shape}, expected {(b, spec.out_channels, oh, ow)}"
        )
    col = _im2col(x, spec, oh, ow)
    up2 = upstream.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels)
    d_weight = (up2.T @ col).reshape(weight.shape)
    d_bias = up2.sum(axis=0)
    d_input = None
    if need_input_grad:
        dcol = up2 @ weight.reshape(spec.out_channels, -1)
        d_input = _col2im(dcol, x.shape, spec, oh, ow)
    return d_input, d_weight, d_bias


def affine(x, weight, bias) -> np.ndarray:
    """Dense layer: x @ weight + bias with x (b, d), weight (d, k), bias (k,)."""
    x = _as_f64(x, "x")
    weight = _as_f64(weight, "weight")
    bias = _as_f64(bias, "bias")
    if x.ndim != 2:
        raise ShapeError(f"affine input must have 2 axes (batch, features), got {x.ndim}")
    if weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"affine feature axis mismatch: input has {x.shape[1]}, weight expects "
            f"{weight.shape[0] if weight.ndim == 2 else weight.shape}"
        )
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine bias axis has size {bias.shape}, expected ({weight.shape[1]},)")
    return x @ weight + bias


def affine_vjp(x, weight, upstream):
    """Returns (d_input, d_weight, d_bias) for the affine forward."""
    x = _as_f64(x, "x")
    weight = _as_f64(weight, "weight")
    upstream = _as_f64(upstream, "upstream")
    if upstream.shape != (x.shape[0], weight.shape[1]):
        raise ShapeError(
            f"affine upstream has shape {upstream.shape}, expected {(x.shape[0], weight.shape[1])}"
        )
    return upstream @ weight.T, x.T @ upstream, upstream.sum(axis=0)


def relu(x) -> np.ndarray:
    """Elementwise max(x, 0)."""
    return np.maximum(_as_f64(x, "x"), 0.0)


def relu_vjp(x, upstream) -> np.ndarray:
    """Gradient of relu; the subgradient at exactly zero is taken as zero."""
    x = _as_f64(x, "x")
    upstream = _as_f64(upstream, "upstream")
    if upstream.shape != x.shape:
        raise ShapeError(f"relu upstream has shape {upstream.shape}, expected {x.shape}")
    return upstream * (x > 0.0)


def _pool_out_hw(h: int, w: int, window: int, stride: int) -> tuple[int, int]:
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"maxpool output spatial axes would be {oh}x{ow} for input {h}x{w} "
            f"with window {window}, stride {stride}"
        )
    return oh, ow


def _check_pool_args(x: np.ndarray, window: int, stride: int):
    if x.ndim != 4:
        raise ShapeError(f"maxpool input must have 4 axes, got {x.ndim}")
    if window < 1 or stride < 1:
        raise ConfigError(f"maxpool window and stride must be positive, got {window}, {stride}")


def _pool_tiles(x: np.ndarray, window: int, oh: int, ow: int) -> np.ndarray:
    # Non-overlapping fast path: crop the divisible region and expose each
    # window as a trailing axis in row-major (row, col) order.
    b, c = x.shape[:2]
    w = window
    tiles = x[:, :, : oh * w, : ow * w].reshape(b, c, oh, w, ow, w)
    return tiles.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, w * w)


def maxpool2d(x, window: int, stride: int) -> np.ndarray:
    """Max over square windows; trailing rows/cols that do not fill a window are dropped."""
    x = _as_f64(x, "x")
    _check_pool_args(x, window, stride)
    oh, ow = _pool_out_hw(x.shape[2], x.shape[3], window, stride)
    if stride == window:
        return _pool_tiles(x, window, oh, ow).max(axis=-1)
    out = np.full((x.shape[0], x.shape[1], oh, ow), -np.inf)
    for u in range(window):
        for v in range(window):
            np.maximum(out, x[:, :, u : u + oh * stride : stride, v : v + ow * stride : stride], out=out)
    return out


def maxpool2d_vjp(x, window: int, stride: int, upstream) -> np.ndarray:
    """Routes each upstream element to the first maximizer (row-major) of its window."""
    x = _as_f64(x, "x")
    upstream = _as_f64(upstream, "upstream")
    _check_pool_args(x, window, stride)
    b, c, h, w = x.shape
    oh, ow = _pool_out_hw(h, w, window, stride)
    if upstream.shape != (b, c, oh, ow):
        raise ShapeError(f"maxpool upstream has shape {upstream.shape}, expected {(b, c, oh, ow)}")
    if stride == window:
        tiles = _pool_tiles(x, window, oh, ow)
        idx = tiles.argmax(axis=-1)
        dtiles = np.zeros_like(tiles)
        np.put_along_axis(dtiles, idx[..., None], upstream[..., None], axis=-1)
        dx = np.zeros_like(x)
        region = dtiles.reshape(b, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5)
        dx[:, :, : oh * window, : ow * window] = region.reshape(b, c, oh * window, ow * window)
        return dx
    # Overlapping windows: find the row-major argmax per window, then
    # scatter-add because a cell can win in several windows.
    dx = np.zeros_like(x)
    kidx = np.zeros((b, c, oh, ow), dtype=np.int64)
    best = np.full((b, c, oh, ow), -np.inf)
    for u in range(window):
        for v in range(window):
            cand = x[:, :, u : u + oh * stride : stride, v : v + ow * stride : stride]
            better = cand > best
            np.copyto(best, cand, where=better)
            kidx[better] = u * window + v
    rows = kidx // window + np.arange(oh)[None, None, :, None] * stride
    cols = kidx % window + np.arange(ow)[None, None, None, :] * stride
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(dx, (np.broadcast_to(bi, kidx.shape), np.broadcast_to(ci, kidx.shape), rows, cols), upstream)
    return dx


def softmax_cross_entropy(logits, labels):
    """Mean cross entropy of softmax(logits) against integer labels.

    logits: (b, k) float, labels: (b,) integers in [0, k). Returns
    (loss, d_logits) where d_logits is the gradient of the mean loss,
    (softmax - onehot) / b. The log-sum-exp is max-shifted so large
    logits cannot overflow.
    """
    logits = _as_f64(logits, "logits")
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy logits must have 2 axes, got {logits.ndim}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy labels axis has size {labels.shape}, expected ({logits.shape[0]},)"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError(f"labels must be integers, got dtype {labels.dtype}")
    b, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float((lse - z[np.arange(b), labels]).mean())
    p = np.exp(z - lse[:, None])
    p[np.arange(b), labels] -= 1.0
    return loss, p / b
