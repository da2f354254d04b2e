"""Dense tensor primitives with explicit backward passes.

Tensors are plain :class:`numpy.ndarray` objects in NCHW layout. Every
forward function is pure; whatever the backward needs (inputs, argmax
switches) is returned or passed explicitly by the caller.

ReLU backward is parameterized by :class:`BackwardRule` so the same
machinery produces ordinary gradients, deconvnet signals and guided
back-propagation signals.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
CHECK_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when tensor extents are inconsistent with an operation."""


class BackwardRule(str, enum.Enum):
    BACKPROP = "backprop"
    DECONVNET = "deconvnet"
    GUIDED = "guided"


class LayerKind(str, enum.Enum):
    CONV2D = "conv2d"
    RELU = "relu"
    MAXPOOL2D = "maxpool2d"
    UPSAMPLE2D = "upsample2d"
    AFFINE = "affine"
    GLOBAL_AVG_POOL = "gap"
    SIGMOID = "sigmoid"


@dataclass(frozen=True)
class LayerSpec:
    """Layer kind plus hyperparameters; enough to infer output shapes."""

    kind: LayerKind
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    factor: int = 2

    def output_shape(self, shape: Sequence[int]) -> tuple[int, ...]:
        shape = tuple(int(s) for s in shape)
        if self.kind is LayerKind.CONV2D:
            n, c, h, w = _expect_rank(shape, 4, "conv2d")
            if c != self.in_channels:
                raise ShapeError(f"conv2d expects {self.in_channels} input channels, got {c}")
            return (n, self.out_channels, conv_out_size(h, self.kernel, self.stride, self.padding),
                    conv_out_size(w, self.kernel, self.stride, self.padding))
        if self.kind in (LayerKind.RELU, LayerKind.SIGMOID):
            return shape
        if self.kind is LayerKind.MAXPOOL2D:
            n, c, h, w = _expect_rank(shape, 4, "maxpool2d")
            _check_divisible(h, w, self.factor)
            return (n, c, h // self.factor, w // self.factor)
        if self.kind is LayerKind.UPSAMPLE2D:
            n, c, h, w = _expect_rank(shape, 4, "upsample2d")
            return (n, c, h * self.factor, w * self.factor)
        if self.kind is LayerKind.AFFINE:
            n, f = _expect_rank(shape, 2, "affine")
            if f != self.in_channels:
                raise ShapeError(f"affine expects {self.in_channels} features, got {f}")
            return (n, self.out_channels)
        if self.kind is LayerKind.GLOBAL_AVG_POOL:
            n, c, _, _ = _expect_rank(shape, 4, "gap")
            return (n, c)
        raise ShapeError(f"unknown layer kind {self.kind!r}")

    def param_count(self) -> int:
        if self.kind is LayerKind.CONV2D:
            return self.out_channels * (self.in_channels * self.kernel * self.kernel + 1)
        if self.kind is LayerKind.AFFINE:
            return self.out_channels * (self.in_channels + 1)
        return 0


def _expect_rank(shape, rank, what):
    if len(shape) != rank:
        raise ShapeError(f"{what} expects a rank-{rank} tensor, got shape {tuple(shape)}")
    return shape


def _check_divisible(h, w, factor):
    if h % factor or w % factor:
        raise ShapeError(f"spatial extent {h}x{w} is not divisible by {factor}")


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# ---------------------------------------------------------------------------
# convolution


def _check_conv(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs NCHW input and OIKK weight, got {x.shape} and {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d kernel must be square, got {w.shape[2]}x{w.shape[3]}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input channels {x.shape[1]} != weight input channels {w.shape[1]}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    k = w.shape[2]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeError(f"kernel {k} larger than padded input {x.shape[2:]}")


def _padded_cnhw(x, padding):
    n, c, h, w = x.shape
    xp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x.transpose(1, 0, 2, 3)
    return xp


def _im2col(x, k, stride, padding):
    """Return the (C*K*K, N*Ho*Wo) patch matrix and the output extent.

    Rows are ordered (c, i, j) to match ``weight.reshape(O, -1)``; columns
    are ordered (n, y, x). Built from K*K strided slice copies.
    """
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, k, stride, padding), conv_out_size(w, k, stride, padding)
    xp = _padded_cnhw(x, padding)
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, n * ho * wo), ho, wo


def _col2im(dcols, x_shape, k, stride, padding, ho, wo):
    n, c, h, w = x_shape
    d = dcols.reshape(c, k, k, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, i, j]
    return np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3))


def _out_cols(grad_out):
    """(N, O, Ho, Wo) -> (O, N*Ho*Wo)."""
    return np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(grad_out.shape[1], -1)


def conv2d_forward_cols(x, weight, bias=None, stride=1, padding=0):
    """Forward pass that also returns the patch matrix for reuse in backward."""
    _check_conv(x, weight, stride, padding)
    o, _, k, _ = weight.shape
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} does not match {o} output channels")
    cols, ho, wo = _im2col(x, k, stride, padding)
    out = (weight.reshape(o, -1) @ cols).reshape(o, x.shape[0], ho, wo)
    if bias is not None:
        out += bias[:, None, None, None]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3)), cols


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                   stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of an NCHW batch with an OIKK kernel."""
    return conv2d_forward_cols(x, weight, bias, stride, padding)[0]


def _check_grad_out(grad_out, x_shape, weight, stride, padding):
    n, _, h, w = x_shape
    o, _, k, _ = weight.shape
    expected = (n, o, conv_out_size(h, k, stride, padding), conv_out_size(w, k, stride, padding))
    if tuple(grad_out.shape) != expected:
        raise ShapeError(f"grad_out shape {tuple(grad_out.shape)} != forward output shape {expected}")


def conv2d_backward_input(grad_out: np.ndarray, weight: np.ndarray, x_shape: Sequence[int],
                          stride: int = 1, padding: int = 0) -> np.ndarray:
    """Transposed convolution: the input-gradient of conv2d."""
    x_shape = tuple(x_shape)
    _check_grad_out(grad_out, x_shape, weight, stride, padding)
    o, _, k, _ = weight.shape
    ho, wo = grad_out.shape[2:]
    dcols = weight.reshape(o, -1).T @ _out_cols(grad_out)
    return _col2im(dcols, x_shape, k, stride, padding, ho, wo)


def conv2d_backward_weight(grad_out: np.ndarray, x: np.ndarray, weight_shape: Sequence[int],
                           stride: int = 1, padding: int = 0,
                           cols: np.ndarray | None = None) -> np.ndarray:
    o, c, k, _ = weight_shape
    if cols is None:
        cols = _im2col(x, k, stride, padding)[0]
    return (_out_cols(grad_out) @ cols.T).reshape(o, c, k, k)


def conv2d_backward(grad_out: np.ndarray, cached_input: np.ndarray, weight: np.ndarray,
                    stride: int = 1, padding: int = 0):
    """Return ``(grad_input, grad_weight, grad_bias)``."""
    _check_conv(cached_input, weight, stride, padding)
    _check_grad_out(grad_out, cached_input.shape, weight, stride, padding)
    gx = conv2d_backward_input(grad_out, weight, cached_input.shape, stride, padding)
    gw = conv2d_backward_weight(grad_out, cached_input, weight.shape, stride, padding)
    gb = grad_out.sum(axis=(0, 2, 3))
    return gx, gw, gb


# ---------------------------------------------------------------------------
# ReLU


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_mask(signal: np.ndarray, cached_forward_input: np.ndarray,
              rule: BackwardRule) -> np.ndarray:
    """Boolean pass-mask applied to ``signal`` at a ReLU under ``rule``."""
    if signal.shape != cached_forward_input.shape:
        raise ShapeError(f"signal shape {signal.shape} != cached input shape {cached_forward_input.shape}")
    rule = BackwardRule(rule)
    if rule is BackwardRule.BACKPROP:
        return cached_forward_input > 0
    if rule is BackwardRule.DECONVNET:
        return signal > 0
    return (cached_forward_input > 0) & (signal > 0)


def relu_backward(signal: np.ndarray, cached_forward_input: np.ndarray,
                  rule: BackwardRule = BackwardRule.BACKPROP) -> np.ndarray:
    """Propagate ``signal`` through a ReLU.

    Backprop keeps positions whose forward input was positive, deconvnet
    keeps positions where the signal itself is positive, guided keeps the
    intersection. The subgradient at exactly 0 is 0 for every rule.
    """
    mask = relu_mask(signal, cached_forward_input, rule)
    return np.where(mask, signal, np.zeros((), dtype=signal.dtype))


# ---------------------------------------------------------------------------
# pooling / upsampling


def maxpool2d_forward(x: np.ndarray, factor: int = 2):
    """Non-overlapping max pool. Returns ``(output, switches)``.

    ``switches`` holds, per output cell, the flat index (0..factor**2-1)
    of the winning position inside its window; ties go to the first.
    """
    _expect_rank(x.shape, 4, "maxpool2d")
    n, c, h, w = x.shape
    _check_divisible(h, w, factor)
    win = x.reshape(n, c, h // factor, factor, w // factor, factor).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // factor, w // factor, factor * factor)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2d_backward(grad_out: np.ndarray, switches: np.ndarray, factor: int = 2) -> np.ndarray:
    if grad_out.shape != switches.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != switch shape {switches.shape}")
    n, c, ho, wo = grad_out.shape
    win = np.zeros((n, c, ho, wo, factor * factor), dtype=grad_out.dtype)
    np.put_along_axis(win, switches[..., None], grad_out[..., None], axis=-1)
    win = win.reshape(n, c, ho, wo, factor, factor).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(n, c, ho * factor, wo * factor)


def maxpool2d_gather(x: np.ndarray, switches: np.ndarray, factor: int = 2) -> np.ndarray:
    """Read ``x`` at recorded switch positions (adjoint of the backward)."""
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // factor, factor, w // factor, factor).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // factor, w // factor, factor * factor)
    if win.shape[:4] != switches.shape:
        raise ShapeError(f"switch shape {switches.shape} does not match pooled extent {win.shape[:4]}")
    return np.take_along_axis(win, switches[..., None], axis=-1)[..., 0]


def upsample2d_forward(x: np.ndarray, factor: int = 2) -> np.ndarray:
    """Nearest-neighbour upsampling."""
    _expect_rank(x.shape, 4, "upsample2d")
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def upsample2d_backward(grad_out: np.ndarray, factor: int = 2) -> np.ndarray:
    _expect_rank(grad_out.shape, 4, "upsample2d backward")
    n, c, h, w = grad_out.shape
    _check_divisible(h, w, factor)
    return grad_out.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# affine, global average pooling, sigmoid


def affine_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``y = x W^T + b`` for a batch of row vectors; ``weight`` is (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"affine: input {x.shape} incompatible with weight {weight.shape}")
    y = x @ weight.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"affine: bias {bias.shape} incompatible with weight {weight.shape}")
        y = y + bias
    return y


def affine_backward(grad_out: np.ndarray, cached_input: np.ndarray, weight: np.ndarray):
    if grad_out.shape != (cached_input.shape[0], weight.shape[0]):
        raise ShapeError(f"affine backward: grad_out {grad_out.shape} vs output "
                         f"{(cached_input.shape[0], weight.shape[0])}")
    return grad_out @ weight, grad_out.T @ cached_input, grad_out.sum(axis=0)


def gap_forward(x: np.ndarray) -> np.ndarray:
    _expect_rank(x.shape, 4, "gap")
    return x.mean(axis=(2, 3))


def gap_backward(grad_out: np.ndarray, input_shape: Sequence[int]) -> np.ndarray:
    n, c, h, w = input_shape
    if grad_out.shape != (n, c):
        raise ShapeError(f"gap backward: grad_out {grad_out.shape} vs {(n, c)}")
    scale = grad_out / (h * w)
    return np.broadcast_to(scale[:, :, None, None], (n, c, h, w)).copy()


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out: np.ndarray, cached_input: np.ndarray) -> np.ndarray:
    if grad_out.shape != cached_input.shape:
        raise ShapeError(f"sigmoid backward: {grad_out.shape} vs {cached_input.shape}")
    s = sigmoid_forward(cached_input)
    return grad_out * s * (1 - s)


# ---------------------------------------------------------------------------
# finite-difference checking


class GradientCheckError(RuntimeError):
    pass


def gradient_check(func: Callable[..., tuple[float, Sequence[np.ndarray]]],
                   params: Sequence[np.ndarray], epsilon: float = 1e-6) -> float:
    """Compare analytic gradients with central differences.

    ``func(*params)`` must return ``(scalar, grads)`` with one gradient per
    parameter. Parameters are perturbed in place (and restored). Returns
    the max over all entries of ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    for i, p in enumerate(params):
        if p.dtype != CHECK_DTYPE:
            raise TypeError(f"parameter {i} has dtype {p.dtype}; gradient checks run in float64")
    _, grads = func(*params)
    worst = 0.0
    for pi, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ShapeError(f"gradient {pi} shape {g.shape} != parameter shape {p.shape}")
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            fp = float(func(*params)[0])
            flat[j] = orig - epsilon
            fm = float(func(*params)[0])
            flat[j] = orig
            numeric = (fp - fm) / (2 * epsilon)
            if not (np.isfinite(fp) and np.isfinite(fm) and np.isfinite(gflat[j])):
                raise GradientCheckError(f"non-finite value at parameter {pi}, entry {j}")
            err = abs(gflat[j] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, float(err))
    return worst
