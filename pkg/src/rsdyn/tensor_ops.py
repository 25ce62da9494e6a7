"""Differentiable array primitives with hand-written gradients.

Every operator works on float64 numpy arrays laid out channel-first, with an
optional leading batch axis: ``(C, *spatial)`` or ``(B, C, *spatial)``.
Spatial axes are ``(H, W)`` for 2-D maps and ``(H, W, T)`` for sequences.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

Tensor = np.ndarray

ACTIVATIONS = ("relu", "sigmoid", "tanh", "linear")


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@dataclass
class ConvParams:
    kernel: Tensor
    bias: Tensor
    padding_mode: str = "same"

    def __post_init__(self):
        if self.padding_mode not in ("same", "valid"):
            raise ValueError(f"padding_mode must be 'same' or 'valid', got {self.padding_mode!r}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match out_channels {self.kernel.shape[0]}"
            )
        if self.padding_mode == "same" and any(k % 2 == 0 for k in self.kernel.shape[2:]):
            raise ShapeError(f"same padding needs odd kernel extents, got {self.kernel.shape[2:]}")


def _as_batched(x: Tensor, nsp: int) -> tuple[Tensor, bool]:
    if x.ndim == nsp + 1:
        return x[None], True
    if x.ndim == nsp + 2:
        return x, False
    raise ShapeError(f"expected {nsp + 1} or {nsp + 2} dims, got shape {x.shape}")


def _pad_widths(kernel: Tensor, mode: str) -> list[int]:
    if mode == "same":
        return [(k - 1) // 2 for k in kernel.shape[2:]]
    return [0] * (kernel.ndim - 2)


def _zero_pad(xb: Tensor, pads) -> Tensor:
    """Symmetric zero padding of the spatial axes (faster than np.pad for small arrays)."""
    out = np.zeros(xb.shape[:2] + tuple(n + 2 * p for n, p in zip(xb.shape[2:], pads)))
    out[(slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(pads, xb.shape[2:]))] = xb
    return out


def _offsets(ksize):
    return list(itertools.product(*[range(k) for k in ksize]))


def _im2col(xp: Tensor, ksize: tuple, out_sp: tuple) -> Tensor:
    """Columns laid out ``(C, prod(K), B, *S_out)`` so the conv is one matmul."""
    B, C = xp.shape[:2]
    cols = np.empty((C, len(_offsets(ksize)), B) + tuple(out_sp))
    xt = xp.swapaxes(0, 1)
    for i, off in enumerate(_offsets(ksize)):
        cols[:, i] = xt[(slice(None), slice(None)) + tuple(slice(o, o + n) for o, n in zip(off, out_sp))]
    return cols


def _correlate(xp: Tensor, kernel: Tensor) -> Tensor:
    """Valid cross-correlation of batched ``xp`` (B, C, *S) with (O, C, *K)."""
    ksize = kernel.shape[2:]
    out_sp = tuple(n - k + 1 for n, k in zip(xp.shape[2:], ksize))
    cols = _im2col(xp, ksize, out_sp)
    O = kernel.shape[0]
    out = kernel.reshape(O, -1) @ cols.reshape(-1, cols[0, 0].size)
    return out.reshape((O, xp.shape[0]) + out_sp).swapaxes(0, 1)


def conv_output_shape(in_shape: tuple, kernel_shape: tuple, padding_mode: str = "same") -> tuple:
    nsp = len(kernel_shape) - 2
    lead = tuple(in_shape[:-nsp - 1])
    spatial = tuple(in_shape[-nsp:])
    if padding_mode == "valid":
        spatial = tuple(s - k + 1 for s, k in zip(spatial, kernel_shape[2:]))
    return lead + (kernel_shape[0],) + spatial


def _conv_forward(x: Tensor, params: ConvParams, nsp: int) -> Tensor:
    k = params.kernel
    if k.ndim != nsp + 2:
        raise ShapeError(f"kernel shape {k.shape} is not a {nsp}-D convolution kernel")
    xb, squeeze = _as_batched(x, nsp)
    if xb.shape[1] != k.shape[1]:
        raise ShapeError(
            f"input shape {x.shape} has {xb.shape[1]} channels but kernel shape {k.shape} "
            f"expects {k.shape[1]}"
        )
    pads = _pad_widths(k, params.padding_mode)
    if any(p for p in pads):
        xb = _zero_pad(xb, pads)
    if any(s < kk for s, kk in zip(xb.shape[2:], k.shape[2:])):
        raise ShapeError(f"input shape {x.shape} is smaller than kernel shape {k.shape}")
    out = _correlate(xb, k)
    out += params.bias.reshape((1, -1) + (1,) * nsp)
    return out[0] if squeeze else out


def _conv_backward(x: Tensor, params: ConvParams, grad_out: Tensor, nsp: int,
                   need_input_grad: bool = True, need_params_grad: bool = True):
    k = params.kernel
    xb, squeeze = _as_batched(x, nsp)
    expected = conv_output_shape(x.shape, k.shape, params.padding_mode)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match output shape {expected}")
    gb = grad_out[None] if squeeze else grad_out
    pads = _pad_widths(k, params.padding_mode)
    xp = _zero_pad(xb, pads) if any(pads) else xb
    ksize = k.shape[2:]
    out_sp = gb.shape[2:]
    B, C = xb.shape[:2]
    O = k.shape[0]

    g2 = np.ascontiguousarray(gb.swapaxes(0, 1)).reshape(O, -1)     # (O, B*S)
    grad_kernel = grad_bias = None
    if need_params_grad:
        cols = _im2col(xp, ksize, out_sp)
        grad_kernel = (g2 @ cols.reshape(C * len(_offsets(ksize)), -1).T).reshape(k.shape)
        grad_bias = g2.sum(axis=1)

    if not need_input_grad:
        return None, grad_kernel, grad_bias
    if O <= C:
        # fewer output than input channels: correlate the padded gradient with
        # the flipped, transposed kernel (cheaper than scattering columns)
        flipped = k[(slice(None), slice(None)) + (slice(None, None, -1),) * nsp].swapaxes(0, 1)
        gpad = _zero_pad(gb, [kk - 1 - p for kk, p in zip(ksize, pads)])
        grad_input = _correlate(gpad, np.ascontiguousarray(flipped))
    else:
        # col2im: scatter column gradients back onto the padded input
        dcols = (k.reshape(O, -1).T @ g2).reshape((C, -1, B) + tuple(out_sp))
        gxp = np.zeros((C, B) + xp.shape[2:])
        for i, off in enumerate(_offsets(ksize)):
            gxp[(slice(None), slice(None)) + tuple(slice(o, o + n) for o, n in zip(off, out_sp))] += dcols[:, i]
        crop = (slice(None), slice(None)) + tuple(slice(p, n - p) for p, n in zip(pads, xp.shape[2:]))
        grad_input = gxp[crop].swapaxes(0, 1)
    if squeeze:
        grad_input = grad_input[0]
    return grad_input, grad_kernel, grad_bias


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Stride-1 2-D cross-correlation plus bias on ``(C, H, W)`` or ``(B, C, H, W)``."""
    return _conv_forward(x, params, 2)


def conv2d_backward(x: Tensor, params: ConvParams, grad_out: Tensor, need_input_grad: bool = True,
                    need_params_grad: bool = True):
    """Return ``(grad_input, grad_kernel, grad_bias)`` for :func:`conv2d`.

    ``grad_input`` is None when ``need_input_grad`` is false; the kernel and
    bias gradients are None when ``need_params_grad`` is false.
    """
    return _conv_backward(x, params, grad_out, 2, need_input_grad, need_params_grad)


def conv3d(x: Tensor, params: ConvParams) -> Tensor:
    """Stride-1 cross-correlation over ``(H, W, T)``; same padding pads all three axes."""
    return _conv_forward(x, params, 3)


def conv3d_backward(x: Tensor, params: ConvParams, grad_out: Tensor, need_input_grad: bool = True):
    return _conv_backward(x, params, grad_out, 3, need_input_grad)


def _spatial_axes(ndim: int, time_axis: bool) -> tuple[int, int]:
    return (ndim - 3, ndim - 2) if time_axis else (ndim - 2, ndim - 1)


def max_pool_spatial(x: Tensor, time_axis: bool = False) -> tuple[Tensor, Tensor]:
    """Non-overlapping 2x2 max over the spatial axes.

    Returns the pooled array and an index map with values in ``0..3`` giving
    the winning position ``(dh, dw) = divmod(index, 2)`` inside each block.
    Ties go to the first position in row-major order.
    """
    ah, aw = _spatial_axes(x.ndim, time_axis)
    h, w = x.shape[ah], x.shape[aw]
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool_spatial needs even spatial dims, got {h}x{w} in shape {x.shape}")
    blocks = _to_blocks(x, ah, aw)
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def _to_blocks(x: Tensor, ah: int, aw: int) -> Tensor:
    # (..., H, W, rest) -> (..., H/2, W/2, rest, 4), block entries in row-major order
    shape = x.shape
    split = shape[:ah] + (shape[ah] // 2, 2, shape[aw] // 2, 2) + shape[aw + 1:]
    b = x.reshape(split)
    b = np.moveaxis(b, [ah + 1, ah + 3], [-2, -1])
    return b.reshape(b.shape[:-2] + (4,))


def max_pool_spatial_backward(grad_out: Tensor, argmax: Tensor, time_axis: bool = False) -> Tensor:
    onehot = argmax[..., None] == np.arange(4)
    blocks = np.where(onehot, grad_out[..., None], 0.0)
    nd = grad_out.ndim
    ah, aw = _spatial_axes(nd, time_axis)
    b = blocks.reshape(blocks.shape[:-1] + (2, 2))
    # (..., H/2, W/2, rest, 2, 2) -> (..., H/2, 2, W/2, 2, rest)
    b = np.moveaxis(b, [-2, -1], [ah + 1, ah + 3])
    shape = grad_out.shape
    full = shape[:ah] + (shape[ah] * 2, shape[aw] * 2) + shape[aw + 1:]
    return b.reshape(full)


def upsample_nearest(x: Tensor, factor: int = 2, time_axis: bool = False) -> Tensor:
    """Replicate each spatial element into a ``factor x factor`` block."""
    ah, aw = _spatial_axes(x.ndim, time_axis)
    return np.repeat(np.repeat(x, factor, axis=ah), factor, axis=aw)


def upsample_nearest_backward(grad_out: Tensor, factor: int = 2, time_axis: bool = False) -> Tensor:
    ah, aw = _spatial_axes(grad_out.ndim, time_axis)
    shape = grad_out.shape
    split = shape[:ah] + (shape[ah] // factor, factor, shape[aw] // factor, factor) + shape[aw + 1:]
    return grad_out.reshape(split).sum(axis=(ah + 1, ah + 3))


def sigmoid(x: Tensor) -> Tensor:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "linear":
        return x
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_backward(x: Tensor, grad_out: Tensor, kind: str, y: Tensor | None = None) -> Tensor:
    """Gradient through :func:`activation`; ``y`` is the forward output if already at hand."""
    if kind == "relu":
        return grad_out * (x > 0)
    if kind == "linear":
        return grad_out
    if y is None:
        y = activation(x, kind)
    if kind == "sigmoid":
        return grad_out * y * (1.0 - y)
    if kind == "tanh":
        return grad_out * (1.0 - y * y)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def concat_channels(a: Tensor, b: Tensor, axis: int = -3) -> Tensor:
    """Stack ``a`` and ``b`` along the channel axis (``-3`` for 2-D maps)."""
    if a.ndim != b.ndim or np.delete(a.shape, axis).tolist() != np.delete(b.shape, axis).tolist():
        raise ShapeError(f"cannot concatenate shapes {a.shape} and {b.shape} along axis {axis}")
    return np.concatenate([a, b], axis=axis)


def concat_channels_backward(grad_out: Tensor, a_channels: int, axis: int = -3):
    ga, gb = np.split(grad_out, [a_channels], axis=axis)
    return ga, gb


def mse_loss(pred: Tensor, target: Tensor) -> tuple[float, Tensor]:
    """Mean squared error over every element, and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} does not match target shape {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def numerical_gradient(fn: Callable[[Tensor], float], x: Tensor, step: float = 1e-5,
                       indices=None) -> Tensor:
    """Central finite differences of scalar ``fn`` at ``x``; perturbs ``x`` in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + step
        fp = fn(x)
        flat[i] = old - step
        fm = fn(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-6) -> Tensor:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is ~0 from reporting huge
    ratios built out of finite-difference rounding noise.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(fn: Callable[[Tensor], float], x: Tensor, analytic: Tensor,
               tolerance: float = 1e-4, step: float = 1e-5, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare an analytic gradient of scalar ``fn`` at ``x`` with central differences.

    With ``max_entries`` set, only a random subset of coordinates is probed.
    """
    if analytic.shape != x.shape:
        raise ShapeError(f"analytic gradient shape {analytic.shape} != input shape {x.shape}")
    x = np.array(x, dtype=np.float64, copy=True)
    if max_entries is not None and x.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(x.size, size=max_entries, replace=False))
    else:
        idx = np.arange(x.size)
    num = numerical_gradient(fn, x, step, idx)
    err = relative_error(analytic.reshape(-1)[idx], num.reshape(-1)[idx])
    return GradCheckReport(float(err.max(initial=0.0)), tolerance, int(idx.size))
