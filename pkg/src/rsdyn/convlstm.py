"""Convolutional LSTM cell, sequence unroller and backpropagation through time.

Peephole-free formulation; gate pre-activations are same-padded 2-D
convolutions of the input frame and the previous hidden state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_ops import (
    ConvParams,
    ShapeError,
    Tensor,
    conv2d,
    conv2d_backward,
    sigmoid,
)

GATES = ("i", "f", "o", "g")


@dataclass
class ConvLSTMParams:
    """Eight gate kernels plus four biases, keyed like ``W_xi``, ``W_hf``, ``b_o``."""

    W_xi: Tensor
    W_xf: Tensor
    W_xo: Tensor
    W_xg: Tensor
    W_hi: Tensor
    W_hf: Tensor
    W_ho: Tensor
    W_hg: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor

    def __post_init__(self):
        hid = self.hidden_channels
        ksz = self.W_xi.shape[2:]
        for name in self.names():
            arr = getattr(self, name)
            if name.startswith("W_"):
                if arr.ndim != 4 or arr.shape[2:] != ksz:
                    raise ShapeError(f"{name} has shape {arr.shape}; all kernels must share {ksz}")
                if arr.shape[0] != hid:
                    raise ShapeError(f"{name} maps to {arr.shape[0]} channels, expected {hid}")
                if name.startswith("W_h") and arr.shape[1] != hid:
                    raise ShapeError(f"{name} must map {hid} -> {hid} channels, got {arr.shape}")
            elif arr.shape != (hid,):
                raise ShapeError(f"{name} has shape {arr.shape}, expected ({hid},)")
        if any(k % 2 == 0 for k in ksz):
            raise ShapeError(f"kernel extents must be odd, got {ksz}")

    @staticmethod
    def names() -> list[str]:
        return ([f"W_x{g}" for g in GATES] + [f"W_h{g}" for g in GATES]
                + [f"b_{g}" for g in GATES])

    @property
    def hidden_channels(self) -> int:
        return self.W_xi.shape[0]

    @property
    def input_channels(self) -> int:
        return self.W_xi.shape[1]

    @classmethod
    def from_dict(cls, d: dict, prefix: str = "") -> "ConvLSTMParams":
        return cls(**{n: d[prefix + n] for n in cls.names()})

    def to_dict(self, prefix: str = "") -> dict:
        return {prefix + n: getattr(self, n) for n in self.names()}

    @classmethod
    def init(cls, in_channels: int, hidden: int, kernel: int, rng: np.random.Generator,
             forget_bias: float = 1.0) -> "ConvLSTMParams":
        """Uniform +-1/sqrt(fan_in) kernels, zero biases except the forget gate."""
        d = {}
        for src, cin in (("x", in_channels), ("h", hidden)):
            bound = 1.0 / np.sqrt(cin * kernel * kernel)
            for g in GATES:
                d[f"W_{src}{g}"] = rng.uniform(-bound, bound, size=(hidden, cin, kernel, kernel))
        for g in GATES:
            d[f"b_{g}"] = np.full(hidden, forget_bias if g == "f" else 0.0)
        return cls(**d)

    # stacked views used by the fast path: gate order i, f, o, g
    def stacked_x(self) -> ConvParams:
        k = np.concatenate([getattr(self, f"W_x{g}") for g in GATES], axis=0)
        b = np.concatenate([getattr(self, f"b_{g}") for g in GATES])
        return ConvParams(k, b, "same")

    def stacked_h(self) -> ConvParams:
        k = np.concatenate([getattr(self, f"W_h{g}") for g in GATES], axis=0)
        return ConvParams(k, np.zeros(k.shape[0]), "same")


@dataclass
class ConvLSTMState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, shape) -> "ConvLSTMState":
        return cls(np.zeros(shape), np.zeros(shape))


def _gates(z: Tensor, hid: int):
    zi, zf, zo, zg = (z[:, k * hid:(k + 1) * hid] for k in range(4))
    return sigmoid(zi), sigmoid(zf), sigmoid(zo), np.tanh(zg)


def cell_step(x: Tensor, state: ConvLSTMState, params: ConvLSTMParams) -> ConvLSTMState:
    """One ConvLSTM update on ``(Cin, H, W)`` or ``(B, Cin, H, W)`` input."""
    squeeze = x.ndim == 3
    xb = x[None] if squeeze else x
    hid = params.hidden_channels
    hb = state.h[None] if state.h.ndim == 3 else state.h
    cb = state.c[None] if state.c.ndim == 3 else state.c
    if xb.ndim != 4 or xb.shape[1] != params.input_channels:
        raise ShapeError(f"input shape {x.shape} incompatible with {params.input_channels} input channels")
    want = (xb.shape[0], hid) + xb.shape[2:]
    if hb.shape != want or cb.shape != want:
        raise ShapeError(f"state shapes {state.h.shape}/{state.c.shape} do not match expected {want}")
    z = conv2d(xb, params.stacked_x()) + conv2d(hb, params.stacked_h())
    i, f, o, g = _gates(z, hid)
    c_new = f * cb + i * g
    h_new = o * np.tanh(c_new)
    if squeeze:
        return ConvLSTMState(h_new[0], c_new[0])
    return ConvLSTMState(h_new, c_new)


def _as_sequence(xs) -> tuple[Tensor, bool]:
    """Accept a list of T frames or an array with time on the last axis.

    Returns a batched array ``(B, C, H, W, T)`` and whether a batch axis was added.
    """
    if isinstance(xs, (list, tuple)):
        if len(xs) == 0:
            raise ValueError("empty sequence")
        xs = np.stack(xs, axis=-1)
    if xs.ndim == 4:
        return xs[None], True
    if xs.ndim == 5:
        return xs, False
    raise ShapeError(f"sequence must be (C,H,W,T) or (B,C,H,W,T), got {xs.shape}")


def _run(xb: Tensor, params: ConvLSTMParams):
    B, cin, H, W, T = xb.shape
    if T < 1:
        raise ValueError("empty sequence")
    if cin != params.input_channels:
        raise ShapeError(f"sequence shape {xb.shape} has {cin} channels, params expect "
                         f"{params.input_channels}")
    hid = params.hidden_channels
    px, ph = params.stacked_x(), params.stacked_h()
    # input contributions for every step at once: fold time into batch
    xflat = np.moveaxis(xb, -1, 1).reshape(B * T, cin, H, W)
    zx = conv2d(xflat, px).reshape(B, T, 4 * hid, H, W)
    h = np.zeros((B, hid, H, W))
    c = np.zeros((B, hid, H, W))
    hs, cs, gates = [h], [c], []
    for t in range(T):
        # h_0 = 0 contributes only the (zero) recurrent bias
        z = zx[:, t] + conv2d(h, ph) if t else zx[:, 0] + ph.bias.reshape(1, -1, 1, 1)
        i, f, o, g = _gates(z, hid)
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        hs.append(h)
        cs.append(c)
        gates.append((i, f, o, g, tc))
    return hs, cs, gates


def forward_sequence(xs, params: ConvLSTMParams, return_mode: str = "last"):
    """Unroll from a zero state over frames on the last axis.

    ``return_mode='last'`` gives ``h_T``; ``'all'`` stacks ``h_1..h_T`` on a
    trailing time axis.
    """
    if return_mode not in ("last", "all"):
        raise ValueError(f"return_mode must be 'last' or 'all', got {return_mode!r}")
    xb, squeeze = _as_sequence(xs)
    hs, _, _ = _run(xb, params)
    out = hs[-1] if return_mode == "last" else np.stack(hs[1:], axis=-1)
    return out[0] if squeeze else out


def backward_sequence(xs, params: ConvLSTMParams, grad_outs, return_mode: str = "last"):
    """Backpropagation through time.

    ``grad_outs`` has the shape of :func:`forward_sequence` output for the same
    ``return_mode``. Returns ``(grad_xs, grad_params)`` where ``grad_xs`` has
    the shape of the stacked input and ``grad_params`` is a dict keyed like
    :meth:`ConvLSTMParams.names`.
    """
    if isinstance(grad_outs, (list, tuple)):
        grad_outs = np.stack(grad_outs, axis=-1)
    xb, squeeze = _as_sequence(xs)
    gb = grad_outs[None] if squeeze else grad_outs
    _, cache = sequence_forward_cached(xb, params, return_mode)
    grad_x, grads = sequence_backward_cached(cache, gb)
    return (grad_x[0] if squeeze else grad_x), grads


def sequence_forward_cached(xb: Tensor, params: ConvLSTMParams, return_mode: str = "last"):
    """Batched forward on ``(B, C, H, W, T)`` keeping what BPTT needs."""
    if return_mode not in ("last", "all"):
        raise ValueError(f"return_mode must be 'last' or 'all', got {return_mode!r}")
    hs, cs, gates = _run(xb, params)
    out = hs[-1] if return_mode == "last" else np.stack(hs[1:], axis=-1)
    return out, (xb, params, return_mode, hs, cs, gates)


def sequence_backward_cached(cache, gb: Tensor):
    xb, params, return_mode, hs, cs, gates = cache
    B, cin, H, W, T = xb.shape
    hid = params.hidden_channels
    want = (B, hid, H, W) if return_mode == "last" else (B, hid, H, W, T)
    if gb.shape != want:
        raise ShapeError(f"grad_outs shape {gb.shape} does not match output shape {want}")
    px, ph = params.stacked_x(), params.stacked_h()

    dzs = np.empty((B, T, 4 * hid, H, W))
    dh_next = np.zeros((B, hid, H, W))
    dc_next = np.zeros((B, hid, H, W))
    for t in reversed(range(T)):
        i, f, o, g, tc = gates[t]
        if return_mode == "all":
            dh = dh_next + gb[..., t]
        elif t == T - 1:
            dh = dh_next + gb
        else:
            dh = dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dc_next = dc * f
        dz = np.concatenate([dc * g * i * (1 - i), dc * cs[t] * f * (1 - f),
                             do * o * (1 - o), dc * i * (1 - g * g)], axis=1)
        dzs[:, t] = dz
        if t > 0:
            dh_next, _, _ = conv2d_backward(hs[t], ph, dz, need_params_grad=False)
        # h_0 is the fixed zero state: no kernel gradient, nothing upstream

    # recurrent kernel gradient for all steps t >= 1 in one batched pass
    if T > 1:
        hflat = np.stack(hs[1:T], axis=1).reshape(B * (T - 1), hid, H, W)
        _, grad_wh, _ = conv2d_backward(hflat, ph, dzs[:, 1:].reshape(B * (T - 1), 4 * hid, H, W),
                                        need_input_grad=False)
    else:
        grad_wh = np.zeros_like(ph.kernel)

    xflat = np.moveaxis(xb, -1, 1).reshape(B * T, cin, H, W)
    dx_flat, grad_wx, grad_b = conv2d_backward(xflat, px, dzs.reshape(B * T, 4 * hid, H, W))
    grad_x = np.moveaxis(dx_flat.reshape(B, T, cin, H, W), 1, -1)

    grads = {}
    for k, g in enumerate(GATES):
        sl = slice(k * hid, (k + 1) * hid)
        grads[f"W_x{g}"] = grad_wx[sl]
        grads[f"W_h{g}"] = grad_wh[sl]
        grads[f"b_{g}"] = grad_b[sl]
    return grad_x, grads
