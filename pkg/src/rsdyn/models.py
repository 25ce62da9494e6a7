"""Recurrent U-Net predictor, 2-D U-Net baseline and recurrent autoencoder.

Each architecture is a fixed composition of the primitives in
:mod:`rsdyn.tensor_ops` and :mod:`rsdyn.convlstm`; gradients are written out
by hand in reverse order of the forward pass.

Input layouts (leading batch axis optional):

* ``recurrent_unet``:        ``(B, 1, H, W, T)`` -> ``(B, 1, H, W)``
* ``unet2d``:                ``(B, T, H, W)``    -> ``(B, 1, H, W)``
* ``recurrent_autoencoder``: ``(B, 1, H, W, T)`` -> ``(B, 1, H, W, T)``
"""

from __future__ import annotations

import dataclasses
import io
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import convlstm as cl
from .tensor_ops import (
    ConvParams,
    ShapeError,
    Tensor,
    activation,
    activation_backward,
    concat_channels,
    concat_channels_backward,
    conv2d,
    conv2d_backward,
    conv3d,
    conv3d_backward,
    max_pool_spatial,
    max_pool_spatial_backward,
    upsample_nearest,
    upsample_nearest_backward,
)

KINDS = ("recurrent_unet", "unet2d", "recurrent_autoencoder")
SKIP_MODES = ("convlstm_last", "last_frame")
WEIGHTS_MAGIC = b"VXW1"


class SpecError(ValueError):
    """Invalid :class:`ModelSpec` field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class WeightsFileError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "recurrent_unet"
    levels: int = 2
    channels: tuple = (16, 32)
    bottleneck: int = 64
    convlstm_hidden: int | None = None
    skip_mode: str = "convlstm_last"
    skips: bool = True
    activation: str = "relu"
    output_activation: str = "linear"
    T: int = 20
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise SpecError("kind", f"must be one of {KINDS}, got {self.kind!r}")
        if int(self.levels) < 1:
            raise SpecError("levels", f"must be >= 1, got {self.levels}")
        if len(self.channels) != self.levels:
            raise SpecError("channels", f"needs {self.levels} entries, got {list(self.channels)}")
        if any(c < 1 for c in self.channels):
            raise SpecError("channels", f"entries must be positive, got {list(self.channels)}")
        if self.bottleneck < 1:
            raise SpecError("bottleneck", f"must be positive, got {self.bottleneck}")
        if self.convlstm_hidden is not None and self.convlstm_hidden < 1:
            raise SpecError("convlstm_hidden", f"must be positive, got {self.convlstm_hidden}")
        if self.skip_mode not in SKIP_MODES:
            raise SpecError("skip_mode", f"must be one of {SKIP_MODES}, got {self.skip_mode!r}")
        if self.activation not in ("relu", "sigmoid", "tanh", "linear"):
            raise SpecError("activation", f"unknown activation {self.activation!r}")
        if self.output_activation not in ("linear", "sigmoid"):
            raise SpecError("output_activation", f"must be linear or sigmoid, got {self.output_activation!r}")
        if int(self.T) < 1:
            raise SpecError("T", f"must be >= 1, got {self.T}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise SpecError("kernel", f"must be a positive odd size, got {self.kernel}")

    @property
    def divisor(self) -> int:
        return 2 ** self.levels

    def skip_hidden(self, level: int) -> int:
        return self.convlstm_hidden or self.channels[level]

    def replace(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise SpecError(sorted(unknown)[0], "unknown spec field")
        return cls(**d)


def parameter_shapes(spec: ModelSpec) -> dict[str, tuple]:
    """Every parameter name and shape, in storage order."""
    k = spec.kernel
    shapes: dict[str, tuple] = {}

    def conv(name, cout, cin, nsp, ksize=k):
        shapes[f"{name}.kernel"] = (cout, cin) + (ksize,) * nsp
        shapes[f"{name}.bias"] = (cout,)

    def lstm(name, cin, hid):
        for g in cl.GATES:
            shapes[f"{name}.W_x{g}"] = (hid, cin, k, k)
        for g in cl.GATES:
            shapes[f"{name}.W_h{g}"] = (hid, hid, k, k)
        for g in cl.GATES:
            shapes[f"{name}.b_{g}"] = (hid,)

    enc_nsp = 2 if spec.kind == "unet2d" else 3
    cin = spec.T if spec.kind == "unet2d" else 1
    for lvl, c in enumerate(spec.channels):
        conv(f"enc{lvl}.conv1", c, cin, enc_nsp)
        conv(f"enc{lvl}.conv2", c, c, enc_nsp)
        cin = c
    cb = spec.bottleneck
    if spec.kind == "unet2d":
        conv("bottleneck", cb, cin, 2)
    else:
        lstm("bottleneck", cin, cb)

    prev = cb
    for lvl in reversed(range(spec.levels)):
        c = spec.channels[lvl]
        if spec.kind == "recurrent_unet":
            if spec.skip_mode == "convlstm_last":
                lstm(f"skip{lvl}", c, spec.skip_hidden(lvl))
                skip_c = spec.skip_hidden(lvl)
            else:
                skip_c = c
            conv(f"dec{lvl}.conv1", c, prev + skip_c, 2)
            conv(f"dec{lvl}.conv2", c, c, 2)
        elif spec.kind == "unet2d":
            conv(f"dec{lvl}.conv1", c, prev + (c if spec.skips else 0), 2)
            conv(f"dec{lvl}.conv2", c, c, 2)
        else:
            conv(f"dec{lvl}.conv1", c, prev, 3)
            conv(f"dec{lvl}.conv2", c, c, 3)
        prev = c
    conv("out", 1, prev, 3 if spec.kind == "recurrent_autoencoder" else 2, ksize=1)
    return shapes


def parameter_count(spec: ModelSpec) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(spec).values()))


@dataclass
class Network:
    """A model spec together with its named parameter arrays."""

    spec: ModelSpec
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = parameter_shapes(self.spec)
        if list(self.params) != list(shapes):
            missing = [n for n in shapes if n not in self.params]
            extra = [n for n in self.params if n not in shapes]
            if missing or extra:
                raise ShapeError(f"parameter names do not match spec: missing {missing[:3]}, "
                                 f"unexpected {extra[:3]}")
            self.params = {n: self.params[n] for n in shapes}
        for n, s in shapes.items():
            if self.params[n].shape != s:
                raise ShapeError(f"parameter {n} has shape {self.params[n].shape}, spec needs {s}")

    def copy(self) -> "Network":
        return Network(self.spec, {n: v.copy() for n, v in self.params.items()})

    def with_T(self, T: int) -> "Network":
        """Same weights under a spec with a different sequence length.

        Only the recurrent kinds are length-agnostic; ``unet2d`` treats time
        as input channels.
        """
        if self.spec.kind == "unet2d" and T != self.spec.T:
            raise SpecError("T", "unet2d weights are tied to the training sequence length")
        return Network(self.spec.replace(T=T), self.params)

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_cached(x)[0]

    def forward_cached(self, x: Tensor):
        xb, squeeze = self._check_input(x)
        fwd = _FORWARD[self.spec.kind]
        y, cache = fwd(self, xb)
        return (y[0] if squeeze else y), (cache, squeeze)

    def backward(self, cache, grad_out: Tensor, need_input_grad: bool = True):
        """Return ``(grad_input, grads)`` with ``grads`` keyed like :attr:`params`.

        ``grad_input`` is None when ``need_input_grad`` is false (training).
        """
        inner, squeeze = cache
        gb = grad_out[None] if squeeze else grad_out
        gx, grads = _BACKWARD[self.spec.kind](self, inner, gb, need_input_grad)
        ordered = {n: grads[n] for n in self.params}
        if gx is not None and squeeze:
            gx = gx[0]
        return gx, ordered

    def _check_input(self, x: Tensor):
        spec = self.spec
        if spec.kind == "unet2d":
            want_nd, chan = 3, spec.T
        else:
            want_nd, chan = 4, 1
        if x.ndim == want_nd:
            xb, squeeze = x[None], True
        elif x.ndim == want_nd + 1:
            xb, squeeze = x, False
        else:
            raise ShapeError(f"{spec.kind} input must have {want_nd} or {want_nd + 1} dims, got {x.shape}")
        if xb.shape[1] != chan and spec.kind == "unet2d":
            raise ShapeError(f"unet2d input has {xb.shape[1]} channels but spec T={spec.T}")
        if spec.kind != "unet2d":
            if xb.shape[1] != 1:
                raise ShapeError(f"{spec.kind} input must have 1 channel, got shape {x.shape}")
            if xb.shape[-1] != spec.T:
                raise ShapeError(f"input has {xb.shape[-1]} frames but spec T={spec.T}")
        h, w = xb.shape[2], xb.shape[3]
        d = spec.divisor
        if h % d or w % d:
            raise ShapeError(f"spatial dims {h}x{w} must be divisible by 2^levels = {d}")
        return np.asarray(xb, dtype=np.float64), squeeze


def build(spec: ModelSpec, seed: int = 0) -> Network:
    """Seeded initialization: uniform +-1/sqrt(fan_in) kernels, zero biases,
    ConvLSTM forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(spec).items():
        leaf = name.rsplit(".", 1)[1]
        if len(shape) == 1:
            params[name] = np.full(shape, 1.0 if leaf == "b_f" else 0.0)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return Network(spec, params)


# -- layer helpers -----------------------------------------------------------

def _conv(net: Network, name: str) -> ConvParams:
    return ConvParams(net.params[f"{name}.kernel"], net.params[f"{name}.bias"], "same")


def _lstm(net: Network, name: str) -> cl.ConvLSTMParams:
    return cl.ConvLSTMParams.from_dict(net.params, prefix=f"{name}.")


def _conv_act_fwd(net, name, x, nsp, kind):
    p = _conv(net, name)
    z = conv2d(x, p) if nsp == 2 else conv3d(x, p)
    y = activation(z, kind)
    return y, (name, x, z, y, nsp, kind)


def _conv_act_bwd(net, cache, g, grads, need_input_grad=True):
    name, x, z, y, nsp, kind = cache
    gz = activation_backward(z, g, kind, y)
    bwd = conv2d_backward if nsp == 2 else conv3d_backward
    gx, gk, gb = bwd(x, _conv(net, name), gz, need_input_grad)
    grads[f"{name}.kernel"] = gk
    grads[f"{name}.bias"] = gb
    return gx


def _lstm_fwd(net, name, x, mode):
    out, cache = cl.sequence_forward_cached(x, _lstm(net, name), mode)
    return out, (name, cache)


def _lstm_bwd(cache, g, grads):
    name, inner = cache
    gx, gp = cl.sequence_backward_cached(inner, g)
    for k, v in gp.items():
        grads[f"{name}.{k}"] = v
    return gx


def _encoder_fwd(net, x, nsp):
    act = net.spec.activation
    time_axis = nsp == 3
    caches, skips = [], []
    a = x
    for lvl in range(net.spec.levels):
        a, c1 = _conv_act_fwd(net, f"enc{lvl}.conv1", a, nsp, act)
        a, c2 = _conv_act_fwd(net, f"enc{lvl}.conv2", a, nsp, act)
        skips.append(a)
        a, arg = max_pool_spatial(a, time_axis=time_axis)
        caches.append((c1, c2, arg))
    return a, skips, caches


def _encoder_bwd(net, caches, g, skip_grads, grads, nsp, need_input_grad=True):
    time_axis = nsp == 3
    for lvl in reversed(range(net.spec.levels)):
        c1, c2, arg = caches[lvl]
        g = max_pool_spatial_backward(g, arg, time_axis=time_axis)
        if skip_grads is not None and skip_grads[lvl] is not None:
            g = g + skip_grads[lvl]
        g = _conv_act_bwd(net, c2, g, grads)
        g = _conv_act_bwd(net, c1, g, grads, need_input_grad or lvl > 0)
    return g


def _decoder2d_fwd(net, d, skip_maps):
    """U-Net decoder on 2-D maps; ``skip_maps[lvl]`` may be None (no concat)."""
    act = net.spec.activation
    caches = []
    for lvl in reversed(range(net.spec.levels)):
        d = upsample_nearest(d)
        s = skip_maps[lvl]
        n_up = d.shape[1]
        if s is not None:
            d = concat_channels(d, s)
        d, c1 = _conv_act_fwd(net, f"dec{lvl}.conv1", d, 2, act)
        d, c2 = _conv_act_fwd(net, f"dec{lvl}.conv2", d, 2, act)
        caches.append((lvl, n_up, s is not None, c1, c2))
    return d, caches


def _decoder2d_bwd(net, caches, g, grads):
    skip_grads = [None] * net.spec.levels
    for lvl, n_up, has_skip, c1, c2 in reversed(caches):
        g = _conv_act_bwd(net, c2, g, grads)
        g = _conv_act_bwd(net, c1, g, grads)
        if has_skip:
            g, skip_grads[lvl] = concat_channels_backward(g, n_up)
        g = upsample_nearest_backward(g)
    return g, skip_grads


def _output_fwd(net, d, nsp):
    return _conv_act_fwd(net, "out", d, nsp, net.spec.output_activation)


# -- recurrent U-Net ---------------------------------------------------------

def _recurrent_unet_fwd(net: Network, x: Tensor):
    a, skips, enc = _encoder_fwd(net, x, 3)
    d, bcache = _lstm_fwd(net, "bottleneck", a, "last")
    skip_maps, skip_caches = [], []
    for lvl, s in enumerate(skips):
        if net.spec.skip_mode == "convlstm_last":
            m, c = _lstm_fwd(net, f"skip{lvl}", s, "last")
        else:
            m, c = s[..., -1], s.shape
        skip_maps.append(m)
        skip_caches.append(c)
    d, dec = _decoder2d_fwd(net, d, skip_maps)
    y, ocache = _output_fwd(net, d, 2)
    return y, (enc, bcache, skip_caches, dec, ocache)


def _recurrent_unet_bwd(net: Network, cache, g, need_input_grad=True):
    enc, bcache, skip_caches, dec, ocache = cache
    grads: dict = {}
    g = _conv_act_bwd(net, ocache, g, grads)
    g, skip_grads = _decoder2d_bwd(net, dec, g, grads)
    seq_grads = []
    for lvl, c in enumerate(skip_caches):
        if net.spec.skip_mode == "convlstm_last":
            seq_grads.append(_lstm_bwd(c, skip_grads[lvl], grads))
        else:
            full = np.zeros(c)
            full[..., -1] = skip_grads[lvl]
            seq_grads.append(full)
    g = _lstm_bwd(bcache, g, grads)
    gx = _encoder_bwd(net, enc, g, seq_grads, grads, 3, need_input_grad)
    return gx, grads


# -- 2-D U-Net ---------------------------------------------------------------

def _unet2d_fwd(net: Network, x: Tensor):
    a, skips, enc = _encoder_fwd(net, x, 2)
    d, bcache = _conv_act_fwd(net, "bottleneck", a, 2, net.spec.activation)
    skip_maps = skips if net.spec.skips else [None] * net.spec.levels
    d, dec = _decoder2d_fwd(net, d, skip_maps)
    y, ocache = _output_fwd(net, d, 2)
    return y, (enc, bcache, dec, ocache)


def _unet2d_bwd(net: Network, cache, g, need_input_grad=True):
    enc, bcache, dec, ocache = cache
    grads: dict = {}
    g = _conv_act_bwd(net, ocache, g, grads)
    g, skip_grads = _decoder2d_bwd(net, dec, g, grads)
    g = _conv_act_bwd(net, bcache, g, grads)
    gx = _encoder_bwd(net, enc, g, skip_grads, grads, 2, need_input_grad)
    return gx, grads


# -- recurrent autoencoder ---------------------------------------------------

def _autoencoder_fwd(net: Network, x: Tensor):
    act = net.spec.activation
    a, _, enc = _encoder_fwd(net, x, 3)
    d, bcache = _lstm_fwd(net, "bottleneck", a, "all")
    dec = []
    for lvl in reversed(range(net.spec.levels)):
        d = upsample_nearest(d, time_axis=True)
        d, c1 = _conv_act_fwd(net, f"dec{lvl}.conv1", d, 3, act)
        d, c2 = _conv_act_fwd(net, f"dec{lvl}.conv2", d, 3, act)
        dec.append((c1, c2))
    y, ocache = _output_fwd(net, d, 3)
    return y, (enc, bcache, dec, ocache)


def _autoencoder_bwd(net: Network, cache, g, need_input_grad=True):
    enc, bcache, dec, ocache = cache
    grads: dict = {}
    g = _conv_act_bwd(net, ocache, g, grads)
    for c1, c2 in reversed(dec):
        g = _conv_act_bwd(net, c2, g, grads)
        g = _conv_act_bwd(net, c1, g, grads)
        g = upsample_nearest_backward(g, time_axis=True)
    g = _lstm_bwd(bcache, g, grads)
    gx = _encoder_bwd(net, enc, g, None, grads, 3, need_input_grad)
    return gx, grads


_FORWARD = {
    "recurrent_unet": _recurrent_unet_fwd,
    "unet2d": _unet2d_fwd,
    "recurrent_autoencoder": _autoencoder_fwd,
}
_BACKWARD = {
    "recurrent_unet": _recurrent_unet_bwd,
    "unet2d": _unet2d_bwd,
    "recurrent_autoencoder": _autoencoder_bwd,
}


def _require_kind(net: Network, kind: str):
    if net.spec.kind != kind:
        raise SpecError("kind", f"expected a {kind} model, got {net.spec.kind}")


def predictor_forward(net: Network, clip: Tensor) -> Tensor:
    """Next frame ``(1, H, W)`` from a ``(1, H, W, T)`` clip (batch axis optional)."""
    _require_kind(net, "recurrent_unet")
    return net.forward(clip)


def unet2d_forward(net: Network, clip: Tensor) -> Tensor:
    """Next frame ``(1, H, W)`` from ``(T, H, W)`` with time as channels."""
    _require_kind(net, "unet2d")
    return net.forward(clip)


def autoencoder_forward(net: Network, clip: Tensor) -> Tensor:
    """Reconstruction ``(1, H, W, T)`` of a ``(1, H, W, T)`` clip."""
    _require_kind(net, "recurrent_autoencoder")
    return net.forward(clip)


# -- weight files ------------------------------------------------------------

def save_weights(net: Network, path) -> None:
    """Write the ``VXW1`` container: magic, u32-prefixed JSON spec, then one
    record per parameter (u32-prefixed name, u32 ndim, u32 dims, f64 LE data)."""
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    blob = json.dumps(net.spec.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for name, arr in net.params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_weights(path, expect_kind: str | None = None) -> Network:
    """Read a ``VXW1`` file; nothing is returned unless the whole file parses."""
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise WeightsFileError(f"{path}: truncated at byte {pos} reading {what} "
                                   f"(need {n} bytes, {len(raw) - pos} left)")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    magic = take(4, "magic")
    if magic != WEIGHTS_MAGIC:
        raise WeightsFileError(f"{path}: bad magic {magic!r} at byte 0, expected {WEIGHTS_MAGIC!r}")
    (n,) = struct.unpack("<I", take(4, "spec length"))
    try:
        spec = ModelSpec.from_dict(json.loads(take(n, "spec block").decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise WeightsFileError(f"{path}: unreadable spec block at byte 8: {exc}") from exc
    if expect_kind is not None and spec.kind != expect_kind:
        raise WeightsFileError(f"{path}: kind mismatch, file holds {spec.kind}, expected {expect_kind}")
    shapes = parameter_shapes(spec)
    params = {}
    while pos < len(raw):
        start = pos
        (ln,) = struct.unpack("<I", take(4, "name length"))
        name = take(ln, "parameter name").decode("utf-8", errors="replace")
        (nd,) = struct.unpack("<I", take(4, f"ndim of {name}"))
        dims = struct.unpack(f"<{nd}I", take(4 * nd, f"dims of {name}"))
        if name not in shapes:
            raise WeightsFileError(f"{path}: unexpected parameter {name!r} at byte {start}")
        if tuple(dims) != shapes[name]:
            raise WeightsFileError(f"{path}: parameter {name} has shape {dims} at byte {start}, "
                                   f"spec needs {shapes[name]}")
        count = int(np.prod(dims)) if nd else 1
        data = take(8 * count, f"data of {name}")
        params[name] = np.frombuffer(data, dtype="<f8").reshape(dims).astype(np.float64)
    missing = [n for n in shapes if n not in params]
    if missing:
        raise WeightsFileError(f"{path}: truncated, {len(missing)} parameters missing "
                               f"(first: {missing[0]})")
    return Network(spec, params)
