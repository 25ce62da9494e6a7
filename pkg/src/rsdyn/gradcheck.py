"""Finite-difference gradient suite over every operator and all three networks.

Each check contracts the output with a fixed random cotangent ``R`` so the
scalar ``sum(f(x) * R)`` exercises every output entry. Networks are checked
with tanh hidden activations and unit-scale random weights: at the default
initialization most gradients sit near the finite-difference noise floor, and
ReLU kinks or pooling ties make the numerical derivative ill-defined.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import convlstm as cl
from . import tensor_ops as ops
from .models import ModelSpec, build


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _contracted(f, R):
    return lambda z: float(np.sum(f(z) * R))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def operator_checks(rng, tolerance=1e-4, max_entries=None):
    out = []

    def add(name, fn, x, analytic):
        rep = ops.grad_check(fn, x, analytic, tolerance=tolerance, max_entries=max_entries, rng=rng)
        out.append(CheckResult(name, rep.max_rel_error, rep.n_checked, tolerance))

    for mode in ("same", "valid"):
        x = rng.normal(size=(2, 3, 6, 6))
        k = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        p = ops.ConvParams(k, b, mode)
        R = rng.normal(size=ops.conv2d(x, p).shape)
        gx, gk, gb = ops.conv2d_backward(x, p, R)
        add(f"conv2d[{mode}].input", _contracted(lambda z: ops.conv2d(z, p), R), x, gx)
        add(f"conv2d[{mode}].kernel", _contracted(lambda z: ops.conv2d(x, ops.ConvParams(z, b, mode)), R), k, gk)
        add(f"conv2d[{mode}].bias", _contracted(lambda z: ops.conv2d(x, ops.ConvParams(k, z, mode)), R), b, gb)

    x = rng.normal(size=(2, 2, 4, 4, 3))
    k = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    p = ops.ConvParams(k, b)
    R = rng.normal(size=ops.conv3d(x, p).shape)
    gx, gk, gb = ops.conv3d_backward(x, p, R)
    add("conv3d.input", _contracted(lambda z: ops.conv3d(z, p), R), x, gx)
    add("conv3d.kernel", _contracted(lambda z: ops.conv3d(x, ops.ConvParams(z, b)), R), k, gk)
    add("conv3d.bias", _contracted(lambda z: ops.conv3d(x, ops.ConvParams(k, z)), R), b, gb)

    for time_axis, shape in ((False, (2, 3, 4, 6)), (True, (2, 2, 4, 4, 3))):
        x = rng.normal(size=shape)
        y, arg = ops.max_pool_spatial(x, time_axis)
        R = rng.normal(size=y.shape)
        add(f"max_pool[time={time_axis}]", _contracted(lambda z: ops.max_pool_spatial(z, time_axis)[0], R),
            x, ops.max_pool_spatial_backward(R, arg, time_axis))
        R = rng.normal(size=ops.upsample_nearest(x, 2, time_axis).shape)
        add(f"upsample[time={time_axis}]", _contracted(lambda z: ops.upsample_nearest(z, 2, time_axis), R),
            x, ops.upsample_nearest_backward(R, 2, time_axis))

    for kind in ("relu", "sigmoid", "tanh", "linear"):
        x = _away_from_zero(rng, (3, 4, 5))
        R = rng.normal(size=x.shape)
        add(f"activation[{kind}]", _contracted(lambda z: ops.activation(z, kind), R),
            x, ops.activation_backward(x, R, kind))

    a = rng.normal(size=(2, 2, 3, 3))
    c = rng.normal(size=(2, 3, 3, 3))
    R = rng.normal(size=(2, 5, 3, 3))
    ga, gc = ops.concat_channels_backward(R, 2)
    add("concat.a", _contracted(lambda z: ops.concat_channels(z, c), R), a, ga)
    add("concat.b", _contracted(lambda z: ops.concat_channels(a, z), R), c, gc)

    pred = rng.normal(size=(2, 3, 4))
    target = rng.normal(size=pred.shape)
    add("mse_loss", lambda z: ops.mse_loss(z, target)[0], pred, ops.mse_loss(pred, target)[1])

    for T in (1, 3):
        for mode in ("last", "all"):
            base = cl.ConvLSTMParams.init(2, 2, 3, rng).to_dict()
            d = {k: v + rng.normal(scale=0.3, size=v.shape) for k, v in base.items()}
            p = cl.ConvLSTMParams(**d)
            x = rng.normal(size=(2, 2, 4, 4, T))
            R = rng.normal(size=cl.forward_sequence(x, p, mode).shape)
            gx, gp = cl.backward_sequence(x, p, R, mode)
            add(f"convlstm[T={T},{mode}].input",
                _contracted(lambda z: cl.forward_sequence(z, p, mode), R), x, gx)
            for name in p.names():
                def f(z, name=name):
                    dd = dict(d)
                    dd[name] = z
                    return cl.forward_sequence(x, cl.ConvLSTMParams(**dd), mode)
                add(f"convlstm[T={T},{mode}].{name}", _contracted(f, R), d[name], gp[name])
    return out


TOY_SPECS = (
    ModelSpec(kind="recurrent_unet", channels=(2, 3), bottleneck=3, T=3, activation="tanh"),
    ModelSpec(kind="recurrent_unet", channels=(2, 3), bottleneck=3, T=3, activation="tanh",
              skip_mode="last_frame", output_activation="sigmoid"),
    ModelSpec(kind="unet2d", channels=(2, 3), bottleneck=3, T=3, activation="tanh"),
    ModelSpec(kind="unet2d", channels=(2, 3), bottleneck=3, T=3, activation="tanh", skips=False),
    ModelSpec(kind="recurrent_autoencoder", channels=(2, 3), bottleneck=3, T=3, activation="tanh"),
)


def model_checks(rng, specs=TOY_SPECS, hw=8, tolerance=1e-4, max_entries=24):
    out = []
    for spec in specs:
        net = build(spec, 0)
        for k in net.params:
            net.params[k] = rng.normal(scale=0.5, size=net.params[k].shape)
        if spec.kind == "unet2d":
            x = rng.normal(size=(2, spec.T, hw, hw))
        else:
            x = rng.normal(size=(2, 1, hw, hw, spec.T))
        y, cache = net.forward_cached(x)
        R = rng.normal(size=y.shape)
        gx, grads = net.backward(cache, R)
        label = f"{spec.kind}[skip={spec.skip_mode if spec.skips else 'none'},out={spec.output_activation}]"
        worst, n = 0.0, 0
        for name, value in list(net.params.items()) + [("input", x)]:
            if name == "input":
                fn, analytic = _contracted(net.forward, R), gx
            else:
                def fn(z, name=name):
                    old = net.params[name]
                    net.params[name] = z
                    try:
                        return float(np.sum(net.forward(x) * R))
                    finally:
                        net.params[name] = old
                analytic = grads[name]
            rep = ops.grad_check(fn, value.copy(), analytic, tolerance=tolerance,
                                 max_entries=max_entries, rng=rng)
            worst = max(worst, rep.max_rel_error)
            n += rep.n_checked
        out.append(CheckResult(label, worst, n, tolerance))
    return out


def run_suite(seed: int = 0, tolerance: float = 1e-4, max_entries: int = 24) -> tuple[list, float]:
    """All operator and network checks; returns ``(results, seconds)``."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    results = operator_checks(rng, tolerance) + model_checks(rng, tolerance=tolerance,
                                                             max_entries=max_entries)
    return results, time.perf_counter() - t0
