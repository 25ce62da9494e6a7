"""Uniform prediction interface over trained networks and baselines.

A scorer consumes clip frames ``(N, 1, H, W, L)`` with ``L = window_length``
and returns ``(pred, target)``, both ``(N, H, W, F)``. ``target_offsets``
gives the in-window frame index of each of the ``F`` scored frames.
"""

from __future__ import annotations

import numpy as np

from . import baselines
from .models import Network
from .optim import model_io, predict_batched


class NetworkScorer:
    def __init__(self, net: Network, batch_size: int = 64):
        self.net = net
        self.batch_size = batch_size
        self.T = net.spec.T
        self.levels = net.spec.levels
        self.window_length = self.T + 1
        if net.spec.kind == "recurrent_autoencoder":
            self.target_offsets = list(range(self.T))
        else:
            self.target_offsets = [self.T]

    @property
    def name(self) -> str:
        return self.net.spec.kind

    def predict(self, frames: np.ndarray):
        x, y = model_io(self.net.spec, frames)
        pred = predict_batched(self.net, x, self.batch_size)
        if self.net.spec.kind == "recurrent_autoencoder":
            return pred[:, 0], y[:, 0]
        return pred[:, 0, ..., None], y[:, 0, ..., None]


class BaselineScorer:
    def __init__(self, method: str, T: int):
        if method not in baselines.METHODS:
            raise ValueError(f"unknown baseline {method!r}; expected one of {baselines.METHODS}")
        self.method = method
        self.T = T
        self.levels = 0
        # interpolation also consumes the frame after the target
        self.window_length = T + 2 if method == "interpolate" else T + 1
        self.target_offsets = [T]

    @property
    def name(self) -> str:
        return self.method

    def predict(self, frames: np.ndarray):
        seq = frames[:, 0, ..., :self.T]
        target = frames[:, 0, ..., self.T]
        if self.method == "copy":
            pred = baselines.last_frame_copy(seq)
        elif self.method == "extrapolate":
            pred = baselines.spline_extrapolate_next(seq)
        else:
            pred = baselines.spline_interpolate_missing(seq, frames[:, 0, ..., self.T + 1])
        return pred[..., None], target[..., None]


def as_scorer(model):
    if isinstance(model, Network):
        return NetworkScorer(model)
    if hasattr(model, "predict") and hasattr(model, "window_length"):
        return model
    raise TypeError(f"cannot score with {type(model).__name__}")
