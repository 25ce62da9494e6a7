"""AMSGrad optimizer, mini-batch training loop and prediction metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .models import Network, ModelSpec
from .tensor_ops import ShapeError, mse_loss

log = logging.getLogger(__name__)


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    amsgrad: bool = True
    grad_clip_norm: float | None = 5.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    v_hat: dict = field(default_factory=dict)


def clip_global_norm(grads: dict, max_norm: float | None) -> tuple[dict, float]:
    # fixed key order keeps the reduction reproducible
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adam_step(params: dict, grads: dict, state: OptimState) -> None:
    """One bias-corrected Adam/AMSGrad update, in place on ``params``.

    The AMSGrad maximum is taken over the uncorrected second moment and the
    bias correction is folded into the step size.
    """
    for k, p in params.items():
        if k not in grads:
            raise KeyError(f"missing gradient for parameter {k}")
        if grads[k].shape != p.shape:
            raise ShapeError(f"gradient for {k} has shape {grads[k].shape}, parameter is {p.shape}")
    grads, _ = clip_global_norm(grads, state.grad_clip_norm)
    state.t += 1
    t = state.t
    step = state.lr * math.sqrt(1.0 - state.beta2 ** t) / (1.0 - state.beta1 ** t)
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
            state.v_hat[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.amsgrad:
            np.maximum(state.v_hat[k], v, out=state.v_hat[k])
            denom = np.sqrt(state.v_hat[k]) + state.eps
        else:
            denom = np.sqrt(v) + state.eps
        p -= step * m / denom


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 32
    val_fraction: float = 0.10
    seed: int = 0
    shuffle: bool = True
    lr: float = 1e-4
    amsgrad: bool = True
    grad_clip_norm: float | None = 5.0

    def __post_init__(self):
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class History:
    epoch: list = field(default_factory=list)
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_mse", "val_mse"])
            for i, e in enumerate(self.epoch):
                val = repr(self.val_mse[i]) if i < len(self.val_mse) else ""
                w.writerow([e, repr(self.train_mse[i]), val])


def clip_frames(clips) -> np.ndarray:
    """Stack SliceClips (or pass through an array) into ``(N, 1, H, W, L)``."""
    if isinstance(clips, np.ndarray):
        arr = clips
    else:
        clips = list(clips)
        if not clips:
            raise ValueError("empty dataset")
        arr = np.stack([c.frames for c in clips])
    if arr.ndim != 5 or arr.shape[1] != 1:
        raise ShapeError(f"clip frames must be (N, 1, H, W, L), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("empty dataset")
    return arr


def model_io(spec: ModelSpec, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``(N, 1, H, W, >=T+1)`` clip frames into network input and target."""
    T = spec.T
    if frames.shape[-1] < T + (0 if spec.kind == "recurrent_autoencoder" else 1):
        raise ShapeError(f"clips hold {frames.shape[-1]} frames, {spec.kind} with T={T} needs more")
    seq = frames[..., :T]
    if spec.kind == "recurrent_autoencoder":
        return seq, seq
    target = frames[..., T]
    if spec.kind == "unet2d":
        return np.moveaxis(seq[:, 0], -1, 1), target
    return seq, target


def batch_loss_and_grads(net: Network, x: np.ndarray, y: np.ndarray):
    pred, cache = net.forward_cached(x)
    loss, g = mse_loss(pred, y)
    _, grads = net.backward(cache, g, need_input_grad=False)
    return loss, grads


def predict_batched(net: Network, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    outs = [net.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0)


def dataset_mse(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> float:
    pred = predict_batched(net, x, batch_size)
    return float(np.mean((pred - y) ** 2))


def split_indices(n: int, config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(n) if config.shuffle else np.arange(n)
    n_val = math.ceil(config.val_fraction * n)
    return order[n_val:], order[:n_val]


def train(net: Network, clips, config: TrainConfig, state: OptimState | None = None,
          callback=None) -> tuple[Network, History]:
    """Train a copy of ``net`` on clip frames; the input network is not mutated.

    The first ``ceil(val_fraction * N)`` clips of a seeded permutation are held
    out. Predictors learn frame ``T+1`` from frames ``1..T``; the autoencoder
    reconstructs frames ``1..T``.
    """
    frames = clip_frames(clips)
    x_all, y_all = model_io(net.spec, frames)
    net = net.copy()
    state = state or OptimState(lr=config.lr, amsgrad=config.amsgrad,
                                grad_clip_norm=config.grad_clip_norm)
    train_idx, val_idx = split_indices(len(frames), config)
    if len(train_idx) == 0:
        raise ValueError("no training clips left after the validation split")
    rng = np.random.default_rng([config.seed, 1])
    hist = History()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(train_idx) if config.shuffle else train_idx
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            loss, grads = batch_loss_and_grads(net, x_all[idx], y_all[idx])
            adam_step(net.params, grads, state)
            total += loss * len(idx)
            count += len(idx)
        hist.epoch.append(epoch)
        hist.train_mse.append(total / count)
        if len(val_idx):
            hist.val_mse.append(dataset_mse(net, x_all[val_idx], y_all[val_idx]))
        log.info("epoch %d train_mse %.6g%s", epoch, hist.train_mse[-1],
                 f" val_mse {hist.val_mse[-1]:.6g}" if hist.val_mse else "")
        if callback is not None:
            callback(epoch, net, hist)
    return net, hist


def masked_frame_metrics(pred: np.ndarray, target: np.ndarray, masks: np.ndarray):
    """Per-frame squared-error sums, masked pixel counts and Pearson r.

    ``pred``/``target`` are ``(N, H, W, F)``; ``masks`` is ``(N, H, W)``.
    Frames whose masked prediction or target is constant get r = nan.
    """
    m = masks.astype(bool)
    n_pix = m.sum(axis=(1, 2))
    if np.any(n_pix < 2):
        raise ValueError("correlation needs at least 2 masked pixels per frame")
    mw = m[..., None].astype(np.float64)
    sq = (((pred - target) ** 2) * mw).sum(axis=(1, 2))
    cnt = np.broadcast_to(n_pix[:, None], sq.shape).astype(np.float64)
    mp = (pred * mw).sum(axis=(1, 2)) / cnt
    mt = (target * mw).sum(axis=(1, 2)) / cnt
    dp = (pred - mp[:, None, None, :]) * mw
    dt = (target - mt[:, None, None, :]) * mw
    num = (dp * dt).sum(axis=(1, 2))
    den = np.sqrt((dp * dp).sum(axis=(1, 2)) * (dt * dt).sum(axis=(1, 2)))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    return sq, cnt, r


def evaluate(model, clips, masks=None) -> tuple[float, float]:
    """Masked MSE over all predicted frames and mean per-frame Pearson r.

    ``model`` is a :class:`~rsdyn.models.Network` or any object with a
    ``predict(frames) -> (pred, target)`` method (see :mod:`rsdyn.scorers`).
    ``masks`` defaults to each clip's ``mask_slice``.
    """
    from .scorers import as_scorer

    scorer = as_scorer(model)
    frames = clip_frames(clips)
    if masks is None:
        masks = np.stack([c.mask_slice for c in clips])
    masks = np.asarray(masks)
    if masks.ndim == 2:
        masks = np.broadcast_to(masks, (len(frames),) + masks.shape)
    if masks.shape[1:] != frames.shape[2:4]:
        raise ShapeError(f"mask shape {masks.shape[1:]} does not match frames {frames.shape[2:4]}")
    pred, target = scorer.predict(frames)
    sq, cnt, r = masked_frame_metrics(pred, target, masks)
    if np.all(np.isnan(r)):
        raise ValueError("correlation undefined: every masked frame is constant")
    return float(sq.sum() / cnt.sum()), float(np.nanmean(r))
