"""Volume sequences: file I/O, scaling, masking, windowing, clip extraction and
a seeded synthetic cohort."""

from __future__ import annotations

import csv
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

TENSOR_MAGIC = b"VXT1"
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("u1"), 2: np.dtype("<i4")}
DTYPE_CODES = {"float64": 0, "uint8": 1, "int32": 2}
GROUPS = ("control", "patient")
MANIFEST_FIELDS = ["subject_id", "group", "data_path", "mask_path", "atlas_path", "fd_path"]
SCRUB_THRESHOLD_MM = 0.5


class TensorFileError(ValueError):
    pass


# -- tensor files ------------------------------------------------------------

def write_tensor(path, arr: np.ndarray) -> None:
    """``VXT1 | u8 dtype | u8 ndim | 2 reserved | ndim x u32 dims | LE C-order payload``."""
    arr = np.asarray(arr)
    code = DTYPE_CODES.get(arr.dtype.name)
    if code is None:
        raise TypeError(f"unsupported dtype {arr.dtype}; use float64, uint8 or int32")
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    header = TENSOR_MAGIC + struct.pack("<BBxx", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header + payload)
    os.replace(tmp, path)


def read_tensor(path, expect_dtype: str | None = None) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise TensorFileError(f"{path}: header truncated, {len(raw)} of 8 bytes present")
    if raw[:4] != TENSOR_MAGIC:
        raise TensorFileError(f"{path}: bad magic {raw[:4]!r} at byte 0, expected {TENSOR_MAGIC!r}")
    code, ndim = raw[4], raw[5]
    if code not in DTYPES:
        raise TensorFileError(f"{path}: unknown dtype code {code} at byte 4")
    dtype = DTYPES[code]
    if expect_dtype is not None and dtype != np.dtype(expect_dtype):
        raise TensorFileError(f"{path}: dtype mismatch at byte 4, file holds {dtype.name}, "
                              f"expected {np.dtype(expect_dtype).name}")
    dims_end = 8 + 4 * ndim
    if len(raw) < dims_end:
        raise TensorFileError(f"{path}: dims truncated, need {dims_end} header bytes, got {len(raw)}")
    dims = struct.unpack(f"<{ndim}I", raw[8:dims_end])
    count = 1
    for d in dims:
        count *= d
    need = count * dtype.itemsize
    if need > 2 ** 40:
        raise TensorFileError(f"{path}: dims {dims} at byte 8 overflow the supported payload size")
    have = len(raw) - dims_end
    if have != need:
        what = "truncated" if have < need else "has trailing bytes"
        raise TensorFileError(f"{path}: payload {what}: expected {need} bytes from byte {dims_end} "
                              f"for dims {dims}, found {have}")
    return np.frombuffer(raw, dtype=dtype, offset=dims_end).reshape(dims).copy()


# -- volumes -----------------------------------------------------------------

@dataclass
class VolumeSequence:
    subject_id: str
    group: str
    data: np.ndarray                    # (X, Y, Z, N)
    mask: np.ndarray                    # (X, Y, Z) of {0, 1}
    atlas: np.ndarray | None = None     # (X, Y, Z) region labels, 0 = unlabeled
    fd: np.ndarray | None = None        # (N,) frame-wise displacement in mm
    scrubbed: np.ndarray | None = None  # (N,) bool

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"group must be one of {GROUPS}, got {self.group!r}")
        if self.data.ndim != 4:
            raise ValueError(f"data must be (X, Y, Z, N), got {self.data.shape}")
        if self.mask.shape != self.data.shape[:3]:
            raise ValueError(f"mask shape {self.mask.shape} != volume shape {self.data.shape[:3]}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask must be binary")
        if self.atlas is not None and self.atlas.shape != self.mask.shape:
            raise ValueError(f"atlas shape {self.atlas.shape} != volume shape {self.mask.shape}")
        n = self.data.shape[3]
        if self.fd is not None:
            self.fd = np.asarray(self.fd, dtype=np.float64)
            if self.fd.shape != (n,):
                raise ValueError(f"fd has {self.fd.size} values for {n} frames")
            if self.scrubbed is None:
                self.scrubbed = self.fd > SCRUB_THRESHOLD_MM
        if self.scrubbed is not None and np.shape(self.scrubbed) != (n,):
            raise ValueError(f"scrubbed has {np.size(self.scrubbed)} flags for {n} frames")

    @property
    def n_frames(self) -> int:
        return self.data.shape[3]


def save_volume(vol: VolumeSequence, directory) -> dict:
    """Write a subject's tensors (and FD text) into ``directory``.

    Returns a manifest row with paths relative to ``directory``.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    sid = vol.subject_id
    row = {"subject_id": sid, "group": vol.group, "data_path": f"{sid}_data.vxt",
           "mask_path": f"{sid}_mask.vxt", "atlas_path": "", "fd_path": ""}
    write_tensor(d / row["data_path"], vol.data.astype(np.float64))
    write_tensor(d / row["mask_path"], vol.mask.astype(np.uint8))
    if vol.atlas is not None:
        row["atlas_path"] = f"{sid}_atlas.vxt"
        write_tensor(d / row["atlas_path"], vol.atlas.astype(np.int32))
    if vol.fd is not None:
        row["fd_path"] = f"{sid}_fd.txt"
        save_fd(d / row["fd_path"], vol.fd)
    return row


def load_volume(row: dict, base_dir=".") -> VolumeSequence:
    base = Path(base_dir)
    data = read_tensor(base / row["data_path"], "float64")
    mask = read_tensor(base / row["mask_path"], "uint8")
    atlas = read_tensor(base / row["atlas_path"], "int32") if row.get("atlas_path") else None
    fd = np.array(load_fd(base / row["fd_path"])) if row.get("fd_path") else None
    if data.ndim != 4:
        raise TensorFileError(f"{row['data_path']}: expected 4 dims (X, Y, Z, N), got {data.shape}")
    return VolumeSequence(row["subject_id"], row["group"], data, mask, atlas, fd)


def write_manifest(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in MANIFEST_FIELDS})


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"subject_id", "group", "data_path", "mask_path"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
        return [dict(r) for r in reader]


def load_cohort(manifest_path, groups=None) -> list[VolumeSequence]:
    base = Path(manifest_path).parent
    rows = read_manifest(manifest_path)
    return [load_volume(r, base) for r in rows if groups is None or r["group"] in groups]


def save_fd(path, fd) -> None:
    with open(path, "w") as fh:
        fh.writelines(f"{float(v)!r}\n" for v in fd)


def load_fd(path) -> list[float]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            try:
                out.append(float(s))
            except ValueError:
                raise ValueError(f"{path}: line {lineno} is not a number: {s!r}") from None
    return out


# -- preprocessing -----------------------------------------------------------

def minmax_scale(vol: VolumeSequence) -> VolumeSequence:
    """Scale every voxel's time series to [0, 1]; constant voxels become 0."""
    d = vol.data
    lo = d.min(axis=-1, keepdims=True)
    span = d.max(axis=-1, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (d - lo) / safe, 0.0)
    return _replace(vol, data=scaled)


def apply_mask(vol: VolumeSequence) -> VolumeSequence:
    return _replace(vol, data=vol.data * vol.mask[..., None])


def _replace(vol: VolumeSequence, **changes) -> VolumeSequence:
    fields = dict(subject_id=vol.subject_id, group=vol.group, data=vol.data, mask=vol.mask,
                  atlas=vol.atlas, fd=vol.fd, scrubbed=vol.scrubbed)
    fields.update(changes)
    return VolumeSequence(**fields)


def segment_windows(n_frames, T: int, length: int | None = None) -> list[range]:
    """Disjoint consecutive windows of ``length`` (default ``T + 1``) frames from frame 0.

    ``n_frames`` may be a frame count or a :class:`VolumeSequence`. The
    trailing remainder is dropped.
    """
    if isinstance(n_frames, VolumeSequence):
        n_frames = n_frames.n_frames
    length = T + 1 if length is None else length
    count = n_frames // length
    if count == 0:
        log.warning("%d frames cannot hold a single %d-frame window", n_frames, length)
    return [range(k * length, (k + 1) * length) for k in range(count)]


def padded_size(n: int, levels: int) -> int:
    d = 2 ** levels
    return -(-n // d) * d


@dataclass
class SliceClip:
    subject_id: str
    z_index: int
    window_start: int
    frames: np.ndarray        # (1, H, W, L)
    mask_slice: np.ndarray    # (H, W)
    offset: tuple = (0, 0)    # top-left of the source slice inside the padded frame
    source_hw: tuple = field(default=(0, 0))

    def crop(self, arr: np.ndarray) -> np.ndarray:
        """Cut the padded ``(H, W, ...)`` array back to source slice coordinates."""
        oh, ow = self.offset
        h, w = self.source_hw
        return arr[oh:oh + h, ow:ow + w]


def extract_axial_clips(vol: VolumeSequence, windows, levels: int = 2,
                        target_hw: tuple | None = None) -> list[SliceClip]:
    """One clip per (window, z) with non-empty mask, zero-padded symmetrically."""
    X, Y, Z, _ = vol.data.shape
    th, tw = target_hw or (padded_size(X, levels), padded_size(Y, levels))
    oh, ow = (th - X) // 2, (tw - Y) // 2
    clips = []
    for win in windows:
        seg = vol.data[..., win.start:win.stop]
        for z in range(Z):
            m = vol.mask[:, :, z]
            if not m.any():
                continue
            frames = np.zeros((1, th, tw, len(win)))
            frames[0, oh:oh + X, ow:ow + Y] = seg[:, :, z]
            mask = np.zeros((th, tw), dtype=np.uint8)
            mask[oh:oh + X, ow:ow + Y] = m
            clips.append(SliceClip(vol.subject_id, z, win.start, frames, mask, (oh, ow), (X, Y)))
    return clips


def preprocess(vol: VolumeSequence) -> VolumeSequence:
    return apply_mask(minmax_scale(vol))


# -- synthetic cohort --------------------------------------------------------

@dataclass
class SynthConfig:
    n_control: int = 8
    n_patient: int = 8
    X: int = 16
    Y: int = 16
    Z: int = 4
    N: int = 64
    seed: int = 0
    anomaly_strength: float = 1.0
    n_blobs: int = 6
    noise_sigma: float = 0.02
    min_period: float = 8.0
    max_period: float = 24.0
    block: tuple = (4, 4, 2)
    anomaly_regions: tuple | None = None
    first_subject: int = 0


def ellipsoid_mask(shape) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    r2 = sum(((g - (n - 1) / 2.0) / (0.5 * n)) ** 2 for g, n in zip(grids, shape))
    return (r2 <= 1.0).astype(np.uint8)


def block_atlas(shape, block, mask=None) -> np.ndarray:
    idx = [np.arange(n) // b for n, b in zip(shape, block)]
    nb = [-(-n // b) for n, b in zip(shape, block)]
    lab = (idx[0][:, None, None] * nb[1] * nb[2] + idx[1][None, :, None] * nb[2]
           + idx[2][None, None, :] + 1).astype(np.int32)
    if mask is not None:
        lab = lab * (mask > 0)
    return lab


def default_anomaly_regions(atlas: np.ndarray) -> tuple:
    """The eighth of the labels with the most voxels (ties to the smaller label)."""
    labels, counts = np.unique(atlas[atlas > 0], return_counts=True)
    k = max(1, -(-len(labels) // 8))
    order = np.lexsort((labels, -counts))
    return tuple(int(v) for v in sorted(labels[order[:k]]))


def _band_limited(rng, n_frames, n_series, cfg: SynthConfig) -> np.ndarray:
    t = np.arange(n_frames)
    out = np.zeros((n_series, n_frames))
    for _ in range(2):
        period = rng.uniform(cfg.min_period, cfg.max_period, size=(n_series, 1))
        phase = rng.uniform(0, 2 * np.pi, size=(n_series, 1))
        amp = rng.uniform(0.5, 1.0, size=(n_series, 1))
        out += amp * np.sin(2 * np.pi * t / period + phase)
    return out


def _phase_scramble(rng, series: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(series, axis=-1)
    phases = rng.uniform(0, 2 * np.pi, size=spec.shape)
    phases[..., 0] = 0.0
    return np.fft.irfft(np.abs(spec) * np.exp(1j * phases), n=series.shape[-1], axis=-1)


def _high_freq_noise(rng, shape) -> np.ndarray:
    white = rng.normal(size=shape)
    spec = np.fft.rfft(white, axis=-1)
    freqs = np.fft.rfftfreq(shape[-1])
    spec[..., freqs < 0.25] = 0.0
    hf = np.fft.irfft(spec, n=shape[-1], axis=-1)
    return hf / (hf.std(axis=-1, keepdims=True) + 1e-12)


def synth_fd(rng, n_frames: int) -> np.ndarray:
    """Frame-wise displacement: small baseline jitter with occasional spikes (mm)."""
    fd = np.abs(rng.normal(0.12, 0.05, size=n_frames))
    spikes = rng.random(n_frames) < 0.05
    fd[spikes] += rng.uniform(0.5, 1.5, size=int(spikes.sum()))
    return fd


def synth_subject(cfg: SynthConfig, group: str, index: int, mask, atlas, regions) -> VolumeSequence:
    index = cfg.first_subject + index
    ss = np.random.SeedSequence([cfg.seed, GROUPS.index(group), index])
    base_ss, anomaly_ss, fd_ss = ss.spawn(3)
    rng = np.random.default_rng(base_ss)
    shape = (cfg.X, cfg.Y, cfg.Z)
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    blobs = np.empty((cfg.n_blobs,) + shape)
    for k in range(cfg.n_blobs):
        center = [rng.uniform(0, n - 1) for n in shape]
        width = [rng.uniform(0.25, 0.45) * n for n in shape]
        blobs[k] = np.exp(-0.5 * sum(((g - c) / w) ** 2 for g, c, w in zip(grids, center, width)))
    temporal = _band_limited(rng, cfg.N, cfg.n_blobs, cfg)
    raw = np.tensordot(blobs, temporal, axes=(0, 0))   # (X, Y, Z, N)

    if group == "patient" and cfg.anomaly_strength > 0:
        arng = np.random.default_rng(anomaly_ss)
        s = cfg.anomaly_strength
        sel = np.isin(atlas, regions) & (mask > 0)
        series = raw[sel]
        scale = series.std(axis=-1, keepdims=True)
        perturbed = ((1 - s) * series + s * _phase_scramble(arng, series)
                     + s * scale * _high_freq_noise(arng, series.shape))
        raw[sel] = perturbed

    raw = raw + rng.normal(0.0, cfg.noise_sigma, size=raw.shape)
    fd = synth_fd(np.random.default_rng(fd_ss), cfg.N)
    sid = f"{group[:3]}{index:03d}"
    vol = VolumeSequence(sid, group, raw, mask.copy(), atlas.copy(), fd)
    return preprocess(vol)


def synth_cohort(cfg: SynthConfig) -> list[VolumeSequence]:
    """Seeded stand-in cohort of controls followed by patients.

    Each subject draws from its own seed stream keyed by ``(seed, group,
    index)``, so controls do not depend on ``n_patient`` or
    ``anomaly_strength`` and patients differ from healthy dynamics only through
    the planted regional perturbation.
    """
    if min(cfg.X, cfg.Y, cfg.Z, cfg.N) < 1:
        raise ValueError("volume dimensions must be positive")
    shape = (cfg.X, cfg.Y, cfg.Z)
    mask = ellipsoid_mask(shape)
    atlas = block_atlas(shape, cfg.block, mask)
    regions = cfg.anomaly_regions or default_anomaly_regions(atlas)
    vols = [synth_subject(cfg, "control", i, mask, atlas, regions) for i in range(cfg.n_control)]
    vols += [synth_subject(cfg, "patient", i, mask, atlas, regions) for i in range(cfg.n_patient)]
    return vols


def planted_regions(cfg: SynthConfig) -> tuple:
    shape = (cfg.X, cfg.Y, cfg.Z)
    mask = ellipsoid_mask(shape)
    return cfg.anomaly_regions or default_anomaly_regions(block_atlas(shape, cfg.block, mask))
