"""Subject anomaly scores and group statistics.

Patients are the positive class; a larger error means more anomalous.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import VolumeSequence, extract_axial_clips, segment_windows

# -- distributions -----------------------------------------------------------

_TINY = 1e-300


def _beta_cf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, 10001):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """``P(|T| >= |t|)`` for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if math.isinf(t):
        return 0.0
    return min(1.0, betainc(0.5 * df, 0.5, df / (df + t * t)))


def t_cdf(t: float, df: float) -> float:
    half = 0.5 * t_two_sided_p(t, df)
    return 1.0 - half if t > 0 else half


# -- tests -------------------------------------------------------------------

def ttest_unpaired(a, b, equal_var: bool = True) -> tuple[float, float]:
    """Two-sample t statistic ``(mean(a) - mean(b)) / se`` and two-sided p.

    Pooled-variance Student test by default; ``equal_var=False`` gives Welch.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n1, n2 = a.size, b.size
    if n1 < 2 or n2 < 2:
        raise ValueError(f"each sample needs at least 2 values, got {n1} and {n2}")
    v1, v2 = a.var(ddof=1), b.var(ddof=1)
    diff = a.mean() - b.mean()
    if equal_var:
        df = n1 + n2 - 2
        pooled = ((n1 - 1) * v1 + (n2 - 1) * v2) / df
        if pooled <= 0:
            raise ValueError("zero pooled variance: t statistic undefined")
        se = math.sqrt(pooled * (1.0 / n1 + 1.0 / n2))
    else:
        s1, s2 = v1 / n1, v2 / n2
        if s1 + s2 <= 0:
            raise ValueError("zero variance in both samples: t statistic undefined")
        se = math.sqrt(s1 + s2)
        df = (s1 + s2) ** 2 / (s1 ** 2 / (n1 - 1) + s2 ** 2 / (n2 - 1))
    t = float(diff / se)
    return t, t_two_sided_p(t, df)


def pearson(x, y) -> tuple[float, float]:
    """Pearson r with two-sided p from ``t = r sqrt((n-2)/(1-r^2))``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    if n != y.size:
        raise ValueError(f"length mismatch: {n} vs {y.size}")
    if n < 3:
        raise ValueError(f"correlation test needs n >= 3, got {n}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("zero variance: correlation undefined")
    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return r, t_two_sided_p(t, n - 2)


def roc_auc(positives, negatives) -> float:
    """``P(pos > neg) + P(pos == neg) / 2`` by exhaustive pair counting."""
    pos = np.asarray(positives, dtype=np.float64)
    neg = np.asarray(negatives, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both groups need at least one score")
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (pos.size * neg.size))


def roc_auc_labeled(scores) -> float:
    """AUC from ``(group, value)`` pairs, patients positive."""
    pos = [v for g, v in scores if g == "patient"]
    neg = [v for g, v in scores if g == "control"]
    return roc_auc(pos, neg)


def bh_fdr(p_values, q: float = 0.05) -> np.ndarray:
    """Benjamini-Hochberg step-up decisions at level ``q``."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.size == 0:
        return np.zeros(0, dtype=bool)
    if np.any((p <= 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("p-values must lie in (0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    below = p[order] <= q * np.arange(1, m + 1) / m
    reject = np.zeros(m, dtype=bool)
    if below.any():
        k = int(np.nonzero(below)[0].max())
        reject[order[:k + 1]] = True
    return reject


def bonferroni(p_values, q: float = 0.05) -> np.ndarray:
    p = np.asarray(p_values, dtype=np.float64)
    return p <= q / max(p.size, 1)


# -- subject scores ----------------------------------------------------------

@dataclass
class SubjectScore:
    subject_id: str
    group: str
    mean_error: float
    per_frame_error: np.ndarray     # masked mean squared error per scored frame
    frame_indices: np.ndarray       # source frame of each per_frame_error entry
    per_voxel_error: np.ndarray     # (X, Y, Z) time-averaged squared error, 0 off-mask
    per_window_error: np.ndarray
    n_masked: int


def score_subject(model, vol: VolumeSequence, T: int | None = None,
                  batch_size: int = 64) -> SubjectScore:
    """Mean squared error of ``model`` over every window, slice and masked voxel.

    ``model`` is a network or a scorer (see :mod:`rsdyn.scorers`). Predictors
    are scored on each window's target frame, the autoencoder on all ``T``
    reconstructed frames.
    """
    from .scorers import as_scorer

    scorer = as_scorer(model)
    if T is not None and T != scorer.T:
        raise ValueError(f"scorer works on T={scorer.T}, got T={T}")
    levels = getattr(scorer, "levels", 0)
    windows = segment_windows(vol.n_frames, scorer.T, scorer.window_length)
    if not windows:
        raise ValueError(f"{vol.subject_id}: {vol.n_frames} frames hold no "
                         f"{scorer.window_length}-frame window")
    clips = extract_axial_clips(vol, windows, levels)
    n_masked = int(vol.mask.sum())
    X, Y, Z = vol.mask.shape
    F = len(scorer.target_offsets)
    voxel_sum = np.zeros((X, Y, Z))
    frame_sum = np.zeros((len(windows), F))
    win_index = {w.start: i for i, w in enumerate(windows)}
    for start in range(0, len(clips), batch_size):
        chunk = clips[start:start + batch_size]
        frames = np.stack([c.frames for c in chunk])
        pred, target = scorer.predict(frames)
        for c, p, t in zip(chunk, pred, target):
            m = c.crop(c.mask_slice).astype(np.float64)
            sq = c.crop((p - t) ** 2) * m[..., None]          # (X, Y, F)
            voxel_sum[:, :, c.z_index] += sq.sum(axis=-1)
            frame_sum[win_index[c.window_start]] += sq.sum(axis=(0, 1))
    n_scored = len(windows) * F
    per_frame = (frame_sum / n_masked).reshape(-1)
    frame_idx = np.array([w.start + off for w in windows for off in scorer.target_offsets])
    per_window = frame_sum.sum(axis=1) / (n_masked * F)
    return SubjectScore(
        subject_id=vol.subject_id,
        group=vol.group,
        mean_error=float(voxel_sum.sum() / (n_masked * n_scored)),
        per_frame_error=per_frame,
        frame_indices=frame_idx,
        per_voxel_error=voxel_sum / n_scored,
        per_window_error=per_window,
        n_masked=n_masked,
    )


def split_groups(scores) -> tuple[np.ndarray, np.ndarray]:
    pat = np.array([s.mean_error for s in scores if s.group == "patient"])
    con = np.array([s.mean_error for s in scores if s.group == "control"])
    return pat, con


# -- regional analysis -------------------------------------------------------

@dataclass
class RegionRow:
    region_id: int
    n_voxels: int
    mean_err_control: float
    mean_err_patient: float
    t: float
    p: float
    fdr_pass: bool
    neg_log10_p: float


@dataclass
class RegionalResult:
    rows: list
    excluded: dict = field(default_factory=dict)   # region_id -> reason

    def passing(self) -> list[int]:
        return [r.region_id for r in self.rows if r.fdr_pass]


def region_means(per_voxel_error: np.ndarray, atlas: np.ndarray, mask: np.ndarray) -> dict:
    inside = (mask > 0) & (atlas > 0)
    return {int(r): float(per_voxel_error[inside & (atlas == r)].mean())
            for r in np.unique(atlas[inside])}


def regional_analysis(scores, atlas: np.ndarray, mask: np.ndarray, q: float = 0.05,
                      equal_var: bool = True) -> RegionalResult:
    """Per-region patient-vs-control t-tests on region-averaged voxel errors,
    corrected across regions with Benjamini-Hochberg."""
    con = [s for s in scores if s.group == "control"]
    pat = [s for s in scores if s.group == "patient"]
    if len(con) < 2 or len(pat) < 2:
        raise ValueError(f"need >= 2 subjects per group, got {len(con)} controls, {len(pat)} patients")
    labels = sorted(int(r) for r in np.unique(atlas) if r > 0)
    inside = mask > 0
    excluded = {}
    stats = []
    for r in labels:
        sel = inside & (atlas == r)
        nvox = int(sel.sum())
        if nvox == 0:
            excluded[r] = "no voxels inside the mask"
            continue
        ec = np.array([s.per_voxel_error[sel].mean() for s in con])
        ep = np.array([s.per_voxel_error[sel].mean() for s in pat])
        try:
            t, p = ttest_unpaired(ep, ec, equal_var=equal_var)
        except ValueError as exc:
            excluded[r] = str(exc)
            continue
        stats.append((r, nvox, float(ec.mean()), float(ep.mean()), t, max(p, 1e-300)))
    reject = bh_fdr([s[5] for s in stats], q) if stats else np.zeros(0, dtype=bool)
    rows = [RegionRow(r, n, mc, mp, t, p, bool(rej), -math.log10(p))
            for (r, n, mc, mp, t, p), rej in zip(stats, reject)]
    return RegionalResult(rows, excluded)


# -- motion control ----------------------------------------------------------

@dataclass
class MotionReport:
    frame_r: float
    frame_p: float
    frame_n: int
    subject_r: float
    subject_p: float
    subject_n: int


def motion_correlation(scores, volumes) -> MotionReport:
    """Correlate errors with frame-wise displacement at frame and subject level.

    Frame-level pairs skip frames flagged as scrubbed.
    """
    by_id = {v.subject_id: v for v in volumes}
    fx, fy, sx, sy = [], [], [], []
    for s in scores:
        vol = by_id[s.subject_id]
        if vol.fd is None:
            raise ValueError(f"{s.subject_id}: no frame-wise displacement available")
        keep = ~np.asarray(vol.scrubbed, dtype=bool)[s.frame_indices]
        fx.extend(vol.fd[s.frame_indices][keep])
        fy.extend(s.per_frame_error[keep])
        sx.append(float(vol.fd[~np.asarray(vol.scrubbed, dtype=bool)].mean()))
        sy.append(s.mean_error)
    fr, fp = pearson(fx, fy)
    sr, sp = pearson(sx, sy)
    return MotionReport(fr, fp, len(fx), sr, sp, len(sx))


# -- group report and files --------------------------------------------------

@dataclass
class GroupReport:
    auc: float
    t_stat: float
    p_value: float
    n_control: int
    n_patient: int
    regional: RegionalResult | None = None

    def to_dict(self) -> dict:
        d = {"auc": self.auc, "t": self.t_stat, "p": self.p_value,
             "n_control": self.n_control, "n_patient": self.n_patient}
        if self.regional is not None:
            d["regional"] = [asdict(r) for r in self.regional.rows]
            d["excluded_regions"] = {str(k): v for k, v in self.regional.excluded.items()}
        return d


def group_report(groups, values, equal_var: bool = True) -> GroupReport:
    values = np.asarray(values, dtype=np.float64)
    groups = list(groups)
    pat = values[[g == "patient" for g in groups]]
    con = values[[g == "control" for g in groups]]
    auc = roc_auc(pat, con)
    t, p = ttest_unpaired(pat, con, equal_var=equal_var)
    return GroupReport(auc, t, p, int(con.size), int(pat.size))


def write_scores_csv(path, scores) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "group", "mean_error"])
        for s in scores:
            w.writerow([s.subject_id, s.group, repr(float(s.mean_error))])


def read_scores_csv(path) -> list[tuple[str, str, float]]:
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                out.append((row["subject_id"], row["group"], float(row["mean_error"])))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}: bad row at line {lineno}: {exc}") from None
    return out


def write_regional_csv(path, result: RegionalResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region_id", "mean_err_control", "mean_err_patient", "t", "p",
                    "fdr_pass", "neg_log10_p"])
        for r in result.rows:
            w.writerow([r.region_id, repr(r.mean_err_control), repr(r.mean_err_patient),
                        repr(r.t), repr(r.p), int(r.fdr_pass), repr(r.neg_log10_p)])


def write_report_json(path, report: GroupReport, extra: dict | None = None) -> None:
    d = report.to_dict()
    if extra:
        d.update(extra)
    with open(path, "w") as fh:
        json.dump(d, fh, indent=2, sort_keys=True)
        fh.write("\n")
