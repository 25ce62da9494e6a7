"""End-to-end acceptance properties on seeded synthetic cohorts.

Each test prints one ``criterion N [PASS|FAIL]`` line (also collected into the
pytest terminal summary). Trained networks are cached per seed and shared by
criteria 3 to 6, so running the whole module trains each network once.
"""

import csv
import hashlib
import json
import math
import time
from functools import lru_cache

import numpy as np
import pytest
from scipy.integrate import quad

from conftest import report_criterion
from rsdyn import stats
from rsdyn.baselines import spline_extrapolate_next, spline_fit_natural, spline_interpolate_missing
from rsdyn.cli import main
from rsdyn.data import SynthConfig, extract_axial_clips, planted_regions, segment_windows, synth_cohort
from rsdyn.gradcheck import run_suite
from rsdyn.models import ModelSpec, build
from rsdyn.optim import TrainConfig, evaluate, train
from rsdyn.scorers import BaselineScorer

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2, 3, 4)
T = 8
N_TRAIN, N_TEST = 16, 8
# one architecture size and one optimizer setting shared by every network
NET = dict(channels=(6, 12), bottleneck=12, activation="tanh")
FIT = dict(epochs=20, batch_size=8, lr=3e-3)
AE_LENGTHS = (4, 6, 8)
DETECT = dict(n_control=10, n_patient=10, first_subject=200)


def clips_of(vols, length):
    return [c for v in vols for c in extract_axial_clips(v, segment_windows(v.n_frames, length))]


@lru_cache(maxsize=None)
def cohorts(seed):
    train_v = synth_cohort(SynthConfig(n_control=N_TRAIN, n_patient=0, seed=seed))
    test_v = synth_cohort(SynthConfig(n_control=N_TEST, n_patient=0, seed=seed, first_subject=100))
    return train_v, test_v


@lru_cache(maxsize=None)
def trained(kind, seed):
    """Network of ``kind`` trained on the seed's control cohort, with its CPU seconds."""
    train_v, _ = cohorts(seed)
    t0 = time.process_time()
    net = build(ModelSpec(kind=kind, T=T, **NET), seed)
    net, _ = train(net, clips_of(train_v, T), TrainConfig(seed=seed, **FIT))
    return net, time.process_time() - t0


@lru_cache(maxsize=None)
def detection_scores(kind, seed, strength):
    net, _ = trained(kind, seed)
    vols = synth_cohort(SynthConfig(seed=seed, anomaly_strength=strength, **DETECT))
    return [stats.score_subject(net, v) for v in vols], vols


# -- 1 -----------------------------------------------------------------------

def test_criterion_1_gradient_suite():
    results, seconds = run_suite(seed=0, tolerance=1e-4)
    worst = max(results, key=lambda r: r.max_rel_error)
    failed = [r.name for r in results if not r.passed]
    ok = not failed and seconds < 120
    report_criterion(1, "gradient suite", ok,
                     f"{len(results) - len(failed)}/{len(results)} checks pass, worst {worst.name} "
                     f"{worst.max_rel_error:.1e}, {seconds:.0f} s (limit 120 s)")
    assert ok, failed


# -- 2 -----------------------------------------------------------------------

def test_criterion_2_baseline_oracles():
    rng = np.random.default_rng(0)
    lin_err = 0.0
    for _ in range(50):
        a, b, n = rng.uniform(-1, 1), rng.uniform(-0.1, 0.1), int(rng.integers(3, 30))
        y = a + b * np.arange(n)
        lin_err = max(lin_err, abs(spline_fit_natural(y)(n) - (a + b * n)))
        ramp = np.clip(0.2 + 0.01 * np.arange(n + 2), 0, 1)
        lin_err = max(lin_err, abs(spline_extrapolate_next(ramp[:n]) - ramp[n]),
                      abs(spline_interpolate_missing(ramp[:n], ramp[n + 1]) - ramp[n]))
    # hand-solved natural spline through [0, 1, 0, 1]: [4 1; 1 4] m = [-12, 12]
    knot_err = np.abs(spline_fit_natural([0.0, 1.0, 0.0, 1.0]).m - [0.0, -4.0, 4.0, 0.0]).max()
    vols = synth_cohort(SynthConfig(n_control=4, n_patient=0, seed=0))
    mse = {}
    for method in ("interpolate", "extrapolate"):
        sc = BaselineScorer(method, T)
        mse[method] = evaluate(sc, [c for v in vols for c in extract_axial_clips(
            v, segment_windows(v.n_frames, T, sc.window_length))])[0]
    ok = lin_err < 1e-10 and knot_err < 1e-12 and mse["interpolate"] < mse["extrapolate"]
    report_criterion(2, "baseline oracles", ok,
                     f"linear {lin_err:.1e}, 4-knot {knot_err:.1e}, interpolation MSE "
                     f"{mse['interpolate']:.5f} vs extrapolation {mse['extrapolate']:.5f}")
    assert ok


# -- 3 -----------------------------------------------------------------------

def test_criterion_3_method_ordering():
    rows, cpu, wins = [], 0.0, 0
    for seed in SEEDS:
        _, test_v = cohorts(seed)
        test = clips_of(test_v, T)
        nets = []
        for kind in ("recurrent_unet", "unet2d"):
            net, secs = trained(kind, seed)       # training CPU time is measured inside
            cpu += secs
            nets.append(net)
        t0 = time.process_time()
        mse = [evaluate(net, test)[0] for net in nets]
        mse += [evaluate(BaselineScorer(method, T), test)[0] for method in ("extrapolate", "copy")]
        cpu += time.process_time() - t0
        ordered = all(a < b for a, b in zip(mse, mse[1:]))
        wins += ordered
        rows.append(f"seed {seed}: " + " < ".join(f"{m:.5f}" for m in mse) + ("" if ordered else " (out of order)"))
    for r in rows:
        print("  " + r)
    ok = wins >= 4 and cpu < 15 * 60
    report_criterion(3, "recurrent U-Net < U-Net < extrapolation < copy", ok,
                     f"ordered in {wins}/5 seeds, {cpu / 60:.1f} CPU min (limit 15)")
    assert wins >= 4
    assert cpu < 15 * 60


# -- 4 -----------------------------------------------------------------------

def test_criterion_4_autoencoder_length_trend():
    wins, rows = 0, []
    for seed in SEEDS:
        net, _ = trained("recurrent_autoencoder", seed)
        _, test_v = cohorts(seed)
        mse = [evaluate(net.with_T(L), clips_of(test_v, L))[0] for L in AE_LENGTHS]
        trend = all(a >= b for a, b in zip(mse, mse[1:]))
        wins += trend
        rows.append(f"seed {seed}: " + ", ".join(f"T={L} {m:.5f}" for L, m in zip(AE_LENGTHS, mse)))
    for r in rows:
        print("  " + r)
    ok = wins >= 4
    report_criterion(4, "autoencoder MSE non-increasing in T", ok, f"{wins}/5 seeds")
    assert ok


# -- 5 -----------------------------------------------------------------------

def test_criterion_5_anomaly_detection():
    seed = SEEDS[0]
    ok, parts = True, []
    for kind in ("recurrent_unet", "recurrent_autoencoder"):
        for strength in (1.0, 0.0):
            scores, _ = detection_scores(kind, seed, strength)
            rep = stats.group_report([s.group for s in scores], [s.mean_error for s in scores])
            if strength == 1.0:
                good = rep.auc >= 0.9 and rep.p_value < 0.01
            else:
                good = 0.3 <= rep.auc <= 0.7
            ok &= good
            parts.append(f"{kind} s={strength:g} AUC {rep.auc:.2f} p {rep.p_value:.1e}")
    report_criterion(5, "anomaly detection", ok, "; ".join(parts))
    assert ok


# -- 6 -----------------------------------------------------------------------

def test_criterion_6_regional_fdr():
    planted = set(planted_regions(SynthConfig(**{k: v for k, v in DETECT.items()})))
    wins, copy_wins, rows = 0, 0, []
    for seed in SEEDS:
        scores, vols = detection_scores("recurrent_unet", seed, 1.0)
        result = stats.regional_analysis(scores, vols[0].atlas, vols[0].mask, q=0.05)
        passing = set(result.passing())
        exact = passing == planted
        wins += exact
        # purely voxel-local reference: no spatial coupling between regions
        local = [stats.score_subject(BaselineScorer("copy", T), v) for v in vols]
        copy_pass = set(stats.regional_analysis(local, vols[0].atlas, vols[0].mask, q=0.05).passing())
        copy_wins += copy_pass == planted
        rows.append(f"seed {seed}: passing {sorted(passing)}, copy baseline {sorted(copy_pass)}")
    for r in rows:
        print("  " + r)
    ok = wins >= 4
    report_criterion(6, "only planted regions pass BH-FDR", ok,
                     f"planted {sorted(planted)}, exact in {wins}/5 seeds "
                     f"(copy baseline exact in {copy_wins}/5)")
    assert ok


# -- 7 -----------------------------------------------------------------------

def _t_pdf(x, df):
    return math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)
                    - 0.5 * math.log(df * math.pi) - (df + 1) / 2 * math.log1p(x * x / df))


def _brute_bh(p, q):
    m = len(p)
    order = sorted(range(m), key=lambda i: (p[i], i))
    k = max((j for j in range(1, m + 1) if p[order[j - 1]] <= j * q / m), default=0)
    out = [False] * m
    for i in order[:k]:
        out[i] = True
    return out


def test_criterion_7_statistics_oracles():
    rng = np.random.default_rng(7)
    auc_ok = True
    for _ in range(100):
        pos = rng.integers(0, 8, size=rng.integers(1, 12))
        neg = rng.integers(0, 8, size=rng.integers(1, 12))
        brute = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg) / (pos.size * neg.size)
        auc_ok &= stats.roc_auc(pos, neg) == brute
    p_err = 0.0
    for _ in range(50):
        a, b = rng.normal(size=rng.integers(2, 15)), rng.normal(0.7, size=rng.integers(2, 15))
        t, p = stats.ttest_unpaired(a, b)
        df = a.size + b.size - 2
        ref = 2 * quad(_t_pdf, abs(t), math.inf, args=(df,), epsabs=1e-14, epsrel=1e-12)[0]
        p_err = max(p_err, abs(p - ref))
    bh_ok = True
    for _ in range(100):
        p = rng.uniform(1e-5, 1, size=rng.integers(1, 25)) ** rng.uniform(1, 4)
        bh_ok &= stats.bh_fdr(p, 0.05).tolist() == _brute_bh(p.tolist(), 0.05)
    rejections = sum(stats.ttest_unpaired(rng.normal(size=12), rng.normal(size=12))[1] < 0.05
                     for _ in range(1000)) / 1000
    ok = auc_ok and p_err < 1e-6 and bh_ok and 0.03 <= rejections <= 0.07
    report_criterion(7, "statistics oracles", ok,
                     f"AUC {'ok' if auc_ok else 'mismatch'}, max p error {p_err:.1e}, "
                     f"BH {'ok' if bh_ok else 'mismatch'}, null rejection rate {rejections:.3f}")
    assert ok


# -- 8 -----------------------------------------------------------------------

def test_criterion_8_motion_control():
    # 20 subjects x 28 copy-baseline target frames, minus scrubbed frames
    n_seeds, good, smallest_n = 100, 0, None
    for seed in range(n_seeds):
        vols = synth_cohort(SynthConfig(n_control=20, n_patient=0, X=8, Y=8, Z=2, N=57, seed=seed))
        scores = [stats.score_subject(BaselineScorer("copy", 1), v) for v in vols]
        m = stats.motion_correlation(scores, vols)
        smallest_n = m.frame_n if smallest_n is None else min(smallest_n, m.frame_n)
        good += abs(m.frame_r) < 0.1 and m.frame_n >= 500
    ok = good >= 0.95 * n_seeds
    report_criterion(8, "motion control", ok,
                     f"|r| < 0.1 in {good}/{n_seeds} seeds, at least {smallest_n} frames per seed")
    assert ok


# -- 9 -----------------------------------------------------------------------

def _digest(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "run.json"}


def test_criterion_9_reproducibility(tmp_path):
    small = ["--t", "3", "--channels", "2,3", "--bottleneck", "3", "--epochs", "2", "--batch", "4"]
    runs = {
        "synth": ["synth", "--controls", "4", "--patients", "4", "--x", "8", "--y", "8", "--z", "2",
                  "--frames", "16", "--seed", "3"],
        "train_ru": ["train", "--model", "recurrent_unet", "--data", "{synth}", *small],
        "train_u2": ["train", "--model", "unet2d", "--data", "{synth}", *small],
        "train_ae": ["train", "--model", "autoencoder", "--data", "{synth}", *small],
        "score_ru": ["score", "--weights", "{train_ru}/weights.vxw", "--data", "{synth}"],
        "score_ae": ["score", "--weights", "{train_ae}/weights.vxw", "--data", "{synth}", "--t", "4"],
        "baseline": ["baseline", "--method", "interpolate", "--data", "{synth}", "--t", "3"],
        "stats": ["stats", "--scores", "{score_ru}/scores.csv", "--motion-data", "{synth}"],
        "regional": ["regional", "--scores", "{score_ru}/scores.csv", "--data", "{synth}"],
    }
    dirs = {}
    for threads in (1, 2):
        base = tmp_path / f"threads{threads}"
        for name, argv in runs.items():
            out = base / name
            argv = [a.format(**{k: str(v) for k, v in dirs.get(threads, {}).items()}) for a in argv]
            assert main(["--threads", str(threads), *argv, "--out", str(out)]) == 0, name
            dirs.setdefault(threads, {})[name] = out
    replay_ok = True
    for name, out in dirs[1].items():
        again = tmp_path / "replay" / name
        assert main(["replay", str(out / "run.json"), "--out", str(again)]) == 0, name
        replay_ok &= _digest(again) == _digest(out)
    max_diff = 0.0
    for name in ("score_ru", "score_ae", "baseline"):
        a, b = ([float(r["mean_error"]) for r in csv.DictReader(open(dirs[t][name] / "scores.csv"))] for t in (1, 2))
        max_diff = max(max_diff, float(np.abs(np.subtract(a, b)).max()))
    ra, rb = (json.loads((dirs[t]["stats"] / "report.json").read_text()) for t in (1, 2))
    max_diff = max(max_diff, abs(ra["t"] - rb["t"]), abs(ra["auc"] - rb["auc"]))
    ok = replay_ok and max_diff < 1e-10
    report_criterion(9, "reproducibility", ok,
                     f"{len(runs)} pipeline steps replay {'bit-identically' if replay_ok else 'with differences'}, "
                     f"max difference across thread counts {max_diff:.1e}")
    assert ok
