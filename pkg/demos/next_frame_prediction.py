"""Compare next-frame predictors on a synthetic cohort.

Trains a recurrent U-Net and a 2-D U-Net on healthy subjects, then reports
masked test MSE and mean per-frame Pearson r next to the copy and spline
baselines. Takes a few minutes on one CPU core.

    python3 demos/next_frame_prediction.py [seed]
"""

import sys
import time

from rsdyn.data import SynthConfig, extract_axial_clips, segment_windows, synth_cohort
from rsdyn.models import ModelSpec, build
from rsdyn.optim import TrainConfig, evaluate, train
from rsdyn.scorers import BaselineScorer

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
T = 8


def clips_of(vols, scorer_length=None):
    return [c for v in vols
            for c in extract_axial_clips(v, segment_windows(v.n_frames, T, scorer_length))]


train_vols = synth_cohort(SynthConfig(n_control=16, n_patient=0, seed=seed))
test_vols = synth_cohort(SynthConfig(n_control=8, n_patient=0, seed=seed, first_subject=100))
train_clips, test_clips = clips_of(train_vols), clips_of(test_vols)
print(f"{len(train_clips)} training clips, {len(test_clips)} test clips of {T + 1} frames")

rows = []
for kind in ("recurrent_unet", "unet2d"):
    t0 = time.time()
    spec = ModelSpec(kind=kind, channels=(6, 12), bottleneck=12, T=T, activation="tanh")
    net, hist = train(build(spec, seed), train_clips, TrainConfig(epochs=20, batch_size=8, lr=3e-3, seed=seed))
    print(f"{kind}: {net.n_parameters} parameters, final val MSE {hist.val_mse[-1]:.5f}, "
          f"{time.time() - t0:.0f} s")
    rows.append((kind, *evaluate(net, test_clips)))

for method in ("interpolate", "extrapolate", "copy"):
    sc = BaselineScorer(method, T)
    rows.append((method + ("*" if method == "interpolate" else ""),
                 *evaluate(sc, clips_of(test_vols, sc.window_length))))

print(f"\n{'method':<16}{'MSE':>10}{'r':>8}")
for name, mse, r in rows:
    print(f"{name:<16}{mse:>10.5f}{r:>8.3f}")
print("* interpolation also sees the frame after the target")
