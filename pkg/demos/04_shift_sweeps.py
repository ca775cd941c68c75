"""Gradual distribution shift: rotations and corruptions.

A circuit trained on small synthetic images is evaluated on increasingly
rotated and increasingly noisy versions of its test set.  The dropout-moment
posterior assigns higher predictive entropy the further the data drifts,
while classification at zero shift is untouched.

Takes about a minute.  Run with:  python demos/04_shift_sweeps.py
"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))
from conftest import band_code_images  # the desk-scale image fixture

from circuq import Dataset, EvalConfig, RatConfig, TrainConfig, build_rat, fit
from circuq.evaluation import corrupt_sweep, perturb_sweep

ds = band_code_images()
rng = np.random.default_rng(3)
perm = rng.permutation(ds.num_rows)
train = Dataset(ds.features[perm[:900]], ds.labels[perm[:900]])
test = Dataset(ds.features[perm[900:]], ds.labels[perm[900:]])

circuit = build_rat(RatConfig(num_sums=5, num_input_dists=5, depth=3,
                              num_repetitions=2, num_classes=5,
                              num_variables=64, rng_seed=11))
trained, history = fit(circuit, train.features, train.labels,
                       TrainConfig(epochs=100, batch_size=100, learning_rate=2e-2, rng_seed=0))
print(f"test accuracy at zero shift: {history.epochs[-1][2]:.3f}")

angles = [0, 15, 30, 45, 60, 75, 90]
print("\nrotation sweep (angle: mean entropy / accuracy / predicted-class std)")
for method, config in (("plain", EvalConfig(method="plain")),
                       ("moments", EvalConfig(method="tdi", p=0.2))):
    points = perturb_sweep(trained, test, angles, config, width=8, height=8)
    row = "  ".join(f"{pt.key:.0f}: {pt.mean_entropy:.2f}/{pt.accuracy:.2f}/{pt.mean_std:.3f}"
                    for pt in points)
    print(f"{method:8s} {row}")

print("\nnoise corruption sweep (severity: mean entropy / accuracy)")
points = corrupt_sweep(trained, test, ["gaussian_noise"], [0, 1, 2, 3, 4, 5],
                       EvalConfig(method="tdi", p=0.2), seed=5)
print("  ".join(f"{pt.key[1]}: {pt.mean_entropy:.2f}/{pt.accuracy:.2f}" for pt in points))
