"""
Evaluation metrics
==================

MPJPE, scale-aligned N-MPJPE, Procrustes-aligned PA-MPJPE, N-PCK and AUC on
noisy copies of synthetic poses.
"""
import numpy as np

from epochpose.data import SyntheticConfig, generate
from epochpose.metrics import EvalReport

ds = generate(SyntheticConfig(count=50, seed=3))
rng = np.random.default_rng(0)
pred = 1.1 * ds.y_gt + rng.normal(size=ds.y_gt.shape) * 40.0

report = EvalReport.compute(pred, ds.y_gt)
for name, value in report.aggregate().items():
    print(f"{name:10s} {value:8.3f}")

# a rotated, scaled and shifted copy is perfect after alignment
c, s = np.cos(0.3), np.sin(0.3)
R = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
copy = 0.8 * ds.y_gt @ R.T + 250.0
print("PA-MPJPE of similarity copies:", EvalReport.compute(copy, ds.y_gt).aggregate()["pa_mpjpe"])
