"""
Simulation experiments
======================

Small versions of the bias, calibration and timing studies. The command
line ``corrdiff simulate`` runs the same drivers with full grids.
"""
import numpy as np

from corrdiff.simulate import experiment_driver, timing_slope

rows = experiment_driver("bias", {"n": (20, 80), "p": (8,), "reps": 5})
for n in (20, 80):
    bias = [abs(r["bias"]) for r in rows if r["n"] == n]
    print(f"n = 2 x {n}: median |alpha_hat - alpha| = {np.median(bias):.4f}")

rows = experiment_driver("gee_calibration", {"n": (30,), "p": (8,), "B": 20})
ratio = np.array([r["sd_ratio"] for r in rows])
print("GEE SD / empirical SD per variable:", np.round(ratio, 2))

rows = experiment_driver("timing", {"p": (8, 16, 24, 32), "n": 20})
for r in rows:
    print(f"p = {r['p']:2d}: {r['seconds']:.3f} s")
print(f"log-log slope: {timing_slope(rows):.2f}")
