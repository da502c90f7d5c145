"""
Command-line round trip
=======================

Write a simulated study to disk in the ingestion format, then drive the
``corrdiff`` command through validate, fit, infer and baseline.
"""
import json
import tempfile
from pathlib import Path

from corrdiff.cli import main
from corrdiff.io import write_sample
from corrdiff.simulate import SimParams, gen_parameters, make_rng, simulate_dataset

work = Path(tempfile.mkdtemp())
design = SimParams(p=8, alpha_prop=0.25, alpha_range=(0.7, 0.8), n_h=20, n_d=20, T=100, seed=2)
theta, alpha = gen_parameters(design, make_rng(2, 0))
manifest = write_sample(simulate_dataset(theta, alpha, design, make_rng(2, 1)), work / "data")
print("manifest:", manifest)

for command in ("validate", "fit", "infer", "baseline"):
    code = main([command, "--manifest", str(manifest), "--out", str(work / command)])
    print(f"corrdiff {command}: exit {code}, files {sorted(p.name for p in (work / command).iterdir())}")

info = json.loads((work / "infer" / "inference.json").read_text())
print("selected variables:", info["n_selected"])
print((work / "infer" / "inference.csv").read_text())
