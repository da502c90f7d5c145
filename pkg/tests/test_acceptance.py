"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line and then asserts the same condition.
Tolerances are fixed constants; none are tuned to the observed outcome.
"""
import itertools
import time

import numpy as np
import pytest

from corrdiff.cli import main
from corrdiff.corrmat import (
    corr_covariance,
    effective_df,
    group_average,
    vectorize,
)
from corrdiff.estimate import build_weights, fit, loss, loss_gradient_alpha
from corrdiff.infer import bh_adjust, fcr_level, wald_inference
from corrdiff.link import get_link
from corrdiff.simulate import (
    SimParams,
    experiment_driver,
    gen_parameters,
    gen_samples,
    make_rng,
    parametric_bootstrap,
    timing_slope,
)

from conftest import random_corr, record
from test_cli import make_dataset
from test_estimate import noiseless_sample, noisy_sample
from test_infer import bh_exhaustive, step_up_reject


def corr_cov_literal(rho):
    """Scalar loop over pairs, written directly from the printed entry formula."""
    p = rho.shape[0]
    pairs = [(i, j) for i in range(p) for j in range(i + 1, p)]
    out = np.zeros((len(pairs), len(pairs)))
    for a, (i, j) in enumerate(pairs):
        for b, (k, l) in enumerate(pairs):
            r = rho
            out[a, b] = (r[i, j] * r[k, l] / 2 * (r[i, k] ** 2 + r[i, l] ** 2 + r[j, k] ** 2 + r[j, l] ** 2)
                         - r[i, j] * (r[i, k] * r[i, l] + r[j, k] * r[j, l])
                         - r[k, l] * (r[i, k] * r[j, k] + r[i, l] * r[j, l])
                         + (r[i, k] * r[j, l] + r[i, l] * r[j, k]))
    return out


def test_criterion_01_covariance_oracle():
    start = time.perf_counter()
    worst_pair = 0.0
    for rho12 in np.linspace(-0.95, 0.95, 9):
        R = np.eye(4)
        R[0, 1] = R[1, 0] = rho12
        worst_pair = max(worst_pair, abs(corr_covariance(R)[0, 0] - (1 - rho12 ** 2) ** 2))
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(20):
        R = random_corr(int(rng.integers(2, 9)), rng)
        worst = max(worst, np.max(np.abs(corr_covariance(R) - corr_cov_literal(R))))
    elapsed = time.perf_counter() - start
    ok = worst_pair <= 1e-12 and worst <= 1e-12 and elapsed < 1.0
    record(1, ok, f"isolated pair err {worst_pair:.1e}, literal err {worst:.1e}, {elapsed:.2f}s")
    assert ok


def test_criterion_02_covariance_monte_carlo():
    start = time.perf_counter()
    theta, _ = gen_parameters(SimParams(p=4), make_rng(0, 0))
    C = corr_covariance(theta)
    R = gen_samples(theta, 2000, 2000, rng=make_rng(0, 1))
    E = 2000 * np.cov(vectorize(R).T)
    iu = np.triu_indices_from(C)
    err = np.abs(E - C)[iu]
    tol = np.maximum(0.10 * np.abs(C), 0.005)[iu]
    frac = float(np.mean(err <= tol))
    elapsed = time.perf_counter() - start
    ok = frac >= 0.95 and elapsed < 60
    record(2, ok, f"{frac:.0%} of {err.size} unique entries within tolerance (need 95%), {elapsed:.1f}s")
    assert ok


def test_criterion_03_effective_df_scaling():
    start = time.perf_counter()
    wins = 0
    for seed in range(50):
        theta, _ = gen_parameters(SimParams(p=4), make_rng(seed, 0))
        C = corr_covariance(theta)
        R = gen_samples(theta, 400, 100, ar=(0.5,), ma=(0.5,), rng=make_rng(seed, 1))
        cov = np.cov(vectorize(R).T)
        t_eff = effective_df(100, group_average(R))
        wins += np.linalg.norm(t_eff * cov - C) < np.linalg.norm(100 * cov - C)
    elapsed = time.perf_counter() - start
    ok = wins >= 45 and elapsed < 120
    record(3, ok, f"T_eff scaling closer in {wins}/50 seeds (need 45), {elapsed:.1f}s")
    assert ok


def test_criterion_04_exact_recovery():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        theta = random_corr(8, rng)
        alpha = rng.uniform(0.7, 1.1, 8)
        res = fit(noiseless_sample(theta, alpha))
        worst = max(worst, np.max(np.abs(res.alpha_hat - alpha)), np.max(np.abs(res.theta_hat - theta)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 30
    record(4, ok, f"max error {worst:.1e} over 20 instances, {elapsed:.1f}s")
    assert ok


def test_criterion_05_bias_shrinks():
    start = time.perf_counter()
    rows = experiment_driver("bias", {"n": (20, 80), "p": (16,), "reps": 30})
    med = {n: np.median([abs(r["bias"]) for r in rows if r["n"] == n]) for n in (20, 80)}
    elapsed = time.perf_counter() - start
    ok = med[80] < med[20] and med[80] <= 0.05 and elapsed < 600
    record(5, ok, f"median |bias| n=20: {med[20]:.4f}, n=80: {med[80]:.4f}, {elapsed:.0f}s")
    assert ok


@pytest.fixture(scope="module")
def calibration():
    design = SimParams(p=16, alpha_prop=0.2, alpha_range=(0.7, 1.1), n_h=50, n_d=50, T=100, seed=6)
    theta, alpha = gen_parameters(design, make_rng(6, 0))
    start = time.perf_counter()
    boot = parametric_bootstrap(theta, alpha, design, B=100, methods=("gee", "jackknife"))
    return boot, time.perf_counter() - start


def test_criterion_06_gee_calibration(calibration):
    boot, elapsed = calibration
    ratio = boot.sd_ratio("gee")
    frac = float(np.mean((ratio >= 0.80) & (ratio <= 1.10)))
    med = float(np.median(ratio))
    ok = frac >= 0.90 and med < 1.0 and elapsed < 45 * 60
    record(6, ok, f"{frac:.0%} of ratios in [0.80, 1.10], median {med:.3f}, B={len(boot.alpha_hats)}")
    assert ok


def test_criterion_07_jackknife_calibration(calibration):
    boot, elapsed = calibration
    ratio = boot.sd_ratio("jackknife")
    frac = float(np.mean((ratio >= 0.80) & (ratio <= 1.25)))
    ok = frac >= 0.90 and elapsed < 45 * 60
    record(7, ok, f"{frac:.0%} of ratios in [0.80, 1.25], median {np.median(ratio):.3f}, "
                  f"shared run {elapsed:.0f}s")
    assert ok


def test_criterion_08_imbalance():
    rows = experiment_driver("imbalance", {"n": 50, "p": 16, "fractions": (0.1, 0.5), "B": 30})
    med = {f: np.median([r["sd_ratio"] for r in rows if r["fraction"] == f]) for f in (0.1, 0.5)}
    ok = med[0.1] < med[0.5]
    record(8, ok, f"median GEE SD ratio at fraction 0.1: {med[0.1]:.3f}, at 0.5: {med[0.5]:.3f}")
    assert ok


def test_criterion_09_error_rates():
    rows = experiment_driver("error_rates", {"n": 50, "p": 16, "reps": 200, "inflate": (1.0, 1.1)})
    rates = {}
    for inflate in (1.0, 1.1):
        sel = [r for r in rows if r["inflate"] == inflate]
        rates[inflate] = (np.mean([r["bh_fdp"] for r in sel]), np.mean([r["bonferroni_fwer"] for r in sel]))
    fdr, fwer = rates[1.1]
    ok = fdr <= 0.07 and fwer <= 0.07
    raw = rates[1.0]
    record(9, ok, f"inflated FDR {fdr:.3f}, FWER {fwer:.3f}; uninflated FDR {raw[0]:.3f}, FWER {raw[1]:.3f}")
    assert ok


def test_criterion_10_power():
    q, reps = 0.05, 200
    rows = experiment_driver("power", {"n": 50, "p": 16, "reps": reps, "prop_nonnull": 0.1,
                                       "effects": (0.0, 0.1), "q": q})
    alt = [r for r in rows if r["effect"] == 0.1]
    diff = np.array([r["model_power"] - r["mu_power_variables"] for r in alt])
    se = diff.std(ddof=1) / np.sqrt(len(diff))
    null = [r for r in rows if r["effect"] == 0.0]
    band = 3 * np.sqrt(q * (1 - q) / reps)
    g_model = np.mean([r["model_global_reject"] for r in null])
    g_mu = np.mean([r["mu_global_reject"] for r in null])
    ok = diff.mean() >= 2 * se and abs(g_model - q) <= band and abs(g_mu - q) <= band
    record(10, ok, f"power gap {diff.mean():.3f} (2 SE = {2 * se:.3f}); null global rates "
                   f"model {g_model:.3f}, baseline {g_mu:.3f} (q +/- {band:.3f})")
    assert ok


def test_criterion_11_gradients():
    rng = np.random.default_rng(11)
    worst_loss = 0.0
    for link in ("multiplicative", "additive_quotient"):
        for _ in range(20):
            s, theta, alpha = noisy_sample(rng, p=int(rng.integers(3, 7)), link=link)
            w = build_weights(s)
            g = loss_gradient_alpha(theta, alpha, s, w, link)
            h = 1e-6
            fd = np.array([(loss(theta, alpha + h * e, s, w, link) - loss(theta, alpha - h * e, s, w, link))
                           / (2 * h) for e in np.eye(alpha.size)])
            worst_loss = max(worst_loss, np.max(np.abs(g - fd)) / max(np.max(np.abs(g)), 1e-8))
    worst_jac = 0.0
    for link in ("multiplicative", "additive_quotient"):
        model = get_link(link)
        for _ in range(20):
            p = int(rng.integers(3, 7))
            theta = random_corr(p, rng)
            alpha = rng.uniform(0.8, 1.1, p) if link == "multiplicative" else rng.uniform(-0.1, 0.2, p)
            J = model.jacobian(theta, alpha)
            h = 1e-6
            fd = np.column_stack([(model.apply_vec(vectorize(theta), alpha + h * e)
                                   - model.apply_vec(vectorize(theta), alpha - h * e)) / (2 * h)
                                  for e in np.eye(p)])
            worst_jac = max(worst_jac, np.max(np.abs(J - fd)) / max(np.max(np.abs(J)), 1e-8))
    ok = worst_loss <= 1e-5 and worst_jac <= 1e-6
    record(11, ok, f"loss gradient rel err {worst_loss:.1e}, link Jacobian rel err {worst_jac:.1e}")
    assert ok


def test_criterion_12_timing():
    rows = experiment_driver("timing", {"p": (8, 16, 24, 32, 48), "n": 50, "reps": 1})
    slope = timing_slope(rows)
    in_band = 3.5 <= slope <= 5.5
    ok = slope > 2
    record(12, ok, f"log-log slope {slope:.2f} (report band [3.5, 5.5]: {'inside' if in_band else 'outside'})")
    assert ok


def _artifacts(directory):
    skip = {"manifest.json", "diagnostics.jsonl"}
    out = {}
    for path in sorted(directory.iterdir()):
        if path.name in skip:
            continue
        # simulate file names carry a UTC stamp, so key them by suffix
        key = path.suffix if directory.name == "sim" else path.name
        out[key] = path.read_bytes()
    return out


def test_criterion_13_determinism(tmp_path, monkeypatch):
    manifest, _ = make_dataset(tmp_path / "data", p=6, n_h=8, n_d=8, seed=3)
    cfg = tmp_path / "grid.cfg"
    cfg.write_text("n = 10\np = 4\nreps = 3\n")
    runs = []
    for threads in ("1", "3", "1"):
        monkeypatch.setenv("CORRDIFF_THREADS", threads)
        base = tmp_path / f"run{len(runs)}"
        assert main(["fit", "--manifest", str(manifest), "--seed", "9", "--out", str(base / "fit")]) == 0
        assert main(["infer", "--manifest", str(manifest), "--variance", "jackknife", "--seed", "9",
                     "--out", str(base / "infer")]) == 0
        assert main(["simulate", "--experiment", "bias", "--config", str(cfg), "--seed", "9",
                     "--out", str(base / "sim")]) == 0
        runs.append({sub: _artifacts(base / sub) for sub in ("fit", "infer", "sim")})
    n_files = sum(len(v) for v in runs[0].values())
    ok = n_files > 0 and runs[0] == runs[1] == runs[2]
    record(13, ok, f"{n_files} artifacts byte-identical across threads 1/3/1")
    assert ok


def test_criterion_14_bh_fcr_oracle():
    grid = np.round(np.arange(0.01, 1.0, 0.01), 2)
    rng = np.random.default_rng(14)
    checked = 0
    worst = 0.0
    agree = True
    for m in range(1, 7):
        vectors = itertools.product(grid, repeat=m) if m <= 2 else (
            tuple(rng.choice(grid, m)) for _ in range(2000))
        for p in vectors:
            p = np.array(p)
            adj = bh_adjust(p)
            worst = max(worst, np.max(np.abs(adj - bh_exhaustive(p))))
            agree &= bool(np.array_equal(adj <= 0.05, step_up_reject(p, 0.05)))
            checked += 1
    fcr_ok = True
    n = 10
    for R in range(1, n + 1):
        alpha = np.ones(n)
        alpha[:R] = 0.5
        table = wald_inference(alpha, np.eye(n) * 1e-4, q=0.05, inflate=1.0)
        fcr_ok &= table.n_selected == R
        fcr_ok &= bool(np.allclose(table.ci_level[:R], 1 - R * 0.05 / n))
        fcr_ok &= fcr_level(R, 0.05, n) == pytest.approx(1 - R * 0.05 / n)
    ok = worst <= 1e-15 and agree and fcr_ok
    record(14, ok, f"{checked} p-value vectors, max BH deviation {worst:.1e}; FCR levels "
                   f"{'match' if fcr_ok else 'differ'} for R = 1..{n}")
    assert ok
