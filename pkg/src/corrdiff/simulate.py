"""Simulation of two-group correlation-matrix data and the experiment drivers.

Random streams are ``numpy`` Generators on the counter-based Philox bit
generator, keyed by ``(seed, *stream_keys)`` through ``SeedSequence`` so that
every replicate and subject draws from its own reproducible stream no matter
how work is scheduled.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg, signal

from .corrmat import TwoGroupSample, pair_indices, scale_to_correlation
from .errors import InvalidCorrelationMatrix, NumericalError, ReplicateFailure
from .estimate import fit
from .infer import bonferroni_adjust, gee_covariance, jackknife, mass_univariate, wald_inference
from .link import get_link

log = logging.getLogger(__name__)

RNG_ALGORITHM = "Philox4x64"


def make_rng(seed, *keys):
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class SimParams:
    p: int = 16
    alpha_prop: float = 0.2
    alpha_range: tuple = (0.7, 1.1)
    n_h: int = 50
    n_d: int = 50
    T: int = 100
    ar: tuple = ()
    ma: tuple = ()
    seed: int = 0

    def __post_init__(self):
        self.alpha_range = tuple(float(a) for a in self.alpha_range)
        self.ar = tuple(float(a) for a in self.ar)
        self.ma = tuple(float(a) for a in self.ma)
        if not 0.0 <= self.alpha_prop <= 1.0:
            raise ValueError("alpha_prop must lie in [0, 1]")
        if self.alpha_range[0] > self.alpha_range[1]:
            raise ValueError("alpha_range must be (low, high) with low <= high")

    @property
    def n_nonnull(self):
        # Python's round is half-to-even
        return int(round(self.alpha_prop * self.p))

    def to_dict(self):
        return asdict(self)


def gen_parameters(params, rng):
    """Random base matrix (scaled Gram of a 2p x p Gaussian) and effect vector.

    The first ``round(alpha_prop * p)`` effects are uniform on ``alpha_range``;
    the remaining ones are 1.
    """
    p = params.p
    x = rng.standard_normal((2 * p, p))
    theta = scale_to_correlation(x.T @ x)
    alpha = np.ones(p)
    k = params.n_nonnull
    low, high = params.alpha_range
    alpha[:k] = rng.uniform(low, high, size=k)
    return theta, alpha


def arma_filter(X, ar=(), ma=()):
    """Row recursion ``Y_i = X_i + sum_j ma_j X_{i-j} + sum_j ar_j Y_{i-j}``.

    Rows before the first contribute zero.
    """
    b = np.concatenate([[1.0], np.asarray(ma, dtype=float)])
    a = np.concatenate([[1.0], -np.asarray(ar, dtype=float)])
    return signal.lfilter(b, a, X, axis=0)


def gen_arma_cov(V, n, ar, ma, rng, burn_in=0):
    """Empirical covariance ``Y'Y / n`` of ARMA-filtered Gaussian rows with row covariance V."""
    V = np.asarray(V, dtype=float)
    d = V.shape[0]
    if n <= max(len(ar), len(ma)):
        raise ValueError("n must exceed the ARMA orders")
    L = linalg.cholesky(V, lower=True)
    X = rng.standard_normal((n + burn_in, d)) @ L.T
    Y = arma_filter(X, ar, ma)[burn_in:]
    return Y.T @ Y / n


def wishart_bartlett(scale, df, rng):
    """One draw from Wishart_p(scale, df) via the Bartlett decomposition."""
    scale = np.asarray(scale, dtype=float)
    p = scale.shape[0]
    L = linalg.cholesky(scale, lower=True)
    A = np.zeros((p, p))
    A[np.diag_indices(p)] = np.sqrt(rng.chisquare(df - np.arange(p)))
    il = np.tril_indices(p, k=-1)
    A[il] = rng.standard_normal(il[0].size)
    LA = L @ A
    return LA @ LA.T


def gen_samples(lam, n, T, ar=(), ma=(), rng=None, scale_rng=None, burn_in=0):
    """``n`` empirical correlation matrices with expectation ``lam``.

    Variables are first given random standard deviations uniform on
    ``(sqrt(10), 10)``; the scaling step removes them again. ``scale_rng``
    draws those deviations (defaults to ``rng``). With ARMA coefficients each
    subject's rows are filtered, otherwise the covariance is Wishart.
    """
    lam = np.asarray(lam, dtype=float)
    p = lam.shape[0]
    if np.linalg.eigvalsh(lam)[0] <= 0:
        raise InvalidCorrelationMatrix("positive definite", "sampling needs a PD matrix")
    rng = rng if rng is not None else np.random.default_rng()
    scale_rng = scale_rng if scale_rng is not None else rng
    sd = scale_rng.uniform(np.sqrt(10.0), 10.0, size=p)
    xi = lam * np.outer(sd, sd)
    out = np.empty((n, p, p))
    for i in range(n):
        if len(ar) or len(ma):
            W = gen_arma_cov(xi, T, ar, ma, rng, burn_in=burn_in)
        else:
            W = wishart_bartlett(xi, T, rng) / T
        out[i] = scale_to_correlation(W)
    return out


def _pmap(fn, items, n_jobs=1):
    items = list(items)
    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def simulate_dataset(theta, alpha, design, rng, link="multiplicative"):
    """One two-group dataset: controls around theta, perturbed around g(theta, alpha)."""
    link = get_link(link)
    lam_d = link.apply(theta, alpha)
    healthy = gen_samples(theta, design.n_h, design.T, design.ar, design.ma, rng=rng)
    diseased = gen_samples(lam_d, design.n_d, design.T, design.ar, design.ma, rng=rng)
    return TwoGroupSample(healthy, diseased, design.T, validate=False)


@dataclass
class BootstrapResult:
    alpha_hats: np.ndarray
    gee_var: np.ndarray
    jack_var: np.ndarray
    n_failed: int = 0

    @property
    def empirical_sd(self):
        return self.alpha_hats.std(axis=0, ddof=1)

    @property
    def mean_gee_sd(self):
        return np.sqrt(self.gee_var).mean(axis=0)

    @property
    def mean_jack_sd(self):
        return np.sqrt(self.jack_var).mean(axis=0)

    def sd_ratio(self, method="gee"):
        """``sqrt(mean estimated variance / empirical variance)`` per coordinate."""
        est = self.gee_var if method == "gee" else self.jack_var
        return np.sqrt(est.mean(axis=0) / self.alpha_hats.var(axis=0, ddof=1))


def parametric_bootstrap(theta, alpha, design, B=100, link="multiplicative", config=None,
                         methods=("gee", "jackknife"), n_jobs=1, stream=0):
    """Simulate ``B`` datasets at (theta, alpha), fit each, and collect variances."""
    if B < 20:
        raise ValueError("parametric bootstrap needs B >= 20")
    link = get_link(link)
    p = len(alpha)

    def one(b):
        rng = make_rng(design.seed, stream, b)
        sample = simulate_dataset(theta, alpha, design, rng, link)
        try:
            res = fit(sample, link, config)
            gv = np.diag(gee_covariance(res, sample).matrix) if "gee" in methods else np.full(p, np.nan)
            jv = (np.diag(jackknife(sample, link, config, res).covariance.matrix)
                  if "jackknife" in methods else np.full(p, np.nan))
        except NumericalError as exc:
            log.warning("bootstrap replicate %d failed: %s", b, exc)
            return None
        return res.alpha_hat, gv, jv

    results = _pmap(one, range(B), n_jobs)
    ok = [r for r in results if r is not None]
    n_failed = B - len(ok)
    if n_failed > 0.05 * B:
        raise ReplicateFailure(f"{n_failed} of {B} bootstrap replicates failed")
    return BootstrapResult(
        np.array([r[0] for r in ok]), np.array([r[1] for r in ok]),
        np.array([r[2] for r in ok]), n_failed,
    )


EXPERIMENTS = ("bias", "gee_calibration", "jackknife_calibration", "imbalance",
               "error_rates", "power", "timing")

DEFAULT_GRIDS = {
    "bias": dict(n=(20, 40, 80), p=(8, 16), reps=3, alpha_prop=0.2,
                 alpha_range=(0.7, 1.1), T=100, ar=(), ma=(), seed=0),
    "gee_calibration": dict(n=(50,), p=(16,), B=100, alpha_prop=0.2,
                            alpha_range=(0.7, 1.1), T=100, ar=(), ma=(), seed=0),
    "jackknife_calibration": dict(n=(50,), p=(16,), B=100, alpha_prop=0.2,
                                  alpha_range=(0.7, 1.1), T=100, ar=(), ma=(), seed=0),
    "imbalance": dict(n=50, p=16, fractions=(0.1, 0.5), B=30, alpha_prop=0.2,
                      alpha_range=(0.7, 1.1), T=100, ar=(), ma=(), seed=0),
    "error_rates": dict(n=50, p=16, reps=200, null=("strong",), inflate=(1.0, 1.1),
                        q=0.05, alpha_prop=0.2, alpha_range=(0.7, 1.1), T=100,
                        ar=(), ma=(), seed=0),
    "power": dict(n=50, p=16, reps=200, prop_nonnull=0.1, effects=(0.0, 0.1),
                  q=0.05, inflate=1.1, T=100, ar=(), ma=(), seed=0),
    "timing": dict(p=(8, 16, 24, 32, 48), n=50, reps=1, alpha_prop=0.2,
                   alpha_range=(0.7, 1.1), T=100, ar=(), ma=(), seed=0),
}


def resolve_grid(kind, grid=None):
    if kind not in DEFAULT_GRIDS:
        raise ValueError(f"unknown experiment {kind!r}; expected one of {EXPERIMENTS}")
    out = dict(DEFAULT_GRIDS[kind])
    for key, value in (grid or {}).items():
        if key not in out:
            raise ValueError(f"unknown grid key {key!r} for experiment {kind!r}")
        default = out[key]
        if isinstance(default, tuple) and not isinstance(value, (tuple, list)):
            value = (value,)
        out[key] = tuple(value) if isinstance(value, list) else value
    return out


def _as_tuple(x):
    return tuple(x) if isinstance(x, (tuple, list)) else (x,)


def _design(grid, p, n_h, n_d, seed):
    return SimParams(p=p, alpha_prop=grid.get("alpha_prop", 0.0),
                     alpha_range=grid.get("alpha_range", (1.0, 1.0)),
                     n_h=n_h, n_d=n_d, T=grid["T"], ar=grid["ar"], ma=grid["ma"], seed=seed)


def bias_experiment(grid=None, config=None, n_jobs=1):
    g = resolve_grid("bias", grid)
    cells = [(n, p, rep) for n in _as_tuple(g["n"]) for p in _as_tuple(g["p"])
             for rep in range(g["reps"])]

    def one(idx):
        n, p, rep = cells[idx]
        design = _design(g, p, n, n, g["seed"])
        rng = make_rng(g["seed"], idx)
        theta, alpha = gen_parameters(design, rng)
        res = fit(simulate_dataset(theta, alpha, design, rng), "multiplicative", config)
        return [dict(n=n, p=p, rep=rep, j=j + 1, alpha=float(alpha[j]),
                     alpha_hat=float(res.alpha_hat[j]),
                     bias=float(res.alpha_hat[j] - alpha[j])) for j in range(p)]

    return [row for rows in _pmap(one, range(len(cells)), n_jobs) for row in rows]


def _calibration(kind, grid, config, n_jobs):
    g = resolve_grid(kind, grid)
    method = "gee" if kind == "gee_calibration" else "jackknife"
    rows = []
    cells = [(n, p) for n in _as_tuple(g["n"]) for p in _as_tuple(g["p"])]
    for idx, (n, p) in enumerate(cells):
        design = _design(g, p, n, n, g["seed"])
        theta, alpha = gen_parameters(design, make_rng(g["seed"], idx, 0))
        boot = parametric_bootstrap(theta, alpha, design, g["B"], config=config,
                                    methods=(method,), n_jobs=n_jobs, stream=idx + 1)
        ratio = boot.sd_ratio(method)
        est = boot.mean_gee_sd if method == "gee" else boot.mean_jack_sd
        for j in range(p):
            rows.append(dict(n=n, p=p, j=j + 1, alpha=float(alpha[j]), method=method,
                             empirical_sd=float(boot.empirical_sd[j]),
                             mean_estimated_sd=float(est[j]), sd_ratio=float(ratio[j]),
                             B=len(boot.alpha_hats)))
    return rows


def imbalance_experiment(grid=None, config=None, n_jobs=1):
    """GEE SD ratio per coordinate as the perturbed-group fraction varies (total 2n)."""
    g = resolve_grid("imbalance", grid)
    total = 2 * g["n"]
    design0 = _design(g, g["p"], g["n"], g["n"], g["seed"])
    theta, alpha = gen_parameters(design0, make_rng(g["seed"], 0, 0))
    rows = []
    for idx, frac in enumerate(_as_tuple(g["fractions"])):
        n_d = int(round(frac * total))
        design = _design(g, g["p"], total - n_d, n_d, g["seed"])
        boot = parametric_bootstrap(theta, alpha, design, g["B"], config=config,
                                    methods=("gee",), n_jobs=n_jobs, stream=idx + 1)
        ratio = boot.sd_ratio("gee")
        for j in range(g["p"]):
            rows.append(dict(fraction=frac, n_h=total - n_d, n_d=n_d, j=j + 1,
                             alpha=float(alpha[j]), empirical_sd=float(boot.empirical_sd[j]),
                             mean_gee_sd=float(boot.mean_gee_sd[j]), sd_ratio=float(ratio[j]),
                             B=len(boot.alpha_hats)))
    return rows


def error_rate_experiment(grid=None, config=None, n_jobs=1):
    """Per-comparison error, Bonferroni FWER and BH false discovery proportion per replicate."""
    g = resolve_grid("error_rates", grid)
    cells = [(null, rep) for null in _as_tuple(g["null"]) for rep in range(g["reps"])]
    q = g["q"]

    def one(idx):
        null, rep = cells[idx]
        prop = 0.0 if null == "strong" else g["alpha_prop"]
        design = SimParams(p=g["p"], alpha_prop=prop, alpha_range=g["alpha_range"],
                           n_h=g["n"], n_d=g["n"], T=g["T"], ar=g["ar"], ma=g["ma"],
                           seed=g["seed"])
        rng = make_rng(g["seed"], idx)
        theta, alpha = gen_parameters(design, rng)
        sample = simulate_dataset(theta, alpha, design, rng)
        res = fit(sample, "multiplicative", config)
        cov = gee_covariance(res, sample)
        true_null = alpha == 1.0
        out = []
        for inflate in _as_tuple(g["inflate"]):
            table = wald_inference(res.alpha_hat, cov, q=q, inflate=inflate)
            pv = table.p_value
            raw_rej = pv <= q
            bonf_rej = bonferroni_adjust(pv) <= q
            bh_rej = table.selected
            n_bh = int(bh_rej.sum())
            out.append(dict(
                null=null, rep=rep, inflate=inflate,
                per_comparison_error=float(np.mean(raw_rej[true_null])) if true_null.any() else np.nan,
                bonferroni_fwer=int(np.any(bonf_rej & true_null)),
                bh_fdp=float(np.sum(bh_rej & true_null) / n_bh) if n_bh else 0.0,
                bh_rejections=n_bh,
            ))
        return out

    return [row for rows in _pmap(one, range(len(cells)), n_jobs) for row in rows]


def power_experiment(grid=None, config=None, n_jobs=1):
    """Model versus mass-univariate detection power, one row per effect size and replicate.

    Non-null effects occupy the first ``round(prop_nonnull * p)`` coordinates
    and equal ``1 - effect``. Both methods see the same simulated dataset.
    """
    g = resolve_grid("power", grid)
    p = g["p"]
    k = int(round(g["prop_nonnull"] * p))
    cells = [(eff, rep) for eff in _as_tuple(g["effects"]) for rep in range(g["reps"])]
    q = g["q"]

    def one(idx):
        eff, rep = cells[idx]
        design = SimParams(p=p, alpha_prop=0.0, n_h=g["n"], n_d=g["n"], T=g["T"],
                           ar=g["ar"], ma=g["ma"], seed=g["seed"])
        rng = make_rng(g["seed"], rep)
        theta, _ = gen_parameters(design, rng)
        alpha = np.ones(p)
        alpha[:k] = 1.0 - eff
        sample = simulate_dataset(theta, alpha, design, make_rng(g["seed"], rep, idx))
        res = fit(sample, "multiplicative", config)
        table = wald_inference(res.alpha_hat, gee_covariance(res, sample, inflation=g["inflate"]), q=q)
        base = mass_univariate(sample, q)
        nonnull = alpha != 1.0
        i, j = pair_indices(p)
        affected = nonnull[i] | nonnull[j]
        detected = base.detected_variables(p)
        return dict(
            effect=eff, rep=rep,
            model_global_reject=int(table.selected.any()),
            model_power=float(table.selected[nonnull].mean()) if nonnull.any() else np.nan,
            mu_global_reject=int(base.selected.any()),
            mu_power_variables=float(detected[nonnull].mean()) if nonnull.any() else np.nan,
            mu_power_pairs=float(base.selected[affected].mean()) if affected.any() else np.nan,
        )

    return _pmap(one, range(len(cells)), n_jobs)


def timing_experiment(grid=None, config=None, n_jobs=1):
    g = resolve_grid("timing", grid)
    rows = []
    for idx, p in enumerate(_as_tuple(g["p"])):
        for rep in range(g["reps"]):
            design = _design(g, p, g["n"], g["n"], g["seed"])
            rng = make_rng(g["seed"], idx, rep)
            theta, alpha = gen_parameters(design, rng)
            sample = simulate_dataset(theta, alpha, design, rng)
            start = time.perf_counter()
            fit(sample, "multiplicative", config)
            rows.append(dict(p=p, m=p * (p - 1) // 2, rep=rep,
                             seconds=time.perf_counter() - start))
    return rows


def timing_slope(rows):
    """Least-squares slope of log(seconds) on log(p)."""
    p = np.array([r["p"] for r in rows], dtype=float)
    t = np.array([r["seconds"] for r in rows], dtype=float)
    return float(np.polyfit(np.log(p), np.log(t), 1)[0])


def experiment_driver(kind, grid=None, config=None, n_jobs=1):
    """Run one named experiment and return tidy rows (list of dicts)."""
    runners = {
        "bias": bias_experiment,
        "gee_calibration": lambda g, c, j: _calibration("gee_calibration", g, c, j),
        "jackknife_calibration": lambda g, c, j: _calibration("jackknife_calibration", g, c, j),
        "imbalance": imbalance_experiment,
        "error_rates": error_rate_experiment,
        "power": power_experiment,
        "timing": timing_experiment,
    }
    if kind not in runners:
        raise ValueError(f"unknown experiment {kind!r}; expected one of {EXPERIMENTS}")
    return runners[kind](grid, config, n_jobs)
