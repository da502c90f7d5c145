"""Uncertainty, tests and multiplicity control for the fitted effects.

Variance of ``alpha_hat`` comes from a GEE sandwich or a two-sample
leave-one-subject-out jackknife. Wald z-scores are turned into two-sided
normal p-values, adjusted with Benjamini-Hochberg, and paired with
false-coverage-rate adjusted intervals for the selected variables. The
mass-univariate baseline runs a Welch test on each Fisher-transformed
correlation coefficient.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .corrmat import corr_covariance, fisher_z, pair_indices, vectorize
from .errors import FoldFailure, SingularBread
from .estimate import FitConfig, WeightMatrices
from .estimate import fit as fit_model
from .link import get_link

log = logging.getLogger(__name__)


@dataclass
class AlphaCovariance:
    matrix: np.ndarray
    method: str
    inflation_applied: float = 1.0

    def sd(self):
        return self.inflation_applied * np.sqrt(np.clip(np.diag(self.matrix), 0.0, None))


def theta_update_jacobian(sample, alpha, link):
    """Derivative of the pooled theta update with respect to alpha, shape (m, p)."""
    link = get_link(link)
    mean_d = vectorize(sample.diseased).mean(axis=0)
    frac = sample.n_d / (sample.n_h + sample.n_d)
    return frac * link.inverse_jacobian_vec(mean_d, np.asarray(alpha, float))


def gee_covariance(fit, sample, link=None, weights=None, inflation=1.0, scaling="two_sample"):
    """Sandwich estimate of the covariance of alpha_hat.

    The bread sums ``J' Cbar^{-1} J`` over both groups, with the link
    Jacobian for the perturbed group and the Jacobian of the theta update for
    the controls; the meat replaces the middle ``Cbar`` by the residual
    covariance (divisor ``n_g - 1``).

    ``scaling="two_sample"`` (default) weights both groups equally and
    multiplies ``bread^{-1} meat bread^{-1}`` by ``1/n_h + 1/n_d``, the
    variance scale of a two-sample contrast. ``scaling="literal"`` instead
    weights each group's bread and meat by ``n_g`` and applies no outer
    factor; it underestimates the spread of alpha_hat considerably more.
    """
    if scaling not in ("two_sample", "literal"):
        raise ValueError(f"unknown scaling {scaling!r}")
    link = get_link(link or fit.link)
    weights = weights or fit.weights
    alpha = fit.alpha_hat
    theta_vec = vectorize(fit.theta_hat)
    g_vec = link.apply_vec(theta_vec, alpha)

    terms = (
        ("d", sample.n_d, link.jacobian_vec(theta_vec, alpha),
         vectorize(sample.diseased) - g_vec),
        ("h", sample.n_h, theta_update_jacobian(sample, alpha, link),
         vectorize(sample.healthy) - theta_vec),
    )
    p = alpha.size
    bread = np.zeros((p, p))
    meat = np.zeros((p, p))
    for group, n, J, resid in terms:
        w = n if scaling == "literal" else 1.0
        X = weights.solve(group, J)  # Cbar^{-1} J
        bread += w * (J.T @ X)
        E = resid @ X  # rows: (r_i - mu)' Cbar^{-1} J
        meat += w * (E.T @ E) / (n - 1)

    cond = np.linalg.cond(bread)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularBread(f"GEE bread matrix is singular (condition {cond:.3g})", cond)
    half = np.linalg.solve(bread, meat)
    V = np.linalg.solve(bread, half.T).T
    V = 0.5 * (V + V.T)
    if scaling == "two_sample":
        V *= 1.0 / sample.n_h + 1.0 / sample.n_d
    return AlphaCovariance(V, "gee", inflation)


@dataclass
class JackknifeResult:
    alpha_jack: np.ndarray
    covariance: AlphaCovariance
    loo_h: np.ndarray
    loo_d: np.ndarray


def jackknife_variance(loo_h, loo_d):
    """Group-weighted jackknife mean and ``nu_h + nu_d`` from leave-one-out estimates."""
    loo_h = np.asarray(loo_h, dtype=float)
    loo_d = np.asarray(loo_d, dtype=float)
    n_h, n_d = len(loo_h), len(loo_d)
    mean_h = loo_h.mean(axis=0)
    mean_d = loo_d.mean(axis=0)
    alpha_jack = (n_h * mean_h + n_d * mean_d) / (n_h + n_d)
    dh = loo_h - mean_h
    dd = loo_d - mean_d
    nu_h = (n_h - 1) / n_h * (dh.T @ dh)
    nu_d = (n_d - 1) / n_d * (dd.T @ dd)
    return alpha_jack, nu_h + nu_d


JACKKNIFE_CACHE_BYTES = 256 * 2 ** 20


def _subject_covariances(sample):
    """Per-subject ``C(R_i)`` stacks for both groups, or None if they would not fit the budget."""
    m = sample.p * (sample.p - 1) // 2
    if (sample.n_h + sample.n_d) * m * m * 8 > JACKKNIFE_CACHE_BYTES:
        return None
    return tuple(np.stack([corr_covariance(R) for R in g])
                 for g in (sample.healthy, sample.diseased))


def jackknife(sample, link="multiplicative", config=None, fit=None, n_jobs=1):
    """Leave one subject out, refit from the full-data estimate, and combine."""
    link = get_link(link)
    if fit is None:
        fit = fit_model(sample, link, config)
    config = config or FitConfig()
    folds = [("h", i) for i in range(sample.n_h)] + [("d", i) for i in range(sample.n_d)]
    per_subject = _subject_covariances(sample)

    def fold_weights(group, i):
        if per_subject is None:
            return None
        stacks = dict(zip("hd", per_subject))
        c_bar = {}
        for g in "hd":
            C = stacks[g]
            if g == group:
                c_bar[g] = (C.sum(axis=0) - C[i]) / (len(C) - 1)
            else:
                c_bar[g] = C.mean(axis=0)
        return WeightMatrices.from_matrices(c_bar["h"], c_bar["d"], config.regularization_lambda)

    def run(fold):
        group, i = fold
        try:
            return fit_model(sample.drop(group, i), link, config, alpha_start=fit.alpha_hat,
                             weights=fold_weights(group, i)).alpha_hat
        except Exception as exc:  # reported per fold below
            return exc

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            results = list(pool.map(run, folds))
    else:
        results = [run(f) for f in folds]

    failed = [(f, r) for f, r in zip(folds, results) if isinstance(r, Exception)]
    if failed:
        detail = "; ".join(f"{g}{i}: {exc}" for (g, i), exc in failed)
        raise FoldFailure(f"{len(failed)} jackknife fold(s) failed: {detail}",
                          [f for f, _ in failed])
    loo_h = np.array(results[: sample.n_h])
    loo_d = np.array(results[sample.n_h:])
    alpha_jack, V = jackknife_variance(loo_h, loo_d)
    return JackknifeResult(alpha_jack, AlphaCovariance(V, "jackknife", 1.0), loo_h, loo_d)


def median_center(alpha_hat, link="multiplicative"):
    """Shift estimates so their median sits at the link's null value."""
    alpha_hat = np.asarray(alpha_hat, dtype=float)
    return alpha_hat - np.median(alpha_hat) + get_link(link).null_value


def bh_adjust(pvalues):
    """Benjamini-Hochberg step-up adjusted p-values (NaNs are passed through)."""
    p = np.asarray(pvalues, dtype=float)
    out = np.full_like(p, np.nan)
    ok = ~np.isnan(p)
    vals = p[ok]
    m = vals.size
    if m == 0:
        return out
    order = np.argsort(vals, kind="stable")
    scaled = vals[order] * m / np.arange(1, m + 1)
    adj = np.minimum.accumulate(scaled[::-1])[::-1]
    res = np.empty(m)
    res[order] = np.minimum(adj, 1.0)
    out[ok] = res
    return out


def bonferroni_adjust(pvalues):
    p = np.asarray(pvalues, dtype=float)
    m = int(np.sum(~np.isnan(p)))
    return np.minimum(p * m, 1.0)


def normal_two_sided(z):
    z = np.asarray(z, dtype=float)
    return 2.0 * special.ndtr(-np.abs(z))


def fcr_level(n_selected, q, n_tests):
    """Marginal coverage for intervals of the selected variables, ``1 - R q / m``."""
    if n_selected == 0:
        return 1.0 - q
    return 1.0 - n_selected * q / n_tests


@dataclass
class InferenceTable:
    alpha_tilde: np.ndarray
    sd: np.ndarray
    z_value: np.ndarray
    p_value: np.ndarray
    p_adjusted: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    ci_level: np.ndarray
    selected: np.ndarray
    q_level: float
    correction_method: str = "BH"
    method: str = "gee"
    inflation: float = 1.0
    excluded: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    names: list = None

    @property
    def n_selected(self):
        return int(np.sum(self.selected))

    def rows(self):
        names = self.names or [str(j + 1) for j in range(len(self.alpha_tilde))]
        for j in range(len(self.alpha_tilde)):
            yield {
                "index": j + 1,
                "name": names[j],
                "alpha_tilde": float(self.alpha_tilde[j]),
                "sd": float(self.sd[j]),
                "z": float(self.z_value[j]),
                "p": float(self.p_value[j]),
                "p_bh": float(self.p_adjusted[j]),
                "ci_low": float(self.ci_low[j]),
                "ci_high": float(self.ci_high[j]),
                "selected": bool(self.selected[j]),
            }


def wald_inference(alpha, cov, q=0.05, inflate=None, link="multiplicative", names=None):
    """z-tests of each effect against the null value with BH and FCR adjustment.

    ``inflate`` multiplies the standard deviations; by default the covariance's
    own ``inflation_applied`` is used. Variables with zero SD are excluded from
    testing and reported in ``excluded``.
    """
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    link = get_link(link)
    alpha = np.asarray(alpha, dtype=float)
    V = cov.matrix if isinstance(cov, AlphaCovariance) else np.asarray(cov, float)
    if inflate is None:
        inflate = cov.inflation_applied if isinstance(cov, AlphaCovariance) else 1.0
    method = cov.method if isinstance(cov, AlphaCovariance) else "given"

    sd = inflate * np.sqrt(np.clip(np.diag(V), 0.0, None))
    excluded = np.flatnonzero(~(sd > 0))
    if excluded.size:
        log.warning("variables %s have zero SD and are not tested", (excluded + 1).tolist())
    safe_sd = np.where(sd > 0, sd, np.nan)
    z = (alpha - link.null_value) / safe_sd
    pval = normal_two_sided(z)
    padj = bh_adjust(pval)
    selected = np.nan_to_num(padj, nan=np.inf) <= q
    n_tests = int(np.sum(~np.isnan(pval)))
    R = int(selected.sum())
    level = np.full(alpha.size, 1.0 - q)
    level[selected] = fcr_level(R, q, n_tests)
    crit = special.ndtri(1.0 - (1.0 - level) / 2.0)
    return InferenceTable(
        alpha_tilde=alpha,
        sd=sd,
        z_value=z,
        p_value=pval,
        p_adjusted=padj,
        ci_low=alpha - crit * sd,
        ci_high=alpha + crit * sd,
        ci_level=level,
        selected=selected,
        q_level=q,
        method=method,
        inflation=inflate,
        excluded=excluded,
        names=names,
    )


@dataclass
class MassUnivariateTable:
    k: np.ndarray
    l: np.ndarray
    t_statistic: np.ndarray
    welch_df: np.ndarray
    p_value: np.ndarray
    p_adjusted: np.ndarray
    degenerate: np.ndarray
    q_level: float

    @property
    def selected(self):
        return self.p_adjusted <= self.q_level

    def rows(self):
        for a in range(self.k.size):
            yield {
                "k": int(self.k[a]) + 1,
                "l": int(self.l[a]) + 1,
                "t": float(self.t_statistic[a]),
                "df": float(self.welch_df[a]),
                "p": float(self.p_value[a]),
                "p_bh": float(self.p_adjusted[a]),
                "selected": bool(self.selected[a]),
            }

    def variable_pvalues(self):
        """Each pair listed under both endpoints: (variable, partner, p, p_bh) rows."""
        out = []
        for a in range(self.k.size):
            k, l = int(self.k[a]), int(self.l[a])
            out.append((k, l, self.p_value[a], self.p_adjusted[a]))
            out.append((l, k, self.p_value[a], self.p_adjusted[a]))
        out.sort(key=lambda r: (r[0], r[1]))
        return out

    def detected_variables(self, p):
        hit = np.zeros(p, dtype=bool)
        sel = self.selected
        hit[self.k[sel]] = True
        hit[self.l[sel]] = True
        return hit


def welch_test(x, y):
    """Welch statistic, Welch-Satterthwaite df and two-sided p along axis 0.

    Columns where either sample is constant are flagged degenerate and given
    ``t = 0``, ``p = 1``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    nx, ny = x.shape[0], y.shape[0]
    vx = x.var(axis=0, ddof=1) / nx
    vy = y.var(axis=0, ddof=1) / ny
    degenerate = (np.ptp(x, axis=0) == 0) | (np.ptp(y, axis=0) == 0)
    se2 = np.where(degenerate, 1.0, vx + vy)
    t = np.where(degenerate, 0.0, (y.mean(axis=0) - x.mean(axis=0)) / np.sqrt(se2))
    with np.errstate(divide="ignore", invalid="ignore"):
        df = se2 ** 2 / (vx ** 2 / (nx - 1) + vy ** 2 / (ny - 1))
    df = np.where(degenerate, np.nan, df)
    p = np.where(degenerate, 1.0, 2.0 * special.stdtr(np.where(degenerate, 1.0, df), -np.abs(t)))
    return t, df, p, degenerate


def mass_univariate(sample, q=0.05):
    """Welch test per off-diagonal pair on Fisher-z values, BH over all pairs.

    The statistic is oriented as perturbed minus control.
    """
    zh = fisher_z(vectorize(sample.healthy))
    zd = fisher_z(vectorize(sample.diseased))
    t, df, p, degenerate = welch_test(zh, zd)
    if degenerate.any():
        log.warning("%d pair(s) have a constant group; reported with p = 1", int(degenerate.sum()))
    k, l = pair_indices(sample.p)
    return MassUnivariateTable(np.asarray(k), np.asarray(l), t, df, p, bh_adjust(p), degenerate, q)


def power_comparison(grid=None, **kwargs):
    """Power of the model versus the mass-univariate baseline; see ``simulate.power_experiment``."""
    from .simulate import power_experiment

    return power_experiment(grid, **kwargs)

