"""Generalized least squares fit of the link model by alternating updates.

The loss is

    S(theta, alpha) = sum_{i in H} (r_i - vec theta)' Cbar_h^{-1} (r_i - vec theta)
                    + sum_{i in D} (r_i - vec g(theta, alpha))' Cbar_d^{-1} (...)

with fixed plug-in weights ``Cbar_g = mean_i C(R_i)``. ``alpha`` is updated by
projected steepest descent with Armijo backtracking, ``theta`` by the
method-of-moments average of the control matrices and the link-inverted
perturbed matrices.
"""
import logging
from dataclasses import dataclass, field, fields
from typing import NamedTuple

import numpy as np
from scipy import linalg

from .corrmat import corr_covariance, unvectorize, vectorize
from .errors import DegenerateWeights, NotIdentifiable
from .link import get_link, identifiability_check

log = logging.getLogger(__name__)


@dataclass
class FitConfig:
    max_outer_iters: int = 100
    outer_tol: float = 1e-6
    inner_tol: float = 1e-6
    max_inner_iters: int = 500
    step_rule: str = "backtracking_armijo"
    armijo_c: float = 1e-4
    step_shrink: float = 0.5
    initial_step: float = 1.0
    step_memory: bool = True
    bb_step: bool = True
    min_step: float = 1e-20
    regularization_lambda: float = 0.0
    alpha_floor: float = 1e-3
    zero_threshold: float = 1e-10

    def __post_init__(self):
        if self.step_rule != "backtracking_armijo":
            raise ValueError(f"unsupported step rule {self.step_rule!r}")
        for name in ("outer_tol", "inner_tol", "alpha_floor", "initial_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.regularization_lambda <= 1.0:
            raise ValueError("regularization_lambda must lie in [0, 1]")
        if self.max_outer_iters < 1 or self.max_inner_iters < 1:
            raise ValueError("iteration caps must be at least 1")

    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            if key not in known:
                continue
            kwargs[key] = known[key](value)
        return cls(**kwargs)


def shrink(C, lam):
    if lam == 0:
        return C
    return (1.0 - lam) * C + lam * np.diag(np.diag(C))


def mean_corr_covariance(matrices):
    """Average of ``C(R_i)`` over a stack of correlation matrices."""
    total = None
    for R in matrices:
        C = corr_covariance(R)
        if total is None:
            total = C
        else:
            total += C
    return total / len(matrices)


@dataclass
class WeightMatrices:
    c_bar_h: np.ndarray
    c_bar_d: np.ndarray
    factor_h: np.ndarray = field(repr=False)
    factor_d: np.ndarray = field(repr=False)
    regularization: float = 0.0

    @classmethod
    def from_matrices(cls, c_bar_h, c_bar_d, lam=0.0):
        """Shrink and factorize, escalating the shrinkage until Cholesky succeeds."""
        c_bar_h = np.asarray(c_bar_h, dtype=float)
        c_bar_d = np.asarray(c_bar_d, dtype=float)
        for C in (c_bar_h, c_bar_d):
            if np.any(np.diag(C) <= 0):
                raise DegenerateWeights("weight matrix has a non-positive diagonal entry")
        tried = lam
        while True:
            try:
                h = shrink(c_bar_h, tried)
                d = shrink(c_bar_d, tried)
                lh = linalg.cholesky(h, lower=True)
                ld = linalg.cholesky(d, lower=True)
            except linalg.LinAlgError:
                if tried >= 1.0:
                    raise DegenerateWeights("weights not positive definite even at lambda=1")
                tried = min(1.0, 1e-6 if tried == 0 else tried * 10)
                continue
            if tried != lam:
                log.warning("weight shrinkage escalated from %g to %g", lam, tried)
            return cls(h, d, lh, ld, tried)

    def scaled(self, c):
        return WeightMatrices.from_matrices(c * self.c_bar_h, c * self.c_bar_d, 0.0)

    def __post_init__(self):
        # inverse triangular factors; the inner solver calls whiten thousands of
        # times, and a matmul is far cheaper than a LAPACK call at this size
        self._inv = {}
        for group, L in (("h", self.factor_h), ("d", self.factor_d)):
            eye = np.eye(L.shape[0])
            self._inv[group] = linalg.solve_triangular(L, eye, lower=True, check_finite=False)

    def solve(self, group, x):
        """``Cbar^{-1} x`` for the group's (shrunk) weight matrix."""
        Li = self._inv[group]
        return Li.T @ (Li @ x)

    def whiten(self, group, x):
        """``L^{-1} x`` for the group's Cholesky factor ``L``; ``x`` is (m,) or (m, k)."""
        return self._inv[group] @ x


def build_weights(sample, lam=0.0):
    return WeightMatrices.from_matrices(
        mean_corr_covariance(sample.healthy), mean_corr_covariance(sample.diseased), lam
    )


class GLSProblem:
    """Cached per-sample quantities for repeated loss and gradient evaluations.

    Each group's sum of quadratic forms splits exactly into a within-group
    scatter term (parameter free, computed once) plus ``n_g`` times the form
    at the group mean, so every evaluation costs one triangular solve.
    """

    def __init__(self, sample, weights, link):
        self.link = get_link(link)
        self.weights = weights
        self.p = sample.p
        self.n_h = sample.n_h
        self.n_d = sample.n_d
        self.vec_h = vectorize(sample.healthy)
        self.vec_d = vectorize(sample.diseased)
        self.mean_h = self.vec_h.mean(axis=0)
        self.mean_d = self.vec_d.mean(axis=0)
        self.within_h = _sumsq(weights.whiten("h", (self.vec_h - self.mean_h).T))
        self.within_d = _sumsq(weights.whiten("d", (self.vec_d - self.mean_d).T))

    def loss_h(self, theta_vec):
        return self.within_h + self.n_h * _sumsq(self.weights.whiten("h", self.mean_h - theta_vec))

    def loss_d(self, theta_vec, alpha):
        r = self.mean_d - self.link.apply_vec(theta_vec, alpha)
        return self.within_d + self.n_d * _sumsq(self.weights.whiten("d", r))

    def loss(self, theta_vec, alpha):
        return self.loss_h(theta_vec) + self.loss_d(theta_vec, alpha)

    def grad_alpha(self, theta_vec, alpha):
        r = self.mean_d - self.link.apply_vec(theta_vec, alpha)
        J = self.link.jacobian_vec(theta_vec, alpha)
        return -2.0 * self.n_d * (J.T @ self.weights.solve("d", r))

    def update_theta(self, alpha):
        inv_d = self.link.invert_vec(self.mean_d, alpha)
        return (self.n_h * self.mean_h + self.n_d * inv_d) / (self.n_h + self.n_d)


def _sumsq(x):
    return float(np.sum(x * x))


def loss(theta, alpha, sample, weights, link="multiplicative"):
    return GLSProblem(sample, weights, link).loss(vectorize(theta), np.asarray(alpha, float))


def loss_gradient_alpha(theta, alpha, sample, weights, link="multiplicative"):
    return GLSProblem(sample, weights, link).grad_alpha(vectorize(theta), np.asarray(alpha, float))


def update_theta(sample, alpha, link="multiplicative"):
    """Pooled method-of-moments estimate of theta for fixed alpha (not projected)."""
    link = get_link(link)
    alpha = np.asarray(alpha, dtype=float)
    inv_d = link.invert(sample.diseased, alpha)
    total = sample.healthy.sum(axis=0) + inv_d.sum(axis=0)
    theta = total / (sample.n_h + sample.n_d)
    idx = np.arange(sample.p)
    theta[idx, idx] = 1.0
    return theta


class InnerResult(NamedTuple):
    alpha: np.ndarray
    n_iter: int
    stalled: bool
    grad_norm: float
    loss: float


def _projected_grad(alpha, grad, lb):
    return np.where((alpha <= lb) & (grad > 0), 0.0, grad)


def _descend(problem, theta_vec, alpha, config):
    lb = problem.link.lower_bound(config.alpha_floor)
    x = np.maximum(np.array(alpha, dtype=float), lb)
    f = problem.loss_d(theta_vec, x)
    g = problem.grad_alpha(theta_vec, x)
    stalled = False
    n_iter = 0
    t_prev = config.initial_step
    bb = None
    while True:
        gnorm = float(np.max(np.abs(_projected_grad(x, g, lb)), initial=0.0))
        if gnorm <= config.inner_tol or n_iter >= config.max_inner_iters:
            break
        if config.bb_step and bb is not None:
            t = bb
        elif config.step_memory:
            t = min(config.initial_step, 2.0 * t_prev)
        else:
            t = config.initial_step
        while True:
            x_new = np.maximum(x - t * g, lb)
            f_new = problem.loss_d(theta_vec, x_new)
            if f_new <= f + config.armijo_c * float(g @ (x_new - x)):
                break
            t *= config.step_shrink
            if t < config.min_step:
                stalled = True
                break
        if stalled:
            break
        g_new = problem.grad_alpha(theta_vec, x_new)
        sx = x_new - x
        sy = float(sx @ (g_new - g))
        # Barzilai-Borwein trial length for the next line search
        bb = float(sx @ sx) / sy if sy > 0 else None
        x, f, t_prev, g = x_new, f_new, t, g_new
        n_iter += 1
    return InnerResult(x, n_iter, stalled, gnorm, f)


def minimize_alpha(theta, sample, weights, link="multiplicative", alpha_start=None, config=None):
    config = config or FitConfig()
    link = get_link(link)
    problem = GLSProblem(sample, weights, link)
    if alpha_start is None:
        alpha_start = link.null_alpha(sample.p)
    return _descend(problem, vectorize(theta), alpha_start, config)


@dataclass
class FitResult:
    theta_hat: np.ndarray
    alpha_hat: np.ndarray
    loss_trace: list
    outer_iters: int
    converged: bool
    weights: WeightMatrices = field(repr=False)
    link: str = "multiplicative"
    monotone: bool = True
    stalled_steps: int = 0
    theta_range_violations: int = 0
    diagnostics: list = field(default_factory=list)

    @property
    def applied_lambda(self):
        return self.weights.regularization


def fit(sample, link="multiplicative", config=None, alpha_start=None, weights=None):
    """Alternate alpha descent and theta moment updates until alpha settles.

    ``alpha_start`` defaults to the link's null value; the jackknife passes the
    full-data estimate instead. ``weights`` may be supplied to skip rebuilding.
    """
    config = config or FitConfig()
    link = get_link(link)
    if weights is None:
        weights = build_weights(sample, config.regularization_lambda)
    problem = GLSProblem(sample, weights, link)
    alpha = link.null_alpha(sample.p) if alpha_start is None else np.array(alpha_start, float)

    theta_vec = problem.update_theta(alpha)
    ident = identifiability_check(unvectorize(theta_vec), config.zero_threshold)
    if not ident.identifiable:
        raise NotIdentifiable(
            f"model not identifiable: incidence rank {ident.rank} < p = {sample.p} "
            f"({ident.nonzero_count} nonzero pairs)"
        )

    trace = [problem.loss(theta_vec, alpha)]
    diagnostics = []
    monotone = True
    stalled_steps = 0
    converged = False
    k = 0
    for k in range(1, config.max_outer_iters + 1):
        inner = _descend(problem, theta_vec, alpha, config)
        stalled_steps += inner.stalled
        change = float(np.max(np.abs(inner.alpha - alpha)))
        alpha = inner.alpha
        theta_vec = problem.update_theta(alpha)
        trace.append(problem.loss(theta_vec, alpha))
        if trace[-1] > trace[-2] + 1e-10:
            monotone = False
        if change <= config.outer_tol:
            converged = True
            break

    if not monotone:
        diagnostics.append("outer loss increased on at least one iteration")
    if stalled_steps:
        diagnostics.append(f"line search stalled in {stalled_steps} inner solve(s)")
    violations = int(np.sum(np.abs(theta_vec) > 1.0))
    if violations:
        diagnostics.append(f"theta estimate has {violations} pair(s) outside [-1, 1]")
    if not converged:
        diagnostics.append(f"no convergence within {config.max_outer_iters} outer iterations")
    for msg in diagnostics:
        log.debug(msg)

    return FitResult(
        theta_hat=unvectorize(theta_vec),
        alpha_hat=alpha,
        loss_trace=trace,
        outer_iters=k,
        converged=converged,
        weights=weights,
        link=link.name,
        monotone=monotone,
        stalled_steps=stalled_steps,
        theta_range_violations=violations,
        diagnostics=diagnostics,
    )
