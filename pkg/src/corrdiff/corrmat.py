"""Correlation matrices: validation, vectorization, and asymptotic moments.

Matrices are plain ``numpy`` arrays of shape ``(p, p)``; stacks of subjects
are arrays of shape ``(n, p, p)``. The vectorized form of a matrix is the
upper triangle in row-major order, ``(R12, R13, ..., R1p, R23, ...)``.
"""
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyGroup,
    InvalidCorrelationMatrix,
    NonPositiveDiagonal,
    NonTriangularLength,
    OutOfDomain,
)

SYMMETRY_TOL = 1e-10
DIAGONAL_TOL = 1e-10


def psd_tolerance(p):
    return 1e-8 * p


def n_pairs(p):
    return p * (p - 1) // 2


def dim_from_pairs(m):
    """Return ``p`` with ``p(p-1)/2 == m`` or raise NonTriangularLength."""
    p = int(round((1 + np.sqrt(1 + 8 * m)) / 2))
    if m < 0 or n_pairs(p) != m:
        raise NonTriangularLength(f"length {m} is not p(p-1)/2 for any integer p")
    return p


@lru_cache(maxsize=64)
def pair_indices(p):
    """Row/column index arrays of the upper triangle, in vectorization order."""
    i, j = np.triu_indices(p, k=1)
    i.flags.writeable = False
    j.flags.writeable = False
    return i, j


def check_correlation(R, psd_tol=None):
    """Validate a single correlation matrix and return it as a float array.

    Raises InvalidCorrelationMatrix naming the first failing invariant.
    """
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise InvalidCorrelationMatrix("square", f"shape {R.shape}")
    if not np.all(np.isfinite(R)):
        raise InvalidCorrelationMatrix("finite", "matrix contains NaN or inf")
    p = R.shape[0]
    if np.max(np.abs(np.diag(R) - 1.0), initial=0.0) > DIAGONAL_TOL:
        raise InvalidCorrelationMatrix("unit diagonal")
    asym = np.max(np.abs(R - R.T), initial=0.0)
    if asym > SYMMETRY_TOL:
        raise InvalidCorrelationMatrix("symmetric", f"max |R - R^t| = {asym:.3g}")
    if np.max(np.abs(R), initial=0.0) > 1.0 + SYMMETRY_TOL:
        raise InvalidCorrelationMatrix("entries in [-1, 1]")
    tol = psd_tolerance(p) if psd_tol is None else psd_tol
    lam_min = np.linalg.eigvalsh(R)[0]
    if lam_min < -tol:
        raise InvalidCorrelationMatrix(
            "positive semi-definite", f"minimal eigenvalue {lam_min:.3g} < -{tol:.3g}"
        )
    return R


def vectorize(R):
    """Upper-triangle entries of ``R`` (or of each matrix in a stack)."""
    R = np.asarray(R, dtype=float)
    i, j = pair_indices(R.shape[-1])
    return R[..., i, j]


def unvectorize(v):
    """Inverse of :func:`vectorize`: symmetric matrix with unit diagonal."""
    v = np.asarray(v, dtype=float)
    p = dim_from_pairs(v.shape[-1])
    i, j = pair_indices(p)
    out = np.zeros(v.shape[:-1] + (p, p))
    out[..., i, j] = v
    out[..., j, i] = v
    idx = np.arange(p)
    out[..., idx, idx] = 1.0
    return out


def scale_to_correlation(W):
    """``diag(W)^{-1/2} W diag(W)^{-1/2}``, with the diagonal set to exactly 1."""
    W = np.asarray(W, dtype=float)
    d = np.diagonal(W, axis1=-2, axis2=-1)
    if np.any(d <= 0):
        raise NonPositiveDiagonal("scaling requires a strictly positive diagonal")
    s = 1.0 / np.sqrt(d)
    # the outer product is exactly symmetric, so symmetric W stays exactly symmetric
    R = W * (s[..., :, None] * s[..., None, :])
    idx = np.arange(W.shape[-1])
    R[..., idx, idx] = 1.0
    return R


def corr_covariance(rho, block_rows=None):
    """Asymptotic covariance ``C(rho)`` of ``sqrt(T) * vec(R)``.

    Entry ``(ij, kl)`` is

        rho_ij rho_kl / 2 * (rho_ik^2 + rho_il^2 + rho_jk^2 + rho_jl^2)
        - rho_ij (rho_ik rho_il + rho_jk rho_jl)
        - rho_kl (rho_ik rho_jk + rho_il rho_jl)
        + (rho_ik rho_jl + rho_il rho_jk)

    evaluated densely; rows are filled in blocks to bound peak memory.
    """
    rho = np.asarray(rho, dtype=float)
    p = rho.shape[0]
    I, J = pair_indices(p)
    m = I.size
    r_pair = rho[I, J]
    out = np.empty((m, m))
    if block_rows is None:
        block_rows = max(1, 2_000_000 // max(m, 1))
    for start in range(0, m, block_rows):
        sl = slice(start, min(start + block_rows, m))
        i = I[sl, None]
        j = J[sl, None]
        ik = rho[i, I]
        il = rho[i, J]
        jk = rho[j, I]
        jl = rho[j, J]
        rij = r_pair[sl, None]
        rkl = r_pair[None, :]
        out[sl] = (
            0.5 * rij * rkl * (ik * ik + il * il + jk * jk + jl * jl)
            - rij * (ik * il + jk * jl)
            - rkl * (ik * jk + il * jl)
            + (ik * jl + il * jk)
        )
    return out


def mean_squared_correlation(rho):
    v = vectorize(rho)
    return float(np.mean(v ** 2)) if v.size else 0.0


def effective_df(T, rho, reading="literal"):
    """Effective number of independent rows, ``T / (1 + (T - 1) psi^2)``.

    ``reading="literal"`` takes ``psi`` as the mean of squared correlations,
    so ``psi^2`` is a fourth-power mean. ``reading="rms"`` takes ``psi`` as
    the root-mean-square correlation, so ``psi^2`` is the mean square.
    """
    if T < 2:
        raise ValueError("T must be at least 2")
    msq = mean_squared_correlation(rho)
    if reading == "literal":
        psi_sq = msq ** 2
    elif reading == "rms":
        psi_sq = msq
    else:
        raise ValueError(f"unknown reading {reading!r}")
    return T / (1.0 + (T - 1) * psi_sq)


def fisher_z(r):
    r = np.asarray(r, dtype=float)
    if np.any(np.abs(r) >= 1):
        raise OutOfDomain("Fisher transform needs |r| < 1")
    out = np.arctanh(r)
    return float(out) if out.ndim == 0 else out


def group_average(matrices):
    mats = [np.asarray(R, dtype=float) for R in matrices]
    if not mats:
        raise EmptyGroup("cannot average an empty group")
    shape = mats[0].shape
    if any(R.shape != shape for R in mats):
        raise DimensionMismatch("matrices have different shapes")
    out = np.mean(np.stack(mats), axis=0)
    idx = np.arange(shape[0])
    out[idx, idx] = 1.0
    return out


@dataclass(frozen=True)
class TwoGroupSample:
    """Control (``healthy``) and perturbed (``diseased``) correlation matrices.

    ``healthy`` and ``diseased`` are stacks of shape ``(n, p, p)``. ``T`` is the
    common number of measurements per subject; it only feeds diagnostics.
    """

    healthy: np.ndarray
    diseased: np.ndarray
    T: int = None
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        h = np.asarray(self.healthy, dtype=float)
        d = np.asarray(self.diseased, dtype=float)
        for name, g in (("healthy", h), ("diseased", d)):
            if g.ndim != 3 or g.shape[1] != g.shape[2]:
                raise DimensionMismatch(f"{name} group must have shape (n, p, p)")
            if g.shape[0] < 2:
                raise EmptyGroup(f"{name} group needs at least 2 matrices")
        if h.shape[1] != d.shape[1]:
            raise DimensionMismatch("groups have different dimensions")
        if self.validate:
            for g in (h, d):
                for R in g:
                    check_correlation(R)
        object.__setattr__(self, "healthy", h)
        object.__setattr__(self, "diseased", d)

    @property
    def p(self):
        return self.healthy.shape[1]

    @property
    def n_h(self):
        return self.healthy.shape[0]

    @property
    def n_d(self):
        return self.diseased.shape[0]

    def drop(self, group, index):
        """Sample with one subject removed (used by the jackknife)."""
        h, d = self.healthy, self.diseased
        if group == "h":
            h = np.delete(h, index, axis=0)
        else:
            d = np.delete(d, index, axis=0)
        return TwoGroupSample(h, d, self.T, validate=False)

    def effective_df(self, reading="literal"):
        if self.T is None:
            return None
        pooled = group_average(np.concatenate([self.healthy, self.diseased]))
        return effective_df(self.T, pooled, reading)
