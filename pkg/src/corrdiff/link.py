"""Link functions mapping a base correlation matrix and per-variable effects
to the expected correlation matrix of the perturbed group.

Two links are shipped:

* ``multiplicative``: ``g_ij = theta_ij * alpha_i * alpha_j``, null ``alpha = 1``.
* ``additive_quotient``: ``g_ij = theta_ij / (1 + alpha_i + alpha_j)``, null ``alpha = 0``.

Both act entrywise on off-diagonal pairs, so the vectorized forms
``apply_vec``/``invert_vec`` work on ``vec(theta)`` directly and the Jacobian
has at most two nonzeros per row.
"""
from typing import NamedTuple

import numpy as np

from .corrmat import pair_indices, unvectorize, vectorize
from .errors import EntryOutOfRange, QuotientPole, ZeroAlpha

RANGE_TOL = 1e-12


class LinkModel:
    name = None
    null_value = None

    def null_alpha(self, p):
        return np.full(p, float(self.null_value))

    def lower_bound(self, alpha_floor):
        """Smallest admissible alpha entry during optimization."""
        raise NotImplementedError

    # vectorized primitives, all of shape (..., m)
    def pair_factor(self, alpha):
        raise NotImplementedError

    def apply_vec(self, theta_vec, alpha):
        raise NotImplementedError

    def invert_vec(self, lam_vec, alpha):
        raise NotImplementedError

    def jacobian_vec(self, theta_vec, alpha):
        raise NotImplementedError

    def inverse_jacobian_vec(self, lam_vec, alpha):
        """d invert_vec(lam, alpha) / d alpha, shape (m, p)."""
        raise NotImplementedError

    # matrix-level API
    def apply(self, theta, alpha, check=True):
        theta = np.asarray(theta, dtype=float)
        alpha = _as_alpha(alpha, theta.shape[0])
        out = unvectorize(self.apply_vec(vectorize(theta), alpha))
        if check:
            worst = np.max(np.abs(out))
            if worst > 1.0 + RANGE_TOL:
                raise EntryOutOfRange(
                    f"link output has an entry of magnitude {worst:.6g} outside [-1, 1]"
                )
        return out

    def invert(self, lam, alpha):
        lam = np.asarray(lam, dtype=float)
        alpha = _as_alpha(alpha, lam.shape[-1])
        return unvectorize(self.invert_vec(vectorize(lam), alpha))

    def jacobian(self, theta, alpha):
        theta = np.asarray(theta, dtype=float)
        alpha = _as_alpha(alpha, theta.shape[0])
        return self.jacobian_vec(vectorize(theta), alpha)

    def __repr__(self):
        return f"{type(self).__name__}()"


class MultiplicativeLink(LinkModel):
    name = "multiplicative"
    null_value = 1.0

    def lower_bound(self, alpha_floor):
        return alpha_floor

    def pair_factor(self, alpha):
        i, j = pair_indices(alpha.shape[-1])
        return alpha[i] * alpha[j]

    def apply_vec(self, theta_vec, alpha):
        return theta_vec * self.pair_factor(alpha)

    def invert_vec(self, lam_vec, alpha):
        if np.any(alpha == 0):
            raise ZeroAlpha("multiplicative inverse needs every alpha_j != 0")
        return lam_vec / self.pair_factor(alpha)

    def jacobian_vec(self, theta_vec, alpha):
        p = alpha.shape[0]
        i, j = pair_indices(p)
        rows = np.arange(i.size)
        J = np.zeros((i.size, p))
        J[rows, i] = theta_vec * alpha[j]
        J[rows, j] = theta_vec * alpha[i]
        return J

    def inverse_jacobian_vec(self, lam_vec, alpha):
        p = alpha.shape[0]
        i, j = pair_indices(p)
        inv = self.invert_vec(lam_vec, alpha)
        rows = np.arange(i.size)
        J = np.zeros((i.size, p))
        J[rows, i] = -inv / alpha[i]
        J[rows, j] = -inv / alpha[j]
        return J


class QuotientLink(LinkModel):
    name = "additive_quotient"
    null_value = 0.0

    def lower_bound(self, alpha_floor):
        # keeps 1 + alpha_i + alpha_j >= 2 * alpha_floor
        return -0.5 + alpha_floor

    def pair_factor(self, alpha):
        i, j = pair_indices(alpha.shape[-1])
        denom = 1.0 + alpha[i] + alpha[j]
        if np.any(denom == 0):
            raise QuotientPole("1 + alpha_i + alpha_j = 0 for some pair")
        return denom

    def apply_vec(self, theta_vec, alpha):
        return theta_vec / self.pair_factor(alpha)

    def invert_vec(self, lam_vec, alpha):
        return lam_vec * self.pair_factor(alpha)

    def jacobian_vec(self, theta_vec, alpha):
        p = alpha.shape[0]
        i, j = pair_indices(p)
        d = -theta_vec / self.pair_factor(alpha) ** 2
        rows = np.arange(i.size)
        J = np.zeros((i.size, p))
        J[rows, i] = d
        J[rows, j] = d
        return J

    def inverse_jacobian_vec(self, lam_vec, alpha):
        p = alpha.shape[0]
        i, j = pair_indices(p)
        rows = np.arange(i.size)
        J = np.zeros((i.size, p))
        J[rows, i] = lam_vec
        J[rows, j] = lam_vec
        return J


LINKS = {
    "multiplicative": MultiplicativeLink,
    "additive_quotient": QuotientLink,
}


def get_link(link):
    if isinstance(link, LinkModel):
        return link
    try:
        return LINKS[link]()
    except KeyError:
        raise ValueError(
            f"unknown link {link!r}; expected one of {sorted(LINKS)}"
        ) from None


def _as_alpha(alpha, p):
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (p,):
        raise ValueError(f"alpha must have length {p}, got shape {alpha.shape}")
    return alpha


def psd_margin(theta, alpha):
    """``lambda_min(theta) - (max|alpha|^2 - 1) / min|alpha|^2``.

    Nonnegative values certify that the multiplicative link output is PSD;
    a negative value only means the sufficient condition does not hold.
    """
    a = np.abs(np.asarray(alpha, dtype=float))
    if np.any(a == 0):
        raise ZeroAlpha("psd margin undefined for alpha_j = 0")
    lam_min = np.linalg.eigvalsh(np.asarray(theta, dtype=float))[0]
    return float(lam_min - (a.max() ** 2 - 1.0) / a.min() ** 2)


class Identifiability(NamedTuple):
    identifiable: bool
    rank: int
    nonzero_count: int


def incidence_matrix(theta, zero_threshold=1e-10):
    """Rows ``e_i + e_j`` for each pair with ``|theta_ij| > zero_threshold``."""
    theta = np.asarray(theta, dtype=float)
    p = theta.shape[0]
    i, j = pair_indices(p)
    keep = np.abs(theta[i, j]) > zero_threshold
    A = np.zeros((int(keep.sum()), p))
    rows = np.arange(A.shape[0])
    A[rows, i[keep]] = 1.0
    A[rows, j[keep]] = 1.0
    return A


def identifiability_check(theta, zero_threshold=1e-10):
    A = incidence_matrix(theta, zero_threshold)
    p = np.asarray(theta).shape[0]
    rank = int(np.linalg.matrix_rank(A)) if A.size else 0
    return Identifiability(rank == p, rank, A.shape[0])

