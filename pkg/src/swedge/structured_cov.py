"""Closed-form inverse and log-determinant of block-exchangeable covariances.

The observed covariance of one cluster, with records ordered by period, is

    Sigma = s2 * I + t2 * 1 1' + k2 * blockdiag(1 1')

where the diagonal blocks have sizes N_1..N_J (some possibly zero).  Its
inverse has the form

    blockdiag(a I - b_j 1 1') - c q q'

with a = 1/s2, b_j = k2 / (s2 (s2 + N_j k2)), q stacking q_j = 1/(s2 + N_j k2)
over the records of period j, and c = t2 / (1 + t2 sum_j N_j q_j).  Writing c
this way keeps it finite, and exactly zero, when t2 = 0.

Every routine here is O(M) in the number of records; nothing is materialized
except by :meth:`StructuredInverse.dense`, which exists for testing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "VarianceComponents",
    "StructuredInverse",
    "inverse_coefficients",
    "logdet_coefficients",
    "invert_observed_cov",
    "logdet_observed_cov",
    "dense_observed_cov",
    "quadratic_form",
]


@dataclass(frozen=True)
class VarianceComponents:
    """Residual, cluster and cluster-period variances.

    Parameters
    ----------
    sigma2 : float
        Residual variance, strictly positive.
    tau2 : float
        Cluster random-intercept variance.
    kappa2 : float
        Cluster-period random-intercept variance.
    """

    sigma2: float
    tau2: float = 0.0
    kappa2: float = 0.0

    def __post_init__(self):
        vals = (self.sigma2, self.tau2, self.kappa2)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("variance components must be finite")
        if self.sigma2 <= 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if self.tau2 < 0 or self.kappa2 < 0:
            raise ValueError("tau2 and kappa2 must be nonnegative")

    def as_array(self) -> np.ndarray:
        return np.array([self.sigma2, self.tau2, self.kappa2])

    @property
    def total(self) -> float:
        return self.sigma2 + self.tau2 + self.kappa2

    def correlations(self) -> tuple[float, float]:
        """Implied (between-period, within-period increment) correlations."""
        tot = self.total
        return self.tau2 / tot, self.kappa2 / tot


def inverse_coefficients(sizes, sigma2, tau2, kappa2):
    """Scalars of the structured inverse, vectorized over leading axes.

    Parameters
    ----------
    sizes : array_like, shape (..., J)
        Cluster-period sizes.
    sigma2, tau2, kappa2 : float or array_like, shape (...)
        Components.  Negative ``tau2``/``kappa2`` are allowed as long as the
        covariance stays positive definite (correlation matrices use this).

    Returns
    -------
    a : ndarray, shape (...)
    b : ndarray, shape (..., J)
    q : ndarray, shape (..., J)
    c : ndarray, shape (...)
    """
    n = np.asarray(sizes, dtype=float)
    s2 = np.asarray(sigma2, dtype=float)
    t2 = np.asarray(tau2, dtype=float)
    k2 = np.asarray(kappa2, dtype=float)
    denom = s2[..., None] + n * k2[..., None]
    q = 1.0 / denom
    b = k2[..., None] / (s2[..., None] * denom)
    a = 1.0 / s2
    total = np.sum(n * q, axis=-1)
    c = t2 / (1.0 + t2 * total)
    return a, b, q, c


def logdet_coefficients(sizes, sigma2, tau2, kappa2):
    """Log-determinant by the matrix-determinant lemma, vectorized like
    :func:`inverse_coefficients`.  Empty periods contribute nothing."""
    n = np.asarray(sizes, dtype=float)
    s2 = np.asarray(sigma2, dtype=float)
    t2 = np.asarray(tau2, dtype=float)
    k2 = np.asarray(kappa2, dtype=float)
    denom = s2[..., None] + n * k2[..., None]
    present = n > 0
    per = np.where(present, (n - 1.0) * np.log(s2)[..., None]
                   + np.log(np.where(present, denom, 1.0)), 0.0)
    total = np.sum(n / denom, axis=-1)
    return np.sum(per, axis=-1) + np.log1p(t2 * total)


def _check_pd(n, s2, t2, k2):
    if s2 <= 0:
        raise ValueError("sigma2 must be positive")
    present = n > 0
    if not present.any():
        raise ValueError("all cluster-period sizes are zero")
    denom = s2 + n[present] * k2
    if np.any(denom <= 0):
        raise ValueError("covariance is not positive definite")
    if 1.0 + t2 * np.sum(n[present] / denom) <= 0:
        raise ValueError("covariance is not positive definite")


class StructuredInverse:
    """Inverse of a block-exchangeable covariance for one cluster.

    Vectors passed to :meth:`apply` must be ordered by period, with the
    first ``sizes[0]`` entries belonging to period 1 and so on.
    """

    def __init__(self, sizes, sigma2, tau2=0.0, kappa2=0.0):
        n = np.asarray(sizes, dtype=np.int64)
        if n.ndim != 1 or np.any(n < 0):
            raise ValueError("sizes must be a 1-d array of nonnegative counts")
        _check_pd(n, float(sigma2), float(tau2), float(kappa2))
        self.sizes = n
        self.components = (float(sigma2), float(tau2), float(kappa2))
        a, b, q, c = inverse_coefficients(n, sigma2, tau2, kappa2)
        self.a = float(a)
        self.b = b
        self.q = q
        self.c = float(c)
        self.logdet = float(logdet_coefficients(n, sigma2, tau2, kappa2))
        self._labels = np.repeat(np.arange(n.size), n)

    @classmethod
    def from_components(cls, sizes, vc: VarianceComponents):
        return cls(sizes, vc.sigma2, vc.tau2, vc.kappa2)

    @property
    def n_records(self) -> int:
        return int(self.sizes.sum())

    def block_sums(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n_records:
            raise ValueError(
                f"vector length {v.shape[0]} does not match {self.n_records} records")
        out = np.zeros((self.sizes.size,) + v.shape[1:])
        np.add.at(out, self._labels, v)
        return out

    def apply(self, v):
        """Return inverse-covariance times ``v`` (vector or column stack)."""
        v = np.asarray(v, dtype=float)
        s = self.block_sums(v)
        extra = (slice(None),) + (None,) * (v.ndim - 1)
        glob = np.tensordot(self.q, s, axes=(0, 0))
        per = self.b[extra] * s + self.c * self.q[extra] * glob
        return self.a * v - per[self._labels]

    def quadratic_form(self, u, v) -> float:
        u = np.asarray(u, dtype=float)
        if u.shape[0] != self.n_records:
            raise ValueError("length mismatch")
        return float(u @ self.apply(v))

    def trace(self) -> float:
        n = self.sizes
        return float(np.sum(n * (self.a - self.b)) - self.c * np.sum(n * self.q ** 2))

    def dense(self) -> np.ndarray:
        m = self.n_records
        lab = self._labels
        same = lab[:, None] == lab[None, :]
        qv = self.q[lab]
        return (self.a * np.eye(m) - np.where(same, self.b[lab][:, None], 0.0)
                - self.c * np.outer(qv, qv))


def dense_observed_cov(sizes, sigma2, tau2=0.0, kappa2=0.0) -> np.ndarray:
    """Materialize the covariance.  Intended for tests and small examples."""
    n = np.asarray(sizes, dtype=np.int64)
    lab = np.repeat(np.arange(n.size), n)
    m = lab.size
    same = (lab[:, None] == lab[None, :]).astype(float)
    return sigma2 * np.eye(m) + tau2 * np.ones((m, m)) + kappa2 * same


def invert_observed_cov(sizes, vc: VarianceComponents) -> StructuredInverse:
    return StructuredInverse.from_components(sizes, vc)


def logdet_observed_cov(sizes, vc: VarianceComponents) -> float:
    n = np.asarray(sizes)
    _check_pd(n, vc.sigma2, vc.tau2, vc.kappa2)
    return float(logdet_coefficients(n, vc.sigma2, vc.tau2, vc.kappa2))


def quadratic_form(inv: StructuredInverse, u, v) -> float:
    return inv.quadratic_form(u, v)
