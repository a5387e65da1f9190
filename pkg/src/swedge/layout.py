"""Batched block-exchangeable algebra over all clusters of a design.

Records are grouped contiguously by (cluster, period).  Every operation here
handles all clusters at once with reductions over those runs, so fitting
costs O(M P^2) per iteration regardless of the number of clusters.
"""

from __future__ import annotations

import numpy as np

from .estfun import cell_sums
from .structured_cov import inverse_coefficients, logdet_coefficients

__all__ = ["CellLayout"]


class CellLayout:
    def __init__(self, cluster, period, sizes):
        self.sizes = np.asarray(sizes, dtype=np.int64)
        self.I, self.J = self.sizes.shape
        self.cell = np.asarray(cluster) * self.J + (np.asarray(period) - 1)
        flat = self.sizes.ravel()
        self.nonempty = np.flatnonzero(flat > 0)
        self.starts = np.r_[0, np.cumsum(flat[self.nonempty])[:-1]].astype(np.int64)
        self.cluster = np.asarray(cluster)
        counts = self.sizes.sum(axis=1)
        self.cluster_nonempty = np.flatnonzero(counts > 0)
        self.cluster_starts = np.r_[0, np.cumsum(counts[self.cluster_nonempty])[:-1]].astype(np.int64)
        self.n_records = int(flat.sum())
        if self.cell.size != self.n_records:
            raise ValueError("records do not match cluster-period sizes")
        if self.cell.size > 1 and np.any(np.diff(self.cell) < 0):
            raise ValueError("records must be sorted by cluster and period")

    @classmethod
    def from_design(cls, design) -> "CellLayout":
        return cls(design.cluster, design.period, design.sizes)

    def cell_sum(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        out = cell_sums(v, self.starts, self.I * self.J, self.nonempty)
        return out.reshape((self.I, self.J) + v.shape[1:])

    def cluster_sum(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return cell_sums(v, self.cluster_starts, self.I, self.cluster_nonempty)

    def expand_cell(self, arr) -> np.ndarray:
        arr = np.asarray(arr)
        return arr.reshape((self.I * self.J,) + arr.shape[2:])[self.cell]

    def expand_cluster(self, arr) -> np.ndarray:
        return np.asarray(arr)[self.cluster]

    def coefficients(self, sigma2, tau2, kappa2):
        """Inverse scalars (a, b, q, c) for every cluster."""
        s2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (self.I,))
        t2 = np.broadcast_to(np.asarray(tau2, dtype=float), (self.I,))
        k2 = np.broadcast_to(np.asarray(kappa2, dtype=float), (self.I,))
        return inverse_coefficients(self.sizes, s2, t2, k2)

    def logdet(self, sigma2, tau2, kappa2) -> np.ndarray:
        s2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (self.I,))
        t2 = np.broadcast_to(np.asarray(tau2, dtype=float), (self.I,))
        k2 = np.broadcast_to(np.asarray(kappa2, dtype=float), (self.I,))
        return logdet_coefficients(self.sizes, s2, t2, k2)

    def apply_inverse(self, v, coefs) -> np.ndarray:
        """Inverse covariance times ``v`` (shape (M,) or (M, k)) cluster by cluster."""
        a, b, q, c = coefs
        v = np.asarray(v, dtype=float)
        s = self.cell_sum(v)
        extra = (slice(None), slice(None)) + (None,) * (v.ndim - 1)
        glob = np.einsum("ij,ij...->i...", q, s)
        per = b[extra] * s + (c[:, None] * q)[extra] * glob[:, None]
        a_rec = np.broadcast_to(np.asarray(a, dtype=float), (self.I,))[self.cluster]
        a_rec = a_rec.reshape((-1,) + (1,) * (v.ndim - 1))
        return a_rec * v - self.expand_cell(per)

    def gram(self, U, W, coefs, cell_U=None, cell_W=None) -> np.ndarray:
        """Sum over clusters of U_i' V_i W_i, using cell column sums."""
        a, b, q, c = coefs
        a_rec = np.broadcast_to(np.asarray(a, dtype=float), (self.I,))[self.cluster]
        out = (U * a_rec[:, None]).T @ W
        su = self.cell_sum(U) if cell_U is None else cell_U
        sw = self.cell_sum(W) if cell_W is None else cell_W
        out -= np.einsum("ij,ijk,ijl->kl", b, su, sw)
        gu = np.einsum("ij,ijk->ik", q, su)
        gw = np.einsum("ij,ijk->ik", q, sw)
        out -= np.einsum("i,ik,il->kl", c, gu, gw)
        return out
