"""Shared M-estimation helpers: sandwich covariance and numerical Jacobians."""

from __future__ import annotations

import numpy as np

__all__ = ["SandwichError", "sandwich_variance", "numerical_jacobian", "cell_sums"]


class SandwichError(np.linalg.LinAlgError):
    pass


def sandwich_variance(scores, jacobian, cond_limit: float = 1e14) -> np.ndarray:
    """A^{-1} B A^{-T} for per-cluster estimating-function contributions.

    Parameters
    ----------
    scores : array_like, shape (I, K)
        Per-cluster contributions evaluated at the solution.
    jacobian : array_like, shape (K, K)
        Sum over clusters of the derivative of the contributions.

    Returns
    -------
    ndarray, shape (K, K)
    """
    psi = np.atleast_2d(np.asarray(scores, dtype=float))
    A = np.atleast_2d(np.asarray(jacobian, dtype=float))
    if psi.shape[1] != A.shape[0] or A.shape[0] != A.shape[1]:
        raise ValueError("scores and jacobian dimensions disagree")
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > cond_limit:
        raise SandwichError("sandwich Jacobian singular")
    B = psi.T @ psi
    Ainv = np.linalg.inv(A)
    V = Ainv @ B @ Ainv.T
    return 0.5 * (V + V.T)


def numerical_jacobian(fun, x, steps=None, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``fun`` at ``x``.

    ``fun`` returns an array of any shape; the result has that shape with a
    trailing axis of length ``len(x)``.
    """
    x = np.asarray(x, dtype=float)
    if steps is None:
        steps = rel_step * np.maximum(np.abs(x), 1.0)
    steps = np.broadcast_to(np.asarray(steps, dtype=float), x.shape)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = steps[k]
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2.0 * steps[k]))
    return np.stack(cols, axis=-1)


def cell_sums(values, starts, n_cells: int, nonempty) -> np.ndarray:
    """Sum contiguous runs of rows.

    Parameters
    ----------
    values : ndarray, shape (M, ...)
        Rows grouped into contiguous runs.
    starts : ndarray
        First row of every nonempty run.
    n_cells : int
        Total number of runs including empty ones.
    nonempty : ndarray of int
        Position of each nonempty run among all ``n_cells``.
    """
    values = np.asarray(values, dtype=float)
    out = np.zeros((n_cells,) + values.shape[1:])
    if starts.size:
        out[nonempty] = np.add.reduceat(values, starts, axis=0)
    return out
