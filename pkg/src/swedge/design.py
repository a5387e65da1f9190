"""Treatment-effect structures, design matrices and indicator algebra.

Four structures are supported.  With adoption time ``z`` and period ``j`` the
exposure duration is ``d = j - z + 1`` (treated when ``d >= 1``):

* constant: one coefficient, the indicator of being treated;
* duration: one coefficient per duration d = 1..J;
* period: one coefficient per period j = 1..J-1;
* saturated: one coefficient per (j, d) with 1 <= d <= j <= J-1.

The period and saturated structures cannot identify effects in the last
period (every cluster is treated there), so those records are dropped when
the design is built.  Columns are always ordered (period indicators,
treatment, covariates) with one indicator per retained period and no
separate intercept.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data_model import TrialData

__all__ = [
    "Structure",
    "TreatmentEffectSpec",
    "saturated_index",
    "saturated_pair",
    "treatment_row",
    "treatment_columns",
    "build_cluster_design",
    "build_design",
    "DesignMatrices",
    "summary_weights",
    "summary_label",
    "lambda_indicator",
    "delta_indicator",
    "h_indicator",
    "h_duration",
    "expected_h",
    "SelectionStructure",
]


class Structure(str, Enum):
    CONSTANT = "constant"
    DURATION = "duration"
    PERIOD = "period"
    SATURATED = "saturated"

    @classmethod
    def parse(cls, value) -> "Structure":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown treatment-effect structure {value!r}") from None


def saturated_index(j: int, d: int, J: int) -> int:
    """Column of (j, d) in the order (1,1), (2,1), (2,2), (3,1), ..."""
    if not (1 <= d <= j <= J - 1):
        raise ValueError(f"(j={j}, d={d}) outside 1 <= d <= j <= {J - 1}")
    return (j - 1) * j // 2 + (d - 1)


def saturated_pair(index: int, J: int) -> tuple[int, int]:
    """Inverse of :func:`saturated_index`."""
    n = (J - 1) * J // 2
    if not (0 <= index < n):
        raise ValueError(f"saturated index {index} outside 0..{n - 1}")
    j = int((1 + np.sqrt(1 + 8 * index)) // 2)
    while (j - 1) * j // 2 > index:
        j -= 1
    while j * (j + 1) // 2 <= index:
        j += 1
    return j, index - (j - 1) * j // 2 + 1


@dataclass(frozen=True)
class TreatmentEffectSpec:
    kind: Structure
    J: int

    def __post_init__(self):
        object.__setattr__(self, "kind", Structure.parse(self.kind))
        if self.J < 2:
            raise ValueError("J must be at least 2")

    @property
    def n_treatment(self) -> int:
        J = self.J
        return {Structure.CONSTANT: 1, Structure.DURATION: J,
                Structure.PERIOD: J - 1, Structure.SATURATED: (J - 1) * J // 2}[self.kind]

    @property
    def drops_last_period(self) -> bool:
        return self.kind in (Structure.PERIOD, Structure.SATURATED)

    @property
    def n_retained(self) -> int:
        return self.J - 1 if self.drops_last_period else self.J

    def pairs(self) -> list:
        """Index tuples labelling the treatment coefficients."""
        J = self.J
        if self.kind is Structure.CONSTANT:
            return [()]
        if self.kind is Structure.DURATION:
            return [(d,) for d in range(1, J + 1)]
        if self.kind is Structure.PERIOD:
            return [(j,) for j in range(1, J)]
        return [saturated_pair(k, J) for k in range(self.n_treatment)]

    def labels(self, symbol: str = "Δ") -> list[str]:
        if self.kind is Structure.CONSTANT:
            return [symbol]
        if self.kind is Structure.DURATION:
            return [f"{symbol}({d})" for (d,) in self.pairs()]
        if self.kind is Structure.PERIOD:
            return [f"{symbol}_{j}" for (j,) in self.pairs()]
        return [f"{symbol}_{j}({d})" for (j, d) in self.pairs()]

    def nests(self, other: "TreatmentEffectSpec") -> bool:
        """True when ``self`` is a restriction of ``other``."""
        if self.J != other.J:
            return False
        if self.kind is other.kind:
            return True
        if other.kind is Structure.SATURATED:
            return True
        return self.kind is Structure.CONSTANT


def treatment_columns(z, j, spec: TreatmentEffectSpec) -> np.ndarray:
    """Treatment block for arrays of adoption times and periods."""
    z = np.asarray(z, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    J = spec.J
    hi = J - 1 if spec.drops_last_period else J
    if np.any((j < 1) | (j > hi)):
        raise ValueError(f"period outside 1..{hi} for {spec.kind.value} structure")
    if np.any((z < 1) | (z > J)):
        raise ValueError(f"adoption time outside 1..{J}")
    m = z.size
    out = np.zeros((m, spec.n_treatment))
    treated = z <= j
    rows = np.flatnonzero(treated)
    d = (j - z + 1)[rows]
    if spec.kind is Structure.CONSTANT:
        col = np.zeros(rows.size, dtype=np.int64)
    elif spec.kind is Structure.DURATION:
        col = d - 1
    elif spec.kind is Structure.PERIOD:
        col = j[rows] - 1
    else:
        jj = j[rows]
        col = (jj - 1) * jj // 2 + (d - 1)
    out[rows, col] = 1.0
    return out


def treatment_row(z: int, j: int, spec: TreatmentEffectSpec) -> np.ndarray:
    return treatment_columns([z], [j], spec)[0]


def build_cluster_design(z: int, periods, x, spec: TreatmentEffectSpec) -> np.ndarray:
    """Design matrix for one cluster's records (already restricted to the
    retained periods)."""
    periods = np.asarray(periods, dtype=np.int64)
    x = np.asarray(x, dtype=float).reshape(periods.size, -1)
    per = np.zeros((periods.size, spec.n_retained))
    per[np.arange(periods.size), periods - 1] = 1.0
    trt = treatment_columns(np.full(periods.size, z), periods, spec)
    return np.hstack([per, trt, x])


@dataclass
class DesignMatrices:
    """Stacked design over all clusters, records grouped by (cluster, period).

    Attributes
    ----------
    Q : ndarray, shape (M, P)
    y : ndarray, shape (M,)
    x : ndarray, shape (M, p)
    cluster : ndarray, shape (M,)
        Cluster position 0..I-1.
    period : ndarray, shape (M,)
        Period 1..J' of each retained record.
    sizes : ndarray, shape (I, J')
        Retained cluster-period sizes.
    adoption : ndarray, shape (I,)
    spec : TreatmentEffectSpec
    keep : ndarray of bool
        Which records of the source data were retained.
    """

    Q: np.ndarray
    y: np.ndarray
    x: np.ndarray
    cluster: np.ndarray
    period: np.ndarray
    sizes: np.ndarray
    adoption: np.ndarray
    spec: TreatmentEffectSpec
    keep: np.ndarray
    covariate_names: tuple
    n_periods_used: int

    @property
    def n_clusters(self) -> int:
        return self.sizes.shape[0]

    @property
    def n_params(self) -> int:
        return self.Q.shape[1]

    def treatment_slice(self) -> slice:
        J = self.n_periods_used
        return slice(J, J + self.spec.n_treatment)

    def covariate_slice(self) -> slice:
        return slice(self.n_periods_used + self.spec.n_treatment, self.Q.shape[1])

    def column_names(self) -> list[str]:
        per = [f"period{j}" for j in range(1, self.n_periods_used + 1)]
        return per + self.spec.labels("beta") + list(self.covariate_names)

    def cluster_bounds(self) -> np.ndarray:
        counts = self.sizes.sum(axis=1)
        return np.r_[0, np.cumsum(counts)]


def build_design(data: TrialData, spec: TreatmentEffectSpec,
                 max_period: int | None = None) -> DesignMatrices:
    """Stack the design over clusters.

    ``max_period`` restricts the records to periods ``1..max_period``; it
    defaults to the structure's retained periods.  A restricted structure
    compared against one that drops the last period is refitted this way.
    """
    if spec.J != data.n_periods:
        raise ValueError(f"spec has J={spec.J} but data has {data.n_periods} periods")
    used = spec.n_retained if max_period is None else int(max_period)
    if not 1 <= used <= spec.n_retained:
        raise ValueError(f"max_period must lie in 1..{spec.n_retained}")
    keep = data.period <= used
    period = data.period[keep]
    x = data.x[keep]
    z = data.record_adoption()[keep]
    per = np.zeros((period.size, used))
    per[np.arange(period.size), period - 1] = 1.0
    trt = treatment_columns(z, period, spec)
    Q = np.hstack([per, trt, x])
    return DesignMatrices(Q=Q, y=data.y[keep], x=x, cluster=data.cluster_index[keep],
                          period=period, sizes=data.sizes[:, :used].copy(),
                          adoption=data.adoption.copy(), spec=spec, keep=keep,
                          covariate_names=data.covariate_names, n_periods_used=used)


_SUMMARY_FOR = {"davg": Structure.DURATION, "pavg": Structure.PERIOD,
                "savg": Structure.SATURATED}


def summary_weights(kind: str, J: int, custom=None, size: int | None = None) -> np.ndarray:
    """Weights over treatment coefficients, summing to one.

    ``kind`` is one of ``"Davg"``, ``"Pavg"``, ``"Savg"`` (equal weights over
    the duration, period or saturated coefficients) or ``"custom"``, in which
    case ``custom`` is returned after checking its length against ``size``
    and that it sums to one.
    """
    k = kind.lower()
    if k in _SUMMARY_FOR:
        n = TreatmentEffectSpec(_SUMMARY_FOR[k], J).n_treatment
        return np.full(n, 1.0 / n)
    if k != "custom":
        raise ValueError(f"unknown summary kind {kind!r}")
    if custom is None:
        raise ValueError("custom weights required")
    w = np.asarray(custom, dtype=float).ravel()
    if size is not None and w.size != size:
        raise ValueError(f"expected {size} weights, got {w.size}")
    if abs(w.sum() - 1.0) > 1e-12:
        raise ValueError(f"weights sum to {w.sum()!r}, not 1")
    return w


def summary_label(kind: Structure, symbol: str = "Δ", name: str | None = None) -> str:
    if name:
        return f"{symbol}^{{{name}}}"
    tag = {Structure.DURATION: "D-avg", Structure.PERIOD: "P-avg",
           Structure.SATURATED: "S-avg", Structure.CONSTANT: "avg"}[kind]
    return f"{symbol}^{{{tag}}}"


# -- indicator matrices -----------------------------------------------------

def lambda_indicator(z: int, d: int, J: int) -> np.ndarray:
    """diag of I{z = j - d + 1} over j = 1..J: cluster at duration d in j."""
    j = np.arange(1, J + 1)
    return np.diag((z == j - d + 1).astype(float))


def delta_indicator(z: int, J: int) -> np.ndarray:
    """diag of I{z <= j}: the sum of :func:`lambda_indicator` over d."""
    j = np.arange(1, J + 1)
    return np.diag((z <= j).astype(float))


def h_indicator(z: int, J: int) -> np.ndarray:
    """J x J matrix with entry (j, d) = I{z = j - d + 1}."""
    j = np.arange(1, J + 1)[:, None]
    d = np.arange(1, J + 1)[None, :]
    return (z == j - d + 1).astype(float)


def h_duration(d: int, J: int) -> np.ndarray:
    """J x J matrix whose d-th column is all ones."""
    out = np.zeros((J, J))
    out[:, d - 1] = 1.0
    return out


def expected_h(probs, J: int) -> np.ndarray:
    """Expectation of :func:`h_indicator` over the adoption distribution."""
    p = np.asarray(probs, dtype=float)
    out = np.zeros((J, J))
    for j in range(1, J + 1):
        for d in range(1, j + 1):
            out[j - 1, d - 1] = p[j - d]
    return out


class SelectionStructure:
    """Enrollment pattern of one cluster and its selection matrices.

    Parameters
    ----------
    enrolled : sequence of array_like
        For each period, the positions (0..N_i-1) of the enrolled members of
        a source population of size ``population``.
    population : int
    """

    def __init__(self, enrolled, population: int):
        self.population = int(population)
        self.enrolled = [np.sort(np.asarray(e, dtype=np.int64)) for e in enrolled]
        for e in self.enrolled:
            if e.size and (e.min() < 0 or e.max() >= population or np.unique(e).size != e.size):
                raise ValueError("enrolled positions must be distinct and within the population")

    @property
    def sizes(self) -> np.ndarray:
        return np.array([e.size for e in self.enrolled])

    def indicator(self) -> np.ndarray:
        """Stacked enrollment indicator S_i of length J * N_i."""
        s = np.zeros((len(self.enrolled), self.population))
        for j, e in enumerate(self.enrolled):
            s[j, e] = 1.0
        return s.ravel()

    def block(self, j: int) -> np.ndarray:
        """D_ij, the N_i x N_ij selection for period j (1-based)."""
        e = self.enrolled[j - 1]
        out = np.zeros((self.population, e.size))
        out[e, np.arange(e.size)] = 1.0
        return out

    def matrix(self) -> np.ndarray:
        """Block-diagonal D_i of shape (J N_i, M_i)."""
        blocks = [self.block(j) for j in range(1, len(self.enrolled) + 1)]
        rows = sum(b.shape[0] for b in blocks)
        cols = sum(b.shape[1] for b in blocks)
        out = np.zeros((rows, cols))
        r = c = 0
        for b in blocks:
            out[r:r + b.shape[0], c:c + b.shape[1]] = b
            r += b.shape[0]
            c += b.shape[1]
        return out
