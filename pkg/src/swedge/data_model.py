"""Long-format stepped-wedge trial data: loading, validation and indexing.

A record exists for every enrolled individual in every period in which they
were observed.  Records are kept sorted by (cluster, period) so that each
cluster's outcome vector is naturally ordered in period blocks, which is the
layout the structured covariance routines expect.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "DataError",
    "Diagnostic",
    "ObsRecord",
    "ClusterInfo",
    "RandomizationSpec",
    "TrialData",
    "load_trial_csv",
    "write_trial_csv",
    "validate",
    "require_valid",
]

DEFAULT_SCHEMA = {"cluster": "cluster", "period": "period", "id": "id", "y": "y", "z": "z"}


class DataError(ValueError):
    """Raised when input data cannot be turned into a valid trial."""


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" or "warning"
    code: str
    message: str

    def __str__(self):
        return f"{self.severity}: {self.message}"


@dataclass(frozen=True)
class ObsRecord:
    cluster_id: str
    period: int
    individual_key: str
    outcome: float
    covariates: tuple


@dataclass(frozen=True)
class ClusterInfo:
    adoption_time: int
    cluster_period_sizes: tuple

    @property
    def total(self) -> int:
        return int(sum(self.cluster_period_sizes))


@dataclass(frozen=True)
class RandomizationSpec:
    """Probabilities of each adoption time.

    ``source`` is ``"design"`` when supplied by the user and ``"empirical"``
    when estimated as the fraction of clusters adopting at each period.
    """

    probs: tuple
    source: str = "design"
    cumulative: tuple = field(init=False)

    def __post_init__(self):
        p = tuple(float(v) for v in self.probs)
        object.__setattr__(self, "probs", p)
        if len(p) < 2:
            raise DataError("need at least two periods")
        if any(v < 0 or not np.isfinite(v) for v in p):
            raise DataError("randomization probabilities must be nonnegative")
        if abs(sum(p) - 1.0) > 1e-12:
            raise DataError(f"randomization probabilities sum to {sum(p)!r}, not 1")
        cum = np.cumsum(p)
        cum[-1] = 1.0
        object.__setattr__(self, "cumulative", tuple(float(v) for v in cum))

    @classmethod
    def empirical(cls, adoption, n_periods: int) -> "RandomizationSpec":
        counts = np.bincount(np.asarray(adoption) - 1, minlength=n_periods)[:n_periods]
        total = int(counts.sum())
        fr = [Fraction(int(c), total) for c in counts]
        cum, acc = [], Fraction(0)
        for f in fr:
            acc += f
            cum.append(float(acc))
        spec = cls(tuple(float(f) for f in fr), "empirical")
        object.__setattr__(spec, "cumulative", tuple(cum))
        return spec

    @property
    def J(self) -> int:
        return len(self.probs)

    def positive(self) -> bool:
        return all(v > 0 for v in self.probs)


class TrialData:
    """Validated-shape container of one stepped-wedge trial.

    Parameters
    ----------
    cluster : sequence
        Cluster label of each record.
    period : sequence of int
        Period of each record, 1..J.
    y : sequence of float
        Outcomes.
    adoption : mapping
        Cluster label to adoption time.
    x : array_like, shape (M, p), optional
        Baseline covariates.
    ids : sequence, optional
        Individual keys; by default every record is its own individual.
    covariate_names : sequence of str, optional
    n_periods : int, optional
        J.  Defaults to the largest observed period or adoption time.
    randomization : RandomizationSpec, optional
        Defaults to the empirical adoption-time distribution.
    """

    def __init__(self, cluster, period, y, adoption: Mapping, x=None, ids=None,
                 covariate_names: Sequence[str] | None = None,
                 n_periods: int | None = None,
                 randomization: RandomizationSpec | None = None):
        cluster = np.asarray([str(c) for c in cluster], dtype=object)
        period = np.asarray(period)
        y = np.asarray(y, dtype=float)
        m = cluster.size
        if period.shape != (m,) or y.shape != (m,):
            raise DataError("cluster, period and y must have the same length")
        if m == 0:
            raise DataError("no records")
        if not np.issubdtype(period.dtype, np.integer):
            pf = period.astype(float)
            if np.any(pf != np.round(pf)):
                raise DataError("periods must be integers")
            period = pf.astype(np.int64)
        if x is None:
            x = np.zeros((m, 0))
        x = np.asarray(x, dtype=float).reshape(m, -1)
        if covariate_names is None:
            covariate_names = [f"x{k + 1}" for k in range(x.shape[1])]
        if len(covariate_names) != x.shape[1]:
            raise DataError("covariate_names does not match covariate columns")
        adoption = {str(k): int(v) for k, v in adoption.items()}
        labels = sorted(set(cluster.tolist()), key=_natural_key)
        missing = [c for c in labels if c not in adoption]
        if missing:
            raise DataError(f"no adoption time for cluster(s) {missing[:5]}")
        labels = [c for c in sorted(adoption, key=_natural_key)]
        code = {c: i for i, c in enumerate(labels)}
        cidx = np.fromiter((code[c] for c in cluster), dtype=np.int64, count=m)
        if ids is None:
            ids = np.arange(m)
        ids = np.asarray([str(v) for v in ids], dtype=object)

        order = np.lexsort((period, cidx))
        self.cluster_labels = tuple(labels)
        self.cluster_index = cidx[order]
        self.period = period[order].astype(np.int64)
        self.ids = ids[order]
        self.y = y[order]
        self.x = x[order]
        self.covariate_names = tuple(str(v) for v in covariate_names)
        self.adoption = np.array([adoption[c] for c in labels], dtype=np.int64)
        if n_periods is None:
            n_periods = int(max(self.period.max(), self.adoption.max()))
        self.n_periods = int(n_periods)
        if randomization is None:
            ok = (self.adoption >= 1) & (self.adoption <= self.n_periods)
            if ok.all() and self.n_periods >= 2:
                randomization = RandomizationSpec.empirical(self.adoption, self.n_periods)
        self.randomization = randomization
        valid_p = (self.period >= 1) & (self.period <= self.n_periods)
        sizes = np.zeros((len(labels), self.n_periods), dtype=np.int64)
        np.add.at(sizes, (self.cluster_index[valid_p], self.period[valid_p] - 1), 1)
        self.sizes = sizes
        self.metadata: dict = {}

    # -- views -------------------------------------------------------------
    @property
    def n_clusters(self) -> int:
        return len(self.cluster_labels)

    @property
    def n_records(self) -> int:
        return int(self.y.size)

    @property
    def J(self) -> int:
        return self.n_periods

    @property
    def clusters(self) -> dict:
        return {c: ClusterInfo(int(self.adoption[i]), tuple(int(v) for v in self.sizes[i]))
                for i, c in enumerate(self.cluster_labels)}

    def records(self) -> Iterator[ObsRecord]:
        for r in range(self.n_records):
            yield ObsRecord(self.cluster_labels[self.cluster_index[r]], int(self.period[r]),
                            self.ids[r], float(self.y[r]), tuple(self.x[r].tolist()))

    def record_adoption(self) -> np.ndarray:
        """Adoption time of the cluster of each record."""
        return self.adoption[self.cluster_index]

    def with_randomization(self, randomization: RandomizationSpec) -> "TrialData":
        if randomization.J != self.n_periods:
            raise DataError(
                f"randomization has {randomization.J} periods, data has {self.n_periods}")
        out = self._copy()
        out.randomization = randomization
        return out

    def select_covariates(self, names: Sequence[str]) -> "TrialData":
        """Return a view keeping only the named covariates, in the given order."""
        unknown = [n for n in names if n not in self.covariate_names]
        if unknown:
            raise DataError(f"unknown covariate(s): {', '.join(unknown)}")
        cols = [self.covariate_names.index(n) for n in names]
        out = self._copy()
        out.x = self.x[:, cols]
        out.covariate_names = tuple(names)
        return out

    def _copy(self) -> "TrialData":
        out = object.__new__(TrialData)
        out.__dict__.update(self.__dict__)
        out.metadata = dict(self.metadata)
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.cluster_index, self.period, self.y, self.x, self.adoption):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update("|".join(self.covariate_names).encode())
        return h.hexdigest()[:16]


def _natural_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def validate(data: TrialData) -> list[Diagnostic]:
    """Return every invariant violation and warning; never raises."""
    out: list[Diagnostic] = []
    J = data.n_periods
    if J < 2:
        out.append(Diagnostic("error", "periods", "need at least two periods"))
    bad_p = (data.period < 1) | (data.period > J)
    if bad_p.any():
        out.append(Diagnostic("error", "period_range",
                              f"period out of range 1..{J}: {sorted(set(data.period[bad_p].tolist()))[:5]}"))
    bad_z = (data.adoption < 1) | (data.adoption > J)
    if bad_z.any():
        labs = [data.cluster_labels[i] for i in np.flatnonzero(bad_z)[:5]]
        out.append(Diagnostic("error", "adoption_range",
                              f"adoption time outside 1..{J} for cluster(s) {labs}"))
    if not np.all(np.isfinite(data.y)):
        out.append(Diagnostic("error", "nonfinite", "non-finite outcome"))
    if data.x.size and not np.all(np.isfinite(data.x)):
        out.append(Diagnostic("error", "nonfinite", "non-finite covariate"))
    empty = np.flatnonzero(data.sizes.sum(axis=1) == 0)
    if empty.size:
        out.append(Diagnostic("error", "empty_cluster",
                              f"cluster(s) without records: {[data.cluster_labels[i] for i in empty[:5]]}"))

    # unique individuals within a cluster-period, baseline covariates
    _, id_code = np.unique(data.ids.astype(str), return_inverse=True)
    n_id = int(id_code.max()) + 1
    cell = (data.cluster_index * (J + 2) + data.period) * n_id + id_code
    if np.unique(cell).size < cell.size:
        out.append(Diagnostic("error", "duplicate_individual",
                              "individual key repeated within a cluster-period"))
    if data.x.shape[1]:
        person = data.cluster_index * n_id + id_code
        order = np.lexsort((person,))
        ps, xs = person[order], data.x[order]
        same = ps[1:] == ps[:-1]
        changed = same & np.any(xs[1:] != xs[:-1], axis=1)
        if changed.any():
            out.append(Diagnostic("error", "non_baseline_covariate",
                                  "non-baseline covariate: an individual's covariates change across periods"))

    if J >= 2 and not bad_z.any():
        counts = np.bincount(data.adoption - 1, minlength=J)
        if counts[0] == data.n_clusters:
            out.append(Diagnostic("error", "positivity",
                                  "no untreated contrast; positivity violated (every cluster adopts at period 1)"))
        elif np.any(counts == 0):
            miss = (np.flatnonzero(counts == 0) + 1).tolist()
            out.append(Diagnostic("error", "positivity",
                                  f"positivity violated: no cluster adopts at period(s) {miss}"))
    rs = data.randomization
    if rs is not None and rs.J == J and not rs.positive():
        out.append(Diagnostic("error", "positivity",
                              "positivity violated: a randomization probability is zero"))
    if rs is not None and rs.J != J:
        out.append(Diagnostic("error", "randomization",
                              f"randomization has {rs.J} periods, data has {J}"))
    if J >= 2 and not bad_p.any():
        empty_cp = int(np.sum(data.sizes == 0))
        if empty_cp:
            out.append(Diagnostic("warning", "empty_cluster_period",
                                  f"{empty_cp} cluster-period(s) have no records"))
    return out


def require_valid(data: TrialData) -> None:
    errs = [d for d in validate(data) if d.severity == "error"]
    if errs:
        raise DataError("; ".join(d.message for d in errs))


def load_trial_csv(path, schema: Mapping[str, str] | None = None,
                   covariates: Sequence[str] | None = None,
                   design_probs: Sequence[float] | None = None,
                   n_periods: int | None = None) -> TrialData:
    """Read a long-format CSV into a validated :class:`TrialData`.

    Parameters
    ----------
    path : path-like
    schema : mapping, optional
        Maps the logical columns ``cluster``, ``period``, ``id``, ``y``, ``z``
        to header names.  ``id`` may be absent from the file.
    covariates : sequence of str, optional
        Covariate columns; defaults to every column not in the schema.
    design_probs : sequence of float, optional
        Design randomization probabilities; the empirical distribution is
        used when omitted.
    """
    sch = dict(DEFAULT_SCHEMA)
    if schema:
        sch.update(schema)
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty CSV file") from None
        rows = [r for r in reader if r]
    col = {h: i for i, h in enumerate(header)}
    for key in ("cluster", "period", "y", "z"):
        if sch[key] not in col:
            raise DataError(f"missing column '{sch[key]}'")
    has_id = sch["id"] in col
    used = {sch[k] for k in sch if k != "id" or has_id}
    if covariates is None:
        covariates = [h for h in header if h not in used]
    for name in covariates:
        if name not in col:
            raise DataError(f"missing covariate column '{name}'")
    width = len(header)
    if any(len(r) != width for r in rows):
        raise DataError("ragged CSV: rows differ in length from the header")

    def numeric(idx, what):
        out = np.empty(len(rows))
        for n, r in enumerate(rows):
            try:
                out[n] = float(r[idx])
            except ValueError:
                raise DataError(f"non-numeric {what} on line {n + 2}: {r[idx]!r}") from None
        return out

    cluster = [r[col[sch["cluster"]]].strip() for r in rows]
    period = numeric(col[sch["period"]], "period")
    y = numeric(col[sch["y"]], "outcome")
    z = numeric(col[sch["z"]], "adoption_time")
    if np.any(period != np.round(period)) or np.any(z != np.round(z)):
        raise DataError("period and adoption_time must be integers")
    x = np.column_stack([numeric(col[c], f"covariate {c}") for c in covariates]) \
        if covariates else np.zeros((len(rows), 0))
    ids = [r[col[sch["id"]]].strip() for r in rows] if has_id else None

    adoption: dict = {}
    for c, zz in zip(cluster, z.astype(np.int64)):
        prev = adoption.setdefault(c, int(zz))
        if prev != zz:
            raise DataError(f"cluster {c} has inconsistent adoption_time ({prev} vs {zz})")
    if n_periods is None and design_probs is not None:
        n_periods = len(design_probs)
    rand = RandomizationSpec(tuple(design_probs), "design") if design_probs is not None else None
    data = TrialData(cluster, period.astype(np.int64), y, adoption, x=x, ids=ids,
                     covariate_names=covariates, n_periods=n_periods, randomization=rand)
    require_valid(data)
    return data


def write_trial_csv(data: TrialData, path) -> None:
    """Write records in the column order cluster, period, id, y, z, covariates."""
    z = data.record_adoption()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "period", "id", "y", "z", *data.covariate_names])
        for r in range(data.n_records):
            w.writerow([data.cluster_labels[data.cluster_index[r]], int(data.period[r]),
                        data.ids[r], repr(float(data.y[r])), int(z[r]),
                        *(repr(float(v)) for v in data.x[r])])
