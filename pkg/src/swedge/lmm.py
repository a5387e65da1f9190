"""Maximum-likelihood working linear mixed models.

The working model has one fixed effect per retained period, treatment
coefficients according to a :class:`~swedge.design.TreatmentEffectSpec`,
linear covariate effects, and a covariance

    sigma2 I + tau2 1 1' + kappa2 blockdiag(1 1')

per cluster.  The independence and exchangeable structures pin kappa2 (and
tau2) to zero.  The parameter vector is ordered (beta, sigma2, tau2, kappa2)
with pinned components omitted.

Fitting profiles beta out by generalized least squares, maximizes the
profile likelihood over log variance components with L-BFGS-B, then polishes
with Newton steps on the natural scale.  Inference uses the per-cluster
Gaussian scores in a sandwich, which stays valid when the working model is
misspecified.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.stats import chi2

from .data_model import TrialData, require_valid
from .design import DesignMatrices, Structure, TreatmentEffectSpec, build_design, summary_weights
from .estfun import SandwichError, numerical_jacobian, sandwich_variance
from .layout import CellLayout
from .structured_cov import StructuredInverse, VarianceComponents

__all__ = [
    "Correlation",
    "FitError",
    "RankDeficientError",
    "LmmFit",
    "LrtResult",
    "fit_lmm",
    "lmm_score",
    "lmm_loglik",
    "cluster_scores",
    "extract_estimands",
    "lrt_structures",
    "check_rank",
    "min_variance_weights",
    "sandwich_variance",
]

VC_NAMES = ("sigma2", "tau2", "kappa2")
FLOOR = 1e-10
TOL = 1e-8
LOG_2PI = np.log(2.0 * np.pi)


class Correlation(str, Enum):
    INDEPENDENCE = "independence"
    EXCHANGEABLE = "exchangeable"
    NESTED = "nested"

    @classmethod
    def parse(cls, value) -> "Correlation":
        if isinstance(value, cls):
            return value
        v = str(value).lower()
        aliases = {"nested-exchangeable": "nested", "nested_exchangeable": "nested",
                   "ind": "independence", "exch": "exchangeable"}
        try:
            return cls(aliases.get(v, v))
        except ValueError:
            raise ValueError(f"unknown correlation structure {value!r}") from None

    @property
    def free(self) -> tuple:
        return {Correlation.INDEPENDENCE: (0,), Correlation.EXCHANGEABLE: (0, 1),
                Correlation.NESTED: (0, 1, 2)}[self]


class FitError(RuntimeError):
    """Raised when a model cannot be fitted."""


class RankDeficientError(FitError):
    pass


def check_rank(Q, names=None, tol: float = 1e-10) -> None:
    """Raise :class:`RankDeficientError` naming an unidentified column."""
    Q = np.asarray(Q, dtype=float)
    if Q.shape[0] < Q.shape[1]:
        raise RankDeficientError(f"{Q.shape[0]} records for {Q.shape[1]} coefficients")
    _, R, piv = scipy.linalg.qr(Q, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * diag[0])) if diag.size and diag[0] > 0 else 0
    if rank < Q.shape[1]:
        bad = sorted(piv[rank:].tolist())
        label = [names[k] if names else f"column {k}" for k in bad]
        raise RankDeficientError(
            f"design is rank deficient; unidentified coefficient(s): {', '.join(label)}")


# -- per-cluster pieces -------------------------------------------------------

def _traces(sizes, coefs):
    """Per-cluster tr(V), tr(V 11') and tr(V blockdiag(11'))."""
    a, b, q, c = coefs
    n = np.asarray(sizes, dtype=float)
    a = np.asarray(a, dtype=float)
    a2 = a[..., None] if a.ndim else a
    t_i = np.sum(n * (a2 - b), axis=-1) - c * np.sum(n * q * q, axis=-1)
    t_one = np.sum(n * a2, axis=-1) - np.sum(b * n * n, axis=-1) - c * np.sum(q * n, axis=-1) ** 2
    t_blk = np.sum(n * a2 - b * n * n - c[..., None] * (q * n) ** 2, axis=-1)
    return t_i, t_one, t_blk


def cluster_scores(layout: CellLayout, Q, y, beta, vc, free=(0, 1, 2)):
    """Per-cluster Gaussian scores and log-likelihoods.

    Returns
    -------
    scores : ndarray, shape (I, P + len(free))
    loglik : ndarray, shape (I,)
    """
    s2, t2, k2 = vc
    coefs = layout.coefficients(s2, t2, k2)
    r = y - Q @ beta
    u = layout.apply_inverse(r, coefs)
    s_beta = layout.cluster_sum(Q * u[:, None])
    t_i, t_one, t_blk = _traces(layout.sizes, coefs)
    uu = layout.cluster_sum(u * u)
    su = layout.cluster_sum(u)
    cu = layout.cell_sum(u)
    g = np.column_stack([0.5 * (-t_i + uu), 0.5 * (-t_one + su * su),
                         0.5 * (-t_blk + np.sum(cu * cu, axis=1))])
    rvr = layout.cluster_sum(r * u)
    ll = -0.5 * (layout.sizes.sum(axis=1) * LOG_2PI + layout.logdet(s2, t2, k2) + rvr)
    return np.hstack([s_beta, g[:, list(free)]]), ll


def lmm_score(Q, y, sizes, beta, vc: VarianceComponents, correlation="nested") -> np.ndarray:
    """Score of one cluster's Gaussian log-likelihood.

    ``Q`` and ``y`` must be ordered by period with block sizes ``sizes``.
    The result is ordered (beta, sigma2, tau2, kappa2) with components that
    the correlation structure pins to zero omitted.
    """
    corr = Correlation.parse(correlation)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    y = np.asarray(y, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if Q.shape != (y.size, beta.size):
        raise ValueError("dimension mismatch between Q, y and beta")
    inv = StructuredInverse.from_components(sizes, vc)
    r = y - Q @ beta
    u = inv.apply(r)
    n = inv.sizes
    coefs = (inv.a, inv.b, inv.q, np.asarray(inv.c))
    t_i, t_one, t_blk = _traces(n, coefs)
    blk = inv.block_sums(u)
    g = np.array([0.5 * (-t_i + u @ u), 0.5 * (-t_one + u.sum() ** 2),
                  0.5 * (-t_blk + blk @ blk)])
    return np.concatenate([Q.T @ u, g[list(corr.free)]])


def lmm_loglik(Q, y, sizes, beta, vc: VarianceComponents) -> float:
    """Exact Gaussian log-likelihood of one cluster."""
    inv = StructuredInverse.from_components(sizes, vc)
    r = np.asarray(y, dtype=float) - np.asarray(Q, dtype=float) @ np.asarray(beta, dtype=float)
    return -0.5 * (r.size * LOG_2PI + inv.logdet + inv.quadratic_form(r, r))


# -- fitting ------------------------------------------------------------------

@dataclass
class LmmFit:
    """A fitted working mixed model.

    Attributes
    ----------
    beta : ndarray
        Period, treatment and covariate coefficients.
    vc : VarianceComponents
    loglik : float
    scores : ndarray, shape (I, K)
        Per-cluster estimating-function contributions at the solution,
        for the parameters in ``param_names``.
    jacobian : ndarray, shape (K, K)
        Sum over clusters of the score derivatives.
    model_based_cov, sandwich_cov : ndarray, shape (K, K)
    converged : bool
    boundary : tuple of str
        Variance components estimated at the lower bound; they are held
        fixed in the sandwich.
    """

    beta: np.ndarray
    vc: VarianceComponents
    loglik: float
    scores: np.ndarray
    jacobian: np.ndarray
    model_based_cov: np.ndarray
    sandwich_cov: np.ndarray
    converged: bool
    boundary: tuple
    param_names: list
    design: DesignMatrices = field(repr=False)
    correlation: Correlation
    score_norm: float
    n_iter: int
    data: TrialData | None = field(default=None, repr=False)

    @property
    def spec(self) -> TreatmentEffectSpec:
        return self.design.spec

    @property
    def n_beta(self) -> int:
        return self.beta.size

    @property
    def treatment(self) -> np.ndarray:
        return self.beta[self.design.treatment_slice()]

    def treatment_cov(self, robust: bool = True) -> np.ndarray:
        sl = self.design.treatment_slice()
        cov = self.sandwich_cov if robust else self.model_based_cov
        return cov[sl, sl]

    @property
    def free_components(self) -> tuple:
        return tuple(n for n in self.param_names[self.n_beta:])


class _Profile:
    """Profile log-likelihood over variance components."""

    def __init__(self, design: DesignMatrices):
        self.Q = design.Q
        self.y = design.y
        self.layout = CellLayout.from_design(design)
        self.cQ = self.layout.cell_sum(self.Q)
        self.cy = self.layout.cell_sum(self.y[:, None])
        self.M = self.layout.n_records
        self.n_eval = 0

    def gls(self, vc):
        coefs = self.layout.coefficients(*vc)
        G = self.layout.gram(self.Q, self.Q, coefs, self.cQ, self.cQ)
        h = self.layout.gram(self.Q, self.y[:, None], coefs, self.cQ, self.cy)[:, 0]
        try:
            beta = scipy.linalg.solve(G, h, assume_a="pos")
        except (np.linalg.LinAlgError, ValueError):
            beta = np.linalg.lstsq(G, h, rcond=None)[0]
        return beta, G

    def evaluate(self, vc):
        """Profile log-likelihood and its gradient in (sigma2, tau2, kappa2)."""
        self.n_eval += 1
        beta, G = self.gls(vc)
        sc, ll = cluster_scores(self.layout, self.Q, self.y, beta, vc)
        return float(ll.sum()), sc[:, -3:].sum(axis=0), beta, G


def _moment_start(layout: CellLayout, r, corr: Correlation):
    total, cross, within, _ = layout_pair_moments(layout, r)
    if corr is Correlation.INDEPENDENCE:
        return np.array([max(total, 1e-4), 0.0, 0.0])
    if corr is Correlation.EXCHANGEABLE:
        t2 = max(cross if np.isfinite(cross) else within, 1e-4)
        return np.array([max(total - t2, 1e-4), t2, 0.0])
    t2 = max(cross, 1e-4) if np.isfinite(cross) else 1e-4
    k2 = max(within - t2, 1e-4)
    return np.array([max(total - t2 - k2, 1e-4), t2, k2])


def layout_pair_moments(layout: CellLayout, r):
    """Pooled mean of r^2 and of distinct-pair products across and within
    periods.  Returns (total, cross, within, has_cross)."""
    r = np.asarray(r, dtype=float)
    s = layout.cell_sum(r)
    sq = layout.cell_sum(r * r)
    n = layout.sizes.astype(float)
    S = s.sum(axis=1)
    within_sum = np.sum(s * s - sq) / 2.0
    cross_sum = np.sum(S * S - np.sum(s * s, axis=1)) / 2.0
    m_i = n.sum(axis=1)
    n_within = np.sum(n * (n - 1)) / 2.0
    n_cross = np.sum(m_i * m_i - np.sum(n * n, axis=1)) / 2.0
    total = float(np.sum(sq) / n.sum())
    within = float(within_sum / n_within) if n_within > 0 else np.nan
    cross = float(cross_sum / n_cross) if n_cross > 0 else np.nan
    return total, cross, within, n_cross > 0


def _scaled_norm(score, vc_vals, G, M, n_beta):
    sb = np.abs(score[:n_beta]) / np.sqrt(np.maximum(np.diag(G), 1e-300) * M)
    sv = np.abs(score[n_beta:]) * np.asarray(vc_vals) / M
    return float(max(sb.max(initial=0.0), sv.max(initial=0.0)))


def fit_lmm(data: TrialData, spec: TreatmentEffectSpec, correlation="nested",
            max_period: int | None = None, max_iter: int = 200) -> LmmFit:
    """Fit the working mixed model by maximum likelihood.

    Parameters
    ----------
    data : TrialData
    spec : TreatmentEffectSpec
    correlation : {"independence", "exchangeable", "nested"}
    max_period : int, optional
        Restrict to periods 1..max_period (used to refit a restricted
        structure on the periods retained by a more general one).
    max_iter : int
        Cap on profile-likelihood iterations.

    Returns
    -------
    LmmFit
    """
    require_valid(data)
    corr = Correlation.parse(correlation)
    design = build_design(data, spec, max_period=max_period)
    check_rank(design.Q, design.column_names())
    prof = _Profile(design)
    M = prof.M
    free = list(corr.free)

    beta0 = np.linalg.lstsq(design.Q, design.y, rcond=None)[0]
    r0 = design.y - design.Q @ beta0
    vc = _moment_start(prof.layout, r0, corr)
    boundary: set = set()

    n_iter = 0
    if corr is Correlation.INDEPENDENCE:
        vc = np.array([max(float(r0 @ r0) / M, FLOOR), 0.0, 0.0])
        if vc[0] <= FLOOR:
            boundary.add(0)
    else:
        hi = np.log(max(100.0 * np.var(design.y), 1.0) * 1e4)
        lo = np.log(FLOOR)

        def objective(x):
            v = vc.copy()
            v[free] = np.exp(x)
            ll, g, _, _ = prof.evaluate(v)
            return -ll / M, -(g[free] * v[free]) / M

        res = scipy.optimize.minimize(
            objective, np.log(vc[free]), jac=True, method="L-BFGS-B",
            bounds=[(lo, hi)] * len(free),
            options={"maxiter": max_iter, "ftol": 1e-15, "gtol": 1e-12})
        n_iter += int(res.nit)
        vc[free] = np.exp(res.x)
        vc, nb, it2 = _newton_polish(prof, vc, free, boundary, max_iter)
        n_iter += it2

    return _finish(data, design, prof, vc, corr, boundary, n_iter)


def _newton_polish(prof: _Profile, vc, free, boundary: set, max_iter: int):
    """Newton iterations on interior components, moving tiny ones to the bound."""
    M = prof.M
    vc = vc.copy()
    it = 0
    for it in range(1, max_iter + 1):
        ll, g, _, _ = prof.evaluate(vc)
        for k in free:
            if k == 0 or k in boundary:
                continue
            if vc[k] < 1e-7 * vc[0] and g[k] <= 0:
                boundary.add(k)
                vc[k] = FLOOR
        interior = [k for k in free if k not in boundary]
        if not interior:
            break
        if np.max(np.abs(g[interior]) * vc[interior]) / M < 1e-12:
            break

        def grad(v_int):
            v = vc.copy()
            v[interior] = v_int
            return prof.evaluate(v)[1][interior]

        H = numerical_jacobian(grad, vc[interior], steps=1e-5 * vc[interior])
        H = 0.5 * (H + H.T)
        try:
            step = -np.linalg.solve(H, g[interior])
        except np.linalg.LinAlgError:
            step = g[interior] * vc[interior] ** 2 / M
        if np.any(np.linalg.eigvalsh(H) >= 0):
            # not locally concave: take a scaled gradient step instead
            step = g[interior] * vc[interior] ** 2 / max(M, 1)
        t = 1.0
        improved = False
        while t > 1e-12:
            cand = vc.copy()
            cand[interior] = vc[interior] + t * step
            if np.all(cand[interior] > 0):
                ll_c = prof.evaluate(cand)[0]
                if ll_c >= ll - 1e-12 * abs(ll):
                    vc = cand
                    improved = True
                    break
            t *= 0.5
        if not improved:
            # step could not stay feasible: the component is heading to zero
            small = [k for k in interior if k != 0 and vc[k] + step[interior.index(k)] <= 0]
            if not small:
                break
            for k in small:
                boundary.add(k)
                vc[k] = FLOOR
    return vc, boundary, it


def _finish(data, design, prof: _Profile, vc, corr: Correlation, boundary: set, n_iter: int):
    layout = prof.layout
    free = list(corr.free)
    interior = [k for k in free if k not in boundary]
    beta, G = prof.gls(vc)
    n_beta = beta.size
    scores_all, ll = cluster_scores(layout, design.Q, design.y, beta, vc)
    scores = np.hstack([scores_all[:, :n_beta], scores_all[:, [n_beta + k for k in interior]]])
    total = scores.sum(axis=0)
    norm = _scaled_norm(total, vc[interior], G, prof.M, n_beta)
    if not np.isfinite(norm) or norm > 1e-5:
        raise FitError(f"did not converge: scaled score norm {norm:.3g} at "
                       f"sigma2={vc[0]:.6g}, tau2={vc[1]:.6g}, kappa2={vc[2]:.6g}")
    converged = norm < TOL
    if not converged:
        warnings.warn(f"score norm {norm:.3g} above tolerance {TOL:g}", RuntimeWarning)

    A = _jacobian(layout, design, beta, vc, interior, G)
    names = design.column_names() + [VC_NAMES[k] for k in interior]
    try:
        V = sandwich_variance(scores, A)
    except SandwichError as exc:
        raise FitError(str(exc)) from exc
    mb = np.zeros_like(A)
    mb[:n_beta, :n_beta] = np.linalg.inv(G)
    if interior:
        Avv = A[n_beta:, n_beta:]
        try:
            mb[n_beta:, n_beta:] = np.linalg.inv(-Avv)
        except np.linalg.LinAlgError:
            mb[n_beta:, n_beta:] = np.nan
    comp = VarianceComponents(float(vc[0]), float(vc[1]), float(vc[2]))
    return LmmFit(beta=beta, vc=comp, loglik=float(ll.sum()), scores=scores, jacobian=A,
                  model_based_cov=mb, sandwich_cov=V, converged=converged,
                  boundary=tuple(VC_NAMES[k] for k in sorted(boundary)), param_names=names,
                  design=design, correlation=corr, score_norm=norm, n_iter=n_iter, data=data)


def _jacobian(layout: CellLayout, design, beta, vc, interior, G):
    """Score Jacobian: analytic rows for beta, central differences for the
    variance-component rows."""
    n_beta = beta.size
    K = n_beta + len(interior)
    A = np.zeros((K, K))
    A[:n_beta, :n_beta] = -G
    coefs = layout.coefficients(*vc)
    r = design.y - design.Q @ beta
    u = layout.apply_inverse(r, coefs)
    for col, k in enumerate(interior):
        if k == 0:
            w = u
        elif k == 1:
            w = layout.expand_cluster(layout.cluster_sum(u))
        else:
            w = layout.expand_cell(layout.cell_sum(u))
        A[:n_beta, n_beta + col] = -(design.Q.T @ layout.apply_inverse(w, coefs))
    if interior:
        theta = np.concatenate([beta, vc[interior]])

        def vc_rows(th):
            v = vc.copy()
            v[interior] = th[n_beta:]
            sc, _ = cluster_scores(layout, design.Q, design.y, th[:n_beta], v, free=interior)
            return sc[:, n_beta:].sum(axis=0)

        steps = 1e-6 * np.maximum(np.abs(theta), np.r_[np.ones(n_beta), vc[interior]])
        A[n_beta:, :] = numerical_jacobian(vc_rows, theta, steps=steps)
    return A


# -- estimands --------------------------------------------------------------

def min_variance_weights(cov, method: str = "gls") -> np.ndarray:
    """Summary weights with small variance under ``cov``.

    ``"gls"`` returns cov^{-1} 1 / (1' cov^{-1} 1), the weights of least
    variance among those summing to one.  ``"eigen"`` normalizes the
    eigenvector of the smallest eigenvalue to sum to one.
    """
    cov = np.asarray(cov, dtype=float)
    one = np.ones(cov.shape[0])
    if method == "gls":
        w = np.linalg.solve(cov, one)
        return w / w.sum()
    if method == "eigen":
        vals, vecs = np.linalg.eigh(cov)
        v = vecs[:, 0]
        if abs(v.sum()) < 1e-12:
            raise ValueError("smallest-eigenvalue eigenvector sums to zero")
        return v / v.sum()
    raise ValueError(f"unknown method {method!r}")


def _default_summaries(spec: TreatmentEffectSpec):
    kind = {Structure.DURATION: "Davg", Structure.PERIOD: "Pavg",
            Structure.SATURATED: "Savg"}.get(spec.kind)
    return [kind] if kind else []


def resolve_summaries(spec: TreatmentEffectSpec, summaries, cov=None):
    """Turn summary requests into (name, weights) pairs.

    Each request is ``"Davg"``/``"Pavg"``/``"Savg"``, ``"minvar"``,
    ``"minvar-eigen"``, or a ``(name, weights)`` pair.  Names are returned
    as tags such as ``"D-avg"``; see :func:`summary_name`.
    """
    if summaries is None:
        summaries = _default_summaries(spec)
    out = []
    n = spec.n_treatment
    natural = {Structure.DURATION: "davg", Structure.PERIOD: "pavg",
               Structure.SATURATED: "savg"}.get(spec.kind)
    for item in summaries:
        if isinstance(item, str):
            key = item.lower()
            if key in ("davg", "pavg", "savg"):
                if key != natural:
                    raise ValueError(f"{item} summary does not apply to {spec.kind.value} structure")
                out.append((key[0].upper() + "-avg", summary_weights(item, spec.J)))
            elif key in ("minvar", "minvar-eigen"):
                if cov is None:
                    raise ValueError("minimum-variance weights need a covariance")
                w = min_variance_weights(cov, "eigen" if key.endswith("eigen") else "gls")
                out.append(("min-var", w))
            else:
                raise ValueError(f"unknown summary {item!r}")
        else:
            name, w = item
            w = summary_weights("custom", spec.J, w, size=n)
            out.append((str(name), w))
    return out


def summary_name(symbol: str, tag: str) -> str:
    return f"{symbol}^{{{tag}}}"


def extract_estimands(fit: LmmFit, summaries=None, scale: str = "difference"):
    """Map a fitted working model to marginal estimands.

    On the difference scale the treatment coefficients themselves are the
    estimators.  Ratio scales go through g-computation with an identity
    link and need the period or saturated structure.
    """
    from .report import EstimandReport, make_row, Scale
    sc = Scale.parse(scale)
    if sc is not Scale.DIFFERENCE:
        from .gcomp import g_estimands
        return g_estimands(fit, scale=sc, summaries=summaries)
    spec = fit.spec
    est = fit.treatment
    V = fit.treatment_cov(True)
    Vm = fit.treatment_cov(False)
    comps = [make_row(lab, est[k], np.sqrt(V[k, k]), np.sqrt(Vm[k, k]), sc)
             for k, lab in enumerate(spec.labels("Δ"))]
    sums = []
    for name, w in resolve_summaries(spec, summaries, V):
        sums.append(make_row(summary_name("Δ", name), float(w @ est), float(np.sqrt(w @ V @ w)),
                             float(np.sqrt(w @ Vm @ w)), sc, weights=w))
    return EstimandReport(structure=spec.kind, scale=sc, components=comps, summaries=sums,
                          provenance=_provenance(fit, "lmm"))


def _corr_name(corr) -> str:
    kind = getattr(corr, "kind", corr)
    return getattr(kind, "value", str(kind))


def _provenance(fit, estimator: str) -> dict:
    out = {"estimator": estimator, "structure": fit.spec.kind.value,
           "correlation": _corr_name(fit.correlation),
           "n_clusters": int(fit.design.n_clusters), "n_records": int(fit.design.Q.shape[0]),
           "periods_used": int(fit.design.n_periods_used),
           "covariates": list(fit.design.covariate_names)}
    if fit.data is not None:
        out["data_fingerprint"] = fit.data.fingerprint()
    if isinstance(fit, LmmFit):
        out["variance_components"] = {"sigma2": fit.vc.sigma2, "tau2": fit.vc.tau2,
                                      "kappa2": fit.vc.kappa2}
        out["boundary"] = list(fit.boundary)
        out["converged"] = bool(fit.converged)
    return out


# -- likelihood-ratio structure test ------------------------------------------

@dataclass(frozen=True)
class LrtResult:
    statistic: float
    df: int
    p_value: float
    restricted: str
    general: str
    periods_used: int

    def as_dict(self) -> dict:
        return {"restricted": self.restricted, "general": self.general,
                "statistic": self.statistic, "df": self.df, "p_value": self.p_value,
                "periods_used": self.periods_used}


def lrt_structures(fit_restricted: LmmFit, fit_general: LmmFit) -> LrtResult:
    """Likelihood-ratio test of a restricted treatment structure.

    Both fits must use the same correlation structure and the same records;
    when the general structure drops the last period the restricted model
    must be refitted with ``max_period`` set accordingly.
    """
    r, g = fit_restricted, fit_general
    if not r.spec.nests(g.spec):
        raise ValueError(f"{r.spec.kind.value} is not nested in {g.spec.kind.value}")
    if r.correlation is not g.correlation:
        raise ValueError("both fits must use the same correlation structure")
    if r.design.n_periods_used != g.design.n_periods_used or r.design.Q.shape[0] != g.design.Q.shape[0]:
        raise ValueError(
            "fits use different periods; refit the restricted model with "
            f"max_period={g.design.n_periods_used}")
    if r.data is not None and g.data is not None and r.data.fingerprint() != g.data.fingerprint():
        raise ValueError("fits use different data")
    df = g.spec.n_treatment - r.spec.n_treatment
    stat = -2.0 * (r.loglik - g.loglik)
    if df == 0:
        stat, p = 0.0, 1.0
    else:
        stat = max(stat, 0.0)
        p = float(chi2.sf(stat, df))
    return LrtResult(float(stat), int(df), p, r.spec.kind.value, g.spec.kind.value,
                     int(g.design.n_periods_used))
