"""Generalized estimating equations with a nested-exchangeable working
correlation, plus the cluster weights used to combine period-level
g-computation contrasts into marginal estimands.

The working correlation of one cluster is

    R = (1 - rho1 - rho2) I + rho1 1 1' + rho2 blockdiag(1 1')

so rho1 is the between-period correlation and rho1 + rho2 the within-period
one.  R has the same block-exchangeable form as the mixed-model covariance
and is inverted with the same O(M) algebra.  Only canonical links are
supported, so dmu/deta equals the variance function and the weight matrix is
Z^{-1/2} R^{-1} Z^{-1/2} with Z the diagonal of variance functions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg
from scipy.special import expit, logit

from .data_model import TrialData, require_valid
from .design import DesignMatrices, TreatmentEffectSpec, build_design, expected_h, h_indicator
from .estfun import SandwichError, numerical_jacobian, sandwich_variance
from .layout import CellLayout
from .lmm import FitError, check_rank, layout_pair_moments

__all__ = [
    "Link",
    "LinkSpec",
    "CorrKind",
    "WorkingCorrelation",
    "GeeFit",
    "fit_gee",
    "moment_correlations",
    "g_compute_mu",
    "lambda_weight",
    "lambda_weights",
    "duration_weight_matrix",
    "estimate_estimands_gee",
    "RobustnessWarning",
]


class RobustnessWarning(UserWarning):
    """The working model gives no robustness guarantee for g-computation."""


class Link(str, Enum):
    IDENTITY = "identity"
    LOGIT = "logit"
    LOG = "log"

    @classmethod
    def parse(cls, value) -> "Link":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown link {value!r}") from None


@dataclass(frozen=True)
class LinkSpec:
    """Canonical link with its variance function.

    identity pairs with a constant variance, logit with Bernoulli
    mu (1 - mu) and log with Poisson mu.
    """

    link: Link = Link.IDENTITY

    def __post_init__(self):
        object.__setattr__(self, "link", Link.parse(self.link))

    @property
    def variance_name(self) -> str:
        return {Link.IDENTITY: "constant", Link.LOGIT: "bernoulli", Link.LOG: "poisson"}[self.link]

    def inverse(self, eta):
        if self.link is Link.IDENTITY:
            return np.asarray(eta, dtype=float)
        if self.link is Link.LOGIT:
            return expit(eta)
        return np.exp(eta)

    def forward(self, mu):
        if self.link is Link.IDENTITY:
            return np.asarray(mu, dtype=float)
        if self.link is Link.LOGIT:
            return logit(mu)
        return np.log(mu)

    def variance(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.link is Link.IDENTITY:
            return np.ones_like(mu)
        if self.link is Link.LOGIT:
            return mu * (1.0 - mu)
        return mu


class CorrKind(str, Enum):
    INDEPENDENCE = "independence"
    NESTED = "nested"
    WITHIN_PERIOD = "within-period"

    @classmethod
    def parse(cls, value) -> "CorrKind":
        if isinstance(value, cls):
            return value
        v = str(value).lower().replace("_", "-")
        aliases = {"nested-exchangeable": "nested", "exchangeable-within-period": "within-period",
                   "ind": "independence"}
        try:
            return cls(aliases.get(v, v))
        except ValueError:
            raise ValueError(f"unknown working correlation {value!r}") from None


@dataclass(frozen=True)
class WorkingCorrelation:
    """Working correlation; ``rho1``/``rho2`` fix the parameters when given,
    otherwise they are estimated by moments."""

    kind: CorrKind = CorrKind.INDEPENDENCE
    rho1: float | None = None
    rho2: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", CorrKind.parse(self.kind))
        if self.kind is CorrKind.INDEPENDENCE:
            if (self.rho1 or 0.0) != 0.0 or (self.rho2 or 0.0) != 0.0:
                raise ValueError("independence requires rho1 = rho2 = 0")
            object.__setattr__(self, "rho1", 0.0)
            object.__setattr__(self, "rho2", 0.0)
        if self.kind is CorrKind.WITHIN_PERIOD:
            if (self.rho1 or 0.0) != 0.0:
                raise ValueError("within-period exchangeable requires rho1 = 0")
            object.__setattr__(self, "rho1", 0.0)

    @property
    def fixed(self) -> bool:
        return self.rho1 is not None and self.rho2 is not None

    @property
    def estimated(self) -> tuple:
        """Names of correlation parameters estimated from the data."""
        if self.kind is CorrKind.INDEPENDENCE:
            return ()
        if self.kind is CorrKind.WITHIN_PERIOD:
            return () if self.rho2 is not None else ("rho2",)
        return () if self.fixed else ("rho1", "rho2")


def _correlation_is_pd(sizes, rho1, rho2) -> bool:
    s2 = 1.0 - rho1 - rho2
    if s2 <= 0:
        return False
    n = np.asarray(sizes, dtype=float)
    denom = s2 + n * rho2
    if np.any(denom[n > 0] <= 0):
        return False
    tot = np.sum(np.where(n > 0, n / np.where(denom > 0, denom, 1.0), 0.0), axis=-1)
    return bool(np.all(1.0 + rho1 * tot > 0))


def _project(sizes, rho1, rho2):
    if _correlation_is_pd(sizes, rho1, rho2):
        return rho1, rho2, False
    t = 1.0
    while t > 1e-8 and not _correlation_is_pd(sizes, t * rho1, t * rho2):
        t *= 0.9
    return t * 0.99 * rho1, t * 0.99 * rho2, True


def moment_correlations(residuals, cluster, period, sizes, dispersion: float | None = None):
    """Pair-product moment estimates of (rho1, rho2).

    Parameters
    ----------
    residuals : ndarray, shape (M,)
        Pearson residuals ordered by (cluster, period).
    cluster, period : ndarray, shape (M,)
        Cluster position and 1-based period of each residual.
    sizes : ndarray, shape (I, J)
    dispersion : float, optional
        Defaults to the mean squared residual.

    Returns
    -------
    rho1, rho2 : float
    has_cross : bool
        False when no cross-period pairs exist; rho1 is then 0.
    """
    layout = CellLayout(cluster, period, sizes)
    total, cross, within, has_cross = layout_pair_moments(layout, residuals)
    phi = total if dispersion is None else float(dispersion)
    rho1 = cross / phi if has_cross else 0.0
    rho12 = within / phi if np.isfinite(within) else rho1
    return float(rho1), float(rho12 - rho1), bool(has_cross)


@dataclass
class GeeFit:
    """A fitted GEE working model.

    ``scores``/``jacobian`` cover the model block: the mean parameters
    followed by any estimated nuisance parameters (dispersion and
    correlations) listed in ``param_names``.
    """

    beta: np.ndarray
    rho: tuple
    phi: float
    scores: np.ndarray
    jacobian: np.ndarray
    sandwich_cov: np.ndarray
    param_names: list
    link: LinkSpec
    correlation: WorkingCorrelation
    design: DesignMatrices = field(repr=False)
    conditions: tuple
    projected: bool
    converged: bool
    n_iter: int
    data: TrialData | None = field(default=None, repr=False)
    _rows: object = field(default=None, repr=False)

    @property
    def spec(self) -> TreatmentEffectSpec:
        return self.design.spec

    @property
    def theta(self) -> np.ndarray:
        extra = []
        names = self.param_names[self.beta.size:]
        for n in names:
            extra.append({"phi": self.phi, "rho1": self.rho[0], "rho2": self.rho[1]}[n])
        return np.concatenate([self.beta, extra])

    def rows(self, theta) -> np.ndarray:
        """Per-cluster model-block estimating functions at ``theta``."""
        return self._rows(theta)


def _conditions(design: DesignMatrices, link: LinkSpec, rho1, rho2) -> tuple:
    held = []
    if rho1 == 0 and rho2 == 0:
        held.append("I")
    if link.link is Link.IDENTITY:
        held.append("II")
    if rho1 == 0 and _cluster_level(design):
        held.append("III")
    return tuple(held)


def _cluster_level(design: DesignMatrices) -> bool:
    """True when every covariate is constant within each cluster."""
    x = design.x
    if x.shape[1] == 0:
        return True
    layout = CellLayout.from_design(design)
    first = np.zeros((layout.I, x.shape[1]))
    first[layout.cluster_nonempty] = x[layout.cluster_starts]
    return bool(np.all(x == first[layout.cluster]))


class _GeeSystem:
    """Estimating functions of the model block for one design."""

    def __init__(self, design: DesignMatrices, link: LinkSpec, corr: WorkingCorrelation):
        self.design = design
        self.Q = design.Q
        self.y = design.y
        self.link = link
        self.corr = corr
        self.layout = CellLayout.from_design(design)
        self.P = self.Q.shape[1]
        n = self.layout.sizes.astype(float)
        m_i = n.sum(axis=1)
        self.n_cross = (m_i * m_i - np.sum(n * n, axis=1)) / 2.0
        self.n_within = np.sum(n * (n - 1.0), axis=1) / 2.0
        self.m_i = m_i

    def pearson(self, beta):
        mu = self.link.inverse(self.Q @ beta)
        v = self.link.variance(mu)
        if np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise FitError("fitted means reached the boundary of the variance function")
        sv = np.sqrt(v)
        return (self.y - mu) / sv, sv

    def beta_rows(self, beta, rho1, rho2):
        e, sv = self.pearson(beta)
        coefs = self.layout.coefficients(1.0 - rho1 - rho2, rho1, rho2)
        u = self.layout.apply_inverse(e, coefs)
        return self.layout.cluster_sum(self.Q * (sv * u)[:, None])

    def moments(self, beta):
        e, _ = self.pearson(beta)
        s = self.layout.cell_sum(e)
        sq = self.layout.cell_sum(e * e)
        S = s.sum(axis=1)
        ss = np.sum(s * s, axis=1)
        cross = (S * S - ss) / 2.0
        within = np.sum(s * s - sq, axis=1) / 2.0
        return sq.sum(axis=1), cross, within

    def estimate_rho(self, beta):
        tot, cross, within = self.moments(beta)
        phi = tot.sum() / self.m_i.sum()
        r1, r2 = self.corr.rho1, self.corr.rho2
        if "rho1" in self.corr.estimated:
            r1 = cross.sum() / self.n_cross.sum() / phi if self.n_cross.sum() > 0 else 0.0
        if "rho2" in self.corr.estimated:
            r12 = within.sum() / self.n_within.sum() / phi if self.n_within.sum() > 0 else r1
            r2 = r12 - r1
        return float(phi), float(r1), float(r2)

    def names(self):
        est = self.corr.estimated
        return ["phi", *est] if est else []

    def rows(self, theta):
        """Per-cluster rows (beta, then phi and correlations if estimated)."""
        beta = theta[:self.P]
        extra = dict(zip(self.names(), theta[self.P:]))
        r1 = extra.get("rho1", self.corr.rho1)
        r2 = extra.get("rho2", self.corr.rho2)
        out = [self.beta_rows(beta, r1, r2)]
        if extra:
            phi = extra["phi"]
            tot, cross, within = self.moments(beta)
            out.append((tot - self.m_i * phi)[:, None])
            if "rho1" in extra:
                out.append((cross - self.n_cross * r1 * phi)[:, None])
            if "rho2" in extra:
                out.append((within - self.n_within * (r1 + r2) * phi)[:, None])
        return np.hstack(out)

    def fisher(self, beta, rho1, rho2):
        e, sv = self.pearson(beta)
        coefs = self.layout.coefficients(1.0 - rho1 - rho2, rho1, rho2)
        Qt = self.Q * sv[:, None]
        G = self.layout.gram(Qt, Qt, coefs)
        h = self.layout.gram(Qt, e[:, None], coefs)[:, 0]
        return G, h


def _start_beta(design: DesignMatrices, link: LinkSpec):
    beta = np.zeros(design.Q.shape[1])
    J = design.n_periods_used
    for j in range(1, J + 1):
        yj = design.y[design.period == j]
        m = float(np.mean(yj)) if yj.size else 0.5
        if link.link is Link.LOGIT:
            m = min(max(m, 0.01), 0.99)
        elif link.link is Link.LOG:
            m = max(m, 0.01)
        beta[j - 1] = float(link.forward(m))
    return beta


def fit_gee(data: TrialData, spec: TreatmentEffectSpec, corr=None, link=None,
            max_iter: int = 100, tol: float = 1e-10) -> GeeFit:
    """Fisher scoring for the GEE, re-estimating correlations each step.

    Parameters
    ----------
    data : TrialData
    spec : TreatmentEffectSpec
    corr : WorkingCorrelation or str, optional
        Defaults to independence.
    link : LinkSpec or str, optional
        Defaults to identity.
    """
    require_valid(data)
    if corr is None:
        corr = WorkingCorrelation()
    elif not isinstance(corr, WorkingCorrelation):
        corr = WorkingCorrelation(corr)
    if link is None:
        link = LinkSpec()
    elif not isinstance(link, LinkSpec):
        link = LinkSpec(link)
    design = build_design(data, spec)
    check_rank(design.Q, design.column_names())
    system = _GeeSystem(design, link, corr)

    beta = _start_beta(design, link)
    r1 = corr.rho1 if corr.rho1 is not None else 0.0
    r2 = corr.rho2 if corr.rho2 is not None else 0.0
    projected = False
    converged = False
    it = 0
    estimating = bool(corr.estimated)
    # a few independence steps give a sensible start before correlations enter
    warm = 3 if estimating else 0
    for it in range(1, max_iter + 1):
        use1, use2 = (0.0, 0.0) if it <= warm else (r1, r2)
        G, h = system.fisher(beta, use1, use2)
        try:
            step = scipy.linalg.solve(G, h, assume_a="pos")
        except (np.linalg.LinAlgError, ValueError):
            raise FitError("GEE information matrix is singular") from None
        beta = beta + step
        if not np.all(np.isfinite(beta)):
            raise FitError("GEE iterations diverged")
        old = (r1, r2)
        if estimating:
            _, r1, r2 = system.estimate_rho(beta)
            r1, r2, proj = _project(design.sizes, r1, r2)
            projected = projected or proj
        if it > warm and np.max(np.abs(step)) < tol and max(abs(r1 - old[0]), abs(r2 - old[1])) < tol:
            converged = True
            break
    if not converged:
        raise FitError(f"GEE did not converge in {max_iter} iterations")

    phi = system.estimate_rho(beta)[0]
    conditions = _conditions(design, link, r1, r2)
    if not conditions:
        warnings.warn(
            "working correlation and link give no robustness guarantee for g-computation "
            "(needs independence, identity link, or zero between-period correlation with "
            "cluster-level covariates)", RobustnessWarning, stacklevel=2)
    names = design.column_names() + system.names()
    extra = {"phi": phi, "rho1": r1, "rho2": r2}
    theta = np.concatenate([beta, [extra[n] for n in system.names()]])
    scores = system.rows(theta)
    if projected and estimating:
        # projected correlations do not solve the moment equations; hold them fixed
        system.corr = WorkingCorrelation(corr.kind, r1, r2) if corr.kind is not CorrKind.INDEPENDENCE else corr
        names = design.column_names()
        theta = beta.copy()
        scores = system.rows(theta)
    A = numerical_jacobian(lambda th: system.rows(th).sum(axis=0), theta,
                           steps=1e-6 * np.maximum(np.abs(theta), 1e-2))
    try:
        V = sandwich_variance(scores, A)
    except SandwichError as exc:
        raise FitError(str(exc)) from exc
    return GeeFit(beta=beta, rho=(float(r1), float(r2)), phi=float(phi), scores=scores,
                  jacobian=A, sandwich_cov=V, param_names=names, link=link,
                  correlation=corr, design=design, conditions=conditions,
                  projected=projected, converged=converged, n_iter=it, data=data,
                  _rows=system.rows)


# -- g-computation and weights ---------------------------------------------------

def g_compute_mu(fit, j: int, b: float = 0.0, beta=None) -> float:
    """Standardized mean for period ``j`` with treatment contribution ``b``.

    Averages g^{-1}(beta_0j + b + beta_X' x) over every retained record of
    every cluster, whatever its own period.
    """
    design = fit.design
    beta = fit.beta if beta is None else beta
    if not 1 <= j <= design.n_periods_used:
        raise ValueError(f"period {j} is not retained")
    link = getattr(fit, "link", LinkSpec())
    eta = beta[j - 1] + b + design.x @ beta[design.covariate_slice()]
    return float(np.mean(link.inverse(eta)))


def lambda_weights(sizes, cum_probs, rho1: float, rho2: float) -> np.ndarray:
    """Cluster-period weights for combining period contrasts.

    The weight of period j is the design expectation of the period-j
    component of {(Delta_Z - pi^s) x 1}' R^{-1} (Delta_Z x 1), divided by
    N_ij, so that working independence gives pi^s_j (1 - pi^s_j).

    Parameters
    ----------
    sizes : ndarray, shape (I, J) or (J,)
    cum_probs : sequence
        Cumulative adoption probabilities pi^s_1..pi^s_J.
    rho1, rho2 : float
        Correlations of a working correlation with unit diagonal plus
        rho1 1 1' + rho2 blockdiag(1 1').

    Returns
    -------
    ndarray with the shape of ``sizes``.
    """
    n = np.asarray(sizes, dtype=float)
    ps = np.asarray(cum_probs, dtype=float)
    J = ps.size
    if n.shape[-1] != J:
        raise ValueError("sizes and probabilities disagree on J")
    q = 1.0 / (1.0 + n * rho2)
    lead = ps * (1.0 - ps)
    if rho1 == 0:
        return lead * q
    g = n * q
    cov = np.minimum.outer(np.arange(J), np.arange(J))
    cov = ps[cov] - np.outer(ps, ps)
    c = 1.0 / (1.0 / rho1 + g.sum(axis=-1))
    # the 1/(1 + N rho2) factor multiplies both terms, as in the collapsed
    # Kronecker form divided by N_ij
    return q * (lead - c[..., None] * (g @ cov.T))


def lambda_weight(sizes, cum_probs, rho1: float, rho2: float, j: int) -> float:
    """Weight of period ``j`` (1-based) for one cluster."""
    return float(lambda_weights(np.asarray(sizes, dtype=float)[None, :], cum_probs, rho1, rho2)[0, j - 1])


def duration_weight_matrix(z: int, sizes, probs, rho1: float, rho2: float, d: int) -> np.ndarray:
    """J x J weight matrix of duration d for a cluster adopting at ``z``.

    Equals (H_z - E[H])' W diag(I{z = j - d + 1}) with
    W = diag(g) - c g g', g_j = N_j / (1 + N_j rho2) and
    c = (1/rho1 + sum g)^{-1} (zero when rho1 = 0).
    """
    n = np.asarray(sizes, dtype=float)
    J = n.size
    g = n / (1.0 + n * rho2)
    c = 0.0 if rho1 == 0 else 1.0 / (1.0 / rho1 + g.sum())
    W = np.diag(g) - c * np.outer(g, g)
    sel = (z == np.arange(1, J + 1) - d + 1).astype(float)
    return (h_indicator(z, J) - expected_h(probs, J)).T @ W * sel[None, :]


def estimate_estimands_gee(fit: GeeFit, scale: str = "difference", summaries=None):
    """Marginal estimands from a fitted GEE by g-computation."""
    from .gcomp import g_estimands
    return g_estimands(fit, scale=scale, summaries=summaries)
