"""G-computation estimands with joint sandwich inference.

Given a fitted working model (mixed model or GEE), the marginal mean of
period j with treatment contribution b is estimated by standardization,

    mu_j(b) = mean over retained records of g^{-1}(beta_0j + b + beta_X' x),

and estimands are built from contrasts f(mu_j(beta), mu_j(0)) with f the
difference, log risk ratio or log odds ratio.  Constant and duration
structures combine the period contrasts with cluster weights.

Uncertainty comes from stacking, per cluster, the estimand rows, the
standardization rows and the working model's own estimating functions, and
forming A^{-1} B A^{-T} over the whole stack.  Randomization probabilities
that enter the weights are treated as known.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import Structure, expected_h, h_indicator
from .estfun import SandwichError, numerical_jacobian, sandwich_variance
from .gee import GeeFit, LinkSpec, lambda_weights
from .lmm import FitError, LmmFit, VC_NAMES, cluster_scores, resolve_summaries, summary_name
from .report import EstimandReport, Scale, make_row

__all__ = ["StackedEstimator", "build_stacked", "g_estimands", "contrast"]


def contrast(mu1, mu0, scale: Scale):
    """f(mu1, mu0): difference, log risk ratio or log odds ratio."""
    mu1 = np.asarray(mu1, dtype=float)
    mu0 = np.asarray(mu0, dtype=float)
    if scale is Scale.DIFFERENCE:
        return mu1 - mu0
    if scale is Scale.RISK_RATIO:
        return np.log(mu1) - np.log(mu0)
    return np.log(mu1 / (1.0 - mu1)) - np.log(mu0 / (1.0 - mu0))


class _Model:
    """Uniform view of a fitted working model for stacking."""

    def __init__(self, fit):
        self.fit = fit
        self.design = fit.design
        self.layout = None
        if isinstance(fit, LmmFit):
            from .layout import CellLayout
            self.layout = CellLayout.from_design(fit.design)
            self.link = LinkSpec("identity")
            self.interior = [VC_NAMES.index(n) for n in fit.param_names[fit.n_beta:]]
            self.theta = np.concatenate([fit.beta, fit.vc.as_array()[self.interior]])
            self.names = list(fit.param_names)
        elif isinstance(fit, GeeFit):
            self.link = fit.link
            self.theta = fit.theta
            self.names = list(fit.param_names)
        else:
            raise TypeError(f"unsupported fit type {type(fit).__name__}")
        self.A = fit.jacobian
        self.P = fit.beta.size

    def rows(self, theta):
        if isinstance(self.fit, LmmFit):
            vc = self.fit.vc.as_array().copy()
            vc[self.interior] = theta[self.P:]
            sc, _ = cluster_scores(self.layout, self.design.Q, self.design.y,
                                   theta[:self.P], vc, free=self.interior)
            return sc
        return self.fit.rows(theta)

    def working_rho(self, theta):
        """Correlations rescaled to a unit-diagonal-plus-rank-one form."""
        fit = self.fit
        if isinstance(fit, LmmFit):
            s2, t2, k2 = fit.vc.as_array()
            return t2 / s2, k2 / s2
        extra = dict(zip(self.names[self.P:], theta[self.P:]))
        r1 = extra.get("rho1", fit.rho[0])
        r2 = extra.get("rho2", fit.rho[1])
        s = 1.0 - r1 - r2
        return r1 / s, r2 / s


@dataclass
class StackedEstimator:
    """Joint estimating equations for estimands, standardized means and the
    working model.  ``theta`` is ordered (estimands, means, model)."""

    theta: np.ndarray
    names: list
    n_est: int
    n_mu: int
    rows_fn: object
    A: np.ndarray
    cov: np.ndarray
    scale: Scale

    def rows(self, theta=None) -> np.ndarray:
        return self.rows_fn(self.theta if theta is None else theta)

    @property
    def estimates(self) -> np.ndarray:
        return self.theta[:self.n_est]

    @property
    def estimate_cov(self) -> np.ndarray:
        return self.cov[:self.n_est, :self.n_est]


def _mu_keys(spec, J_used):
    """(period, treatment column or -1) pairs whose means are needed."""
    keys = [(j, -1) for j in range(1, J_used + 1)]
    if spec.kind is Structure.CONSTANT:
        keys += [(j, 0) for j in range(1, J_used + 1)]
    elif spec.kind is Structure.DURATION:
        keys += [(j, d - 1) for j in range(1, J_used + 1) for d in range(1, j + 1)]
    elif spec.kind is Structure.PERIOD:
        keys += [(j, j - 1) for j in range(1, J_used + 1)]
    else:
        keys += [(j, k) for k, (j, d) in enumerate(spec.pairs())]
    return keys


def build_stacked(fit, scale="difference") -> StackedEstimator:
    """Solve the stacked equations and return their sandwich covariance."""
    scale = Scale.parse(scale)
    model = _Model(fit)
    design = model.design
    spec = design.spec
    if scale.is_ratio and spec.kind not in (Structure.PERIOD, Structure.SATURATED):
        raise ValueError(
            "ratio estimands need the period or saturated structure; constant and "
            "duration structures are only defined on the difference scale")
    J = design.n_periods_used
    P = model.P
    tslice = design.treatment_slice()
    cslice = design.covariate_slice()
    keys = _mu_keys(spec, J)
    key_index = {k: n for n, k in enumerate(keys)}
    layout = _layout(design)
    m_i = design.sizes.sum(axis=1).astype(float)
    I = design.n_clusters
    x = design.x
    link = model.link

    data = fit.data
    rand = data.randomization if data is not None else None
    if spec.kind in (Structure.CONSTANT, Structure.DURATION) and rand is None:
        raise ValueError("randomization probabilities are required for this structure")

    def predictions(beta):
        base = x @ beta[cslice]
        trt = beta[tslice]
        out = np.empty((x.shape[0], len(keys)))
        for n, (j, k) in enumerate(keys):
            b = 0.0 if k < 0 else trt[k]
            out[:, n] = link.inverse(beta[j - 1] + b + base)
        return out

    def contrasts(mu):
        """Period-level contrasts f(mu_j(beta_k), mu_j(0)) keyed like the treatment block."""
        out = {}
        for (j, k), n in key_index.items():
            if k >= 0:
                out[(j, k)] = contrast(mu[n], mu[key_index[(j, -1)]], scale)
        return out

    sizes = design.sizes

    def est_rows(est, mu, theta_m):
        c = contrasts(mu)
        if spec.kind in (Structure.PERIOD, Structure.SATURATED):
            vals = np.array([c[key] for key in keys if key[1] >= 0])
            return np.broadcast_to(est - vals, (I, est.size))
        r1, r2 = model.working_rho(theta_m)
        if spec.kind is Structure.CONSTANT:
            lam = lambda_weights(sizes, rand.cumulative, r1, r2)
            diff = np.array([c[(j, 0)] for j in range(1, J + 1)])
            return (lam @ (est[0] - diff))[:, None]
        out = np.zeros((I, J))
        for i in range(I):
            out[i] = _duration_row(design.adoption[i], sizes[i], rand.probs, r1, r2, est, c, J)
        return out

    # point estimates
    beta = model.theta[:P]
    mu_hat = predictions(beta).mean(axis=0)
    _check_means(mu_hat, scale)
    c_hat = contrasts(mu_hat)
    if spec.kind in (Structure.PERIOD, Structure.SATURATED):
        est_hat = np.array([c_hat[key] for key in keys if key[1] >= 0])
    elif spec.kind is Structure.CONSTANT:
        r1, r2 = model.working_rho(model.theta)
        lam = lambda_weights(sizes, rand.cumulative, r1, r2)
        diff = np.array([c_hat[(j, 0)] for j in range(1, J + 1)])
        est_hat = np.array([float(np.sum(lam @ diff) / np.sum(lam))])
    else:
        r1, r2 = model.working_rho(model.theta)
        lhs = np.zeros((J, J))
        rhs = np.zeros(J)
        for i in range(I):
            L, R = _duration_parts(design.adoption[i], sizes[i], rand.probs, r1, r2, c_hat, J)
            lhs += L
            rhs += R
        est_hat = np.linalg.solve(lhs, rhs)

    n_est = est_hat.size
    n_mu = len(keys)

    def rows(theta):
        est = theta[:n_est]
        mu = theta[n_est:n_est + n_mu]
        th_m = theta[n_est + n_mu:]
        pred = predictions(th_m[:P])
        mu_rows = m_i[:, None] * mu[None, :] - layout.cluster_sum(pred)
        return np.hstack([est_rows(est, mu, th_m), mu_rows, model.rows(th_m)])

    theta = np.concatenate([est_hat, mu_hat, model.theta])
    K = theta.size
    Kg = n_est + n_mu

    def g_sums(th):
        return rows(th)[:, :Kg].sum(axis=0)

    steps = 1e-6 * np.maximum(np.abs(theta), 1e-2)
    A = np.zeros((K, K))
    A[:Kg, :] = numerical_jacobian(g_sums, theta, steps=steps)
    A[Kg:, Kg:] = model.A
    psi = rows(theta)
    try:
        cov = sandwich_variance(psi, A)
    except SandwichError as exc:
        raise FitError(str(exc)) from exc
    sym = scale.symbol
    names = (spec.labels(sym) + [f"mu_{j}({'0' if k < 0 else k})" for j, k in keys]
             + model.names)
    return StackedEstimator(theta=theta, names=names, n_est=n_est, n_mu=n_mu, rows_fn=rows,
                            A=A, cov=cov, scale=scale)


def _layout(design):
    from .layout import CellLayout
    return CellLayout.from_design(design)


def _check_means(mu, scale: Scale):
    if scale is Scale.RISK_RATIO and np.any(mu <= 0):
        raise ValueError("risk ratio undefined: a standardized mean is not positive")
    if scale is Scale.ODDS_RATIO and np.any((mu <= 0) | (mu >= 1)):
        raise ValueError("odds ratio undefined: a standardized mean lies outside (0, 1)")


def _duration_parts(z, sizes, probs, r1, r2, c, J):
    """Cluster contributions sum_d Lambda(d) H_d and sum_d Lambda(d) m_d."""
    n = np.asarray(sizes, dtype=float)
    g = n / (1.0 + n * r2)
    cc = 0.0 if r1 == 0 else 1.0 / (1.0 / r1 + g.sum())
    W = np.diag(g) - cc * np.outer(g, g)
    left = (h_indicator(z, J) - expected_h(probs, J)).T @ W
    L = np.zeros((J, J))
    R = np.zeros(J)
    for d in range(1, J - z + 2):
        j = z + d - 1
        # Lambda(d) has a single nonzero column, j = z + d - 1
        col = left[:, j - 1]
        L[:, d - 1] += col
        R += col * c[(j, d - 1)]
    return L, R


def _duration_row(z, sizes, probs, r1, r2, est, c, J):
    L, R = _duration_parts(z, sizes, probs, r1, r2, c, J)
    return L @ est - R


def g_estimands(fit, scale="difference", summaries=None) -> EstimandReport:
    """Estimand report from a fitted working model via g-computation."""
    from .lmm import _provenance
    scale = Scale.parse(scale)
    st = build_stacked(fit, scale)
    spec = fit.design.spec
    est = st.estimates
    V = st.estimate_cov
    sym = scale.symbol
    comps = [make_row(lab, est[k], np.sqrt(V[k, k]), None, scale)
             for k, lab in enumerate(spec.labels(sym))]
    sums = []
    for tag, w in resolve_summaries(spec, summaries, V):
        sums.append(make_row(summary_name(sym, tag), float(w @ est),
                             float(np.sqrt(w @ V @ w)), None, scale, weights=w))
    est_name = "lmm" if isinstance(fit, LmmFit) else "gee"
    prov = _provenance(fit, est_name + "-g")
    prov["link"] = _Model(fit).link.link.value
    if isinstance(fit, GeeFit):
        prov["rho"] = list(fit.rho)
        prov["conditions"] = list(fit.conditions)
        prov["projected"] = bool(fit.projected)
    prov["stacked_residual"] = float(np.max(np.abs(st.rows().sum(axis=0))))
    return EstimandReport(structure=spec.kind, scale=scale, components=comps,
                          summaries=sums, provenance=prov)
