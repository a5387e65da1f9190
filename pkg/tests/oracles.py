"""Independent dense-matrix oracles shared by the unit and acceptance tests."""

import numpy as np
from scipy.linalg import block_diag

from swedge.design import SelectionStructure, TreatmentEffectSpec
from swedge.gee import WorkingCorrelation, fit_gee
from swedge.lmm import fit_lmm, lmm_loglik, lmm_score
from swedge.structured_cov import StructuredInverse, VarianceComponents, dense_observed_cov


def dense_cov(sizes, s2, t2, k2):
    """Covariance of one cluster built entry by entry."""
    M = int(np.sum(sizes))
    per = np.repeat(np.arange(len(sizes)), sizes)
    V = np.full((M, M), t2)
    V[per[:, None] == per[None, :]] += k2
    V[np.diag_indices(M)] += s2
    return V


def random_components(rng):
    s2 = rng.uniform(0.2, 3.0)
    t2 = rng.uniform(0.0, 2.0)
    k2 = rng.uniform(0.0, 2.0)
    return s2, t2, k2


def structured_inverse_error(rng):
    """Max abs error of the structured inverse and logdet on one random draw."""
    J = int(rng.integers(1, 6))
    sizes = rng.integers(0, 13, size=J)
    if sizes.sum() == 0:
        sizes[0] = 1
    s2, t2, k2 = random_components(rng)
    V = dense_cov(sizes, s2, t2, k2)
    inv = StructuredInverse.from_components(sizes, VarianceComponents(s2, t2, k2))
    err_inv = np.max(np.abs(inv.dense() - np.linalg.inv(V)))
    err_ld = abs(inv.logdet - np.linalg.slogdet(V)[1])
    return float(max(err_inv, err_ld))


def score_instance(rng):
    """Random single-cluster likelihood problem."""
    J = int(rng.integers(2, 6))
    sizes = rng.integers(1, 9, size=J)
    M = int(sizes.sum())
    P = int(rng.integers(1, 5))
    Q = rng.normal(size=(M, P))
    beta = rng.normal(size=P)
    s2 = rng.uniform(0.3, 2.0)
    t2 = rng.uniform(0.05, 1.0)
    k2 = rng.uniform(0.05, 1.0)
    y = Q @ beta + rng.multivariate_normal(np.zeros(M), dense_observed_cov(sizes, s2, t2, k2))
    beta_eval = beta + 0.3 * rng.normal(size=P)
    return Q, y, sizes, beta_eval, np.array([s2, t2, k2])


def score_fd_error(Q, y, sizes, beta, vc, h=1e-5):
    """Relative error of the analytic score against central differences."""
    P = beta.size
    theta = np.concatenate([beta, vc])

    def ll(th):
        return lmm_loglik(Q, y, sizes, th[:P], VarianceComponents(*th[P:]))

    fd = np.empty_like(theta)
    for k in range(theta.size):
        step = h * max(1.0, abs(theta[k]))
        e = np.zeros_like(theta)
        e[k] = step
        fd[k] = (ll(theta + e) - ll(theta - e)) / (2 * step)
    an = lmm_score(Q, y, sizes, beta, VarianceComponents(*vc), "nested")
    return float(np.max(np.abs(an - fd)) / max(1.0, np.max(np.abs(fd))))


def gee_lmm_difference(data, structure="constant"):
    """Max abs difference between LMM and matched-correlation GEE coefficients."""
    spec = TreatmentEffectSpec(structure, data.n_periods)
    lmm = fit_lmm(data, spec, "nested")
    vc = lmm.vc
    total = vc.sigma2 + vc.tau2 + vc.kappa2
    corr = WorkingCorrelation("nested", vc.tau2 / total, vc.kappa2 / total)
    gee = fit_gee(data, spec, corr, "identity")
    return float(np.max(np.abs(gee.beta - lmm.beta)))


def period_probs(cum_probs):
    ps = np.asarray(cum_probs, dtype=float)
    return np.diff(np.r_[0.0, ps])


def record_correlation(sizes, rho1, rho2):
    """I + rho1 11' + rho2 blockdiag(11') over a cluster's records."""
    M = int(np.sum(sizes))
    blocks = block_diag(*[np.ones((n, n)) for n in sizes]) if M else np.zeros((0, 0))
    return np.eye(M) + rho1 * np.ones((M, M)) + rho2 * blocks


def dense_lambda(sizes, cum_probs, rho1, rho2):
    """Design expectation of the period components of
    {(Delta_Z - pi^s) x 1}' R^{-1} (Delta_Z x 1), divided by N_j.

    The expectation is taken by enumerating every adoption time.
    """
    sizes = np.asarray(sizes, dtype=int)
    J = sizes.size
    ps = np.asarray(cum_probs, dtype=float)
    per = np.repeat(np.arange(1, J + 1), sizes)
    Rinv = np.linalg.inv(record_correlation(sizes, rho1, rho2))
    out = np.zeros(J)
    for z, pz in enumerate(period_probs(ps), start=1):
        a = (z <= per) - ps[per - 1]
        b = (z <= per).astype(float)
        contrib = (Rinv @ a) * b
        for j in range(1, J + 1):
            out[j - 1] += pz * contrib[per == j].sum()
    return out / np.where(sizes > 0, sizes, 1)


def dense_duration_weight(z, selection: SelectionStructure, probs, rho1, rho2, d):
    """{(H_z - E[H]) x 1}' D R^{-1} D' (Lambda_z^d x 1) with explicit Kronecker products."""
    from swedge.design import expected_h, h_indicator, lambda_indicator
    J = len(selection.enrolled)
    one = np.ones((selection.population, 1))
    D = selection.matrix()
    R = record_correlation(selection.sizes, rho1, rho2)
    left = np.kron(h_indicator(z, J) - expected_h(probs, J), one)
    right = np.kron(lambda_indicator(z, d, J), one)
    return left.T @ D @ np.linalg.solve(R, D.T @ right)


def random_selection(rng, J, population):
    sizes = rng.integers(0, population + 1, size=J)
    enrolled = [rng.choice(population, size=n, replace=False) for n in sizes]
    return SelectionStructure(enrolled, population)
