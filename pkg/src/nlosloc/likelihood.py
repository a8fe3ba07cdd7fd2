"""Likelihood algebra shared by both EM variants.

Constant-dropping policy: every log-likelihood here omits the Gaussian
normalizer -0.5*log(2*pi*sigma^2) and all uniform-density constants.  All
comparisons in the package (EM ascent checks, multi-start selection) use this
same convention.

Vec() is column-major throughout: for a 2x2 matrix U the packing is
[U00, U10, U01, U11]; phi1 and the S statistic must agree on this.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .angles import unit, wrap_pi
from .errors import SingularGeometry
from .model import EPS_SINGULAR, Problem, steering_vector, wedge_contains

SIGMA_FLOOR = 1e-3     # meters; keeps 1/sigma^2 finite for noiseless scenarios
ACTIVE_WEIGHT = 1e-12  # posterior weights above this count as "active" for constraints
NEG_INF = float("-inf")


def effective_sigma(sigma: float) -> float:
    return max(float(sigma), SIGMA_FLOOR)


@dataclass(frozen=True)
class ParamEstimate:
    """Parameter vector x = [q; theta_1..theta_N] (theta aligned with node order)."""

    q: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).reshape(2))
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float).ravel())

    def replace(self, q=None, theta=None) -> "ParamEstimate":
        return ParamEstimate(
            q=self.q if q is None else q,
            theta=self.theta if theta is None else theta,
        )


@dataclass(frozen=True)
class StatisticPair:
    """Sufficient-statistic pair (s, t): s = [Vec(U); -2V] (6,), t (2,)."""

    s: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "s", np.asarray(self.s, dtype=float).reshape(6))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(2))

    def u_block(self) -> np.ndarray:
        return self.s[:4].reshape(2, 2, order="F")

    def v_vector(self) -> np.ndarray:
        return -0.5 * self.s[4:6]


def basis_phi1(q) -> np.ndarray:
    """phi1(q) = [Vec(q q^T); q] as a 6-vector."""
    q = np.asarray(q, dtype=float).reshape(2)
    outer = np.outer(q, q)
    return np.concatenate([outer.reshape(4, order="F"), q])


def basis_phi2(theta1: float, gamma1: float) -> np.ndarray:
    """phi2(theta1) = [1/cos^2(theta1-gamma1), 1/cos(theta1-gamma1)]."""
    c = np.cos(theta1 - gamma1)
    if abs(c) <= EPS_SINGULAR:
        raise SingularGeometry("phi2 undefined: cos(theta1 - gamma1) ~ 0")
    return np.array([1.0 / c**2, 1.0 / c])


def local_loglik(
    d_i1: float,
    q,
    theta1: float,
    theta_i: float,
    gamma_i: float,
    *,
    p_i,
    sigma_i: float,
    p1,
    gamma1: float,
) -> float:
    """Gaussian local log-likelihood of one TDOA measurement (constants dropped).

    Value: -(1/(2 sigma_i^2)) * (d_i1 - g_i^T (q - p_i) + g_1^T (q - p_1))^2.
    """
    q = np.asarray(q, dtype=float)
    g_i = steering_vector(theta_i, gamma_i)
    g_1 = steering_vector(theta1, gamma1)
    resid = d_i1 - g_i @ (q - np.asarray(p_i, dtype=float)) + g_1 @ (q - np.asarray(p1, dtype=float))
    s = effective_sigma(sigma_i)
    return float(-(resid**2) / (2.0 * s * s))


def statistic_S(
    d_i1: float,
    theta1: float,
    theta_i: float,
    gamma_i: float,
    *,
    p_i,
    sigma_i: float,
    p1,
    gamma1: float,
) -> np.ndarray:
    """S statistic: the local log-likelihood as a function of q is c1 + S . phi1(q)."""
    g_i = steering_vector(theta_i, gamma_i)
    g_1 = steering_vector(theta1, gamma1)
    gd = g_i - g_1
    s = effective_sigma(sigma_i)
    inv2 = 1.0 / (2.0 * s * s)
    a = d_i1 + g_i @ np.asarray(p_i, dtype=float) - g_1 @ np.asarray(p1, dtype=float)
    u = -inv2 * np.outer(gd, gd)
    v = -inv2 * a * gd
    return np.concatenate([u.reshape(4, order="F"), -2.0 * v])


def statistic_T(
    d_i1: float,
    q,
    theta_i: float,
    gamma_i: float,
    *,
    p_i,
    sigma_i: float,
    p1,
    gamma1: float,
) -> np.ndarray:
    """T statistic: the local log-likelihood as a function of theta1 is c2 + T . phi2(theta1)."""
    q = np.asarray(q, dtype=float)
    g_i = steering_vector(theta_i, gamma_i)
    s = effective_sigma(sigma_i)
    inv2 = 1.0 / (2.0 * s * s)
    m1 = unit(gamma1) @ (q - np.asarray(p1, dtype=float))
    e_res = d_i1 - g_i @ (q - np.asarray(p_i, dtype=float))
    return np.array([-inv2 * m1 * m1, -inv2 * 2.0 * e_res * m1])


def _gauss_logweights(d_i1, q, theta1, theta_i, support, *, p_i, sigma_i, p1, gamma1):
    """Per-support-angle Gaussian log-weights plus wedge feasibility flags."""
    m = len(support)
    ll = np.full(m, NEG_INF)
    feas = np.zeros(m, dtype=bool)
    for j, gam in enumerate(support.angles):
        if abs(np.cos(theta_i - gam)) <= EPS_SINGULAR:
            continue  # singular orientation: excluded from the posterior
        ll[j] = local_loglik(
            d_i1, q, theta1, theta_i, gam, p_i=p_i, sigma_i=sigma_i, p1=p1, gamma1=gamma1
        )
        feas[j] = wedge_contains(q, p_i, theta_i, gam)
    return ll, feas


def _normalize_logweights(logw) -> np.ndarray | None:
    finite = np.isfinite(logw)
    if not np.any(finite):
        return None
    shifted = logw - logw[finite].max()
    w = np.where(finite, np.exp(shifted), 0.0)
    return w / w.sum()


def scatterer_posterior(
    d_i1: float,
    q,
    theta1: float,
    theta_i: float,
    support,
    *,
    p_i,
    sigma_i: float,
    p1,
    gamma1: float,
) -> np.ndarray:
    """Posterior over the node's scatterer support at the given parameter point.

    weight(beta) ~ exp(local_loglik(beta)) * wedge_indicator(q; beta) * prior(beta).
    Fallback chain keeps EM well defined: if every wedge indicator is zero the
    indicator is dropped; if weights still vanish the prior is returned.
    """
    ll, feas = _gauss_logweights(
        d_i1, q, theta1, theta_i, support, p_i=p_i, sigma_i=sigma_i, p1=p1, gamma1=gamma1
    )
    logprior = np.where(support.prior > 0, np.log(np.maximum(support.prior, 1e-300)), NEG_INF)
    logw = ll + logprior + np.where(feas, 0.0, NEG_INF)
    w = _normalize_logweights(logw)
    if w is None:
        w = _normalize_logweights(ll + logprior)
    if w is None:
        w = support.prior.copy()
    return w


def _theta_boxes(problem: Problem) -> np.ndarray:
    lo = problem.meas.aoa - problem.eta0
    hi = problem.meas.aoa + problem.eta0
    return np.column_stack([lo, hi])


def _in_box(theta: float, box, tol: float = 1e-9) -> bool:
    # compare on the circle so wrapped representations of the same angle pass
    lo, hi = box
    centered = wrap_pi(theta - 0.5 * (lo + hi))
    return abs(centered) <= 0.5 * (hi - lo) + tol


def observed_loglik_K(problem: Problem, x: ParamEstimate) -> float:
    """Observed-data objective K(x): latent angles summed out exactly.

    K(x) = sum_i log sum_{gamma in support_i} p(tdoa_i | x, gamma) *
    indicator(wedge) * prior(gamma), constants dropped.  Returns -inf when a
    node has no feasible support angle at x, or when x violates an AOA box.
    """
    boxes = _theta_boxes(problem)
    for i in range(problem.n_nodes):
        if not _in_box(x.theta[i], boxes[i]):
            return NEG_INF
    total = 0.0
    ref = problem.nodes[0]
    for k, nd in enumerate(problem.nodes[1:]):
        ll, feas = _gauss_logweights(
            problem.meas.tdoa[k],
            x.q,
            x.theta[0],
            x.theta[k + 1],
            problem.supports[k],
            p_i=nd.position,
            sigma_i=nd.sigma,
            p1=ref.position,
            gamma1=problem.meas.ref_gamma,
        )
        logprior = np.where(
            problem.supports[k].prior > 0,
            np.log(np.maximum(problem.supports[k].prior, 1e-300)),
            NEG_INF,
        )
        logw = ll + logprior + np.where(feas, 0.0, NEG_INF)
        finite = np.isfinite(logw)
        if not np.any(finite):
            return NEG_INF
        mx = logw[finite].max()
        total += mx + np.log(np.exp(logw[finite] - mx).sum())
    return float(total)


def complete_loglik(problem: Problem, x: ParamEstimate, gamma_assignment) -> float:
    """Complete-data log-likelihood for one latent-angle assignment.

    Sum of the Gaussian TDOA terms plus log prior and log indicator terms (AOA
    boxes and wedges); -inf when any indicator is violated.  Shares the
    constant-dropping convention with observed_loglik_K, so K equals the
    log-sum-exp of this function over all assignments.
    """
    gamma_assignment = np.asarray(gamma_assignment, dtype=float)
    if gamma_assignment.shape != (problem.n_nodes - 1,):
        raise ValueError("one latent angle per non-reference node required")
    boxes = _theta_boxes(problem)
    for i in range(problem.n_nodes):
        if not _in_box(x.theta[i], boxes[i]):
            return NEG_INF
    total = 0.0
    ref = problem.nodes[0]
    for k, nd in enumerate(problem.nodes[1:]):
        gam = gamma_assignment[k]
        sup = problem.supports[k]
        match = np.isclose(wrap_pi(sup.angles - gam), 0.0, atol=1e-12)
        if not match.any():
            raise ValueError(f"assignment angle {gam} not in node {nd.id} support")
        prior = sup.prior[int(np.argmax(match))]
        if prior <= 0.0:
            return NEG_INF
        if not wedge_contains(x.q, nd.position, x.theta[k + 1], gam):
            return NEG_INF
        if abs(np.cos(x.theta[k + 1] - gam)) <= EPS_SINGULAR:
            return NEG_INF
        total += local_loglik(
            problem.meas.tdoa[k],
            x.q,
            x.theta[0],
            x.theta[k + 1],
            gam,
            p_i=nd.position,
            sigma_i=nd.sigma,
            p1=ref.position,
            gamma1=problem.meas.ref_gamma,
        )
        total += np.log(prior)
    return float(total)
