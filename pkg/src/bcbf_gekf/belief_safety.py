"""CVaR belief barriers over half-space constraints.

A half-space constraint alpha^T x >= beta with risk level delta maps to the
belief barrier

    h_b(mu, Sigma) = alpha^T mu - beta - sqrt(alpha^T Sigma alpha) * f(q_delta) / delta,

whose zero super-level set is the belief safe set. This module assembles the
barrier-derivative inequality rows consumed by the safety QP (relative degree
1 and 2) and the discrete-jump probability diagnostics.
"""

import math
from dataclasses import dataclass

import numpy as np

from bcbf_gekf.errors import DomainError, WrongRelativeDegreeError
from bcbf_gekf.estimators import Belief, MeasurementUpdateReport
from bcbf_gekf.models import ControlAffineSystem
from bcbf_gekf.specfun import erf, erfinv, std_normal_pdf, std_normal_quantile


@dataclass(frozen=True)
class HalfSpaceConstraint:
    """Chance constraint Pr[alpha^T x >= beta] >= 1 - delta."""

    alpha: np.ndarray
    beta: float
    delta: float

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        object.__setattr__(self, "alpha", alpha)
        if not np.any(alpha != 0.0):
            raise ValueError("alpha must be non-zero")
        if not (0.0 < self.delta <= 1.0):
            raise ValueError("delta must lie in (0, 1]")

    @property
    def risk_coeff(self) -> float:
        """f(q_delta) / delta; zero at delta = 1 (CVaR degenerates to the mean)."""
        if self.delta == 1.0:
            return 0.0
        return std_normal_pdf(std_normal_quantile(self.delta)) / self.delta


@dataclass(frozen=True)
class BcbfRow:
    """One linear safety inequality coeff_u . u >= rhs for the QP."""

    coeff_u: np.ndarray
    rhs: float


@dataclass(frozen=True)
class SafetyDiagnostics:
    """Discrete-jump risk quantities for one measurement update."""

    h_b_value: float
    leave_probability_bound: float
    gamma_min: float
    xi: float


def _spread(c: HalfSpaceConstraint, cov: np.ndarray) -> float:
    s2 = float(c.alpha @ cov @ c.alpha)
    if s2 <= 0.0:
        raise DomainError("degenerate covariance along alpha; deterministic case "
                          "must be handled by the caller")
    return math.sqrt(s2)


def halfspace_probability(c: HalfSpaceConstraint, b: Belief) -> float:
    """Pr[alpha^T x >= beta] for x ~ N(mean, cov)."""
    s = _spread(c, b.cov)
    margin = float(c.alpha @ b.mean) - c.beta
    return 0.5 * (1.0 + erf(margin / (math.sqrt(2.0) * s)))


def cvar_halfspace(c: HalfSpaceConstraint, b: Belief) -> float:
    """CVaR_delta of the margin alpha^T x - beta; this is the belief barrier h_b."""
    s = _spread(c, b.cov)
    return float(c.alpha @ b.mean) - c.beta - s * c.risk_coeff


def cvar_probability_equivalence_check(c: HalfSpaceConstraint, b: Belief,
                                       boundary_tol: float = 1e-9) -> bool:
    """CVaR >= 0 must agree with Pr >= 1 - delta; diagnostics/tests only.

    Disagreement is tolerated only within boundary_tol of either boundary.
    """
    cvar_ok = cvar_halfspace(c, b) >= 0.0
    prob_ok = halfspace_probability(c, b) >= 1.0 - c.delta
    if cvar_ok == prob_ok:
        return True
    near_cvar = abs(cvar_halfspace(c, b)) <= boundary_tol
    near_prob = abs(halfspace_probability(c, b) - (1.0 - c.delta)) <= boundary_tol
    return near_cvar or near_prob


def barrier_gradients(c: HalfSpaceConstraint, b: Belief) -> tuple[float, np.ndarray, np.ndarray]:
    """(h_b, dh/dmu, dh/dSigma) with the Sigma gradient as its symmetric representative."""
    s = _spread(c, b.cov)
    h = float(c.alpha @ b.mean) - c.beta - s * c.risk_coeff
    dmu = c.alpha.copy()
    dSigma = -(c.risk_coeff / (2.0 * s)) * np.outer(c.alpha, c.alpha)
    return h, dmu, dSigma


def _covariance_flow(c: HalfSpaceConstraint, b: Belief, F: np.ndarray,
                     Q: np.ndarray) -> float:
    """<dh/dSigma, F Sigma + Sigma F^T + Q>."""
    s = _spread(c, b.cov)
    a = float(c.alpha @ F @ b.cov @ c.alpha)
    q = float(c.alpha @ Q @ c.alpha)
    return -(c.risk_coeff / (2.0 * s)) * (2.0 * a + q)


def bcbf_row_rd1(c: HalfSpaceConstraint, b: Belief, sys: ControlAffineSystem,
                 include_cov_flow: bool = True) -> BcbfRow:
    """Relative-degree-1 barrier row: dh_b/dt >= -h_b along the belief dynamics.

    The mean flow contributes alpha^T (f + g u); the covariance flow
    contributes <dh/dSigma, F Sigma + Sigma F^T + Q>, including any
    u-dependence of F through the control Jacobian term.
    """
    h, _, _ = barrier_gradients(c, b)
    mu = b.mean
    coeff_u = (c.alpha @ sys.g(mu)).astype(float)
    F0 = sys.drift_jacobian(mu)
    rhs = -h - float(c.alpha @ sys.f(mu))
    if include_cov_flow:
        rhs -= _covariance_flow(c, b, F0, sys.Q)
        # u-dependence of Sigma-dot through d(g(x)u)/dx, linear in u
        for j in range(sys.m):
            e = np.zeros(sys.m)
            e[j] = 1.0
            Gj = sys.control_jacobian_term(mu, e)
            if np.any(Gj != 0.0):
                coeff_u[j] += _covariance_flow(c, b, Gj, np.zeros_like(sys.Q))
    return BcbfRow(coeff_u=coeff_u, rhs=rhs)


def lie_derivative_hb(c: HalfSpaceConstraint, b: Belief, sys: ControlAffineSystem,
                      include_cov_flow: bool = True) -> float:
    """L_f h_b along the belief drift (mean flow plus covariance flow)."""
    val = float(c.alpha @ sys.f(b.mean))
    if include_cov_flow:
        val += _covariance_flow(c, b, sys.drift_jacobian(b.mean), sys.Q)
    return val


def bcbf_row_rd2(c: HalfSpaceConstraint, b: Belief, sys: ControlAffineSystem,
                 zeta1: float, zeta2: float, gain_k: float,
                 include_cov_flow: bool = True, fd_step: float = 1e-6) -> BcbfRow:
    """Relative-degree-2 barrier row (exponential-CBF form):

        L_g L_f h_b . u >= -k (zeta1 L_f h_b + zeta2 h_b) - L_f^2 h_b,

    i.e. the second-order condition d^2 h_b/dt^2 + k (zeta1 dh_b/dt +
    zeta2 h_b) >= 0. Requires L_g h_b = 0 (position-only constraints). The
    gradient of
    L_f h_b with respect to the mean is taken by central finite differences
    (captures the mean-dependence of the dynamics Jacobian); its gradient
    with respect to Sigma is analytic.
    """
    mu, Sigma = b.mean, b.cov
    direct = c.alpha @ sys.g(mu)
    if np.max(np.abs(direct)) > 1e-12:
        raise WrongRelativeDegreeError(
            f"L_g h_b = {direct} is not zero; use the relative-degree-1 row")

    h, _, _ = barrier_gradients(c, b)
    psi0 = lie_derivative_hb(c, b, sys, include_cov_flow)

    # d psi / d mu by central differences
    dpsi_dmu = np.zeros(sys.n)
    for i in range(sys.n):
        dm = np.zeros(sys.n)
        dm[i] = fd_step
        up = lie_derivative_hb(c, Belief(mu + dm, Sigma), sys, include_cov_flow)
        dn = lie_derivative_hb(c, Belief(mu - dm, Sigma), sys, include_cov_flow)
        dpsi_dmu[i] = (up - dn) / (2.0 * fd_step)

    F = sys.drift_jacobian(mu)
    Sigma_dot = F @ Sigma + Sigma @ F.T + sys.Q
    lf2 = float(dpsi_dmu @ sys.f(mu))
    if include_cov_flow:
        # analytic d psi / d Sigma for psi = alpha^T f - (cq/s)(a + q/2)
        cq = c.risk_coeff
        s = _spread(c, Sigma)
        a = float(c.alpha @ F @ Sigma @ c.alpha)
        qq = float(c.alpha @ sys.Q @ c.alpha)
        aat = np.outer(c.alpha, c.alpha)
        dpsi_dSigma = (cq * (2.0 * a + qq) / (4.0 * s ** 3)) * aat \
            - (cq / (2.0 * s)) * (F.T @ aat + aat @ F)
        lf2 += float(np.tensordot(dpsi_dSigma, Sigma_dot))
    coeff_u = (dpsi_dmu @ sys.g(mu)).astype(float)
    rhs = -gain_k * (zeta1 * psi0 + zeta2 * h) - lf2
    return BcbfRow(coeff_u=coeff_u, rhs=rhs)


def bcbf_row_rd2_unicycle(c: HalfSpaceConstraint, b: Belief,
                          sys: ControlAffineSystem,
                          zeta1: float, zeta2: float, gain_k: float,
                          include_cov_flow: bool = True) -> BcbfRow:
    """Closed-form relative-degree-2 row for the unicycle state [x, y, v, theta].

    Exploits the unicycle structure: alpha^T F has only v and theta
    components (p, q below) and (alpha^T F) F = 0, so the mean-drift part of
    L_f^2 h_b vanishes and the covariance-flow part reduces to quadratic
    forms in Sigma alpha. Agrees with the generic finite-difference row
    (bcbf_row_rd2) to gradient-check tolerance and with itself exactly
    across the simulation paths.
    """
    mu, Sigma = b.mean, b.cov
    alpha = c.alpha
    cq = c.risk_coeff
    q_alpha = float(alpha @ sys.Q @ alpha)
    v = mu[2]
    ct = math.cos(mu[3])
    st = math.sin(mu[3])
    a0 = alpha[0]
    a1 = alpha[1]
    sa2 = Sigma[2, 0] * a0 + Sigma[2, 1] * a1 + Sigma[2, 2] * alpha[2] + Sigma[2, 3] * alpha[3]
    sa3 = Sigma[3, 0] * a0 + Sigma[3, 1] * a1 + Sigma[3, 2] * alpha[2] + Sigma[3, 3] * alpha[3]
    asa = alpha @ (Sigma @ alpha)
    s = math.sqrt(asa)
    h = alpha @ mu - c.beta - cq * s

    p = a0 * ct + a1 * st          # (alpha^T F)_v
    q = v * (a1 * ct - a0 * st)    # (alpha^T F)_theta
    lfh_mean = v * p               # alpha^T f(mu)

    if include_cov_flow:
        g1 = p * sa2 + q * sa3     # alpha^T F Sigma alpha
        flow = 2.0 * g1 + q_alpha  # alpha^T Sigma_dot alpha
        psi0 = lfh_mean - (cq / (2.0 * s)) * flow
        dpdv = a1 * ct - a0 * st
        dg1_dv = dpdv * sa3
        dg1_dth = dpdv * sa2 - v * (a0 * ct + a1 * st) * sa3
        coeff_a = p - (cq / s) * dg1_dv
        coeff_w = q - (cq / s) * dg1_dth
        g2 = p * p * Sigma[2, 2] + 2.0 * p * q * Sigma[2, 3] + q * q * Sigma[3, 3]
        qa2 = sys.Q[2, 0] * a0 + sys.Q[2, 1] * a1 + sys.Q[2, 2] * alpha[2] + sys.Q[2, 3] * alpha[3]
        qa3 = sys.Q[3, 0] * a0 + sys.Q[3, 1] * a1 + sys.Q[3, 2] * alpha[2] + sys.Q[3, 3] * alpha[3]
        g3 = p * qa2 + q * qa3     # alpha^T F Q alpha
        lf2 = (cq / (4.0 * s * s * s)) * flow * flow - (cq / s) * (g2 + g3)
    else:
        psi0 = lfh_mean
        coeff_a = p
        coeff_w = q
        lf2 = 0.0
    rhs = -gain_k * (zeta1 * psi0 + zeta2 * h) - lf2
    return BcbfRow(coeff_u=np.array([coeff_a, coeff_w]), rhs=float(rhs))


def jump_diagnostics(c: HalfSpaceConstraint, b_prior: Belief,
                     report: MeasurementUpdateReport, epsilon: float,
                     b_post: Belief | None = None) -> SafetyDiagnostics:
    """Probability bound on the belief leaving the safe set at one update.

    xi measures the barrier tightening caused by the covariance contraction;
    the bound is on Pr[h_b(b+) < 0] given barrier-satisfying control. When
    b_post is omitted the posterior spread is reconstructed from the
    innovation-term covariance (exact for the standard EKF update).
    """
    if not (0.0 < epsilon <= 0.5):
        raise DomainError("epsilon must lie in (0, 1/2]")
    cq = c.risk_coeff
    var_prior = float(c.alpha @ b_prior.cov @ c.alpha)
    if b_post is not None:
        var_post = float(c.alpha @ b_post.cov @ c.alpha)
    else:
        var_post = var_prior - float(
            c.alpha @ report.innovation_term_covariance @ c.alpha)
    var_post = max(var_post, 0.0)
    xi = cq * (math.sqrt(2.0 * var_prior) - math.sqrt(2.0 * var_post))

    lam = float(c.alpha @ report.innovation_term_covariance @ c.alpha)
    if lam <= 0.0:
        bound = 0.0 if xi >= 0.0 else 1.0
        gamma_min = -xi
    else:
        scale = math.sqrt(2.0 * lam)
        bound = 0.5 * (1.0 - erf(xi / scale))
        gamma_min = scale * (erfinv(1.0 - 2.0 * epsilon) if epsilon < 0.5 else 0.0) - xi
    h, _, _ = barrier_gradients(c, b_prior)
    return SafetyDiagnostics(h_b_value=h, leave_probability_bound=bound,
                             gamma_min=gamma_min, xi=xi)
