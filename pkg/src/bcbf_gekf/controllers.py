"""Nominal controllers for the two benchmark scenarios and their
safety-filtered composition through the QP.

Controllers are evaluated at the belief mean (certainty equivalence for the
CLF; the barrier rows are belief-exact).
"""

import math
from dataclasses import dataclass

import numpy as np

from bcbf_gekf import qp
from bcbf_gekf.belief_safety import BcbfRow, HalfSpaceConstraint, bcbf_row_rd1
from bcbf_gekf.estimators import Belief
from bcbf_gekf.models import ControlAffineSystem


@dataclass(frozen=True)
class Clf1dConfig:
    """Quadratic CLF V(x) = (x - target)^2 with slack-relaxed decrease."""

    target: float = 6.0
    slack_penalty: float = 10.0
    u_max: float = 1.0

    def __post_init__(self):
        if self.slack_penalty <= 0 or self.u_max <= 0:
            raise ValueError("slack_penalty and u_max must be positive")


@dataclass(frozen=True)
class GainScheduleConfig:
    """Feedback gains for the linearized unicycle tracking loop.

    k_x = lambda1, k_y = a1 / v_r, k_theta = a2.
    """

    v_r: float = 1.0
    lambda1: float = 1.0
    k_v: float = 1.0
    a1: float = 16.0
    a2: float = 100.0

    def __post_init__(self):
        if self.v_r <= 0:
            raise ValueError("v_r must be positive")

    @property
    def k_x(self) -> float:
        return self.lambda1

    @property
    def k_y(self) -> float:
        return self.a1 / self.v_r

    @property
    def k_theta(self) -> float:
        return self.a2


@dataclass(frozen=True)
class TrajectoryRef:
    """Sinusoidal reference y_d(t) = A sin(omega t) + A at constant v_r."""

    amplitude: float = 1.0
    omega: float = 0.5
    v_r: float = 1.0
    tangent_heading: bool = True  # atan2(yd', xd'); False uses the position-vector heading

    def __post_init__(self):
        if self.amplitude < 0 or self.omega <= 0:
            raise ValueError("amplitude must be >= 0 and omega > 0")


def reference_state(traj: TrajectoryRef, t: float, t_eps: float = 1e-3) -> np.ndarray:
    """Reference [x_d, y_d, v_d, theta_d] at time t.

    theta_d is the heading of the position vector, arctan(y_d / x_d); the
    t = 0 singularity is resolved by evaluating one small step t_eps to the
    right.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    x_d = traj.v_r * t
    y_d = traj.amplitude * math.sin(traj.omega * t) + traj.amplitude
    if traj.tangent_heading:
        theta_d = math.atan2(traj.amplitude * traj.omega * math.cos(traj.omega * t), traj.v_r)
    elif x_d == 0.0:
        te = t_eps
        theta_d = math.atan((traj.amplitude * math.sin(traj.omega * te) + traj.amplitude)
                            / (traj.v_r * te))
    else:
        theta_d = math.atan(y_d / x_d)
    return np.array([x_d, y_d, traj.v_r, theta_d])


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


def gain_scheduled_control(cfg: GainScheduleConfig, x_est: np.ndarray,
                           x_ref: np.ndarray) -> np.ndarray:
    """u_nom = -[k_x e_x + k_v e_v; k_y e_y + k_theta e_theta]."""
    e = np.asarray(x_est, dtype=float) - np.asarray(x_ref, dtype=float)
    e_theta = wrap_angle(float(e[3]))
    a = -cfg.k_x * e[0] - cfg.k_v * e[2]
    omega = -cfg.k_y * e[1] - cfg.k_theta * e_theta
    return np.array([a, omega])


def clf_cbf_qp_control(cfg: Clf1dConfig, c: HalfSpaceConstraint, b: Belief,
                       sys: ControlAffineSystem,
                       qp_tols: tuple[float, float] = (1e-8, 1e-8),
                       max_iters: int = 4000) -> tuple[np.ndarray, float, str]:
    """1D CLF-CBF-QP over (u, rho): min 1/2 u^2 + s rho^2.

    Subject to the relaxed CLF decrease, the relative-degree-1 barrier row,
    and the input box. Returns (u, slack, status).
    """
    mu = float(b.mean[0])
    err = mu - cfg.target
    V = err * err
    f_mu = float(sys.f(b.mean)[0])
    g_mu = float(sys.g(b.mean)[0, 0])
    lf_v = 2.0 * err * f_mu
    lg_v = 2.0 * err * g_mu

    row = bcbf_row_rd1(c, b, sys)
    s = cfg.slack_penalty
    problem = qp.QpProblem(
        hessian=np.array([[1.0, 0.0], [0.0, 2.0 * s]]),
        linear=np.zeros(2),
        ineq_lhs=np.array([
            [lg_v, -1.0],              # CLF: L_fV + L_gV u <= -V + rho
            [float(row.coeff_u[0]), 0.0],  # barrier: coeff u >= rhs
        ]),
        ineq_lo=np.array([-np.inf, row.rhs]),
        ineq_hi=np.array([-V - lf_v, np.inf]),
        lower=np.array([-cfg.u_max, -np.inf]),
        upper=np.array([cfg.u_max, np.inf]),
    )
    sol = qp.solve(problem, *qp_tols, max_iters=max_iters)
    return np.array([sol.primal[0]]), float(sol.primal[1]), sol.status


def safety_filtered_control(nominal: np.ndarray, rows: list[BcbfRow],
                            u_max: np.ndarray,
                            qp_tols: tuple[float, float] = (1e-8, 1e-8),
                            max_iters: int = 4000,
                            fallback: str = "steer_safe") -> tuple[np.ndarray, str]:
    """Minimally invasive filter: min 1/2 ||u - u_nom||^2 over the rows and box.

    On infeasibility, "steer_safe" falls back to the input that maximizes the
    left-hand side of the most deficient safety row over the box (best effort
    toward safety), while "clip_iterate" clips the solver's last iterate to
    the box, i.e. uses the solver output as-is; the caller flags the step.
    """
    nominal = np.asarray(nominal, dtype=float)
    u_max = np.asarray(u_max, dtype=float)
    m = nominal.shape[0]
    A = np.array([r.coeff_u for r in rows]).reshape(len(rows), m)
    rhs = np.array([r.rhs for r in rows])
    problem = qp.QpProblem(
        hessian=np.eye(m),
        linear=-nominal,
        ineq_lhs=A,
        ineq_lo=rhs,
        ineq_hi=np.full(len(rows), np.inf),
        lower=-u_max,
        upper=u_max,
    )
    sol = qp.solve(problem, *qp_tols, max_iters=max_iters)
    if sol.status == qp.STATUS_INFEASIBLE:
        if fallback == "clip_iterate":
            return np.clip(sol.primal, -u_max, u_max), sol.status
        deficits = rhs - np.abs(A) @ u_max
        worst = int(np.argmax(deficits))
        u_fb = np.where(np.abs(A[worst]) > 0.0,
                        np.sign(A[worst]) * u_max,
                        np.clip(nominal, -u_max, u_max))
        return u_fb, sol.status
    return sol.primal, sol.status
