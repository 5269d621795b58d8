"""Continuous-discrete Gaussian state estimation.

Shared RK4/Euler time update plus two measurement updates: the standard EKF
baseline (assumes additive zero-mean noise) and the generalized update that
propagates the multiplicative noise moments through gain, covariance, and
predicted measurement.
"""

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from bcbf_gekf.errors import DivergenceError, MeasurementRejectedError
from bcbf_gekf.models import ControlAffineSystem, NoiseModel, ObservationModel
from bcbf_gekf.specfun import solve_spd, symmetrize
from bcbf_gekf.errors import SingularMatrixError


@dataclass(frozen=True)
class Belief:
    """Gaussian state estimate (mean, covariance)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "cov", np.atleast_2d(np.asarray(self.cov, dtype=float)))

    @property
    def n(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class MeasurementUpdateReport:
    """Quantities produced by one measurement update.

    innovation_term_covariance is K S K^T, the covariance of the belief-mean
    jump; downstream safety diagnostics consume it.
    """

    kalman_gain: np.ndarray
    innovation_covariance: np.ndarray
    predicted_measurement: np.ndarray
    innovation: np.ndarray
    innovation_term_covariance: np.ndarray


def time_update(sys: ControlAffineSystem, b: Belief, u: np.ndarray, dt: float) -> Belief:
    """Propagate the belief over dt with u held (ZoH).

    Mean via fixed-step RK4 on mu' = f(mu) + g(mu) u; covariance via one Euler
    step of Sigma' = F Sigma + Sigma F^T + Q with F evaluated at the incoming
    mean. Result covariance is symmetrized.
    """
    if dt <= 0:
        raise ValueError("time_update: dt must be positive")
    u = np.atleast_1d(np.asarray(u, dtype=float))
    mu, Sigma = b.mean, b.cov

    def mdot(x):
        return sys.f(x) + sys.g(x) @ u

    k1 = mdot(mu)
    k2 = mdot(mu + 0.5 * dt * k1)
    k3 = mdot(mu + 0.5 * dt * k2)
    k4 = mdot(mu + dt * k3)
    mu_next = mu + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    # First-order step of Sigma_dot = F Sigma + Sigma F^T + Q in the factored
    # form (I + dt F) Sigma (I + dt F)^T + dt Q: identical to the plain Euler
    # step up to O(dt^2) but keeps Sigma PSD even when a measurement has
    # collapsed it to near-singularity along some direction.
    F = sys.dynamics_jacobian(mu, u)
    Phi = np.eye(sys.n) + dt * F
    Sigma_next = symmetrize(Phi @ Sigma @ Phi.T + dt * sys.Q)

    if not np.all(np.isfinite(mu_next)):
        bad = int(np.argmax(~np.isfinite(mu_next)))
        raise DivergenceError(f"time_update: non-finite mean component {bad}")
    if not np.all(np.isfinite(Sigma_next)):
        raise DivergenceError("time_update: non-finite covariance")
    return Belief(mu_next, Sigma_next)


def ekf_update(obs: ObservationModel, noise: NoiseModel, b_prior: Belief,
               z: np.ndarray, noise_scale: float = 1.0,
               ) -> tuple[Belief, MeasurementUpdateReport]:
    """Standard EKF measurement update (the baseline).

    Predicts z_hat = ell(mu-); deliberately ignores mu_p and mu_v, which is
    exactly the bias failure mode the generalized update fixes.

    noise_scale inflates the measurement-noise covariance; held (zero-order
    hold) measurement schemes pass the number of steps per window so that the
    repeated partial updates sum to one full-weight update.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    mu, Sigma = b_prior.mean, b_prior.cov
    H = obs.jacobian(mu)
    S = symmetrize(H @ Sigma @ H.T + noise_scale * noise.R)
    try:
        # K = Sigma H^T S^-1 computed as (S^-1 H Sigma)^T
        K = solve_spd(S, H @ Sigma).T
    except SingularMatrixError as e:
        raise MeasurementRejectedError(f"EKF: singular innovation covariance ({e})") from e
    z_hat = obs.ell(mu)
    innovation = z - z_hat
    mu_post = mu + K @ innovation
    Sigma_post = symmetrize(Sigma - K @ H @ Sigma)
    report = MeasurementUpdateReport(
        kalman_gain=K,
        innovation_covariance=S,
        predicted_measurement=z_hat,
        innovation=innovation,
        innovation_term_covariance=symmetrize(K @ S @ K.T),
    )
    return Belief(mu_post, Sigma_post), report


def gekf_update(obs: ObservationModel, noise: NoiseModel, b_prior: Belief,
                z: np.ndarray, noise_scale: float = 1.0,
                ) -> tuple[Belief, MeasurementUpdateReport]:
    """Generalized EKF update for z = (1 + p) ell(x) + v.

    Propagates the multiplicative moments (mu_p, sigma_p) through the
    innovation covariance, gain, covariance update, and predicted
    measurement. Degenerates to ekf_update when mu_p = sigma_p = 0 and
    mu_v = 0. noise_scale plays the same role as in ekf_update and inflates
    the measurement-originated part of the innovation covariance.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    mu, Sigma = b_prior.mean, b_prior.cov
    mu_p, sigma_p = noise.mu_p, noise.sigma_p
    H = obs.jacobian(mu)
    ell = obs.ell(mu)
    HSH = H @ Sigma @ H.T
    M = np.diag(np.diag(HSH + np.outer(ell, ell)))
    S_G = symmetrize((1.0 + mu_p) ** 2 * HSH
                     + noise_scale * (sigma_p ** 2 * M + noise.R))
    try:
        K_G = (1.0 + mu_p) * solve_spd(S_G, H @ Sigma).T
    except SingularMatrixError as e:
        raise MeasurementRejectedError(f"GEKF: singular innovation covariance ({e})") from e
    z_hat = (1.0 + mu_p) * ell + noise.mu_v
    innovation = z - z_hat
    mu_post = mu + K_G @ innovation
    Sigma_post = symmetrize(Sigma - (1.0 + mu_p) * K_G @ H @ Sigma)
    report = MeasurementUpdateReport(
        kalman_gain=K_G,
        innovation_covariance=S_G,
        predicted_measurement=z_hat,
        innovation=innovation,
        innovation_term_covariance=symmetrize(K_G @ S_G @ K_G.T),
    )
    return Belief(mu_post, Sigma_post), report


def innovation_statistics(reports: Sequence[MeasurementUpdateReport] | Iterable[MeasurementUpdateReport],
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Empirical mean and covariance of the innovation terms theta = K (z - z_hat).

    Used to validate the zero-mean claim and the reported innovation-term
    covariance against simulation.
    """
    thetas = np.array([r.kalman_gain @ r.innovation for r in reports])
    if thetas.ndim != 2 or thetas.shape[0] < 2:
        raise ValueError("innovation_statistics: need at least two reports")
    mean = thetas.mean(axis=0)
    centered = thetas - mean
    cov = centered.T @ centered / (thetas.shape[0] - 1)
    return mean, cov
