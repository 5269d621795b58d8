"""System dynamics, observation models, and the state-dependent
(multiplicative) measurement noise generator for both benchmark scenarios.

Systems are immutable after construction and safe to share across Monte
Carlo workers; each worker owns its own numpy Generator.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from bcbf_gekf.specfun import psd_check


@dataclass(frozen=True)
class ControlAffineSystem:
    """Control-affine dynamics dx/dt = f(x) + g(x) u + w, w ~ N(0, Q).

    drift_jacobian is df/dx; control_jacobian_term(x, u) is the Jacobian of
    g(x) u with respect to x (zero for both benchmark systems, whose g is
    constant).
    """

    n: int
    m: int
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    drift_jacobian: Callable[[np.ndarray], np.ndarray]
    control_jacobian_term: Callable[[np.ndarray, np.ndarray], np.ndarray]
    Q: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        Q = np.zeros((self.n, self.n)) if self.Q is None else np.asarray(self.Q, dtype=float)
        object.__setattr__(self, "Q", Q)
        if not psd_check(Q):
            raise ValueError("process noise Q must be symmetric PSD")

    def dynamics_jacobian(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """F(x, u) = d/dx [f(x) + g(x) u]."""
        return self.drift_jacobian(x) + self.control_jacobian_term(x, u)


@dataclass(frozen=True)
class ObservationModel:
    """Measurement map z = ell(x) with Jacobian H(x) = d ell / dx."""

    o: int
    ell: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NoiseModel:
    """Measurement noise z = (1 + p) * ell(x) + v.

    p ~ N(mu_p * 1, sigma_p^2 I) elementwise-multiplicative, v ~ N(mu_v, R),
    independent of each other and of the process noise.
    """

    mu_p: float
    sigma_p: float
    mu_v: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu_v", np.atleast_1d(np.asarray(self.mu_v, dtype=float)))
        object.__setattr__(self, "R", np.atleast_2d(np.asarray(self.R, dtype=float)))
        if self.sigma_p < 0:
            raise ValueError("sigma_p must be non-negative")
        if not psd_check(self.R):
            raise ValueError("additive noise covariance R must be symmetric PSD")
        if self.mu_v.shape[0] != self.R.shape[0]:
            raise ValueError("mu_v and R dimensions disagree")
        object.__setattr__(self, "R_sqrt", _psd_sqrt(self.R))

    R_sqrt: np.ndarray = field(init=False, compare=False, default=None)  # type: ignore[assignment]


def _psd_sqrt(R: np.ndarray) -> np.ndarray:
    """Square root of a PSD matrix: Cholesky when PD, eigh-based otherwise."""
    try:
        return np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(R)
        return V @ np.diag(np.sqrt(np.clip(w, 0.0, None)))


def integrator1d_system(q_var: float = 0.0) -> ControlAffineSystem:
    """1D nonlinear single integrator: dx/dt = 0.1 cos(x) + u.

    No process noise by default; q_var overrides.
    """
    return ControlAffineSystem(
        n=1,
        m=1,
        f=lambda x: np.array([0.1 * np.cos(x[0])]),
        g=lambda x: np.array([[1.0]]),
        drift_jacobian=lambda x: np.array([[-0.1 * np.sin(x[0])]]),
        control_jacobian_term=lambda x, u: np.zeros((1, 1)),
        Q=np.array([[q_var]]),
    )


def unicycle_system(q_var: float = 0.0001) -> ControlAffineSystem:
    """Unicycle model, state [x, y, v, theta], input [a, omega]."""

    def f(x):
        return np.array([x[2] * np.cos(x[3]), x[2] * np.sin(x[3]), 0.0, 0.0])

    def drift_jacobian(x):
        c, s = np.cos(x[3]), np.sin(x[3])
        return np.array([
            [0.0, 0.0, c, -x[2] * s],
            [0.0, 0.0, s, x[2] * c],
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
        ])

    g_const = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return ControlAffineSystem(
        n=4,
        m=2,
        f=f,
        g=lambda x: g_const,
        drift_jacobian=drift_jacobian,
        control_jacobian_term=lambda x, u: np.zeros((4, 4)),
        Q=q_var * np.eye(4),
    )


def identity_observation(n: int = 1) -> ObservationModel:
    """ell(x) = x; used by the 1D scenario."""
    return ObservationModel(o=n, ell=lambda x: np.asarray(x, dtype=float).copy(),
                            jacobian=lambda x: np.eye(n))


def position_y_observation() -> ObservationModel:
    """ell(x) = y for the unicycle state [x, y, v, theta]."""
    H = np.array([[0.0, 1.0, 0.0, 0.0]])
    return ObservationModel(o=1, ell=lambda x: np.array([x[1]]), jacobian=lambda x: H)


def measurement_from_normals(obs: ObservationModel, noise: NoiseModel,
                             x_true: np.ndarray, n_p: np.ndarray,
                             n_v: np.ndarray) -> np.ndarray:
    """Assemble z = (1 + p) * ell(x) + v from standard-normal draws.

    Splitting the draw from the assembly keeps episode kernels bit-compatible
    with this reference path.
    """
    p = noise.mu_p + noise.sigma_p * n_p
    v = noise.mu_v + noise.R_sqrt @ n_v
    return (1.0 + p) * obs.ell(x_true) + v


def sample_measurement(obs: ObservationModel, noise: NoiseModel,
                       x_true: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one measurement z = (1 + p) * ell(x_true) + v.

    Draw order (p first, then v) is part of the determinism contract.
    """
    x_true = np.asarray(x_true, dtype=float)
    if not np.all(np.isfinite(x_true)):
        raise ValueError("sample_measurement: non-finite true state")
    n_p = rng.standard_normal(obs.o)
    n_v = rng.standard_normal(obs.o)
    return measurement_from_normals(obs, noise, x_true, n_p, n_v)
