"""Closed-loop simulation for the two benchmark scenarios, with Monte Carlo
execution and metric aggregation.

The loop per control step: compute the safety-filtered control from the
current belief (ZoH over the step), advance the true state by
Euler-Maruyama, advance the belief with the estimator time update, and on
measurement ticks sample a measurement, apply the EKF or GEKF update, and
log the discrete-jump diagnostics.

Episodes run through numba kernels by default; a pure-Python reference path
built from the modular operations exists for cross-validation (path =
"reference").
"""

import csv
import math
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from bcbf_gekf import _kernels
from bcbf_gekf.belief_safety import (HalfSpaceConstraint, bcbf_row_rd1,
                                     bcbf_row_rd2_unicycle,
                                     cvar_halfspace, jump_diagnostics)
from bcbf_gekf.controllers import (Clf1dConfig, GainScheduleConfig, TrajectoryRef,
                                   clf_cbf_qp_control, gain_scheduled_control,
                                   reference_state, safety_filtered_control)
from bcbf_gekf.estimators import Belief, ekf_update, gekf_update, time_update
from bcbf_gekf.models import (ControlAffineSystem, NoiseModel, ObservationModel,
                              identity_observation, integrator1d_system,
                              measurement_from_normals, position_y_observation,
                              unicycle_system)

ESTIMATORS = ("ekf", "gekf")


@dataclass(frozen=True)
class Schedule:
    """Control at 1/dt_control Hz, measurements every measurement_period."""

    duration: float
    dt_control: float = 0.001
    measurement_period: float = 10.0

    def __post_init__(self):
        if self.duration <= 0 or self.dt_control <= 0:
            raise ValueError("duration and dt_control must be positive")
        ratio = self.measurement_period / self.dt_control
        if abs(ratio - round(ratio)) > 1e-6:
            raise ValueError("measurement_period must be an integer multiple of dt_control")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt_control))

    @property
    def meas_every(self) -> int:
        return int(round(self.measurement_period / self.dt_control))

    @property
    def n_measurements(self) -> int:
        return self.n_steps // self.meas_every


@dataclass(frozen=True)
class Integrator1dScenario:
    """1D setpoint tracking with a CLF-CBF-QP and one half-space constraint."""

    noise: NoiseModel
    constraint: HalfSpaceConstraint
    schedule: Schedule
    controller: Clf1dConfig = Clf1dConfig()
    x0: float = 0.0
    sigma0: float = 1.0
    q_var: float = 0.0
    hold_measurement: bool = False
    qp_tol_primal: float = 1e-8
    qp_tol_dual: float = 1e-8
    qp_max_iters: int = 4000
    effort_mode: str = "abs"  # or "squared"
    fail_radius_factor: float = 10.0
    setpoint_rmse_transient: float = 10.0

    id = "integrator1d"

    def system(self) -> ControlAffineSystem:
        return integrator1d_system(self.q_var)

    def observation(self) -> ObservationModel:
        return identity_observation(1)

    @property
    def constraints(self) -> tuple[HalfSpaceConstraint, ...]:
        return (self.constraint,)

    @property
    def fail_radius(self) -> float:
        return self.fail_radius_factor * abs(self.constraint.beta)


@dataclass(frozen=True)
class Unicycle2dScenario:
    """2D sinusoidal tracking with two relative-degree-2 belief barriers."""

    noise: NoiseModel
    constraints: tuple[HalfSpaceConstraint, HalfSpaceConstraint]
    schedule: Schedule
    gains: GainScheduleConfig = GainScheduleConfig()
    trajectory: TrajectoryRef = TrajectoryRef()
    zeta1: float = 1.0
    zeta2: float = 0.75
    gain_k: float = 50.0
    u_max: tuple[float, float] = (1.0, 1.0)
    x0: tuple[float, float, float, float] = (0.0, 0.0, 5.0, 0.45)
    sigma0_diag: tuple[float, float, float, float] = (0.1, 0.1, 0.1, 0.1)
    q_var: float = 0.0001
    hold_measurement: bool = False
    include_cov_flow: bool = True
    init_mean_from_measurement: bool = True
    qp_tol_primal: float = 1e-8
    qp_tol_dual: float = 1e-8
    qp_max_iters: int = 4000
    effort_mode: str = "abs"
    fail_radius_factor: float = 10.0

    id = "unicycle2d"

    def system(self) -> ControlAffineSystem:
        return unicycle_system(self.q_var)

    def observation(self) -> ObservationModel:
        return position_y_observation()

    @property
    def fail_radius(self) -> float:
        return self.fail_radius_factor * abs(self.constraints[0].beta)


def default_integrator1d(duration: float = 20.0, **overrides) -> Integrator1dScenario:
    """1D benchmark: drive to x = 6 while keeping x <= 5 at risk 0.001."""
    base = Integrator1dScenario(
        noise=NoiseModel(mu_p=0.1, sigma_p=0.001, mu_v=np.array([0.01]),
                         R=np.array([[0.0005 ** 2]])),
        constraint=HalfSpaceConstraint(np.array([-1.0]), -5.0, 0.001),
        schedule=Schedule(duration=duration, measurement_period=5.0))
    return replace(base, **overrides) if overrides else base


def default_unicycle2d(duration: float = 60.0, **overrides) -> Unicycle2dScenario:
    """2D benchmark: sinusoidal tracking inside the corridor |y| <= 5."""
    base = Unicycle2dScenario(
        noise=NoiseModel(mu_p=0.1, sigma_p=0.01, mu_v=np.array([0.001]),
                         R=np.array([[0.0005 ** 2]])),
        constraints=(HalfSpaceConstraint(np.array([0.0, -1.0, 0.0, 0.0]), -5.0, 0.001),
                     HalfSpaceConstraint(np.array([0.0, 1.0, 0.0, 0.0]), -5.0, 0.001)),
        schedule=Schedule(duration=duration, measurement_period=0.1))
    return replace(base, **overrides) if overrides else base


@dataclass
class MeasurementEvents:
    """Per-measurement logs; the per-constraint arrays have shape (n_ev, k)."""

    step: np.ndarray
    t: np.ndarray
    z: np.ndarray
    z_hat: np.ndarray
    gain: np.ndarray
    innovation_cov: np.ndarray
    lam_alpha: np.ndarray
    h_b_pre: np.ndarray
    h_b_post: np.ndarray
    xi: np.ndarray
    bound: np.ndarray


@dataclass
class MetricsSummary:
    """Per-run metrics, or their aggregate over a Monte Carlo batch.

    Percentages are in [0, 100]. Aggregates are means over non-failed runs
    (max/min rows are means of per-run extrema); failure_rate counts all runs.
    """

    pct_estimated_exceedances: float
    pct_true_exceedances: float
    max_estimated_coord: float
    min_estimated_coord: float
    max_true_coord: float
    min_true_coord: float
    mean_est_distance_from_boundary: float
    average_controller_effort: float
    average_controls: list[float]
    tracking_rmse: float
    estimation_rmse: float
    setpoint_rmse: float
    mean_covariance_trace: float
    final_covariance_trace: float
    pct_bcbf_violations: list[float]
    failure_rate: float
    n_runs: int = 1


@dataclass
class RunRecord:
    """Time-indexed log of one seeded episode.

    Trajectory arrays have n_done + 1 rows; control arrays have n_done rows.
    A failed run is truncated at the failing step but retained.
    """

    scenario_id: str
    estimator: str
    seed: int
    dt: float
    t: np.ndarray
    x_true: np.ndarray
    mean: np.ndarray
    sigma_diag: np.ndarray
    h_b: np.ndarray
    u: np.ndarray
    slack: np.ndarray | None
    infeasible_steps: np.ndarray
    reference: np.ndarray | None
    events: MeasurementEvents
    failed: bool
    metrics: MetricsSummary | None = None


def _draw_noise(scenario, rng: np.random.Generator):
    """Pre-draw every standard normal an episode consumes, in a fixed order:
    initial-measurement pair (2D option), process noise, then the
    multiplicative / additive pairs per measurement tick."""
    sched = scenario.schedule
    n = scenario.system().n
    init_pair = None
    if getattr(scenario, "init_mean_from_measurement", False):
        init_pair = (rng.standard_normal(1), rng.standard_normal(1))
    W = rng.standard_normal((sched.n_steps, n))
    NP = rng.standard_normal(sched.n_measurements)
    NV = rng.standard_normal(sched.n_measurements)
    return init_pair, W, NP, NV


def _initial_belief(scenario, init_pair) -> tuple[Belief, float | None]:
    """Initial belief, plus the initializing measurement when one was taken
    (it stays held from t = 0 under hold_measurement)."""
    if scenario.id == "integrator1d":
        return Belief(np.array([scenario.x0]), np.array([[scenario.sigma0]])), None
    mu0 = np.array(scenario.x0, dtype=float)
    z0 = None
    if scenario.init_mean_from_measurement and init_pair is not None:
        # one noisy full-state measurement seeds the belief: every component
        # carries the multiplicative scale (1 + p) and the additive offset v
        noise = scenario.noise
        p = noise.mu_p + noise.sigma_p * float(init_pair[0][0])
        v = float(noise.mu_v[0]) + math.sqrt(float(noise.R[0, 0])) * float(init_pair[1][0])
        mu0 = (1.0 + p) * mu0 + v
        z0 = float(mu0[1])
    return Belief(mu0, np.diag(np.array(scenario.sigma0_diag, dtype=float))), z0


def run_episode(scenario, estimator_kind: str, seed: int,
                path: str = "kernel") -> RunRecord:
    """Run one seeded closed-loop episode; deterministic per (inputs, path)."""
    if estimator_kind not in ESTIMATORS:
        raise ValueError(f"estimator_kind must be one of {ESTIMATORS}")
    rng = np.random.default_rng(seed)
    init_pair, W, NP, NV = _draw_noise(scenario, rng)
    if path == "kernel":
        record = _episode_kernel(scenario, estimator_kind, seed, init_pair, W, NP, NV)
    elif path == "reference":
        record = _episode_reference(scenario, estimator_kind, seed, init_pair, W, NP, NV)
    else:
        raise ValueError("path must be 'kernel' or 'reference'")
    record.metrics = compute_metrics(record, scenario)
    return record


def _episode_kernel(scenario, estimator_kind, seed, init_pair, W, NP, NV) -> RunRecord:
    sched = scenario.schedule
    dt = sched.dt_control
    use_gekf = estimator_kind == "gekf"
    noise = scenario.noise
    b0, z0 = _initial_belief(scenario, init_pair)

    if scenario.id == "integrator1d":
        c = scenario.constraint
        out = _kernels.episode_integrator1d(
            float(scenario.x0), float(b0.mean[0]), float(b0.cov[0, 0]),
            dt, sched.n_steps, sched.meas_every,
            W[:, 0], NP, NV,
            noise.mu_p, noise.sigma_p, float(noise.mu_v[0]), float(noise.R[0, 0]),
            scenario.q_var,
            float(c.alpha[0]), c.beta, c.risk_coeff,
            scenario.controller.target, scenario.controller.slack_penalty,
            scenario.controller.u_max,
            use_gekf, scenario.hold_measurement,
            scenario.qp_tol_primal, scenario.qp_tol_dual,
            scenario.qp_max_iters, scenario.fail_radius)
        (xs, mus, sigs, hbs, us, slacks, infeas,
         ev_step, ev_z, ev_zhat, ev_K, ev_S, ev_lam, ev_hb_pre, ev_hb_post,
         ev_xi, ev_bound, failed, n_done) = out
        a2 = float(c.alpha[0]) ** 2
        events = MeasurementEvents(
            step=ev_step, t=ev_step * dt, z=ev_z, z_hat=ev_zhat,
            gain=ev_K.reshape(-1, 1), innovation_cov=ev_S,
            lam_alpha=(a2 * ev_lam).reshape(-1, 1),
            h_b_pre=ev_hb_pre.reshape(-1, 1), h_b_post=ev_hb_post.reshape(-1, 1),
            xi=ev_xi.reshape(-1, 1), bound=ev_bound.reshape(-1, 1))
        k = n_done
        return RunRecord(
            scenario_id=scenario.id, estimator=estimator_kind, seed=seed, dt=dt,
            t=np.arange(k + 1) * dt,
            x_true=xs[:k + 1].reshape(-1, 1), mean=mus[:k + 1].reshape(-1, 1),
            sigma_diag=sigs[:k + 1].reshape(-1, 1), h_b=hbs[:k + 1].reshape(-1, 1),
            u=us[:k].reshape(-1, 1), slack=slacks[:k],
            infeasible_steps=infeas[:k], reference=None, events=events,
            failed=bool(failed))

    alphas = np.array([con.alpha for con in scenario.constraints])
    betas = np.array([con.beta for con in scenario.constraints])
    cq = scenario.constraints[0].risk_coeff
    sys_ = scenario.system()
    q_alphas = np.array([float(con.alpha @ sys_.Q @ con.alpha)
                         for con in scenario.constraints])
    out = _kernels.episode_unicycle2d(
        np.array(scenario.x0, dtype=float), b0.mean.copy(), b0.cov.copy(),
        dt, sched.n_steps, sched.meas_every, W, NP, NV,
        noise.mu_p, noise.sigma_p, float(noise.mu_v[0]), float(noise.R[0, 0]),
        sys_.Q, alphas, betas, cq, q_alphas,
        scenario.gains.v_r, scenario.gains.k_x, scenario.gains.k_v,
        scenario.gains.k_y, scenario.gains.k_theta,
        scenario.trajectory.amplitude, scenario.trajectory.omega,
        scenario.trajectory.tangent_heading,
        scenario.zeta1, scenario.zeta2, scenario.gain_k, scenario.include_cov_flow,
        np.array(scenario.u_max, dtype=float), use_gekf, scenario.hold_measurement,
        z0 if z0 is not None else np.nan,
        scenario.qp_tol_primal, scenario.qp_tol_dual, scenario.qp_max_iters,
        scenario.fail_radius)
    (xs, mus, sig_diag, sig_trace, hbs, us, infeas, refs,
     ev_step, ev_z, ev_zhat, ev_K, ev_S, ev_lam_a, ev_hb_pre, ev_hb_post,
     ev_xi, ev_bound, failed, n_done) = out
    events = MeasurementEvents(
        step=ev_step, t=ev_step * dt, z=ev_z, z_hat=ev_zhat, gain=ev_K,
        innovation_cov=ev_S, lam_alpha=ev_lam_a, h_b_pre=ev_hb_pre,
        h_b_post=ev_hb_post, xi=ev_xi, bound=ev_bound)
    k = n_done
    return RunRecord(
        scenario_id=scenario.id, estimator=estimator_kind, seed=seed, dt=dt,
        t=np.arange(k + 1) * dt,
        x_true=xs[:k + 1], mean=mus[:k + 1], sigma_diag=sig_diag[:k + 1],
        h_b=hbs[:k + 1], u=us[:k], slack=None, infeasible_steps=infeas[:k],
        reference=refs[:k + 1], events=events, failed=bool(failed))


def _episode_reference(scenario, estimator_kind, seed, init_pair, W, NP, NV) -> RunRecord:
    """Pure-Python episode built from the modular operations.

    Slow; intended for short-horizon cross-validation of the kernels.
    """
    sched = scenario.schedule
    dt = sched.dt_control
    sys_ = scenario.system()
    obs = scenario.observation()
    noise = scenario.noise
    cons = list(scenario.constraints)
    use_gekf = estimator_kind == "gekf"
    update = gekf_update if use_gekf else ekf_update

    b, z0 = _initial_belief(scenario, init_pair)
    x = np.array(np.atleast_1d(scenario.x0), dtype=float)
    Lq = np.sqrt(np.diag(sys_.Q))  # diagonal process noise by construction

    steps = sched.n_steps
    n, m, kcon = sys_.n, sys_.m, len(cons)
    xs = np.empty((steps + 1, n))
    mus = np.empty((steps + 1, n))
    sig_diag = np.empty((steps + 1, n))
    hbs = np.empty((steps + 1, kcon))
    us = np.empty((steps, m))
    slacks = np.empty(steps) if scenario.id == "integrator1d" else None
    infeas = np.zeros(steps, dtype=np.int64)
    refs = np.empty((steps + 1, 4)) if scenario.id == "unicycle2d" else None

    ev = {key: [] for key in ("step", "z", "z_hat", "gain", "innovation_cov",
                              "lam_alpha", "h_b_pre", "h_b_post", "xi", "bound")}
    failed = False
    n_done = steps
    u_prev = np.zeros(m)
    n_ev = 0
    z_held = np.array([z0]) if z0 is not None else None

    for i in range(steps):
        t = i * dt
        xs[i] = x
        mus[i] = b.mean
        sig_diag[i] = np.diag(b.cov)
        for j, con in enumerate(cons):
            hbs[i, j] = cvar_halfspace(con, b)

        if scenario.id == "integrator1d":
            u, slack, status = clf_cbf_qp_control(
                scenario.controller, cons[0], b, sys_,
                (scenario.qp_tol_primal, scenario.qp_tol_dual), scenario.qp_max_iters)
            if status == "infeasible":
                row = bcbf_row_rd1(cons[0], b, sys_)
                coeff = float(row.coeff_u[0])
                u = np.array([math.copysign(scenario.controller.u_max, coeff)
                              if coeff != 0.0 else
                              float(np.clip(u_prev[0], -scenario.controller.u_max,
                                            scenario.controller.u_max))])
                slack = 0.0
                infeas[i] = 1
            slacks[i] = slack
        else:
            x_ref = reference_state(scenario.trajectory, t)
            refs[i] = x_ref
            u_nom = gain_scheduled_control(scenario.gains, b.mean, x_ref)
            rows = [bcbf_row_rd2_unicycle(con, b, sys_, scenario.zeta1,
                                          scenario.zeta2, scenario.gain_k,
                                          scenario.include_cov_flow)
                    for con in cons]
            u, status = safety_filtered_control(
                u_nom, rows, np.array(scenario.u_max),
                qp_tols=(scenario.qp_tol_primal, scenario.qp_tol_dual),
                max_iters=scenario.qp_max_iters)
            if status == "infeasible":
                infeas[i] = 1
        us[i] = u
        u_prev = u

        x = x + dt * (sys_.f(x) + sys_.g(x) @ u) + math.sqrt(dt) * Lq * W[i]
        b = time_update(sys_, b, u, dt)

        fresh = (i + 1) % sched.meas_every == 0
        if fresh:
            z_held = measurement_from_normals(obs, noise, x,
                                              np.array([NP[n_ev]]), np.array([NV[n_ev]]))
        if fresh or (scenario.hold_measurement and z_held is not None):
            z = z_held
            b_prior = b
            scale = float(sched.meas_every) if scenario.hold_measurement else 1.0
            b, report = update(obs, noise, b_prior, z, noise_scale=scale)
        if fresh:
            ev["step"].append(i + 1)
            ev["z"].append(z[0])
            ev["z_hat"].append(report.predicted_measurement[0])
            ev["gain"].append(report.kalman_gain[:, 0].copy())
            ev["innovation_cov"].append(report.innovation_covariance[0, 0])
            lam_a, pre, post, xis, bounds = [], [], [], [], []
            for con in cons:
                diag = jump_diagnostics(con, b_prior, report, 0.05, b_post=b)
                lam_a.append(float(con.alpha @ report.innovation_term_covariance @ con.alpha))
                pre.append(diag.h_b_value)
                post.append(cvar_halfspace(con, b))
                xis.append(diag.xi)
                bounds.append(diag.leave_probability_bound)
            ev["lam_alpha"].append(lam_a)
            ev["h_b_pre"].append(pre)
            ev["h_b_post"].append(post)
            ev["xi"].append(xis)
            ev["bound"].append(bounds)
            n_ev += 1

        # a covariance that lost positivity along a constraint direction is a
        # divergence: the next risk evaluation would be undefined
        cov_bad = any(not np.isfinite(v) or v <= 0.0
                      for v in (float(con.alpha @ b.cov @ con.alpha) for con in cons))
        if scenario.id == "integrator1d":
            bad = cov_bad \
                or not (np.all(np.isfinite(x)) and np.all(np.isfinite(b.mean))) \
                or abs(x[0]) > scenario.fail_radius
        else:
            t_next = (i + 1) * dt
            bad = cov_bad \
                or not (np.all(np.isfinite(x)) and np.all(np.isfinite(b.mean))) \
                or abs(x[1]) > scenario.fail_radius \
                or abs(b.mean[1]) > scenario.fail_radius \
                or abs(x[0] - scenario.gains.v_r * t_next) > scenario.fail_radius \
                or abs(b.mean[0] - scenario.gains.v_r * t_next) > scenario.fail_radius
        if bad:
            failed = True
            n_done = i + 1
            break

    xs[n_done] = x
    mus[n_done] = b.mean
    sig_diag[n_done] = np.diag(b.cov)
    for j, con in enumerate(cons):
        var = float(con.alpha @ b.cov @ con.alpha)
        hbs[n_done, j] = cvar_halfspace(con, b) if np.isfinite(var) and var > 0.0 \
            else np.nan
    if refs is not None:
        refs[n_done] = reference_state(scenario.trajectory, n_done * dt)

    events = MeasurementEvents(
        step=np.array(ev["step"], dtype=np.int64),
        t=np.array(ev["step"], dtype=float) * dt,
        z=np.array(ev["z"]), z_hat=np.array(ev["z_hat"]),
        gain=np.array(ev["gain"]).reshape(n_ev, n),
        innovation_cov=np.array(ev["innovation_cov"]),
        lam_alpha=np.array(ev["lam_alpha"]).reshape(n_ev, kcon),
        h_b_pre=np.array(ev["h_b_pre"]).reshape(n_ev, kcon),
        h_b_post=np.array(ev["h_b_post"]).reshape(n_ev, kcon),
        xi=np.array(ev["xi"]).reshape(n_ev, kcon),
        bound=np.array(ev["bound"]).reshape(n_ev, kcon))
    k = n_done
    return RunRecord(
        scenario_id=scenario.id, estimator=estimator_kind, seed=seed, dt=dt,
        t=np.arange(k + 1) * dt, x_true=xs[:k + 1], mean=mus[:k + 1],
        sigma_diag=sig_diag[:k + 1], h_b=hbs[:k + 1], u=us[:k],
        slack=slacks[:k] if slacks is not None else None,
        infeasible_steps=infeas[:k],
        reference=refs[:k + 1] if refs is not None else None,
        events=events, failed=failed)


def compute_metrics(record: RunRecord, scenario) -> MetricsSummary:
    """Metrics for one run; a failed run still gets metrics over its prefix."""
    dt = record.dt
    cons = list(scenario.constraints)
    coord = 0 if record.scenario_id == "integrator1d" else 1

    est_margin = np.min(np.stack([record.mean @ con.alpha - con.beta for con in cons]), axis=0)
    true_margin = np.min(np.stack([record.x_true @ con.alpha - con.beta for con in cons]), axis=0)
    pct_est = 100.0 * float(np.mean(est_margin < 0.0))
    pct_true = 100.0 * float(np.mean(true_margin < 0.0))

    est_c = record.mean[:, coord]
    true_c = record.x_true[:, coord]
    effort_fn = np.abs if scenario.effort_mode == "abs" else np.square
    effort = float(np.sum(effort_fn(record.u)) * dt)
    avg_controls = [float(np.mean(record.u[:, j])) for j in range(record.u.shape[1])] \
        if record.u.size else [0.0] * record.u.shape[1]

    estimation_rmse = float(np.sqrt(np.mean(
        np.sum((record.x_true[:, :coord + 1] - record.mean[:, :coord + 1]) ** 2, axis=1))))
    if record.scenario_id == "integrator1d":
        mask = record.t >= scenario.setpoint_rmse_transient
        if not np.any(mask):
            mask = slice(None)
        setpoint_rmse = float(np.sqrt(np.mean(
            (record.x_true[mask, 0] - scenario.controller.target) ** 2)))
        tracking_rmse = estimation_rmse
    else:
        pos_err = record.x_true[:, :2] - record.reference[:, :2]
        tracking_rmse = float(np.sqrt(np.mean(np.sum(pos_err ** 2, axis=1))))
        est_err = record.x_true[:, :2] - record.mean[:, :2]
        estimation_rmse = float(np.sqrt(np.mean(np.sum(est_err ** 2, axis=1))))
        setpoint_rmse = tracking_rmse

    traces = np.sum(record.sigma_diag, axis=1)
    viol = [100.0 * float(np.mean(record.h_b[:, j] < 0.0)) for j in range(len(cons))]

    return MetricsSummary(
        pct_estimated_exceedances=pct_est,
        pct_true_exceedances=pct_true,
        max_estimated_coord=float(np.max(est_c)),
        min_estimated_coord=float(np.min(est_c)),
        max_true_coord=float(np.max(true_c)),
        min_true_coord=float(np.min(true_c)),
        mean_est_distance_from_boundary=float(np.mean(est_margin)),
        average_controller_effort=effort,
        average_controls=avg_controls,
        tracking_rmse=tracking_rmse,
        estimation_rmse=estimation_rmse,
        setpoint_rmse=setpoint_rmse,
        mean_covariance_trace=float(np.mean(traces)),
        final_covariance_trace=float(traces[-1]),
        pct_bcbf_violations=viol,
        failure_rate=100.0 if record.failed else 0.0,
        n_runs=1)


@dataclass
class MonteCarloResult:
    summary: MetricsSummary
    per_run: list[MetricsSummary]
    events: list[MeasurementEvents] = field(default_factory=list)


_MEAN_FIELDS = ("pct_estimated_exceedances", "pct_true_exceedances",
                "max_estimated_coord", "min_estimated_coord", "max_true_coord",
                "min_true_coord", "mean_est_distance_from_boundary",
                "average_controller_effort", "tracking_rmse", "estimation_rmse",
                "setpoint_rmse", "mean_covariance_trace", "final_covariance_trace")


def monte_carlo(scenario, estimator_kind: str, n_runs: int, base_seed: int = 0,
                collect_events: bool = False, path: str = "kernel") -> MonteCarloResult:
    """Run n_runs seeded episodes (seeds base_seed + i) and aggregate.

    Failed runs are excluded from trajectory metrics but counted in
    failure_rate. Aggregation order is fixed by run index.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    per_run: list[MetricsSummary] = []
    events: list[MeasurementEvents] = []
    n_failed = 0
    for i in range(n_runs):
        rec = run_episode(scenario, estimator_kind, base_seed + i, path=path)
        per_run.append(rec.metrics)
        if collect_events:
            events.append(rec.events)
        if rec.failed:
            n_failed += 1

    ok = [r for r in per_run if r.failure_rate == 0.0] or per_run
    kw = {}
    for name in _MEAN_FIELDS:
        kw[name] = float(np.mean([getattr(r, name) for r in ok]))
    n_u = len(per_run[0].average_controls)
    kw["average_controls"] = [float(np.mean([r.average_controls[j] for r in ok]))
                              for j in range(n_u)]
    n_c = len(per_run[0].pct_bcbf_violations)
    kw["pct_bcbf_violations"] = [float(np.mean([r.pct_bcbf_violations[j] for r in ok]))
                                 for j in range(n_c)]
    kw["failure_rate"] = 100.0 * n_failed / n_runs
    kw["n_runs"] = n_runs
    return MonteCarloResult(summary=MetricsSummary(**kw), per_run=per_run, events=events)


def metrics_to_dict(m: MetricsSummary) -> dict:
    return asdict(m)


def write_trajectory_csv(record: RunRecord, path: str) -> None:
    """One row per control step; columns t, x_true..., mu..., sigma_diag...,
    u..., h_b per constraint, slack (1D), event_flag."""
    n = record.x_true.shape[1]
    m = record.u.shape[1]
    kcon = record.h_b.shape[1]
    header = (["t"]
              + [f"x_true_{i}" for i in range(n)]
              + [f"mu_{i}" for i in range(n)]
              + [f"sigma_diag_{i}" for i in range(n)]
              + [f"u_{i}" for i in range(m)]
              + [f"h_b_{j + 1}" for j in range(kcon)]
              + (["slack"] if record.slack is not None else [])
              + ["event_flag"])
    event_steps = set(int(s) for s in record.events.step)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(record.u.shape[0]):
            row = ([record.t[i]] + list(record.x_true[i]) + list(record.mean[i])
                   + list(record.sigma_diag[i]) + list(record.u[i])
                   + list(record.h_b[i]))
            if record.slack is not None:
                row.append(record.slack[i])
            row.append(1 if (i + 1) in event_steps else 0)
            w.writerow(row)


def write_events_csv(record: RunRecord, path: str) -> None:
    """Companion CSV with one row per measurement event."""
    ev = record.events
    n = ev.gain.shape[1] if ev.gain.size else record.x_true.shape[1]
    kcon = ev.h_b_pre.shape[1] if ev.h_b_pre.size else record.h_b.shape[1]
    header = (["step", "t", "z", "z_hat"]
              + [f"gain_{i}" for i in range(n)]
              + ["innovation_cov"]
              + [f"lam_alpha_{j + 1}" for j in range(kcon)]
              + [f"h_b_pre_{j + 1}" for j in range(kcon)]
              + [f"h_b_post_{j + 1}" for j in range(kcon)]
              + [f"xi_{j + 1}" for j in range(kcon)]
              + [f"bound_{j + 1}" for j in range(kcon)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(ev.step)):
            w.writerow([int(ev.step[i]), ev.t[i], ev.z[i], ev.z_hat[i]]
                       + list(ev.gain[i]) + [ev.innovation_cov[i]]
                       + list(ev.lam_alpha[i]) + list(ev.h_b_pre[i])
                       + list(ev.h_b_post[i]) + list(ev.xi[i]) + list(ev.bound[i]))
