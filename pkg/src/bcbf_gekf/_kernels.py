"""Numba-compiled episode loops for the two benchmark scenarios.

These mirror the modular numpy implementation step for step (same
integrators, same update formulas, same QP core) but run the whole closed
loop inside one jitted function. All randomness is pre-drawn by the caller
so kernels are deterministic pure functions; tests cross-check them against
the pure-Python reference path.
"""

import math

import numpy as np
from numba import njit

from bcbf_gekf.qp import admm_core

INF = np.inf


@njit(cache=True)
def _solve_qp(H, c, A, lo, hi, x_ws, y_ws, tol_p, tol_d, max_iters):
    """Warm-started solve with a cold restart if the warm run stalls.

    A warm start from a stale active set can stall the splitting iteration
    right where the active set changes; the cold run matches the behaviour
    of a fresh solve on the same data.
    """
    x, y, code, _it, _rp, _rd = admm_core(H, c, A, lo, hi, x_ws, y_ws,
                                          tol_p, tol_d, max_iters)
    if code != 1:
        x, y, code, _it, _rp, _rd = admm_core(H, c, A, lo, hi,
                                              np.zeros(H.shape[0]),
                                              np.zeros(A.shape[0]),
                                              tol_p, tol_d, max_iters)
    return x, y, code


@njit(cache=True)
def episode_integrator1d(x0, mu0, sig0, dt, steps, meas_every,
                         W, NP, NV,
                         mu_p, sigma_p, mu_v, Rv, Qv,
                         alpha, beta, cq, target, slack_penalty, u_max,
                         use_gekf, hold_measurement,
                         tol_p, tol_d, max_iters, fail_radius):
    """Closed loop for the 1D setpoint scenario. All quantities scalar.

    Returns per-step logs, measurement-event logs, and (failed, n_done).
    """
    n_meas_max = steps // meas_every if meas_every > 0 else 0

    xs = np.empty(steps + 1)
    mus = np.empty(steps + 1)
    sigs = np.empty(steps + 1)
    hbs = np.empty(steps + 1)
    us = np.empty(steps)
    slacks = np.empty(steps)
    infeas = np.zeros(steps, dtype=np.int64)

    ev_step = np.empty(n_meas_max, dtype=np.int64)
    ev_z = np.empty(n_meas_max)
    ev_zhat = np.empty(n_meas_max)
    ev_K = np.empty(n_meas_max)
    ev_S = np.empty(n_meas_max)
    ev_lam = np.empty(n_meas_max)
    ev_hb_pre = np.empty(n_meas_max)
    ev_hb_post = np.empty(n_meas_max)
    ev_xi = np.empty(n_meas_max)
    ev_bound = np.empty(n_meas_max)

    x = x0
    mu = mu0
    sig = sig0
    a2 = alpha * alpha
    H2 = np.array([[1.0, 0.0], [0.0, 2.0 * slack_penalty]])
    c2 = np.zeros(2)
    x_ws = np.zeros(2)
    y_ws = np.zeros(4)
    u_prev = 0.0
    failed = False
    n_done = steps
    n_ev = 0
    k_ev = 0
    z_held = 0.0
    have_z = False

    for i in range(steps):
        spread = math.sqrt(a2 * sig)
        hb = alpha * mu - beta - cq * spread
        xs[i] = x
        mus[i] = mu
        sigs[i] = sig
        hbs[i] = hb

        # barrier row: coeff * u >= rhs
        f_mu = 0.1 * math.cos(mu)
        F = -0.1 * math.sin(mu)
        covflow = -(cq / (2.0 * spread)) * (2.0 * a2 * F * sig + a2 * Qv)
        coeff = alpha  # alpha^T g, g = 1
        rhs_bar = -hb - alpha * f_mu - covflow

        # CLF row: L_fV + L_gV u <= -V + rho
        err = mu - target
        V = err * err
        lf_v = 2.0 * err * f_mu
        lg_v = 2.0 * err

        A = np.array([
            [lg_v, -1.0],
            [coeff, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
        ])
        lo = np.array([-INF, rhs_bar, -u_max, -INF])
        hi = np.array([-V - lf_v, INF, u_max, INF])
        sol, duals, code = _solve_qp(H2, c2, A, lo, hi, x_ws, y_ws, tol_p, tol_d, max_iters)
        if code == -1:
            # best effort toward safety: maximize the barrier row over the box
            if coeff != 0.0:
                u = math.copysign(u_max, coeff)
            else:
                u = min(max(u_prev, -u_max), u_max)
            slack = 0.0
            infeas[i] = 1
        else:
            x_ws = sol
            y_ws = duals
            u = sol[0]
            slack = sol[1]
        us[i] = u
        slacks[i] = slack
        u_prev = u

        # true state: Euler-Maruyama
        x = x + dt * (0.1 * math.cos(x) + u) + math.sqrt(dt * Qv) * W[i]

        # belief time update: RK4 mean, Euler covariance
        k1 = 0.1 * math.cos(mu) + u
        k2 = 0.1 * math.cos(mu + 0.5 * dt * k1) + u
        k3 = 0.1 * math.cos(mu + 0.5 * dt * k2) + u
        k4 = 0.1 * math.cos(mu + dt * k3) + u
        Fm = -0.1 * math.sin(mu)
        mu = mu + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        sig = (1.0 + dt * Fm) * sig * (1.0 + dt * Fm) + dt * Qv

        # measurement tick: sample a fresh observation and hold it; with
        # hold_measurement the filter re-applies the held value at every
        # control step (ZoH), otherwise it updates on ticks only
        fresh = meas_every > 0 and (i + 1) % meas_every == 0
        if fresh:
            k_ev = n_ev
            p = mu_p + sigma_p * NP[k_ev]
            v = mu_v + math.sqrt(Rv) * NV[k_ev]
            z_held = (1.0 + p) * x + v
            have_z = True
        if fresh or (hold_measurement and have_z):
            z = z_held
            sig_pre = sig
            hb_pre = alpha * mu - beta - cq * math.sqrt(a2 * sig)
            # under hold_measurement one measurement's information is spread
            # over the window: per-step noise variance scaled by meas_every
            scale = float(meas_every) if hold_measurement else 1.0
            if use_gekf:
                M = sig + mu * mu
                S = (1.0 + mu_p) ** 2 * sig + scale * (sigma_p * sigma_p * M + Rv)
                K = (1.0 + mu_p) * sig / S
                zhat = (1.0 + mu_p) * mu + mu_v
                mu = mu + K * (z - zhat)
                sig = sig - (1.0 + mu_p) * K * sig
            else:
                S = sig + scale * Rv
                K = sig / S
                zhat = mu
                mu = mu + K * (z - zhat)
                sig = sig - K * sig
            lam = K * S * K

            if fresh:
                hb_post = alpha * mu - beta - cq * math.sqrt(a2 * sig)
                xi = cq * (math.sqrt(2.0 * a2 * sig_pre) - math.sqrt(2.0 * a2 * max(sig, 0.0)))
                lam_a = a2 * lam
                if lam_a > 0.0:
                    bound = 0.5 * (1.0 - math.erf(xi / math.sqrt(2.0 * lam_a)))
                else:
                    bound = 0.0 if xi >= 0.0 else 1.0

                ev_step[k_ev] = i + 1
                ev_z[k_ev] = z
                ev_zhat[k_ev] = zhat
                ev_K[k_ev] = K
                ev_S[k_ev] = S
                ev_lam[k_ev] = lam
                ev_hb_pre[k_ev] = hb_pre
                ev_hb_post[k_ev] = hb_post
                ev_xi[k_ev] = xi
                ev_bound[k_ev] = bound
                n_ev += 1

        if not (math.isfinite(x) and math.isfinite(mu) and math.isfinite(sig)) \
                or sig <= 0.0 or abs(x) > fail_radius:
            failed = True
            n_done = i + 1
            break

    xs[n_done] = x
    mus[n_done] = mu
    sigs[n_done] = sig
    hbs[n_done] = alpha * mu - beta - cq * math.sqrt(max(a2 * sig, 0.0))

    return (xs, mus, sigs, hbs, us, slacks, infeas,
            ev_step[:n_ev], ev_z[:n_ev], ev_zhat[:n_ev], ev_K[:n_ev], ev_S[:n_ev],
            ev_lam[:n_ev], ev_hb_pre[:n_ev], ev_hb_post[:n_ev], ev_xi[:n_ev],
            ev_bound[:n_ev], failed, n_done)


@njit(cache=True)
def _uni_f(mu):
    return np.array([mu[2] * math.cos(mu[3]), mu[2] * math.sin(mu[3]), 0.0, 0.0])


@njit(cache=True)
def _uni_F(mu):
    c = math.cos(mu[3])
    s = math.sin(mu[3])
    F = np.zeros((4, 4))
    F[0, 2] = c
    F[0, 3] = -mu[2] * s
    F[1, 2] = s
    F[1, 3] = mu[2] * c
    return F


@njit(cache=True)
def _rd2_row_unicycle(mu, Sigma, alpha, beta, cq, Q, q_alpha,
                      zeta1, zeta2, gain_k, include_cov_flow):
    """Relative-degree-2 row (coeff_a, coeff_w, rhs) for one constraint.

    Closed form exploiting the unicycle structure: alpha^T F has only v and
    theta components (p, q below) and (alpha^T F) F = 0, so the mean-drift
    part of L_f^2 h_b vanishes and the covariance-flow part reduces to a few
    quadratic forms in Sigma alpha.
    """
    v = mu[2]
    ct = math.cos(mu[3])
    st = math.sin(mu[3])
    a0 = alpha[0]
    a1 = alpha[1]
    sa2 = Sigma[2, 0] * a0 + Sigma[2, 1] * a1 + Sigma[2, 2] * alpha[2] + Sigma[2, 3] * alpha[3]
    sa3 = Sigma[3, 0] * a0 + Sigma[3, 1] * a1 + Sigma[3, 2] * alpha[2] + Sigma[3, 3] * alpha[3]
    asa = alpha @ (Sigma @ alpha)
    s = math.sqrt(asa)
    h = alpha @ mu - beta - cq * s

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
        qa2 = Q[2, 0] * a0 + Q[2, 1] * a1 + Q[2, 2] * alpha[2] + Q[2, 3] * alpha[3]
        qa3 = Q[3, 0] * a0 + Q[3, 1] * a1 + Q[3, 2] * alpha[2] + Q[3, 3] * alpha[3]
        g3 = p * qa2 + q * qa3     # alpha^T F Q alpha
        lf2 = (cq / (4.0 * s * s * s)) * flow * flow - (cq / s) * (g2 + g3)
    else:
        psi0 = lfh_mean
        coeff_a = p
        coeff_w = q
        lf2 = 0.0
    rhs = -gain_k * (zeta1 * psi0 + zeta2 * h) - lf2
    return coeff_a, coeff_w, rhs


@njit(cache=True)
def _wrap_angle(a):
    w = (a + math.pi) % (2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


@njit(cache=True)
def episode_unicycle2d(x0, mu0, Sigma0, dt, steps, meas_every,
                       W, NP, NV,
                       mu_p, sigma_p, mu_v, Rv, Q,
                       alphas, betas, cq, q_alphas,
                       v_r, k_x, k_v, k_y, k_th, amp, omega_ref, theta_tangent,
                       zeta1, zeta2, gain_k, include_cov_flow,
                       u_max, use_gekf, hold_measurement, z_init,
                       tol_p, tol_d, max_iters, fail_radius, fb_clip):
    """Closed loop for the 2D sinusoidal tracking scenario.

    alphas is (k, 4), betas (k,) with k constraints (k = 2 here); the single
    scalar measurement observes y. Returns per-step logs, event logs per
    constraint, and (failed, n_done).
    """
    n_con = alphas.shape[0]
    n_meas_max = steps // meas_every if meas_every > 0 else 0

    xs = np.empty((steps + 1, 4))
    mus = np.empty((steps + 1, 4))
    sig_diag = np.empty((steps + 1, 4))
    sig_trace = np.empty(steps + 1)
    hbs = np.empty((steps + 1, n_con))
    us = np.empty((steps, 2))
    infeas = np.zeros(steps, dtype=np.int64)
    refs = np.empty((steps + 1, 4))

    ev_step = np.empty(n_meas_max, dtype=np.int64)
    ev_z = np.empty(n_meas_max)
    ev_zhat = np.empty(n_meas_max)
    ev_K = np.empty((n_meas_max, 4))
    ev_S = np.empty(n_meas_max)
    ev_hb_pre = np.empty((n_meas_max, n_con))
    ev_hb_post = np.empty((n_meas_max, n_con))
    ev_xi = np.empty((n_meas_max, n_con))
    ev_bound = np.empty((n_meas_max, n_con))
    ev_lam_a = np.empty((n_meas_max, n_con))

    x = x0.copy()
    mu = mu0.copy()
    Sigma = Sigma0.copy()
    Lq = np.sqrt(np.diag(Q))  # process noise is diagonal by construction

    H2 = np.eye(2)
    x_ws = np.zeros(2)
    y_ws = np.zeros(n_con + 2)
    u_prev = np.zeros(2)
    failed = False
    n_done = steps
    n_ev = 0
    k_ev = 0
    # the measurement that initialized the belief is held from t = 0
    z_held = z_init
    have_z = math.isfinite(z_init)

    for i in range(steps):
        t = i * dt
        xs[i] = x
        mus[i] = mu
        for j in range(4):
            sig_diag[i, j] = Sigma[j, j]
        sig_trace[i] = Sigma[0, 0] + Sigma[1, 1] + Sigma[2, 2] + Sigma[3, 3]
        for kcon in range(n_con):
            al = alphas[kcon]
            s = math.sqrt(al @ (Sigma @ al))
            hbs[i, kcon] = al @ mu - betas[kcon] - cq * s

        # reference and nominal control
        xd = v_r * t
        yd = amp * math.sin(omega_ref * t) + amp
        if theta_tangent:
            thd = math.atan2(amp * omega_ref * math.cos(omega_ref * t), v_r)
        elif xd == 0.0:
            te = 1e-3
            thd = math.atan((amp * math.sin(omega_ref * te) + amp) / (v_r * te))
        else:
            thd = math.atan(yd / xd)
        refs[i, 0] = xd
        refs[i, 1] = yd
        refs[i, 2] = v_r
        refs[i, 3] = thd
        e_x = mu[0] - xd
        e_y = mu[1] - yd
        e_v = mu[2] - v_r
        e_th = _wrap_angle(mu[3] - thd)
        u_nom_a = -k_x * e_x - k_v * e_v
        u_nom_w = -k_y * e_y - k_th * e_th

        # safety rows
        A = np.zeros((n_con + 2, 2))
        lo = np.empty(n_con + 2)
        hi = np.empty(n_con + 2)
        for kcon in range(n_con):
            ca, cw, rhs = _rd2_row_unicycle(mu, Sigma, alphas[kcon], betas[kcon],
                                            cq, Q, q_alphas[kcon], zeta1, zeta2,
                                            gain_k, include_cov_flow)
            A[kcon, 0] = ca
            A[kcon, 1] = cw
            lo[kcon] = rhs
            hi[kcon] = INF
        A[n_con, 0] = 1.0
        A[n_con + 1, 1] = 1.0
        lo[n_con] = -u_max[0]
        hi[n_con] = u_max[0]
        lo[n_con + 1] = -u_max[1]
        hi[n_con + 1] = u_max[1]

        c2 = np.array([-u_nom_a, -u_nom_w])
        sol, duals, code = _solve_qp(H2, c2, A, lo, hi, x_ws, y_ws, tol_p, tol_d, max_iters)
        if code == -1:
            u = np.empty(2)
            if fb_clip:
                # solver output as-is: last iterate clipped to the box
                u[0] = min(max(sol[0], -u_max[0]), u_max[0])
                u[1] = min(max(sol[1], -u_max[1]), u_max[1])
            else:
                # best effort toward safety: maximize the left-hand side of
                # the most deficient safety row over the input box
                worst = 0
                worst_def = -INF
                for kcon in range(n_con):
                    d = lo[kcon] - (abs(A[kcon, 0]) * u_max[0] + abs(A[kcon, 1]) * u_max[1])
                    if d > worst_def:
                        worst_def = d
                        worst = kcon
                for j in range(2):
                    if A[worst, j] != 0.0:
                        u[j] = math.copysign(u_max[j], A[worst, j])
                    else:
                        u[j] = min(max(c2[j] * -1.0, -u_max[j]), u_max[j])
            infeas[i] = 1
        else:
            x_ws = sol
            y_ws = duals
            u = sol
        us[i, 0] = u[0]
        us[i, 1] = u[1]
        u_prev = u

        # true state: Euler-Maruyama
        x_dot = np.array([x[2] * math.cos(x[3]), x[2] * math.sin(x[3]), u[0], u[1]])
        sqdt = math.sqrt(dt)
        for j in range(4):
            x[j] = x[j] + dt * x_dot[j] + sqdt * Lq[j] * W[i, j]

        # belief time update
        k1 = _uni_f(mu)
        k1[2] += u[0]
        k1[3] += u[1]
        m2 = mu + 0.5 * dt * k1
        k2 = _uni_f(m2)
        k2[2] += u[0]
        k2[3] += u[1]
        m3 = mu + 0.5 * dt * k2
        k3 = _uni_f(m3)
        k3[2] += u[0]
        k3[3] += u[1]
        m4 = mu + dt * k3
        k4 = _uni_f(m4)
        k4[2] += u[0]
        k4[3] += u[1]
        F = _uni_F(mu)
        mu = mu + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        Phi = np.eye(4) + dt * F
        Sigma = Phi @ Sigma @ Phi.T + dt * Q
        Sigma = 0.5 * (Sigma + Sigma.T)

        # measurement tick: sample a fresh scalar observation of y and hold
        # it; with hold_measurement the filter re-applies the held value at
        # every control step (ZoH), otherwise it updates on ticks only
        fresh = meas_every > 0 and (i + 1) % meas_every == 0
        if fresh:
            k_ev = n_ev
            p = mu_p + sigma_p * NP[k_ev]
            v = mu_v + math.sqrt(Rv) * NV[k_ev]
            z_held = (1.0 + p) * x[1] + v
            have_z = True
        if fresh or (hold_measurement and have_z):
            z = z_held
            Sigma_pre = Sigma.copy()
            if fresh:
                for kcon in range(n_con):
                    al = alphas[kcon]
                    s = math.sqrt(al @ (Sigma_pre @ al))
                    ev_hb_pre[k_ev, kcon] = al @ mu - betas[kcon] - cq * s

            # under hold_measurement the single measurement's information is
            # spread uniformly over the window: per-step noise variance is
            # scaled by meas_every so the window total equals one update
            scale = float(meas_every) if hold_measurement else 1.0
            Sy = Sigma[:, 1].copy()  # Sigma H^T for H = e_y^T
            if use_gekf:
                M = Sigma[1, 1] + mu[1] * mu[1]
                S = (1.0 + mu_p) ** 2 * Sigma[1, 1] \
                    + scale * (sigma_p * sigma_p * M + Rv)
                K = (1.0 + mu_p) / S * Sy
                zhat = (1.0 + mu_p) * mu[1] + mu_v
                mu = mu + K * (z - zhat)
                Sigma = Sigma - (1.0 + mu_p) * np.outer(K, Sy)
            else:
                S = Sigma[1, 1] + scale * Rv
                K = Sy / S
                zhat = mu[1]
                mu = mu + K * (z - zhat)
                Sigma = Sigma - np.outer(K, Sy)
            Sigma = 0.5 * (Sigma + Sigma.T)

            if fresh:
                for kcon in range(n_con):
                    al = alphas[kcon]
                    var_post = al @ (Sigma @ al)
                    var_pre = al @ (Sigma_pre @ al)
                    s = math.sqrt(max(var_post, 0.0))
                    ev_hb_post[k_ev, kcon] = al @ mu - betas[kcon] - cq * s
                    xi = cq * (math.sqrt(2.0 * var_pre) - math.sqrt(2.0 * max(var_post, 0.0)))
                    aK = al @ K
                    lam_a = S * aK * aK
                    ev_lam_a[k_ev, kcon] = lam_a
                    if lam_a > 0.0:
                        bnd = 0.5 * (1.0 - math.erf(xi / math.sqrt(2.0 * lam_a)))
                    else:
                        bnd = 0.0 if xi >= 0.0 else 1.0
                    ev_xi[k_ev, kcon] = xi
                    ev_bound[k_ev, kcon] = bnd

                ev_step[k_ev] = i + 1
                ev_z[k_ev] = z
                ev_zhat[k_ev] = zhat
                ev_K[k_ev] = K
                ev_S[k_ev] = S
                n_ev += 1

        finite = True
        for j in range(4):
            if not math.isfinite(x[j]) or not math.isfinite(mu[j]):
                finite = False
        # a covariance that lost positivity along a constraint direction is a
        # divergence: the next risk evaluation would be undefined
        for kcon in range(n_con):
            al = alphas[kcon]
            var = al @ (Sigma @ al)
            if not math.isfinite(var) or var <= 0.0:
                finite = False
        # x-position grows with the reference, so measure its excursion
        # relative to the moving reference rather than the origin
        t_next = (i + 1) * dt
        if not finite or abs(x[1]) > fail_radius or abs(mu[1]) > fail_radius \
                or abs(x[0] - v_r * t_next) > fail_radius \
                or abs(mu[0] - v_r * t_next) > fail_radius:
            failed = True
            n_done = i + 1
            break

    xs[n_done] = x
    mus[n_done] = mu
    for j in range(4):
        sig_diag[n_done, j] = Sigma[j, j]
    sig_trace[n_done] = Sigma[0, 0] + Sigma[1, 1] + Sigma[2, 2] + Sigma[3, 3]
    t_end = n_done * dt
    refs[n_done, 0] = v_r * t_end
    refs[n_done, 1] = amp * math.sin(omega_ref * t_end) + amp
    refs[n_done, 2] = v_r
    refs[n_done, 3] = refs[max(n_done - 1, 0), 3]
    for kcon in range(n_con):
        al = alphas[kcon]
        s = math.sqrt(max(al @ (Sigma @ al), 0.0))
        hbs[n_done, kcon] = al @ mu - betas[kcon] - cq * s

    return (xs, mus, sig_diag, sig_trace, hbs, us, infeas, refs,
            ev_step[:n_ev], ev_z[:n_ev], ev_zhat[:n_ev], ev_K[:n_ev], ev_S[:n_ev],
            ev_lam_a[:n_ev], ev_hb_pre[:n_ev], ev_hb_post[:n_ev], ev_xi[:n_ev],
            ev_bound[:n_ev], failed, n_done)
