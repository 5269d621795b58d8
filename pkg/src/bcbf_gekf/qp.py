"""Dense convex QP solver for the small safety-filter problems.

Operator-splitting (ADMM) iteration in the OSQP style, followed by an
active-set polish step that solves the equality-constrained KKT system on
the detected active set. Problems here have at most a handful of decision
variables and constraint rows, so everything is dense.
"""

import json
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from bcbf_gekf.specfun import psd_check

INF = np.inf

STATUS_SOLVED = "solved"
STATUS_MAX_ITERS = "max_iters"
STATUS_INFEASIBLE = "infeasible"

_STATUS_BY_CODE = {1: STATUS_SOLVED, 0: STATUS_MAX_ITERS, -1: STATUS_INFEASIBLE}


@dataclass(frozen=True)
class QpProblem:
    """min 1/2 u^T H u + c^T u  s.t.  lo <= A u <= hi,  lower <= u <= upper.

    One-sided rows use +/- inf sentinels.
    """

    hessian: np.ndarray
    linear: np.ndarray
    ineq_lhs: np.ndarray
    ineq_lo: np.ndarray
    ineq_hi: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        for name in ("hessian", "linear", "ineq_lhs", "ineq_lo", "ineq_hi", "lower", "upper"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        d = self.hessian.shape[0]
        if self.hessian.shape != (d, d) or not psd_check(self.hessian, eps=1e-10):
            raise ValueError("hessian must be symmetric PSD")
        if np.any(self.ineq_lo > self.ineq_hi) or np.any(self.lower > self.upper):
            raise ValueError("lower bounds exceed upper bounds")

    @property
    def dim(self) -> int:
        return self.hessian.shape[0]

    @property
    def n_rows(self) -> int:
        return self.ineq_lhs.shape[0] if self.ineq_lhs.size else 0

    def objective(self, u: np.ndarray) -> float:
        return float(0.5 * u @ self.hessian @ u + self.linear @ u)

    def dump_json(self, path: str) -> None:
        """Write the instance to JSON for offline reproduction."""
        payload = {
            "hessian": self.hessian.tolist(),
            "linear": self.linear.tolist(),
            "ineq_lhs": self.ineq_lhs.tolist(),
            "ineq_lo": self.ineq_lo.tolist(),
            "ineq_hi": self.ineq_hi.tolist(),
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)


@dataclass(frozen=True)
class QpSolution:
    primal: np.ndarray
    dual: np.ndarray
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float


@njit(cache=True)
def admm_core(H, c, A, lo, hi, x0, y0, tol_p, tol_d, max_iters):  # pragma: no cover - jitted
    """OSQP-style ADMM on min 1/2 x'Hx + c'x s.t. lo <= Ax <= hi.

    A already contains the box rows. Returns (x, y, status_code, iters,
    r_prim, r_dual) with status 1 solved, 0 max-iters, -1 primal infeasible.
    """
    d = H.shape[0]
    r = A.shape[0]
    sigma = 1e-6
    alpha = 1.6
    rho = 0.1

    x = x0.copy()
    y = y0.copy()
    z = A @ x
    for i in range(r):
        z[i] = min(max(z[i], lo[i]), hi[i])

    r_prim = INF
    r_dual = INF
    it = 0
    status = 0
    AtA = A.T @ A
    # the KKT matrix is tiny (a handful of inputs), so a cached explicit
    # inverse is cheaper than a factorization call per iteration
    Kinv = np.linalg.inv(H + sigma * np.eye(d) + rho * AtA)
    for it in range(1, max_iters + 1):
        rhs = sigma * x - c + A.T @ (rho * z - y)
        x_tilde = Kinv @ rhs
        z_tilde = A @ x_tilde
        x_new = alpha * x_tilde + (1.0 - alpha) * x
        z_relax = alpha * z_tilde + (1.0 - alpha) * z
        z_new = z_relax + y / rho
        for i in range(r):
            z_new[i] = min(max(z_new[i], lo[i]), hi[i])
        y_new = y + rho * (z_relax - z_new)

        dy = y_new - y
        x, z, y = x_new, z_new, y_new

        # convergence check every iteration: for these tiny problems it is
        # far cheaper than the iterations it saves on warm-started solves
        Ax = A @ x
        r_prim = 0.0
        for i in range(r):
            v = min(max(Ax[i], lo[i]), hi[i])
            r_prim = max(r_prim, abs(Ax[i] - v))
        grad = H @ x + c + A.T @ y
        r_dual = 0.0
        for i in range(d):
            r_dual = max(r_dual, abs(grad[i]))
        if r_prim <= tol_p and r_dual <= tol_d:
            status = 1
            break

        if it == 1 or it % 10 == 0 or it == max_iters:
            # early exit via polish: a KKT point on the detected active set
            # that passes both residual checks is optimal, so accept it
            # without waiting for the splitting iteration to converge; the
            # it == 1 attempt lets warm-started solves exit immediately
            x_pol, y_pol, ok = polish_core(H, c, A, lo, hi, x, y, 1e-10)
            if ok:
                Axp = A @ x_pol
                rp2 = 0.0
                for i in range(r):
                    v = min(max(Axp[i], lo[i]), hi[i])
                    rp2 = max(rp2, abs(Axp[i] - v))
                gradp = H @ x_pol + c + A.T @ y_pol
                rd2 = 0.0
                for i in range(d):
                    rd2 = max(rd2, abs(gradp[i]))
                if rp2 <= tol_p and rd2 <= tol_d:
                    x, y = x_pol, y_pol
                    r_prim, r_dual = rp2, rd2
                    status = 1
                    break
                if it == max_iters and max(rp2, rd2) <= max(r_prim, r_dual):
                    x, y = x_pol, y_pol
                    r_prim, r_dual = rp2, rd2

            # primal infeasibility certificate on the dual increment
            ndy = 0.0
            for i in range(r):
                ndy = max(ndy, abs(dy[i]))
            if ndy > 1e-12:
                atdy = A.T @ dy
                if np.max(np.abs(atdy)) <= 1e-10 * ndy:
                    support = 0.0
                    ok = True
                    for i in range(r):
                        if dy[i] > 0.0:
                            if np.isinf(hi[i]):
                                ok = False
                                break
                            support += hi[i] * dy[i]
                        elif dy[i] < 0.0:
                            if np.isinf(lo[i]):
                                ok = False
                                break
                            support += lo[i] * dy[i]
                    if ok and support < -1e-10 * ndy:
                        status = -1
                        break

            # adaptive rho
            if it % 50 == 0 and r_dual > 0.0 and r_prim > 0.0:
                ratio = math.sqrt(r_prim / r_dual)
                ratio = min(max(ratio, 0.1), 10.0)
                if ratio < 0.5 or ratio > 2.0:
                    rho = min(max(rho * ratio, 1e-6), 1e6)
                    Kinv = np.linalg.inv(H + sigma * np.eye(d) + rho * AtA)

    return x, y, status, it, r_prim, r_dual


@njit(cache=True)
def polish_core(H, c, A, lo, hi, x, y, tol_act):  # pragma: no cover - jitted
    """Solve the KKT system on the active set detected from the duals.

    Returns (x_pol, y_pol, ok). Falls back when the active-set system is
    rank-deficient or the candidate violates feasibility.
    """
    d = H.shape[0]
    r = A.shape[0]
    act = np.empty(r, dtype=np.int64)
    bnd = np.empty(r)
    n_act = 0
    for i in range(r):
        if y[i] < -tol_act and not np.isinf(lo[i]):
            act[n_act] = i
            bnd[n_act] = lo[i]
            n_act += 1
        elif y[i] > tol_act and not np.isinf(hi[i]):
            act[n_act] = i
            bnd[n_act] = hi[i]
            n_act += 1

    K = np.zeros((d + n_act, d + n_act))
    K[:d, :d] = H
    rhs = np.zeros(d + n_act)
    rhs[:d] = -c
    for k in range(n_act):
        i = act[k]
        for j in range(d):
            K[j, d + k] = A[i, j]
            K[d + k, j] = A[i, j]
        rhs[d + k] = bnd[k]
    detK = np.linalg.det(K)
    if not np.isfinite(detK) or abs(detK) < 1e-300:
        return x, y, False
    sol = np.linalg.solve(K, rhs)
    resid = np.max(np.abs(K @ sol - rhs))
    scale = max(1.0, np.max(np.abs(rhs)))
    if not np.all(np.isfinite(sol)) or resid > 1e-8 * scale:
        return x, y, False
    x_pol = sol[:d]
    y_pol = np.zeros(r)
    for k in range(n_act):
        y_pol[act[k]] = sol[d + k]
    # feasibility of the polished point
    Ax = A @ x_pol
    for i in range(r):
        if Ax[i] < lo[i] - 1e-9 or Ax[i] > hi[i] + 1e-9:
            return x, y, False
    # dual feasibility: lower-active duals negative, upper-active positive
    for k in range(n_act):
        i = act[k]
        if bnd[k] == lo[i] and lo[i] < hi[i] and y_pol[i] > 1e-9:
            return x, y, False
        if bnd[k] == hi[i] and lo[i] < hi[i] and y_pol[i] < -1e-9:
            return x, y, False
    return x_pol, y_pol, True


def solve(p: QpProblem, tol_primal: float = 1e-8, tol_dual: float = 1e-8,
          max_iters: int = 4000,
          warm_start: tuple[np.ndarray, np.ndarray] | None = None) -> QpSolution:
    """Solve the QP; deterministic given identical inputs.

    The dual vector is ordered general rows first, then box rows.
    """
    d = p.dim
    A = np.vstack([p.ineq_lhs.reshape(p.n_rows, d), np.eye(d)])
    lo = np.concatenate([p.ineq_lo, p.lower])
    hi = np.concatenate([p.ineq_hi, p.upper])

    if warm_start is not None:
        x0 = np.asarray(warm_start[0], dtype=float).copy()
        y0 = np.asarray(warm_start[1], dtype=float).copy()
    else:
        x0 = np.zeros(d)
        y0 = np.zeros(d + p.n_rows)

    x, y, code, it, r_prim, r_dual = admm_core(
        p.hessian, p.linear, A, lo, hi, x0, y0, tol_primal, tol_dual, int(max_iters))
    return QpSolution(primal=x, dual=y, status=_STATUS_BY_CODE[code],
                      iterations=it, primal_residual=r_prim, dual_residual=r_dual)


def load_problem_json(path: str) -> QpProblem:
    """Inverse of QpProblem.dump_json."""
    with open(path) as fh:
        payload = json.load(fh)
    return QpProblem(
        hessian=np.array(payload["hessian"]),
        linear=np.array(payload["linear"]),
        ineq_lhs=np.array(payload["ineq_lhs"]),
        ineq_lo=np.array(payload["ineq_lo"]),
        ineq_hi=np.array(payload["ineq_hi"]),
        lower=np.array(payload["lower"]),
        upper=np.array(payload["upper"]),
    )
