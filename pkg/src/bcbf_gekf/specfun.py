"""Special functions and small dense linear-algebra helpers.

Everything here is a pure function over floats / small numpy arrays
(dimensions up to ~10 by design). Covariance consumers are expected to call
:func:`symmetrize` after every update to keep floating-point drift from
breaking PSD checks.
"""

import math

import numpy as np

from bcbf_gekf.errors import DomainError, SingularMatrixError

PSD_EPS = 1e-10

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def erf(x: float) -> float:
    """Error function; absolute error below 1e-12 on the real line."""
    if not math.isfinite(x):
        raise DomainError(f"erf: non-finite input {x!r}")
    return math.erf(x)


def erfinv(y: float) -> float:
    """Inverse error function on (-1, 1)."""
    if not (-1.0 < y < 1.0):
        raise DomainError(f"erfinv: input {y!r} outside (-1, 1)")
    return std_normal_quantile(0.5 * (y + 1.0)) / math.sqrt(2.0)


def std_normal_pdf(x: float) -> float:
    """Density of the standard normal at x."""
    if not math.isfinite(x):
        raise DomainError(f"std_normal_pdf: non-finite input {x!r}")
    return math.exp(-0.5 * x * x) / _SQRT_2PI


def std_normal_cdf(x: float) -> float:
    """Distribution function of the standard normal, built on erf."""
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


# Acklam's rational approximation to the normal quantile (relative error
# ~1.15e-9), refined below by one Newton step to full double precision.
_ACKLAM_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
             1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_ACKLAM_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
             6.680131188771972e+01, -1.328068155288572e+01)
_ACKLAM_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
             -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_ACKLAM_D = (7.784695709041462e-03, 3.224671290700398e-01,
             2.445134137142996e+00, 3.754408661907416e+00)

_ACKLAM_LOW = 0.02425


def _acklam(p: float) -> float:
    a, b, c, d = _ACKLAM_A, _ACKLAM_B, _ACKLAM_C, _ACKLAM_D
    if p < _ACKLAM_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    if p > 1.0 - _ACKLAM_LOW:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    q = p - 0.5
    r = q * q
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)


def std_normal_quantile(delta: float) -> float:
    """delta-quantile of the standard normal; absolute error below 1e-9.

    Rational approximation polished by one Newton step on the CDF.
    """
    if not (0.0 < delta < 1.0):
        raise DomainError(f"std_normal_quantile: delta {delta!r} outside (0, 1)")
    q = _acklam(delta)
    # Newton polish: q <- q - (Phi(q) - delta) / pdf(q)
    pdf = std_normal_pdf(q)
    if pdf > 0.0:
        q -= (std_normal_cdf(q) - delta) / pdf
    return q


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Return (m + m^T) / 2."""
    return 0.5 * (m + m.T)


def psd_check(m: np.ndarray, eps: float = PSD_EPS) -> bool:
    """True when m is symmetric and its smallest eigenvalue is >= -eps."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        return False
    if not np.allclose(m, m.T, atol=eps, rtol=0.0):
        return False
    return float(np.linalg.eigvalsh(m)[0]) >= -eps


def cholesky_lower(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of an SPD matrix.

    Raises SingularMatrixError carrying the failing leading minor index
    (1-based) when a pivot is not strictly positive.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    L = np.zeros_like(a)
    for i in range(n):
        for j in range(i + 1):
            s = a[i, j] - L[i, :j] @ L[j, :j]
            if i == j:
                if s <= 0.0 or not math.isfinite(s):
                    raise SingularMatrixError(i + 1)
                L[i, i] = math.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    return L


def solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a x = b for symmetric positive-definite a via Cholesky."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    L = cholesky_lower(a)
    y = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, y)
