"""Scalar special functions for the compiled likelihood kernels.

The numpy kernel build calls scipy.special directly; the numba build cannot,
so the scalar routines it needs live here, decorated with the backend's
``njit``.  On the numpy backend the decorator is the identity and these are
ordinary Python functions, which keeps them testable everywhere.  The test
suite cross-checks both routes against scipy and high-precision mpmath
values.

Conventions: all arguments are float64 scalars, shapes ``a`` are strictly
positive, and everything is returned on the log scale where underflow is a
risk.
"""

import math

import numpy as np

from .backend import njit

_LN_SQRT_2PI = 0.9189385332046727
_SQRT2 = 1.4142135623730951

# Nodes/weights for the tail-side incomplete-gamma shape derivative
# (expectation ratio under the exp(-v) weight; see dlogq_da).
_GL_NODES, _GL_WEIGHTS = np.polynomial.laguerre.laggauss(96)


@njit
def digamma(x):
    """psi(x) for x > 0 via recurrence to x >= 8 plus the asymptotic series."""
    r = 0.0
    while x < 8.0:
        r -= 1.0 / x
        x += 1.0
    f = 1.0 / (x * x)
    s = f * (
        1.0 / 12.0
        - f
        * (
            1.0 / 120.0
            - f * (1.0 / 252.0 - f * (1.0 / 240.0 - f * (1.0 / 132.0)))
        )
    )
    return r + math.log(x) - 0.5 / x - s


@njit
def log_ndtr(x):
    """log of the standard normal CDF, accurate across the whole real line."""
    if x > 5.0:
        return math.log1p(-0.5 * math.erfc(x / _SQRT2))
    if x >= -37.0:
        return math.log(0.5 * math.erfc(-x / _SQRT2))
    # Asymptotic Mills-ratio expansion; erfc underflows past here.
    z = -x
    f = 1.0 / (z * z)
    series = 1.0 - f * (1.0 - f * (3.0 - f * (15.0 - f * 105.0)))
    return -0.5 * z * z - math.log(z) - _LN_SQRT_2PI + math.log(series)


@njit
def norm_logpdf(z):
    return -0.5 * z * z - _LN_SQRT_2PI


@njit
def normal_hazard(z):
    """phi(z) / Phi(-z), the standard normal hazard (inverse Mills ratio)."""
    return math.exp(norm_logpdf(z) - log_ndtr(-z))


@njit
def softplus(u):
    """log(1 + exp(u)) without overflow."""
    if u > 33.0:
        return u
    if u < -33.0:
        return math.exp(u)
    return math.log1p(math.exp(u))


@njit
def gammainc_ln_pair(a, x):
    """(log P(a, x), log Q(a, x)): regularised incomplete gamma in log space.

    Series expansion below the a+1 crossover, Lentz continued fraction above;
    the complementary value comes through log1p, which is safe because the
    directly-computed side is always the one that can be tiny.
    """
    if x <= 0.0:
        return -math.inf, 0.0
    lg = math.lgamma(a)
    lx = math.log(x)
    if x < a + 1.0:
        ap = a
        total = 1.0 / a
        delta = total
        for _ in range(1000):
            ap += 1.0
            delta *= x / ap
            total += delta
            if abs(delta) < abs(total) * 1e-17:
                break
        logp = math.log(total) + a * lx - x - lg
        logq = math.log(-math.expm1(logp))
        return logp, logq
    # Modified Lentz for the continued fraction of Q.
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1e300
    d = 1.0 / b
    h = d
    for i in range(1, 1000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-17:
            break
    logq = -x + a * lx - lg + math.log(h)
    logp = math.log(-math.expm1(logq))
    return logp, logq


@njit
def _dp_da_series(a, x):
    """dP/da by term-wise differentiation of the P series.

    The two sign lobes of the summand cancel in proportion to Q, so this is
    used only where Q is not tiny (digit loss bounded by ~log10(1/Q)); the
    deep tail is routed to the quadrature rule instead.
    """
    lx = math.log(x)
    out = 0.0
    lgn = math.lgamma(a + 1.0)
    for n in range(3000):
        t = math.exp((a + n) * lx - x - lgn)
        out += t * (lx - digamma(a + n + 1.0))
        if t < 1e-17 * (abs(out) + 1e-280) and n > 2:
            break
        lgn += math.log(a + n + 1.0)
    return out


@njit
def _tail_logmean_ratio(a, x):
    """E[ln T | T > x] for T ~ Gamma(a, 1), x > a+1.

    Gauss-Laguerre on t = x + v: the (1 + v/x)^(a-1) factors appear in both
    numerator and denominator, so their quadrature errors largely cancel.
    """
    num = 0.0
    den = 0.0
    for i in range(_GL_NODES.shape[0]):
        v = _GL_NODES[i]
        w = _GL_WEIGHTS[i]
        g = math.exp((a - 1.0) * math.log1p(v / x))
        num += w * g * math.log(x + v)
        den += w * g
    return num / den


# Below this log Q the series route has lost too many digits to cancellation
# and the quadrature route (whose branch point is then comfortably far from
# the nodes) takes over.
_TAIL_LOGQ = -11.5


@njit
def dlogq_da(a, x):
    """d/da of log Q(a, x)."""
    if x <= 0.0:
        return 0.0
    logp, logq = gammainc_ln_pair(a, x)
    if x < a + 1.0 or logq > _TAIL_LOGQ:
        return -_dp_da_series(a, x) * math.exp(-logq)
    return _tail_logmean_ratio(a, x) - digamma(a)


@njit
def dlogp_da(a, x):
    """d/da of log P(a, x)."""
    if x <= 0.0:
        return 0.0
    logp, logq = gammainc_ln_pair(a, x)
    if x < a + 1.0 or logq > _TAIL_LOGQ:
        return _dp_da_series(a, x) * math.exp(-logp)
    dqda = dlogq_da(a, x) * math.exp(logq)
    return -dqda * math.exp(-logp)
