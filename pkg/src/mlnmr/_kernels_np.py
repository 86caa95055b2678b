"""Pure-numpy build of the likelihood kernels.

Same contracts as the numba build: per-arm log-likelihood sums, gradients
with respect to the linear predictors and positive auxiliary parameters, and
per-row log-likelihoods.  Aggregate arms marginalise each row over the arm's
integration grid with a log-sum-exp, and gradients of the marginal terms are
softmax-weighted averages of the conditional gradients.

Family dispatch ids follow ``families.FAMILIES``.
"""

import numpy as np
import scipy.special as sps

from . import special

_LN_SQRT_2PI = 0.9189385332046727


def logmeanexp(a, axis=None):
    """log of the mean of exp(a), stably."""
    a = np.asarray(a, dtype=float)
    n = a.shape[axis] if axis is not None else a.size
    m = np.max(a, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(a - safe).sum(axis=axis, keepdims=True)
    # log(s / n), not log(s) - log(n): constant input stays bit-exact
    out = safe + np.log(s / n)
    out = np.where(np.isfinite(m), out, m)
    return out.item() if axis is None else np.squeeze(out, axis=axis)


def _log_gammaincc(a, z):
    q = sps.gammaincc(a, z)
    with np.errstate(divide="ignore"):
        out = np.log(q)
    bad = q <= 1e-290
    if np.any(bad):
        zb = np.broadcast_to(z, out.shape)[bad]
        out = np.array(out, copy=True)
        out[bad] = (a - 1) * np.log(zb) - zb - sps.gammaln(a) + np.log1p((a - 1) / zb)
    return out


_dlogq_da_vec = np.frompyfunc(special.dlogq_da, 2, 1)


def _cond_terms(fam, t, logt, c, eta, a1, a2):
    """Elementwise conditional (ll, d/d_eta, d/d_a1, d/d_a2), broadcasting.

    ``a1``/``a2`` go through np.float64 so degenerate values (an underflowed
    shape, say) give IEEE inf/nan, matching the compiled build, instead of a
    Python scalar ZeroDivisionError.
    """
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _cond_terms_inner(
            fam, t, logt, c, eta, np.float64(a1), np.float64(a2)
        )


def _cond_terms_inner(fam, t, logt, c, eta, a1, a2):
    zero = np.zeros(np.broadcast_shapes(t.shape, eta.shape))
    if fam == 0:  # exponential PH
        te = t * np.exp(eta)
        ll = -te + c * eta
        return ll, -te + c, zero, zero
    if fam == 1:  # Weibull PH
        nu = a1
        ae = np.exp(nu * logt + eta)
        ll = -ae + c * (np.log(nu) + (nu - 1) * logt + eta)
        deta = -ae + c
        da1 = -ae * logt + c * (1 / nu + logt)
        return ll, deta, da1, zero
    if fam == 2:  # Gompertz
        nu = a1
        e = np.exp(eta)
        m = np.expm1(nu * t)
        ll = -e * m / nu + c * (eta + nu * t)
        deta = -e * m / nu + c
        da1 = -e * (t * (m + 1) * nu - m) / nu**2 + c * t
        return ll, deta, da1, zero
    if fam == 3:  # exponential AFT
        te = t * np.exp(-eta)
        ll = -te - c * eta
        return ll, te - c, zero, zero
    if fam == 4:  # Weibull AFT
        nu = a1
        u = logt - eta
        a = np.exp(nu * u)
        ll = -a + c * (np.log(nu) + (nu - 1) * logt - nu * eta)
        deta = nu * a - c * nu
        da1 = -a * u + c * (1 / nu + u)
        return ll, deta, da1, zero
    if fam == 5:  # log-normal
        sigma = a1
        z = (logt - eta) / sigma
        ls = sps.log_ndtr(-z)
        logpdf = -0.5 * z * z - _LN_SQRT_2PI
        ll = (1 - c) * ls + c * (logpdf - np.log(sigma) - logt)
        lam = np.exp(logpdf - ls)
        core = (1 - c) * lam + c * z
        deta = core / sigma
        da1 = z * core / sigma - c / sigma
        return ll, deta, da1, zero
    if fam == 6:  # log-logistic
        nu = a1
        u = nu * (logt - eta)
        sp = np.logaddexp(0.0, u)
        w = np.exp(u - sp)
        ll = -(1 + c) * sp + c * (np.log(nu) + (nu - 1) * logt - nu * eta)
        deta = (1 + c) * w * nu - c * nu
        da1 = -(1 + c) * w * (logt - eta) + c * (1 / nu + logt - eta)
        return ll, deta, da1, zero
    if fam == 7:  # gamma AFT
        nu = a1
        logz = logt - eta
        z = np.exp(logz)
        lq = _log_gammaincc(nu, z)
        lgnu = sps.gammaln(nu)
        logf = (nu - 1) * logz - z - lgnu - eta
        ll = (1 - c) * lq + c * logf
        d = np.exp((nu - 1) * logz - z - lgnu - lq)
        deta = (1 - c) * z * d + c * (z - nu)
        dq_da = _dlogq_da_vec(nu + zero, z).astype(float)
        da1 = (1 - c) * dq_da + c * (logz - sps.digamma(nu))
        return ll, deta, da1, zero
    if fam == 8:  # generalised gamma
        nu, sigma = a1, a2
        b = nu**-0.5
        r = b / sigma
        u = logt - eta
        logz = np.log(nu) + r * u
        z = np.exp(logz)
        lq = _log_gammaincc(nu, z)
        lgnu = sps.gammaln(nu)
        logf = np.log(b) - np.log(sigma) - logt + nu * logz - z - lgnu
        ll = (1 - c) * lq + c * logf
        d = np.exp((nu - 1) * logz - z - lgnu - lq)
        dlz_dnu = 1 / nu - 0.5 * u / (sigma * nu**1.5)
        dz_dnu = z * dlz_dnu
        dlz_dsigma = -r * u / sigma
        dz_dsigma = z * dlz_dsigma
        deta = (1 - c) * d * r * z + c * r * (z - nu)
        dq_da = _dlogq_da_vec(nu + zero, z).astype(float)
        da1 = (1 - c) * (dq_da - d * dz_dnu) + c * (
            -0.5 / nu + logz + nu * dlz_dnu - dz_dnu - sps.digamma(nu)
        )
        da2 = (1 - c) * (-d) * dz_dsigma + c * (-1 / sigma + (nu - z) * dlz_dsigma)
        return ll, deta, da1, da2
    raise ValueError(f"unknown family id {fam}")


def ipd_terms(fam, t, logt, c, eta, a1, a2):
    ll, deta, da1, da2 = _cond_terms(fam, t, logt, c, eta, a1, a2)
    return ll.sum(), deta, da1.sum(), da2.sum(), ll


def agd_terms(fam, t, logt, c, eta_g, a1, a2):
    tt = t[:, None]
    ll, deta, da1, da2 = _cond_terms(
        fam, tt, logt[:, None], c[:, None], eta_g[None, :], a1, a2
    )
    m = ll.max(axis=1)
    w = np.exp(ll - m[:, None])
    s = w.sum(axis=1)
    row_ll = m + np.log(s / eta_g.shape[0])
    w /= s[:, None]
    g_etag = (w * deta).sum(axis=0)
    g_a1 = float((w * da1).sum())
    g_a2 = float((w * da2).sum())
    return row_ll.sum(), g_etag, g_a1, g_a2, row_ll


def ipd_terms_mspline(m_mat, i_mat, c, eta, alpha):
    a = i_mat @ alpha  # cumulative basis combination per row
    b = m_mat @ alpha
    e = np.exp(eta)
    ll = -a * e + c * (np.log(b) + eta)
    g_eta = -a * e + c
    g_alpha = -(i_mat.T @ e) + m_mat.T @ (c / b)
    return ll.sum(), g_eta, g_alpha, ll


def agd_terms_mspline(m_mat, i_mat, c, eta_g, alpha):
    a = i_mat @ alpha
    b = m_mat @ alpha
    e = np.exp(eta_g)
    cond = -np.outer(a, e) + np.outer(c, eta_g) + (c * np.log(b))[:, None]
    m = cond.max(axis=1)
    w = np.exp(cond - m[:, None])
    s = w.sum(axis=1)
    row_ll = m + np.log(s / eta_g.shape[0])
    w /= s[:, None]
    we = w * e[None, :]
    g_etag = -(a[:, None] * we).sum(axis=0) + (w * c[:, None]).sum(axis=0)
    s1 = we.sum(axis=1)  # softmax-weighted mean of exp(eta) per row
    g_alpha = -(i_mat.T @ s1) + m_mat.T @ (c / b)
    return row_ll.sum(), g_etag, g_alpha, row_ll


def ipd_row_ll(fam, t, logt, c, eta, a1, a2):
    ll, _, _, _ = _cond_terms(fam, t, logt, c, eta, a1, a2)
    return ll


def agd_row_ll(fam, t, logt, c, eta_g, a1, a2):
    ll, _, _, _ = _cond_terms(
        fam, t[:, None], logt[:, None], c[:, None], eta_g[None, :], a1, a2
    )
    return logmeanexp(ll, axis=1)


def ipd_row_ll_mspline(m_mat, i_mat, c, eta, alpha):
    a = i_mat @ alpha
    b = m_mat @ alpha
    return -a * np.exp(eta) + c * (np.log(b) + eta)


def agd_row_ll_mspline(m_mat, i_mat, c, eta_g, alpha):
    a = i_mat @ alpha
    b = m_mat @ alpha
    cond = -np.outer(a, np.exp(eta_g)) + np.outer(c, eta_g) + (c * np.log(b))[:, None]
    return logmeanexp(cond, axis=1)


def _cond_logs(fam, t, logt, eta, a1, a2):
    """(log S, log h) elementwise; population-summary helper."""
    one = np.ones_like(np.broadcast_to(t, np.broadcast_shapes(t.shape, eta.shape)))
    ll_s, _, _, _ = _cond_terms(fam, t, logt, 0.0 * one, eta, a1, a2)
    ll_f, _, _, _ = _cond_terms(fam, t, logt, one, eta, a1, a2)
    return ll_s, ll_f - ll_s


def surv_curves(fam, times, eta_g, a1, a2):
    """Marginal survival and survival-weighted hazard over a grid.

    Returns ``(s_bar, sh_bar)`` where ``s_bar[k]`` is the grid mean of
    S(times[k]) and ``sh_bar[k]`` the grid mean of S(times[k]) * h(times[k]).
    """
    t = times[:, None]
    ls, lh = _cond_logs(fam, t, np.log(t), eta_g[None, :], a1, a2)
    s_bar = np.exp(ls).mean(axis=1)
    sh_bar = np.exp(ls + lh).mean(axis=1)
    return s_bar, sh_bar


def surv_curves_mspline(a_t, b_t, eta_g):
    """Spline-baseline version of :func:`surv_curves`.

    ``a_t``/``b_t`` are the cumulative/instantaneous basis combinations
    ``I(t) @ alpha`` and ``M(t) @ alpha`` per output time.
    """
    e = np.exp(eta_g)
    ls = -np.outer(a_t, e)
    s_bar = np.exp(ls).mean(axis=1)
    sh_bar = (np.exp(ls) * (b_t[:, None] * e[None, :])).mean(axis=1)
    return s_bar, sh_bar
