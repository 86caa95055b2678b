"""Compiled build of the likelihood kernels.

Scalar-loop implementations of the same contracts as the numpy build; see
that module for semantics.  Only imported when the numba backend is active.
"""

import math

import numpy as np

from .backend import njit
from .special import (
    digamma,
    dlogq_da,
    gammainc_ln_pair,
    log_ndtr,
    norm_logpdf,
    softplus,
)

_LN_SQRT_2PI = 0.9189385332046727


@njit
def _cond_scalar(fam, t, logt, c, eta, a1, a2):
    """Conditional (ll, d/d_eta, d/d_a1, d/d_a2) for one observation."""
    if fam == 0:
        te = t * math.exp(eta)
        return -te + c * eta, -te + c, 0.0, 0.0
    if fam == 1:
        nu = a1
        ae = math.exp(nu * logt + eta)
        ll = -ae + c * (math.log(nu) + (nu - 1.0) * logt + eta)
        return ll, -ae + c, -ae * logt + c * (1.0 / nu + logt), 0.0
    if fam == 2:
        nu = a1
        e = math.exp(eta)
        m = math.expm1(nu * t)
        ll = -e * m / nu + c * (eta + nu * t)
        da1 = -e * (t * (m + 1.0) * nu - m) / (nu * nu) + c * t
        return ll, -e * m / nu + c, da1, 0.0
    if fam == 3:
        te = t * math.exp(-eta)
        return -te - c * eta, te - c, 0.0, 0.0
    if fam == 4:
        nu = a1
        u = logt - eta
        a = math.exp(nu * u)
        ll = -a + c * (math.log(nu) + (nu - 1.0) * logt - nu * eta)
        return ll, nu * a - c * nu, -a * u + c * (1.0 / nu + u), 0.0
    if fam == 5:
        sigma = a1
        z = (logt - eta) / sigma
        ls = log_ndtr(-z)
        logpdf = norm_logpdf(z)
        ll = (1.0 - c) * ls + c * (logpdf - math.log(sigma) - logt)
        lam = math.exp(logpdf - ls)
        core = (1.0 - c) * lam + c * z
        return ll, core / sigma, z * core / sigma - c / sigma, 0.0
    if fam == 6:
        nu = a1
        u = nu * (logt - eta)
        sp = softplus(u)
        w = math.exp(u - sp)
        ll = -(1.0 + c) * sp + c * (math.log(nu) + (nu - 1.0) * logt - nu * eta)
        deta = (1.0 + c) * w * nu - c * nu
        da1 = -(1.0 + c) * w * (logt - eta) + c * (1.0 / nu + logt - eta)
        return ll, deta, da1, 0.0
    if fam == 7:
        nu = a1
        logz = logt - eta
        z = math.exp(logz)
        _, lq = gammainc_ln_pair(nu, z)
        lgnu = math.lgamma(nu)
        logf = (nu - 1.0) * logz - z - lgnu - eta
        ll = (1.0 - c) * lq + c * logf
        d = math.exp((nu - 1.0) * logz - z - lgnu - lq)
        deta = (1.0 - c) * z * d + c * (z - nu)
        da1 = (1.0 - c) * dlogq_da(nu, z) + c * (logz - digamma(nu))
        return ll, deta, da1, 0.0
    if fam == 8:
        nu = a1
        sigma = a2
        b = 1.0 / math.sqrt(nu)
        r = b / sigma
        u = logt - eta
        logz = math.log(nu) + r * u
        z = math.exp(logz)
        _, lq = gammainc_ln_pair(nu, z)
        lgnu = math.lgamma(nu)
        logf = math.log(b) - math.log(sigma) - logt + nu * logz - z - lgnu
        ll = (1.0 - c) * lq + c * logf
        d = math.exp((nu - 1.0) * logz - z - lgnu - lq)
        dlz_dnu = 1.0 / nu - 0.5 * u / (sigma * nu**1.5)
        dz_dnu = z * dlz_dnu
        dlz_dsigma = -r * u / sigma
        dz_dsigma = z * dlz_dsigma
        deta = (1.0 - c) * d * r * z + c * r * (z - nu)
        da1 = (1.0 - c) * (dlogq_da(nu, z) - d * dz_dnu) + c * (
            -0.5 / nu + logz + nu * dlz_dnu - dz_dnu - digamma(nu)
        )
        da2 = (1.0 - c) * (-d) * dz_dsigma + c * (
            -1.0 / sigma + (nu - z) * dlz_dsigma
        )
        return ll, deta, da1, da2
    return -np.inf, 0.0, 0.0, 0.0


@njit
def ipd_terms(fam, t, logt, c, eta, a1, a2):
    n = t.shape[0]
    g_eta = np.empty(n)
    row_ll = np.empty(n)
    total = 0.0
    g_a1 = 0.0
    g_a2 = 0.0
    for i in range(n):
        ll, deta, da1, da2 = _cond_scalar(fam, t[i], logt[i], c[i], eta[i], a1, a2)
        row_ll[i] = ll
        g_eta[i] = deta
        total += ll
        g_a1 += da1
        g_a2 += da2
    return total, g_eta, g_a1, g_a2, row_ll


@njit
def agd_terms(fam, t, logt, c, eta_g, a1, a2):
    n = t.shape[0]
    g = eta_g.shape[0]
    g_etag = np.zeros(g)
    row_ll = np.empty(n)
    scratch_ll = np.empty(g)
    scratch_de = np.empty(g)
    scratch_d1 = np.empty(g)
    scratch_d2 = np.empty(g)
    total = 0.0
    g_a1 = 0.0
    g_a2 = 0.0
    for i in range(n):
        m = -np.inf
        for k in range(g):
            ll, deta, da1, da2 = _cond_scalar(
                fam, t[i], logt[i], c[i], eta_g[k], a1, a2
            )
            scratch_ll[k] = ll
            scratch_de[k] = deta
            scratch_d1[k] = da1
            scratch_d2[k] = da2
            if ll > m:
                m = ll
        s = 0.0
        for k in range(g):
            s += math.exp(scratch_ll[k] - m)
        row = m + math.log(s / g)
        row_ll[i] = row
        total += row
        for k in range(g):
            w = math.exp(scratch_ll[k] - m) / s
            g_etag[k] += w * scratch_de[k]
            g_a1 += w * scratch_d1[k]
            g_a2 += w * scratch_d2[k]
    return total, g_etag, g_a1, g_a2, row_ll


@njit
def ipd_terms_mspline(m_mat, i_mat, c, eta, alpha):
    n = m_mat.shape[0]
    s = m_mat.shape[1]
    g_eta = np.empty(n)
    g_alpha = np.zeros(s)
    row_ll = np.empty(n)
    total = 0.0
    for i in range(n):
        a = 0.0
        b = 0.0
        for k in range(s):
            a += i_mat[i, k] * alpha[k]
            b += m_mat[i, k] * alpha[k]
        e = math.exp(eta[i])
        ll = -a * e + c[i] * (math.log(b) + eta[i])
        row_ll[i] = ll
        total += ll
        g_eta[i] = -a * e + c[i]
        cb = c[i] / b
        for k in range(s):
            g_alpha[k] += -i_mat[i, k] * e + m_mat[i, k] * cb
    return total, g_eta, g_alpha, row_ll


@njit
def agd_terms_mspline(m_mat, i_mat, c, eta_g, alpha):
    n = m_mat.shape[0]
    s = m_mat.shape[1]
    g = eta_g.shape[0]
    e = np.empty(g)
    for k in range(g):
        e[k] = math.exp(eta_g[k])
    g_etag = np.zeros(g)
    g_alpha = np.zeros(s)
    row_ll = np.empty(n)
    scratch = np.empty(g)
    total = 0.0
    for i in range(n):
        a = 0.0
        b = 0.0
        for k in range(s):
            a += i_mat[i, k] * alpha[k]
            b += m_mat[i, k] * alpha[k]
        clogb = c[i] * math.log(b)
        m = -np.inf
        for k in range(g):
            v = -a * e[k] + c[i] * eta_g[k] + clogb
            scratch[k] = v
            if v > m:
                m = v
        ssum = 0.0
        for k in range(g):
            ssum += math.exp(scratch[k] - m)
        row = m + math.log(ssum / g)
        row_ll[i] = row
        total += row
        s1 = 0.0
        for k in range(g):
            w = math.exp(scratch[k] - m) / ssum
            we = w * e[k]
            s1 += we
            g_etag[k] += -a * we + w * c[i]
        cb = c[i] / b
        for k in range(s):
            g_alpha[k] += -i_mat[i, k] * s1 + m_mat[i, k] * cb
    return total, g_etag, g_alpha, row_ll


@njit
def ipd_row_ll(fam, t, logt, c, eta, a1, a2):
    n = t.shape[0]
    out = np.empty(n)
    for i in range(n):
        ll, _, _, _ = _cond_scalar(fam, t[i], logt[i], c[i], eta[i], a1, a2)
        out[i] = ll
    return out


@njit
def agd_row_ll(fam, t, logt, c, eta_g, a1, a2):
    n = t.shape[0]
    g = eta_g.shape[0]
    out = np.empty(n)
    scratch = np.empty(g)
    for i in range(n):
        m = -np.inf
        for k in range(g):
            ll, _, _, _ = _cond_scalar(fam, t[i], logt[i], c[i], eta_g[k], a1, a2)
            scratch[k] = ll
            if ll > m:
                m = ll
        s = 0.0
        for k in range(g):
            s += math.exp(scratch[k] - m)
        out[i] = m + math.log(s / g)
    return out


@njit
def ipd_row_ll_mspline(m_mat, i_mat, c, eta, alpha):
    n = m_mat.shape[0]
    s = m_mat.shape[1]
    out = np.empty(n)
    for i in range(n):
        a = 0.0
        b = 0.0
        for k in range(s):
            a += i_mat[i, k] * alpha[k]
            b += m_mat[i, k] * alpha[k]
        out[i] = -a * math.exp(eta[i]) + c[i] * (math.log(b) + eta[i])
    return out


@njit
def agd_row_ll_mspline(m_mat, i_mat, c, eta_g, alpha):
    n = m_mat.shape[0]
    s = m_mat.shape[1]
    g = eta_g.shape[0]
    out = np.empty(n)
    scratch = np.empty(g)
    for i in range(n):
        a = 0.0
        b = 0.0
        for k in range(s):
            a += i_mat[i, k] * alpha[k]
            b += m_mat[i, k] * alpha[k]
        clogb = c[i] * math.log(b)
        m = -np.inf
        for k in range(g):
            v = -a * math.exp(eta_g[k]) + c[i] * eta_g[k] + clogb
            scratch[k] = v
            if v > m:
                m = v
        ssum = 0.0
        for k in range(g):
            ssum += math.exp(scratch[k] - m)
        out[i] = m + math.log(ssum / g)
    return out


@njit
def surv_curves(fam, times, eta_g, a1, a2):
    nt = times.shape[0]
    g = eta_g.shape[0]
    s_bar = np.zeros(nt)
    sh_bar = np.zeros(nt)
    for j in range(nt):
        t = times[j]
        logt = math.log(t)
        for k in range(g):
            ls, _, _, _ = _cond_scalar(fam, t, logt, 0.0, eta_g[k], a1, a2)
            lf, _, _, _ = _cond_scalar(fam, t, logt, 1.0, eta_g[k], a1, a2)
            sv = math.exp(ls)
            s_bar[j] += sv
            sh_bar[j] += math.exp(lf)  # S * h = f
    return s_bar / g, sh_bar / g


@njit
def surv_curves_mspline(a_t, b_t, eta_g):
    nt = a_t.shape[0]
    g = eta_g.shape[0]
    s_bar = np.zeros(nt)
    sh_bar = np.zeros(nt)
    for j in range(nt):
        for k in range(g):
            e = math.exp(eta_g[k])
            sv = math.exp(-a_t[j] * e)
            s_bar[j] += sv
            sh_bar[j] += sv * b_t[j] * e
    return s_bar / g, sh_bar / g
