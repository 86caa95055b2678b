"""Survival distributions on the log scale.

Each family defines a conditional model for an event time given a linear
predictor ``eta`` and auxiliary parameters, through ``log S(t | eta, aux)``
and ``log h(t | eta, aux)``.  Proportional-hazards families multiply the
baseline hazard by ``exp(eta)`` (bigger eta, shorter survival); accelerated
failure time families rescale time by ``exp(-eta)`` (bigger eta, longer
survival).

Everything here is vectorised numpy working in log space; these are the
reference implementations used for population-level summaries and as the
cross-check target for the compiled likelihood kernels.  Times must be
strictly positive.

The flexible baseline option models the hazard as a simplex combination of
an M-spline basis, ``h0(t) = alpha^T M(t)``; order 1 reproduces the
piecewise-exponential model exactly (``pexp`` is an alias wired to order 1).
Beyond the upper boundary knot the spline hazard is extended as constant at
its boundary value and the design rows report that extrapolation happened.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.special as sps

__all__ = [
    "Family",
    "FAMILIES",
    "SPLINE_FAMILIES",
    "get_family",
    "log_survival",
    "log_hazard",
    "log_density",
    "mspline_design",
    "log_survival_mspline",
    "log_hazard_mspline",
]


@dataclass(frozen=True)
class Family:
    """A parametric survival family.

    Attributes
    ----------
    name : str
        Config key.
    fam_id : int
        Dispatch id used by the compiled kernels.
    kind : str
        ``"ph"`` or ``"aft"``.
    aux_names : tuple of str
        Names of the positive auxiliary parameters, in kernel order.
    """

    name: str
    fam_id: int
    kind: str
    aux_names: tuple


FAMILIES = {
    f.name: f
    for f in [
        Family("exp_ph", 0, "ph", ()),
        Family("weibull_ph", 1, "ph", ("shape",)),
        Family("gompertz", 2, "ph", ("shape",)),
        Family("exp_aft", 3, "aft", ()),
        Family("weibull_aft", 4, "aft", ("shape",)),
        Family("lognormal", 5, "aft", ("scale",)),
        Family("loglogistic", 6, "aft", ("shape",)),
        Family("gamma", 7, "aft", ("shape",)),
        Family("gengamma", 8, "aft", ("shape", "scale")),
    ]
}

# Spline-hazard "families" share machinery but carry a coefficient vector
# instead of scalar auxiliaries; pexp is the order-1 special case.
SPLINE_FAMILIES = {"mspline": 4, "pexp": 1}  # name -> default order


def get_family(name):
    if name in FAMILIES:
        return FAMILIES[name]
    raise KeyError(
        f"unknown likelihood family {name!r}; choose from "
        f"{sorted(FAMILIES) + sorted(SPLINE_FAMILIES)}"
    )


def _log_gammaincc(a, z):
    """log Q(a, z), with an asymptotic rescue where the plain value underflows."""
    q = sps.gammaincc(a, z)
    with np.errstate(divide="ignore"):
        out = np.log(q)
    bad = q <= 1e-290
    if np.any(bad):
        zb = np.broadcast_to(z, out.shape)[bad]
        ab = np.broadcast_to(a, out.shape)[bad]
        out = np.array(out, copy=True)
        out[bad] = (
            (ab - 1) * np.log(zb)
            - zb
            - sps.gammaln(ab)
            + np.log1p((ab - 1) / zb)
        )
    return out


def log_survival(family, t, eta, shape=None, scale=None):
    """log S(t | eta, aux) for a named parametric family, vectorised."""
    fam = get_family(family) if isinstance(family, str) else family
    t = np.asarray(t, dtype=float)
    eta = np.asarray(eta, dtype=float)
    logt = np.log(t)
    name = fam.name
    if name == "exp_ph":
        return -t * np.exp(eta)
    if name == "weibull_ph":
        return -np.exp(shape * logt + eta)
    if name == "gompertz":
        return -np.exp(eta) * np.expm1(shape * t) / shape
    if name == "exp_aft":
        return -t * np.exp(-eta)
    if name == "weibull_aft":
        return -np.exp(shape * (logt - eta))
    if name == "lognormal":
        return sps.log_ndtr(-(logt - eta) / scale)
    if name == "loglogistic":
        return -np.logaddexp(0.0, shape * (logt - eta))
    if name == "gamma":
        return _log_gammaincc(shape, t * np.exp(-eta))
    if name == "gengamma":
        r = shape**-0.5 / scale
        logz = np.log(shape) + r * (logt - eta)
        return _log_gammaincc(shape, np.exp(logz))
    raise KeyError(name)


def log_hazard(family, t, eta, shape=None, scale=None):
    """log h(t | eta, aux) for a named parametric family, vectorised."""
    fam = get_family(family) if isinstance(family, str) else family
    t = np.asarray(t, dtype=float)
    eta = np.asarray(eta, dtype=float)
    logt = np.log(t)
    name = fam.name
    if name == "exp_ph":
        return eta + np.zeros_like(t)
    if name == "weibull_ph":
        return math.log(shape) + (shape - 1) * logt + eta
    if name == "gompertz":
        return eta + shape * t
    if name == "exp_aft":
        return -eta + np.zeros_like(t)
    if name == "weibull_aft":
        return math.log(shape) + (shape - 1) * logt - shape * eta
    if name == "lognormal":
        z = (logt - eta) / scale
        logpdf = -0.5 * z * z - 0.5 * math.log(2 * math.pi)
        return logpdf - np.log(scale * t) - sps.log_ndtr(-z)
    if name == "loglogistic":
        u = shape * (logt - eta)
        return math.log(shape) + (shape - 1) * logt - shape * eta - np.logaddexp(0.0, u)
    if name == "gamma":
        z = t * np.exp(-eta)
        logf = (shape - 1) * np.log(z) - z - sps.gammaln(shape) - eta
        return logf - _log_gammaincc(shape, z)
    if name == "gengamma":
        b = shape**-0.5
        r = b / scale
        logz = np.log(shape) + r * (logt - eta)
        z = np.exp(logz)
        logf = (
            math.log(b)
            - math.log(scale)
            - logt
            + shape * logz
            - z
            - sps.gammaln(shape)
        )
        return logf - _log_gammaincc(shape, z)
    raise KeyError(name)


def log_density(family, t, eta, shape=None, scale=None):
    """log f = log h + log S."""
    return log_hazard(family, t, eta, shape=shape, scale=scale) + log_survival(
        family, t, eta, shape=shape, scale=scale
    )


def mspline_design(basis, t):
    """Hazard/cumulative design rows for spline baselines, with extrapolation.

    Inside the boundary knots these are the plain basis matrices.  Beyond the
    upper boundary the hazard basis row is held at its boundary value and the
    cumulative row grows linearly, i.e. constant-hazard extrapolation.

    Returns
    -------
    m : ndarray (n, n_basis)
    i : ndarray (n, n_basis)
    extrapolated : ndarray of bool (n,)
        True where ``t`` exceeded the upper boundary knot.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    upper = basis.knots.upper
    beyond = t > upper
    t_in = np.where(beyond, upper, t)
    m = basis.m_matrix(t_in)
    i = basis.i_matrix(t_in)
    if np.any(beyond):
        m_edge = basis.m_matrix(np.array([upper]))[0]
        i_edge = basis.i_matrix(np.array([upper]))[0]
        m = np.array(m, copy=True)
        i = np.array(i, copy=True)
        m[beyond] = m_edge
        i[beyond] = i_edge + (t[beyond] - upper)[:, None] * m_edge
    return m, i, beyond


def log_survival_mspline(basis, alpha, t, eta):
    """log S for the spline-hazard model (constant-hazard extrapolation)."""
    _, i, _ = mspline_design(basis, t)
    return -(i @ alpha) * np.exp(np.asarray(eta, dtype=float))


def log_hazard_mspline(basis, alpha, t, eta):
    """log h for the spline-hazard model (constant-hazard extrapolation)."""
    m, _, _ = mspline_design(basis, t)
    return np.log(m @ alpha) + np.asarray(eta, dtype=float)
