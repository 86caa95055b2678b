"""Survival family reference implementations.

Oracles: scipy.stats distributions reparameterised to match, exact
reductions between families, and numerical differentiation of S for the
hazard/density consistency identity h = -d log S / dt (non-defective
families) or f = -dS/dt.
"""

import numpy as np
import pytest
import scipy.stats as st
from numpy.testing import assert_allclose

from mlnmr.families import (
    FAMILIES,
    get_family,
    log_density,
    log_hazard,
    log_survival,
    log_survival_mspline,
    log_hazard_mspline,
    mspline_design,
)
from mlnmr.spline import KnotSequence, SplineBasis, softmax_simplex

T = np.array([0.05, 0.3, 0.8, 1.7, 4.0])
ETA = np.array([-0.7, 0.0, 0.4])

CASES = {
    "exp_ph": {},
    "weibull_ph": {"shape": 1.3},
    "gompertz": {"shape": 0.6},
    "exp_aft": {},
    "weibull_aft": {"shape": 0.8},
    "lognormal": {"scale": 0.7},
    "loglogistic": {"shape": 1.4},
    "gamma": {"shape": 2.2},
    "gengamma": {"shape": 1.7, "scale": 0.6},
}


def _scipy_frozen(name, eta, aux):
    """The scipy distribution matching each family, where one exists."""
    if name == "exp_ph":
        return st.expon(scale=np.exp(-eta))
    if name == "weibull_ph":
        # S = exp(-t^nu e^eta)  <=>  weibull_min(c=nu, scale=e^(-eta/nu))
        return st.weibull_min(aux["shape"], scale=np.exp(-eta / aux["shape"]))
    if name == "gompertz":
        # S = exp(-(e^eta/nu)(e^(nu t)-1)) <=> gompertz(c=e^eta/nu, scale=1/nu)
        return st.gompertz(np.exp(eta) / aux["shape"], scale=1 / aux["shape"])
    if name == "exp_aft":
        return st.expon(scale=np.exp(eta))
    if name == "weibull_aft":
        return st.weibull_min(aux["shape"], scale=np.exp(eta))
    if name == "lognormal":
        return st.lognorm(aux["scale"], scale=np.exp(eta))
    if name == "loglogistic":
        return st.fisk(aux["shape"], scale=np.exp(eta))
    if name == "gamma":
        return st.gamma(aux["shape"], scale=np.exp(eta))
    if name == "gengamma":
        nu, sigma = aux["shape"], aux["scale"]
        r = nu**-0.5 / sigma
        return st.gengamma(nu, r, scale=np.exp(eta) * nu ** (-1 / r))
    raise KeyError(name)


@pytest.mark.parametrize("name", sorted(CASES))
def test_log_survival_matches_scipy(name):
    aux = CASES[name]
    for eta in ETA:
        frozen = _scipy_frozen(name, eta, aux)
        got = log_survival(name, T, eta, **aux)
        assert_allclose(got, frozen.logsf(T), rtol=1e-9, atol=1e-11)


@pytest.mark.parametrize("name", sorted(CASES))
def test_log_density_matches_scipy(name):
    aux = CASES[name]
    for eta in ETA:
        frozen = _scipy_frozen(name, eta, aux)
        got = log_density(name, T, eta, **aux)
        assert_allclose(got, frozen.logpdf(T), rtol=1e-9, atol=1e-11)


@pytest.mark.parametrize("name", sorted(CASES))
def test_hazard_is_density_over_survival(name):
    aux = CASES[name]
    lh = log_hazard(name, T, 0.3, **aux)
    want = log_density(name, T, 0.3, **aux) - log_survival(name, T, 0.3, **aux)
    assert_allclose(lh, want, rtol=1e-9, atol=1e-11)


@pytest.mark.parametrize("name", sorted(CASES))
def test_survival_monotone_and_starts_at_one(name):
    aux = CASES[name]
    tgrid = np.linspace(1e-9, 8, 300)
    ls = log_survival(name, tgrid, 0.2, **aux)
    assert np.all(np.diff(ls) <= 1e-12)
    assert ls[0] == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("name", sorted(CASES))
def test_eta_direction_matches_family_kind(name):
    aux = CASES[name]
    fam = get_family(name)
    lo = log_survival(name, 1.3, -0.5, **aux)
    hi = log_survival(name, 1.3, 0.5, **aux)
    if fam.kind == "ph":
        assert hi < lo  # bigger eta, bigger hazard
    else:
        assert hi > lo  # bigger eta, longer survival


# ------------------------------------------------------------- reductions


def test_weibull_ph_reduces_to_exp_ph():
    assert_allclose(
        log_survival("weibull_ph", T, 0.3, shape=1.0),
        log_survival("exp_ph", T, 0.3),
        rtol=1e-12,
    )
    assert_allclose(
        log_hazard("weibull_ph", T, 0.3, shape=1.0),
        log_hazard("exp_ph", T, 0.3),
        rtol=1e-12,
    )


def test_weibull_aft_reduces_to_exp_aft():
    assert_allclose(
        log_survival("weibull_aft", T, 0.3, shape=1.0),
        log_survival("exp_aft", T, 0.3),
        rtol=1e-12,
    )


def test_exp_ph_is_exp_aft_with_negated_eta():
    assert_allclose(
        log_survival("exp_ph", T, 0.4),
        log_survival("exp_aft", T, -0.4),
        rtol=1e-13,
    )


def test_weibull_ph_vs_aft_reparameterisation():
    # S_PH(t; nu, eta) = S_AFT(t; nu, -eta/nu)
    nu = 1.7
    assert_allclose(
        log_survival("weibull_ph", T, 0.5, shape=nu),
        log_survival("weibull_aft", T, -0.5 / nu, shape=nu),
        rtol=1e-12,
    )


def test_gengamma_reduces_to_weibull_aft_at_shape_one():
    sigma = 0.6
    for fn, ref in [(log_survival, log_survival), (log_hazard, log_hazard)]:
        assert_allclose(
            fn("gengamma", T, 0.3, shape=1.0, scale=sigma),
            ref("weibull_aft", T, 0.3, shape=1 / sigma),
            rtol=1e-10,
        )


def test_gengamma_reduces_to_gamma_when_scale_is_root_inv_shape():
    nu = 2.6
    sigma = nu**-0.5
    for fn in (log_survival, log_hazard):
        assert_allclose(
            fn("gengamma", T, 0.3, shape=nu, scale=sigma),
            fn("gamma", T, 0.3 - np.log(nu), shape=nu),
            rtol=1e-10,
        )


def test_gompertz_small_shape_approaches_exponential():
    assert_allclose(
        log_survival("gompertz", T, 0.2, shape=1e-9),
        log_survival("exp_ph", T, 0.2),
        rtol=1e-6,
    )


def test_gamma_deep_tail_stays_finite():
    ls = log_survival("gamma", 1e6, 0.0, shape=1.5)
    assert np.isfinite(ls) and ls < -9e5


# ------------------------------------------------------------ spline hazard


def _unit_basis():
    return SplineBasis(KnotSequence(0.0, 2.0, (1.0,)), kappa=1)


def test_mspline_order1_survival_example():
    # alpha = (1/2, 1/2) on knots {0,1,2}, eta = 0: S(1.5) = exp(-0.75).
    basis = _unit_basis()
    alpha = np.array([0.5, 0.5])
    ls = log_survival_mspline(basis, alpha, np.array([1.5]), 0.0)
    assert ls[0] == pytest.approx(-0.75, abs=1e-13)


def test_mspline_matches_exponential_for_flat_hazard():
    # Flat spline hazard at rate 1/range behaves as exp_ph with eta offset.
    knots = KnotSequence(0.0, 4.0, (1.0, 2.5))
    basis = SplineBasis(knots, kappa=3)
    from mlnmr.spline import rw_prior_scaffold

    c, _ = rw_prior_scaffold(knots, 3)
    alpha = softmax_simplex(c)
    t = np.array([0.4, 1.9, 3.7])
    assert_allclose(
        log_survival_mspline(basis, alpha, t, 0.3),
        log_survival("exp_ph", t, 0.3 - np.log(knots.range)),
        rtol=1e-9,
    )


def test_mspline_extrapolates_with_constant_hazard():
    basis = SplineBasis(KnotSequence(0.0, 2.0, (1.0,)), kappa=2)
    alpha = np.array([0.5, 0.3, 0.2])
    m, i, flag = mspline_design(basis, np.array([1.0, 2.0, 3.5]))
    assert list(flag) == [False, False, True]
    # hazard frozen at boundary value, cumulative grows linearly
    assert_allclose(m[2], basis.m_matrix([2.0])[0], rtol=1e-12)
    assert_allclose(i[2], basis.i_matrix([2.0])[0] + 1.5 * m[2], rtol=1e-12)
    lh = log_hazard_mspline(basis, alpha, np.array([2.0, 3.0, 9.0]), 0.0)
    assert lh[0] == lh[1] == lh[2]


def test_unknown_family_raises():
    with pytest.raises(KeyError, match="unknown likelihood"):
        get_family("weibull")


def test_registry_aux_names():
    assert FAMILIES["gengamma"].aux_names == ("shape", "scale")
    assert FAMILIES["exp_ph"].aux_names == ()
    assert FAMILIES["lognormal"].aux_names == ("scale",)
