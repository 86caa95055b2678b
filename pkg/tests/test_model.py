"""Posterior assembly checks: linear predictor, priors, gradients against
finite differences for every family and option, centring algebra, and the
aggregate-reduction identities."""

import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from mlnmr.data import (
    AgDArm,
    CovariateSpec,
    CovariateSummary,
    IPDArm,
    DataError,
    Network,
    Study,
)
from mlnmr.kernels import logmeanexp
from mlnmr.model import Posterior, Prior, PriorSet, SurvivalModel, parse_prior
from mlnmr.simulate import appc_scenario, simulate

ALL_FAMILIES = [
    "exp_ph",
    "weibull_ph",
    "gompertz",
    "exp_aft",
    "weibull_aft",
    "lognormal",
    "loglogistic",
    "gamma",
    "gengamma",
    "mspline",
    "pexp",
]


def _arm(rng, treatment, n, agd=False, mean=0.5):
    t = rng.gamma(2.0, 0.4, n) + 0.05
    status = (rng.random(n) < 0.75).astype(int)
    x = np.column_stack([rng.normal(mean, 0.4, n), (rng.random(n) < 0.4).astype(float)])
    if agd:
        summ = CovariateSummary(
            {
                "age": {"mean": float(x[:, 0].mean()), "sd": float(x[:, 0].std() + 0.2)},
                "prior_tx": {"prop": float(x[:, 1].mean())},
            }
        )
        return AgDArm(treatment, t, status, summ)
    return IPDArm(treatment, t, status, x)


def _network(structure, seed=0, n=16):
    """structure: list of (study, kind, [treatments]); two covariates."""
    rng = np.random.default_rng(seed)
    covs = (
        CovariateSpec("age", "normal", "effect_modifier"),
        CovariateSpec("prior_tx", "bernoulli", "prognostic"),
    )
    studies = []
    trts = []
    for name, kind, arm_trts in structure:
        arms = [
            _arm(rng, t, n, agd=(kind == "agd"), mean=0.3 + 0.2 * i)
            for i, t in enumerate(arm_trts)
        ]
        studies.append(Study(name, kind, arms))
        trts.extend(arm_trts)
    ordered = ("A",) + tuple(sorted(set(trts) - {"A"}))
    return Network(studies=studies, treatments=ordered, covariates=covs)


BASIC = [("s1", "ipd", ["A", "B"]), ("s2", "agd", ["A", "C"])]
RE_CAPABLE = BASIC + [("s3", "agd", ["A", "B", "C"]), ("s4", "ipd", ["B", "C"])]


def _fd_check(post, theta, rel=1e-6, skip=()):
    lp, grad = post.logpost_grad(theta)
    assert np.isfinite(lp) and np.isfinite(grad).all()
    for i in range(post.n_params):
        if i in skip:
            continue
        h = 1e-5 * (1.0 + abs(theta[i]))
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        fd = (post.logpost_grad(tp)[0] - post.logpost_grad(tm)[0]) / (2 * h)
        err = abs(grad[i] - fd) / max(abs(fd), 1e-4)
        assert err < rel, (post.param_names[i], grad[i], fd)


def _mild_point(post, seed):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-0.4, 0.4, post.n_params)
    return theta


@pytest.mark.parametrize("family", ALL_FAMILIES)
def test_gradient_matches_finite_differences(family):
    net = _network(BASIC, seed=1)
    model = SurvivalModel(net, family)
    post = model.posterior(n_int=8)
    for seed in (10, 11):
        _fd_check(post, _mild_point(post, seed))


@pytest.mark.parametrize(
    "opts",
    [
        {"effects": "random"},
        {"inconsistency": "ume"},
        {"effects": "random", "inconsistency": "ume"},
        {"shared_effect_modifiers": {"B": "anti", "C": "anti"}},
        {"baseline_strata": "study-and-arm"},
    ],
    ids=lambda o: "+".join(f"{k}={v}" for k, v in o.items()),
)
def test_gradient_matches_fd_option_variants(opts):
    net = _network(RE_CAPABLE, seed=2, n=10)
    model = SurvivalModel(net, "weibull_ph", **opts)
    post = model.posterior(n_int=8)
    _fd_check(post, _mild_point(post, 20))


def test_gradient_matches_fd_spline_variants():
    net = _network(RE_CAPABLE, seed=3, n=10)
    model = SurvivalModel(
        net, "mspline", effects="random", baseline_strata="study-and-arm", n_knots=3
    )
    post = model.posterior(n_int=8)
    _fd_check(post, _mild_point(post, 30))


def test_exp_ph_hand_gradient_single_study():
    # one single-arm study, no covariates: d/dmu = sum(c - t e^mu) + prior
    rng = np.random.default_rng(4)
    t = rng.gamma(2.0, 0.4, 20) + 0.05
    status = (rng.random(20) < 0.7).astype(int)
    net = Network(
        studies=[Study("s1", "ipd", [IPDArm("A", t, status, np.zeros((20, 0)))])],
        treatments=("A",),
        covariates=(),
    )
    post = SurvivalModel(net, "exp_ph").posterior()
    mu = 0.3
    _, grad = post.logpost_grad(np.array([mu]))
    hand = (status - t * math.exp(mu)).sum() - mu / 100.0**2
    assert grad[0] == pytest.approx(hand, rel=1e-12)


def test_linear_predictor_worked_example():
    res = simulate(appc_scenario(seed=1))
    model = SurvivalModel(res.network(), "weibull_ph")
    values = {
        "mu": {"AB": math.log(6.2), "AC": math.log(5.8)},
        "beta1": [0.1, 0.05, -0.25],
        "beta2": {"B": [-0.2, -0.2, -0.1], "C": [-0.2, -0.2, -0.1]},
        "gamma": {"B": -1.2, "C": -0.5},
    }
    eta = model.linear_predictor(values, "AB", "B", [0.0, 2.0, 0.0])
    assert eta == pytest.approx(math.log(6.2) + 2 * (0.05 - 0.2) - 1.2)
    eta_ref = model.linear_predictor(values, "AB", "A", [0.0, 0.0, 0.0])
    assert eta_ref == pytest.approx(math.log(6.2))
    with pytest.raises(DataError):
        model.linear_predictor(values, "AB", "C", [0.0, 0.0, 0.0])


def test_linear_predictor_shared_class_resolution():
    net = _network(BASIC, seed=5)
    model = SurvivalModel(net, "exp_ph", shared_effect_modifiers={"B": "c", "C": "c"})
    values = {
        "mu": {"s1": 0.0},
        "beta1": [0.0, 0.0],
        "beta2": {"c": [0.7]},
        "gamma": {"B": 0.0, "C": 0.0},
    }
    x = [1.0, 0.0]
    got_b = model.linear_predictor(values, "s1", "B", x)
    assert got_b == pytest.approx(0.7)


def test_prior_parsing():
    p = parse_prior("normal(0, 100)")
    assert p == Prior("normal", 0.0, 100.0)
    assert parse_prior("half_normal(0, 2.5)").scale == 2.5
    with pytest.raises(ValueError):
        parse_prior("cauchy(0, 1)")
    with pytest.raises(ValueError):
        parse_prior("normal(0)")
    with pytest.raises(ValueError):
        PriorSet.from_mapping({"slope": "normal(0, 1)"})
    ps = PriorSet.from_mapping({"gamma": "normal(0, 10)"})
    assert ps.gamma.scale == 10.0 and ps.intercept.scale == 100.0


def test_log_prior_matches_independent_densities():
    net = _network(RE_CAPABLE, seed=6, n=8)
    model = SurvivalModel(net, "mspline", effects="random", n_knots=3)
    post = model.posterior(n_int=4)
    m = model
    rng = np.random.default_rng(7)
    for _ in range(100):
        theta = post.sample_prior(rng)
        want = 0.0
        for sl in (m.idx_mu, m.idx_beta1, m.idx_beta2, m.idx_gamma):
            want += stats.norm.logpdf(theta[sl], 0.0, 100.0).sum()
        want += stats.norm.logpdf(theta[m.idx_re]).sum()
        tau = np.exp(theta[m.idx_tau])
        want += stats.halfnorm.logpdf(tau, scale=1.0) + theta[m.idx_tau]
        for zsl, sd_idx in m.spline_slices:
            want += stats.norm.logpdf(theta[zsl]).sum()
            sd = np.exp(theta[sd_idx])
            want += stats.halfnorm.logpdf(sd, scale=1.0) + theta[sd_idx]
        assert post.log_prior(theta) == pytest.approx(want, abs=1e-10)


def test_posterior_invariant_to_row_order():
    res = simulate(appc_scenario(seed=9))
    shuffled = res.ipd.sample(frac=1.0, random_state=3).reset_index(drop=True)
    net1 = res.network()
    from mlnmr.data import load_network

    net2 = load_network(
        shuffled,
        res.agd_events,
        res.agd_covariates,
        covariates=res.covariate_specs(),
        reference="A",
    )
    m1 = SurvivalModel(net1, "weibull_ph")
    m2 = SurvivalModel(net2, "weibull_ph")
    theta = _mild_point(m1.posterior(8), 40)
    a = m1.posterior(8).logpost_grad(theta)
    b = m2.posterior(8).logpost_grad(theta)
    assert a[0] == pytest.approx(b[0], rel=1e-12)


def test_nma_reduction_no_covariates():
    """With an empty covariate schema the marginal aggregate likelihood
    equals the conditional likelihood row for row."""
    rng = np.random.default_rng(8)
    t = rng.gamma(2.0, 0.5, 15) + 0.01
    status = (rng.random(15) < 0.8).astype(int)

    def one(kind):
        if kind == "ipd":
            arms = [
                IPDArm("A", t[:8], status[:8], np.zeros((8, 0))),
                IPDArm("B", t[8:], status[8:], np.zeros((7, 0))),
            ]
        else:
            arms = [
                AgDArm("A", t[:8], status[:8], CovariateSummary({})),
                AgDArm("B", t[8:], status[8:], CovariateSummary({})),
            ]
        net = Network([Study("s1", kind, arms)], ("A", "B"), ())
        return SurvivalModel(net, "weibull_ph").posterior(n_int=16)

    theta = np.array([0.2, -0.4, math.log(1.3)])
    ipd_rows = one("ipd").loglik_rows(theta)
    agd_rows = one("agd").loglik_rows(theta)
    np.testing.assert_array_equal(ipd_rows, agd_rows)


def test_degenerate_grid_equals_conditional():
    net = _network(BASIC, seed=10)
    model = SurvivalModel(net, "gamma")
    post = model.posterior(n_int=8)
    x0 = np.array([0.45, 1.0])
    agd_idx = next(
        i
        for i, a in enumerate(model.arms)
        if a.kind == "agd" and a.treatment != net.reference
    )
    pts = np.tile(x0 - model.center_point, (8, 1))
    post._grids[agd_idx] = (pts, pts[:, model.em_idx])
    theta = _mild_point(post, 50)
    rows = post.loglik_rows(theta)
    arm = model.arms[agd_idx]

    ipd_arms = [
        IPDArm(arm.treatment, arm.t, arm.c.astype(int), np.tile(x0, (len(arm.t), 1)))
    ]
    net2 = Network(
        [Study("s2", "ipd", ipd_arms)], ("A", arm.treatment), net.covariates
    )
    model2 = SurvivalModel(net2, "gamma", center=False)
    # map: mu[s2], beta1, beta2[cls], gamma, aux for s2
    nm1, nm2 = post.param_names, model2.posterior().param_names
    theta2 = np.empty(len(nm2))
    cp = model.center_point

    def pick(name):
        return theta[nm1.index(name)]

    theta2[nm2.index("mu[s2]")] = pick("mu[s2]") - cp @ theta[model.idx_beta1]
    for n in nm2:
        if n.startswith("beta") or n.startswith("log_"):
            theta2[nm2.index(n)] = pick(n.replace("[s2]", "[s2]"))
    b2 = theta[model.idx_beta2].reshape(model.n_classes, model.p_em)
    g_nat = pick(f"gamma[{arm.treatment}]") - cp[model.em_idx] @ b2[arm.class_idx]
    theta2[nm2.index(f"gamma[{arm.treatment}]")] = g_nat
    rows2 = model2.posterior().loglik_rows(theta2)
    np.testing.assert_allclose(rows[arm.row_lo : arm.row_hi], rows2, rtol=1e-12)


def test_shared_em_equivalence():
    net = _network(BASIC, seed=12)
    shared = SurvivalModel(
        net, "weibull_ph", shared_effect_modifiers={"B": "cls", "C": "cls"}
    )
    indep = SurvivalModel(net, "weibull_ph")
    ps, pi = shared.posterior(8), indep.posterior(8)
    assert pi.n_params == ps.n_params + shared.p_em
    rng = np.random.default_rng(13)
    for _ in range(5):
        th_s = rng.uniform(-0.5, 0.5, ps.n_params)
        th_i = np.empty(pi.n_params)
        for i, name in enumerate(pi.param_names):
            if name.startswith("beta2["):
                cov = name.split(":")[1][:-1]
                th_i[i] = th_s[ps.param_names.index(f"beta2[cls:{cov}]")]
            else:
                th_i[i] = th_s[ps.param_names.index(name)]
        lik_s = ps.logpost_grad(th_s)[0] - ps.log_prior(th_s)
        lik_i = pi.logpost_grad(th_i)[0] - pi.log_prior(th_i)
        assert lik_s == pytest.approx(lik_i, rel=1e-12)


def _smooth_network(seed, n=40):
    """All-continuous covariates so the marginalised likelihood is a smooth
    integrand; indicator covariates converge too but not monotonically."""
    rng = np.random.default_rng(seed)
    covs = (
        CovariateSpec("age", "normal", "effect_modifier"),
        CovariateSpec("marker", "gamma", "prognostic"),
    )
    ipd_arms = []
    for trt in ("A", "B"):
        t = rng.gamma(1.4, 0.8, n) + 0.05
        status = (rng.random(n) < 0.8).astype(int)
        x = np.column_stack([rng.normal(0.3, 0.6, n), rng.gamma(3.0, 0.5, n)])
        ipd_arms.append(IPDArm(trt, t, status, x))
    agd_arms = []
    for trt in ("A", "C"):
        t = rng.gamma(1.2, 0.9, n) + 0.05
        status = (rng.random(n) < 0.75).astype(int)
        summ = CovariateSummary(
            {
                "age": {"mean": 0.5, "sd": 0.5},
                "marker": {"mean": 1.6, "sd": 0.8},
            }
        )
        agd_arms.append(AgDArm(trt, t, status, summ))
    studies = [Study("s1", "ipd", ipd_arms), Study("s2", "agd", agd_arms)]
    return Network(studies=studies, treatments=("A", "B", "C"), covariates=covs)


def test_marginal_loglik_stabilises_under_refinement():
    net = _smooth_network(seed=5)
    model = SurvivalModel(net, "weibull_ph")
    rng = np.random.default_rng(105)
    theta = rng.uniform(-0.4, 0.4, model.n_params)
    vals = {}
    for n_int in (16, 32, 64, 128, 256, 512):
        vals[n_int] = model.posterior(n_int).loglik_rows(theta).sum()
    diffs = [abs(vals[n] - vals[2 * n]) for n in (16, 32, 64, 128, 256)]
    assert all(d2 < d1 for d1, d2 in zip(diffs, diffs[1:]))
    assert diffs[-1] < diffs[0] / 4


def test_grid_prefix_property():
    net = _network(BASIC, seed=15)
    model = SurvivalModel(net, "exp_ph")
    agd_idx = next(i for i, a in enumerate(model.arms) if a.kind == "agd")
    small = model.posterior(8)._grids[agd_idx][0]
    big = model.posterior(16)._grids[agd_idx][0]
    np.testing.assert_array_equal(big[:8], small)


def test_bernoulli_marginal_reduction():
    """A Bernoulli density marginalised over the grid collapses to the
    closed form in the grid-average success probability."""
    rng = np.random.default_rng(16)
    eta = rng.normal(0.0, 1.5, 256)
    p = 1.0 / (1.0 + np.exp(-eta))
    pbar = p.mean()
    for y in (0.0, 1.0):
        ll = y * np.log(p) + (1 - y) * np.log1p(-p)
        direct = y * np.log(pbar) + (1 - y) * np.log1p(-pbar)
        assert abs(logmeanexp(ll) - direct) < 1e-12


def test_centering_is_a_reparameterisation():
    res = simulate(appc_scenario(seed=17))
    net = res.network()
    mc = SurvivalModel(net, "weibull_ph", center=True)
    mn = SurvivalModel(net, "weibull_ph", center=False)
    pc, pn = mc.posterior(16), mn.posterior(16)
    rng = np.random.default_rng(18)
    theta_c = rng.uniform(-0.3, 0.3, pc.n_params)
    nat = pc.constrain(theta_c)
    names = pc.constrained_names
    assert names == pn.constrained_names
    # natural-scale values re-enter the uncentred model unchanged
    theta_n = theta_c.copy()
    for i, name in enumerate(pn.param_names):
        if name.startswith(("mu[", "gamma[")):
            theta_n[i] = nat[names.index(name)]
    lik_c = pc.loglik_rows(theta_c).sum()
    lik_n = pn.loglik_rows(theta_n).sum()
    assert lik_c == pytest.approx(lik_n, rel=1e-10)
    # and the uncentred model's constrain is the identity on mu/gamma
    nat_n = pn.constrain(theta_n)
    np.testing.assert_allclose(nat_n, nat, rtol=1e-12)


def test_constrain_names_and_simplex():
    net = _network(BASIC, seed=19)
    model = SurvivalModel(net, "mspline", n_knots=3)
    post = model.posterior(8)
    theta = _mild_point(post, 70)
    nat = post.constrain(theta)
    names = post.constrained_names
    assert len(nat) == len(names)
    for st in model.strata:
        cols = [i for i, n in enumerate(names) if n.startswith(f"alpha[{st.label}:")]
        assert nat[cols].sum() == pytest.approx(1.0)
        assert (nat[cols] > 0).all()
    assert any(n.startswith("rw_sd[") for n in names)


def test_check_names_offending_row_and_block():
    net = _network(BASIC, seed=20)
    post = SurvivalModel(net, "gompertz").posterior(8)
    theta = np.zeros(post.n_params)
    post.check(theta)
    bad = theta.copy()
    bad[0] = np.nan
    with pytest.raises(FloatingPointError, match=r"mu\[s1\]"):
        post.check(bad)
    huge = theta.copy()
    huge[post.param_names.index("log_shape[s1]")] = 12.0
    with pytest.raises(FloatingPointError, match="study s1"):
        post.check(huge)


def test_random_effects_requires_repeated_contrast():
    net = _network(BASIC, seed=21)
    with pytest.raises(DataError, match="two or more studies"):
        SurvivalModel(net, "exp_ph", effects="random")
    SurvivalModel(_network(RE_CAPABLE, seed=21, n=6), "exp_ph", effects="random")


def test_option_validation():
    net = _network(BASIC, seed=22)
    with pytest.raises(ValueError):
        SurvivalModel(net, "weibull_ph", effects="mixed")
    with pytest.raises(ValueError):
        SurvivalModel(net, "weibull_ph", inconsistency="nodesplit")
    with pytest.raises(DataError):
        SurvivalModel(net, "weibull_ph", shared_effect_modifiers={"A": "c"})
    with pytest.raises(DataError):
        SurvivalModel(net, "weibull_ph", shared_effect_modifiers={"Z": "c"})


def test_ume_layout_uses_observed_design_pairs():
    net = _network(RE_CAPABLE, seed=23, n=6)
    model = SurvivalModel(net, "exp_ph", inconsistency="ume")
    assert model.gamma_labels == ["A:B", "A:C", "B:C"]
    values = {
        "mu": {"s4": 1.0},
        "beta1": [0.0, 0.0],
        "gamma": {"B:C": 0.25},
    }
    assert model.linear_predictor(values, "s4", "C", [0, 0]) == pytest.approx(1.25)
    assert model.linear_predictor(values, "s4", "B", [0, 0]) == pytest.approx(1.0)


def test_describe_mentions_knots_and_classes():
    net = _network(BASIC, seed=24)
    model = SurvivalModel(
        net, "mspline", n_knots=3, shared_effect_modifiers={"B": "anti", "C": "anti"}
    )
    text = model.describe()
    assert "knots[s1]" in text and "anti" in text and "mspline" in text
