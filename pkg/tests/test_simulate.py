"""Simulation checks: inversion formula, censoring bookkeeping, truth
tables, and agreement with independently integrated event probabilities."""

import math

import numpy as np
import pandas as pd
import pytest
from scipy import integrate, stats

from mlnmr.simulate import SimScenario, SimStudy, appc_scenario, km_curve, simulate


def test_inversion_formula_u_half():
    # t = (-log U / exp(eta))^(1/nu) with U=0.5, nu=1, eta=0 -> log 2
    assert (-math.log(0.5) / math.exp(0.0)) ** 1.0 == pytest.approx(math.log(2))


def test_appc_arm_sizes_and_views():
    res = simulate(appc_scenario(seed=3))
    counts = res.full_ipd.groupby(["study", "treatment"]).size()
    assert counts[("AB", "A")] == 250 and counts[("AB", "B")] == 250
    assert counts[("AC", "A")] == 200 and counts[("AC", "C")] == 200
    assert set(res.ipd["study"]) == {"AB"}
    assert set(res.agd_events["study"]) == {"AC"}
    assert list(res.agd_events.columns) == ["study", "treatment", "time", "status"]
    # aggregate view: mean+sd for continuous, prop for the binary covariate
    stats_ac = res.agd_covariates.set_index(["covariate", "stat"])["value"]
    pooled = res.full_ipd[res.full_ipd["study"] == "AC"]
    assert stats_ac[("x1", "mean")] == pytest.approx(pooled["x1"].mean())
    assert stats_ac[("x2", "sd")] == pytest.approx(pooled["x2"].std(ddof=1))
    assert stats_ac[("x3", "prop")] == pytest.approx(pooled["x3"].mean())
    assert ("x3", "mean") not in stats_ac.index


def test_determinism_and_seed_sensitivity():
    a = simulate(appc_scenario(seed=11)).full_ipd
    b = simulate(appc_scenario(seed=11)).full_ipd
    c = simulate(appc_scenario(seed=12)).full_ipd
    pd.testing.assert_frame_equal(a, b)
    assert not a["time"].equals(c["time"])


def test_censoring_bookkeeping():
    res = simulate(appc_scenario(seed=5))
    df = res.full_ipd
    assert (df["time"] > 0).all()
    assert df["time"].max() <= 1.0
    for study, n in (("AB", 500), ("AC", 400)):
        sub = df[df["study"] == study]
        n_admin = (sub["time"] == 1.0).sum()
        n_extra = ((sub["status"] == 0) & (sub["time"] < 1.0)).sum()
        # early censoring hits at most the exposed fraction, and the
        # exposure indicator is independent of the event time
        assert 0 < n_extra < 0.2 * n
        assert (sub["status"] == 0).sum() == n_admin + n_extra


def test_censoring_independent_of_event_time():
    # with a constant hazard, events per unit person-time is an unbiased
    # rate estimate only under independent censoring
    sc = SimScenario(
        studies=(SimStudy("s1", "ipd", ("A",), (20000,), math.log(0.7),
                          1.0, ()),),
        beta1=(), beta2={}, gamma={}, effect_modifiers=(),
        admin_censor=4.0, censor_fraction=0.2, seed=3,
    )
    df = simulate(sc).ipd
    rate = df["status"].sum() / df["time"].sum()
    assert rate == pytest.approx(0.7, rel=0.03)


def test_truth_frame_names_and_values():
    truth = appc_scenario().truth_frame().set_index("parameter")["value"]
    assert truth["mu[AB]"] == pytest.approx(math.log(6.2))
    assert truth["mu[AC]"] == pytest.approx(math.log(5.8))
    assert truth["beta1[x2]"] == 0.05
    assert truth["beta2[B:x1]"] == -0.2
    assert truth["beta2[C:x3]"] == -0.1
    assert truth["gamma[B]"] == -1.2
    assert truth["gamma[C]"] == -0.5
    assert truth["shape[AB]"] == 0.8
    assert truth["shape[AC]"] == 1.2
    assert len(truth) == 2 + 3 + 6 + 2 + 2


def test_network_round_trip():
    res = simulate(appc_scenario(seed=7))
    net = res.network()
    assert [s.name for s in net.studies] == ["AB", "AC"]
    assert {s.kind for s in net.studies} == {"ipd", "agd"}
    assert net.treatments == ("A", "B", "C")
    assert net.n_obs == 900
    full = res.network(all_ipd=True)
    assert {s.kind for s in full.studies} == {"ipd"}
    assert full.n_obs == 900


def _event_probability_oracle(study, scenario, treatment):
    """P(T < 1 | arm) by numerical integration over the covariate law."""
    (n1, nf1, p1), (n2, nf2, p2), (n3, nf3, p3) = study.covariates
    beta1 = np.asarray(scenario.beta1)
    beta2 = np.asarray(scenario.beta2.get(treatment, (0.0, 0.0, 0.0)))
    gamma = scenario.gamma.get(treatment, 0.0)
    b = beta1 + beta2

    def event_prob(x1, x2, x3):
        eta = study.mu + b @ np.array([x1, x2, x3]) + gamma
        return -np.expm1(-np.exp(eta) * 1.0**study.shape)

    total = 0.0
    for x3, w3 in ((0.0, 1 - p3["prop"]), (1.0, p3["prop"])):
        val, _ = integrate.dblquad(
            lambda x2, x1: event_prob(x1, x2, x3)
            * stats.norm.pdf(x1, p1["mean"], p1["sd"])
            * stats.gamma.pdf(x2, p2["shape"], scale=1.0 / p2["rate"]),
            p1["mean"] - 8 * p1["sd"],
            p1["mean"] + 8 * p1["sd"],
            0.0,
            25.0,
            epsabs=1e-10,
        )
        total += w3 * val
    return total


@pytest.mark.parametrize("study_name,treatment", [("AB", "A"), ("AB", "B"), ("AC", "C")])
def test_event_fraction_matches_integrated_truth(study_name, treatment):
    sc = appc_scenario(seed=17)
    sc = type(sc)(**{**sc.__dict__, "censor_fraction": 0.0})
    res = simulate(sc)
    study = next(s for s in sc.studies if s.name == study_name)
    arm = res.full_ipd.query("study == @study_name and treatment == @treatment")
    p = _event_probability_oracle(study, sc, treatment)
    n = len(arm)
    se = math.sqrt(p * (1 - p) / n)
    assert abs(arm["status"].mean() - p) < 3 * se


def test_uncensored_survival_matches_mixture():
    sc = appc_scenario(seed=23)
    big = type(sc.studies[0])(
        "BIG", "ipd", ("A",), (100_000,), sc.studies[0].mu, sc.studies[0].shape,
        sc.studies[0].covariates,
    )
    sc = type(sc)(
        studies=(big,), beta1=sc.beta1, beta2={}, gamma={},
        reference="A", effect_modifiers=sc.effect_modifiers,
        admin_censor=None, censor_fraction=0.0, seed=29,
    )
    res = simulate(sc)
    df = res.full_ipd
    assert (df["status"] == 1).all()
    t_sorted = np.sort(df["time"].to_numpy())
    grid = np.linspace(0.05, 2.0, 40)
    emp = 1.0 - np.searchsorted(t_sorted, grid, side="right") / len(t_sorted)
    rng = np.random.default_rng(31)
    m = 200_000
    x = np.column_stack(
        [
            rng.normal(0.0, 0.5, m),
            rng.gamma(4.0, 0.5, m),
            (rng.random(m) < 0.2).astype(float),
        ]
    )
    eta = big.mu + x @ np.asarray(sc.beta1)
    mix = np.array(
        [np.mean(np.exp(-np.exp(eta) * t**big.shape)) for t in grid]
    )
    assert np.max(np.abs(emp - mix)) < 0.01


def test_km_all_events_distinct_times():
    km = km_curve([3.0, 1.0, 2.0], [1, 1, 1])
    assert list(km["survival"]) == pytest.approx([1.0, 2 / 3, 1 / 3, 0.0])
    assert list(km["at_risk"]) == [3, 3, 2, 1]


def test_km_all_censored():
    km = km_curve([1.0, 2.0], [0, 0])
    assert (km["survival"] == 1.0).all()
    assert km["censored"].sum() == 2


def test_km_hand_computed_five_rows():
    # times 1(event), 2(censor), 3(event), 3(event), 5(censor)
    km = km_curve([1, 2, 3, 3, 5], [1, 0, 1, 1, 0])
    km = km.set_index("time")
    assert km.loc[1.0, "survival"] == pytest.approx(4 / 5)
    assert km.loc[2.0, "survival"] == pytest.approx(4 / 5)
    # at risk at t=3 is 3; two events -> S = 4/5 * 1/3
    assert km.loc[3.0, "survival"] == pytest.approx(4 / 15)
    assert km.loc[5.0, "survival"] == pytest.approx(4 / 15)
    assert km.loc[3.0, "events"] == 2


def test_km_empty_rejected():
    with pytest.raises(ValueError):
        km_curve([], [])
