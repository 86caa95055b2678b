"""Synthetic survival networks with known generating parameters.

Simulates subject-level data for a network of trials with study-specific
covariate distributions, Weibull event times drawn by CDF inversion,
administrative censoring, and a further uniform censoring pass.  Any study
can then be viewed either as IPD or in aggregate form (event times plus
covariate summaries only).
"""

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data import CovariateSpec, load_network

__all__ = [
    "SimScenario",
    "SimStudy",
    "SimulationResult",
    "appc_scenario",
    "km_curve",
    "simulate",
]


@dataclass(frozen=True)
class SimStudy:
    """One simulated trial: design, baseline model, covariate generators."""

    name: str
    kind: str  # "ipd" | "agd"
    treatments: tuple
    arm_sizes: tuple
    mu: float
    shape: float
    covariates: tuple  # (name, family, params dict) per covariate

    def __post_init__(self):
        if self.kind not in ("ipd", "agd"):
            raise ValueError(f"study kind must be 'ipd' or 'agd', got {self.kind!r}")
        if len(self.treatments) != len(self.arm_sizes):
            raise ValueError("one arm size per treatment required")


@dataclass(frozen=True)
class SimScenario:
    """A full data-generating scenario with its truth vector."""

    studies: tuple
    beta1: tuple
    beta2: dict  # treatment -> coefficient tuple; reference implicitly zero
    gamma: dict  # treatment -> effect; reference implicitly zero
    reference: str = "A"
    effect_modifiers: tuple = ()
    admin_censor: float = 1.0
    censor_fraction: float = 0.1
    seed: int = 1

    def covariate_names(self):
        return tuple(name for name, _, _ in self.studies[0].covariates)

    def truth_frame(self):
        rows = []
        for s in self.studies:
            rows.append((f"mu[{s.name}]", s.mu))
        for name, v in zip(self.covariate_names(), self.beta1):
            rows.append((f"beta1[{name}]", v))
        for trt in sorted(self.beta2):
            for name, v in zip(self.effect_modifiers, self.beta2[trt]):
                rows.append((f"beta2[{trt}:{name}]", v))
        for trt in sorted(self.gamma):
            rows.append((f"gamma[{trt}]", self.gamma[trt]))
        for s in self.studies:
            rows.append((f"shape[{s.name}]", s.shape))
        return pd.DataFrame(rows, columns=["parameter", "value"])


def appc_scenario(seed=1, ab_agd=False, ac_agd=True):
    """Two-study Weibull scenario: 500-subject AB trial, 400-subject AC.

    All three covariates are prognostic and effect-modifying, with equal
    interaction coefficients for B and C.  By default AB is observed as
    IPD and AC in aggregate form.
    """
    ab_covs = (
        ("x1", "normal", {"mean": 0.0, "sd": 0.5}),
        ("x2", "gamma", {"shape": 4.0, "rate": 2.0}),
        ("x3", "bernoulli", {"prop": 0.2}),
    )
    ac_covs = (
        ("x1", "normal", {"mean": 1.0, "sd": 0.4}),
        ("x2", "gamma", {"shape": 6.0, "rate": 2.0}),
        ("x3", "bernoulli", {"prop": 0.7}),
    )
    return SimScenario(
        studies=(
            SimStudy(
                "AB", "agd" if ab_agd else "ipd", ("A", "B"), (250, 250),
                math.log(6.2), 0.8, ab_covs,
            ),
            SimStudy(
                "AC", "agd" if ac_agd else "ipd", ("A", "C"), (200, 200),
                math.log(5.8), 1.2, ac_covs,
            ),
        ),
        beta1=(0.1, 0.05, -0.25),
        beta2={"B": (-0.2, -0.2, -0.1), "C": (-0.2, -0.2, -0.1)},
        gamma={"B": -1.2, "C": -0.5},
        reference="A",
        effect_modifiers=("x1", "x2", "x3"),
        seed=seed,
    )


def _draw_covariate(rng, family, params, n):
    if family == "normal":
        return rng.normal(params["mean"], params["sd"], n)
    if family == "gamma":
        return rng.gamma(params["shape"], 1.0 / params["rate"], n)
    if family == "bernoulli":
        return (rng.random(n) < params["prop"]).astype(float)
    raise ValueError(f"unknown covariate family {family!r}")


@dataclass
class SimulationResult:
    """Simulated network in both subject-level and aggregate views."""

    scenario: SimScenario
    full_ipd: pd.DataFrame  # every study as subject-level rows
    ipd: pd.DataFrame
    agd_events: pd.DataFrame
    agd_covariates: pd.DataFrame
    truth: pd.DataFrame
    meta: dict = field(default_factory=dict)

    def covariate_specs(self):
        sc = self.scenario
        em = set(sc.effect_modifiers)
        return tuple(
            CovariateSpec(
                name, family, "effect_modifier" if name in em else "prognostic"
            )
            for name, family, _ in sc.studies[0].covariates
        )

    def network(self, all_ipd=False):
        """Load the simulated tables into a Network.

        ``all_ipd=True`` returns the full subject-level view of every
        study, for comparison against the aggregate analysis.
        """
        if all_ipd or self.agd_events.empty:
            return load_network(
                self.full_ipd,
                covariates=self.covariate_specs(),
                reference=self.scenario.reference,
            )
        return load_network(
            self.ipd,
            self.agd_events,
            self.agd_covariates,
            covariates=self.covariate_specs(),
            reference=self.scenario.reference,
        )


def simulate(scenario):
    """Run one scenario: covariates, event times, censoring, both views."""
    rng = np.random.default_rng(scenario.seed)
    cov_names = scenario.covariate_names()
    frames = []
    summary_rows = []
    for s in scenario.studies:
        for name, _, _ in s.covariates:
            if name not in cov_names:
                raise ValueError(
                    f"study {s.name!r} covariate {name!r} not in the schema"
                )
        n_total = sum(s.arm_sizes)
        cols = [
            _draw_covariate(rng, family, params, n_total)
            for _, family, params in s.covariates
        ]
        x = np.column_stack(cols) if cols else np.empty((n_total, 0))
        treatment = np.repeat(list(s.treatments), list(s.arm_sizes))
        beta1 = np.asarray(scenario.beta1)
        em_idx = [cov_names.index(n) for n in scenario.effect_modifiers]
        eta = s.mu + x @ beta1
        for trt, b2 in scenario.beta2.items():
            mask = treatment == trt
            eta[mask] += x[np.ix_(mask, em_idx)] @ np.asarray(b2)
        for trt, g in scenario.gamma.items():
            eta[treatment == trt] += g
        u = np.maximum(rng.random(len(eta)), 1e-300)
        t = (-np.log(u) / np.exp(eta)) ** (1.0 / s.shape)
        status = np.ones(len(t), dtype=int)
        if scenario.admin_censor is not None:
            over = t >= scenario.admin_censor
            t[over] = scenario.admin_censor
            status[over] = 0
        if scenario.censor_fraction > 0:
            # independent of the event time, so the fit stays unbiased
            horizon = scenario.admin_censor
            if horizon is None:
                horizon = float(np.quantile(t, 0.95))
            at_risk = rng.random(len(t)) < scenario.censor_fraction
            c_times = rng.uniform(0.0, horizon, len(t))
            hit = at_risk & (c_times < t)
            t[hit] = c_times[hit]
            status[hit] = 0
        df = pd.DataFrame({"study": s.name, "treatment": treatment, "time": t, "status": status})
        for i, name in enumerate(cov_names):
            df[name] = x[:, i]
        frames.append(df)
        if s.kind == "agd":
            for i, (name, family, _) in enumerate(s.covariates):
                if family == "bernoulli":
                    summary_rows.append((s.name, name, "prop", x[:, i].mean()))
                else:
                    summary_rows.append((s.name, name, "mean", x[:, i].mean()))
                    summary_rows.append((s.name, name, "sd", x[:, i].std(ddof=1)))
    full = pd.concat(frames, ignore_index=True)
    is_agd = full["study"].isin([s.name for s in scenario.studies if s.kind == "agd"])
    ipd = full[~is_agd].reset_index(drop=True)
    agd_events = full.loc[is_agd, ["study", "treatment", "time", "status"]].reset_index(
        drop=True
    )
    agd_covariates = pd.DataFrame(
        summary_rows, columns=["study", "covariate", "stat", "value"]
    )
    meta = {
        "seed": scenario.seed,
        "admin_censor": scenario.admin_censor,
        "censor_fraction": scenario.censor_fraction,
        "censoring_mechanism": (
            "each subject is independently exposed, with probability "
            "censor_fraction, to a Uniform(0, horizon) censoring time that "
            "applies when it precedes the event; horizon is the "
            "administrative cutoff, or the 95% time quantile without one"
        ),
    }
    return SimulationResult(
        scenario, full, ipd, agd_events, agd_covariates, scenario.truth_frame(), meta
    )


def km_curve(time, status):
    """Product-limit survival estimate as a step-function table.

    Returns one row per distinct observed time with the number at risk,
    events, censorings, and the survival estimate just after that time; a
    leading row anchors the curve at (0, 1).
    """
    time = np.asarray(time, dtype=float)
    status = np.asarray(status, dtype=int)
    if time.size == 0:
        raise ValueError("km_curve needs at least one observation")
    order = np.argsort(time, kind="stable")
    time, status = time[order], status[order]
    rows = [(0.0, len(time), 0, 0, 1.0)]
    s = 1.0
    i = 0
    n = len(time)
    while i < n:
        t = time[i]
        d = c = 0
        while i < n and time[i] == t:
            if status[i] == 1:
                d += 1
            else:
                c += 1
            i += 1
        at_risk = n - (i - d - c)
        if d:
            s *= 1.0 - d / at_risk
        rows.append((t, at_risk, d, c, s))
    return pd.DataFrame(
        rows, columns=["time", "at_risk", "events", "censored", "survival"]
    )
