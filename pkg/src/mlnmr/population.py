"""Population-average estimands computed draw by draw.

Fitted treatment effects live on the linear-predictor scale and are
conditional on covariates.  Decision makers usually want the marginal
versions for a named target population: survival curves, hazards,
survival quantiles and restricted means with the covariate distribution
integrated out.  This module computes those quantities for every
posterior draw, so each estimand arrives with a full credible interval.

Conditional log hazard ratios need only the population's effect-modifier
means.  Marginal estimands additionally need a baseline hazard, taken
from a study in the network: either the population's own reference-arm
event data ingested as a single-arm study, or a comparable study the
baseline is borrowed from (``TargetPopulation.baseline`` names it
either way).

Random-effects models contribute their mean treatment effects here;
study-specific deviations are nuisance parameters of the fitted studies,
not of a new target population.
"""

import warnings
from dataclasses import dataclass, field
from functools import partial

import numpy as np
import pandas as pd

from . import kernels
from .data import CovariateSummary, DataError, pool_ipd_correlation
from .integration import build_grid
from .spline import SplineBasis

__all__ = [
    "TargetPopulation",
    "EstimandDraws",
    "conditional_effect",
    "marginal_survival",
    "marginal_hazard",
    "marginal_cumhaz",
    "survival_quantile",
    "rmst",
    "marginal_contrast",
    "em_means",
]

CONTRAST_KINDS = ("hazard-ratio", "median-ratio", "median-difference", "rmst-difference")

# families whose survival provably decays fast enough for a finite mean
_FINITE_MEAN = {
    "exp_ph",
    "exp_aft",
    "weibull_ph",
    "weibull_aft",
    "gompertz",
    "lognormal",
    "gamma",
    "gengamma",
}

_QUANTILE_RTOL = 1e-8
_RMST_TOL = 1e-6


@dataclass
class TargetPopulation:
    """A population that estimands are computed for.

    Covariate information comes from ``ipd`` rows (used directly as the
    integration grid), from ``summary`` marginals (a QMC grid is built),
    or, when both are omitted, from the ``baseline`` study itself.
    ``baseline`` names the study whose intercept and auxiliary
    parameters supply the baseline hazard; conditional effects do not
    need it.
    """

    label: str
    summary: CovariateSummary = None
    ipd: object = None  # (n, p) array, or DataFrame with covariate columns
    baseline: str = None
    n_int: int = 64
    correlation: np.ndarray = None

    @classmethod
    def from_study(cls, network, study, n_int=64):
        """Target the population of an in-network study, baseline included."""
        network.study(study)
        return cls(label=study, baseline=study, n_int=n_int)


@dataclass
class EstimandDraws:
    """Per-draw values of one estimand, scalar or on a time grid.

    ``values`` has shape (draws,) or (draws, times).  ``not_reached``
    flags draws whose root never crossed the target within the
    extrapolation horizon; their values are NaN.  ``meta`` carries
    labels such as the horizon rule that applied.
    """

    name: str
    values: np.ndarray
    times: np.ndarray = None
    not_reached: np.ndarray = None
    meta: dict = field(default_factory=dict)

    @property
    def n_draws(self):
        return self.values.shape[0]

    def interval(self, level):
        """Central credible interval endpoints per time point."""
        if not 0.0 < level < 1.0:
            raise ValueError("interval level must be in (0, 1)")
        v = np.atleast_2d(self.values)
        tail = 0.5 * (1.0 - level)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            lo = np.nanquantile(v, tail, axis=0)
            hi = np.nanquantile(v, 1.0 - tail, axis=0)
        return lo, hi

    def summary(self):
        """Tidy frame: mean, median and central 50/80/95% intervals."""
        v = self.values if self.values.ndim == 2 else self.values[:, None]
        qs = (0.025, 0.1, 0.25, 0.5, 0.75, 0.9, 0.975)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mean = np.nanmean(v, axis=0)
            q = np.nanquantile(v, qs, axis=0)
        df = pd.DataFrame(
            {
                "mean": mean,
                "median": q[3],
                "q2.5": q[0],
                "q10": q[1],
                "q25": q[2],
                "q75": q[4],
                "q90": q[5],
                "q97.5": q[6],
            }
        )
        if self.times is not None:
            df.insert(0, "time", np.asarray(self.times, dtype=float))
        if self.not_reached is not None:
            df["frac_not_reached"] = float(self.not_reached.mean())
        return df


# ------------------------------------------------- population resolution


def _covariate_source(model, pop):
    """Either explicit covariate rows (raw scale) or a marginal summary."""
    net = model.network
    if pop.ipd is not None:
        X = pop.ipd
        if isinstance(X, pd.DataFrame):
            missing = [c for c in net.covariate_names if c not in X.columns]
            if missing:
                raise DataError(
                    f"population {pop.label!r}: IPD rows lack covariates {missing}"
                )
            X = X[list(net.covariate_names)].to_numpy(dtype=float)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != model.p:
            raise DataError(
                f"population {pop.label!r}: covariate rows have {X.shape[1]} "
                f"columns, the network schema has {model.p}"
            )
        return X, None
    if pop.summary is not None:
        return None, pop.summary
    if pop.baseline is not None:
        s = net.study(pop.baseline)
        if s.kind == "ipd":
            return np.vstack([a.x for a in s.arms]), None
        return None, s.arms[0].summary
    if model.p == 0:
        return np.zeros((1, 0)), None
    raise DataError(
        f"population {pop.label!r} has no covariate information; provide "
        "ipd rows, summary statistics, or a baseline study to take them from"
    )


def _grid(model, pop):
    """Raw-scale integration grid plus its effect-modifier columns."""
    X, summ = _covariate_source(model, pop)
    if X is None:
        net = model.network
        marg = tuple(summ.marginal(c) for c in net.covariates)
        corr = pop.correlation if pop.correlation is not None else summ.correlation
        if corr is None and model.p > 1:
            corr = pool_ipd_correlation(net)
        X = build_grid(
            net.covariate_names, marg, pop.n_int, correlation=corr, check=False
        ).points
    return X, X[:, model.em_idx]


def _stat_mean(spec, stats, label):
    s = stats.get(spec.name)
    if s is None:
        raise DataError(
            f"population {label!r}: effect-modifier means unavailable, "
            f"no summary statistics for {spec.name!r}"
        )
    if spec.marginal_family == "bernoulli":
        if "prop" not in s:
            raise DataError(
                f"population {label!r}: effect modifier {spec.name!r} needs a "
                f"prop entry, got {sorted(s)}"
            )
        return float(s["prop"])
    if "mean" in s:
        return float(s["mean"])
    if spec.marginal_family == "gamma" and {"shape", "rate"} <= set(s):
        return float(s["shape"]) / float(s["rate"])
    raise DataError(
        f"population {label!r}: cannot form a mean for {spec.name!r} "
        f"from {sorted(s)}"
    )


def em_means(model, pop):
    """Raw-scale effect-modifier means of the target population.

    Reads only effect-modifier entries, so purely prognostic summaries
    cannot influence conditional effects.
    """
    specs = [model.network.covariates[i] for i in model.em_idx]
    if not specs:
        return np.zeros(0)
    X, summ = _covariate_source(model, pop)
    if X is not None:
        return X[:, model.em_idx].mean(axis=0)
    return np.array([_stat_mean(c, summ.stats, pop.label) for c in specs])


# ------------------------------------------------- constrained draw access


def _constrained(post, draws):
    """(total draws, constrained params) matrix, cached on the draws."""
    cache = getattr(draws, "_constrained_cache", None)
    if cache is not None and cache[0] is post:
        return cache[1]
    flat = draws.flat()
    out = np.empty((flat.shape[0], len(post.constrained_names)))
    for i in range(flat.shape[0]):
        out[i] = post.constrain(flat[i])
    draws._constrained_cache = (post, out)
    return out


def _cols(post, con, names):
    idx = [post.constrained_names.index(n) for n in names]
    return con[:, idx]


def _check_treatment(model, treatment):
    if treatment not in model.treatments:
        raise DataError(f"no treatment {treatment!r} in the network")


def _gamma_draws(model, post, con, pop, treatment):
    """Natural-scale effect of ``treatment`` against its anchor, per draw."""
    if model.inconsistency == "ume":
        if pop.baseline is None:
            raise DataError(
                f"population {pop.label!r}: an inconsistency model anchors "
                "treatment effects to a study baseline; set `baseline` to a "
                "study in the network"
            )
        b = model.network.study(pop.baseline).arms[0].treatment
        if treatment == b:
            return np.zeros(con.shape[0])
        if f"gamma[{b}:{treatment}]" not in post.constrained_names:
            raise DataError(
                f"population {pop.label!r}: the contrast {treatment!r} vs "
                f"{b!r} was never observed, so the inconsistency model has "
                "no effect for it"
            )
        return _cols(post, con, [f"gamma[{b}:{treatment}]"])[:, 0]
    if treatment == model.treatments[0]:
        return np.zeros(con.shape[0])
    return _cols(post, con, [f"gamma[{treatment}]"])[:, 0]


def _beta2_draws(model, post, con, treatment):
    """(draws, p_em) natural-scale interaction coefficients for a treatment."""
    if model.p_em == 0 or treatment == model.treatments[0]:
        return np.zeros((con.shape[0], model.p_em))
    lab = model.class_labels[model.class_of[treatment]]
    em = [model.network.covariate_names[i] for i in model.em_idx]
    return _cols(post, con, [f"beta2[{lab}:{c}]" for c in em])


def _mu_draws(model, post, con, pop):
    if pop.baseline is None:
        raise DataError(
            f"population {pop.label!r}: no baseline hazard source; marginal "
            "estimands need the population's reference-arm event data "
            "included as a single-arm study, or a network study to borrow "
            "the baseline from; set `baseline` to that study's name"
        )
    model.network.study(pop.baseline)
    return _cols(post, con, [f"mu[{pop.baseline}]"])[:, 0]


def _stratum_index(model, pop, treatment):
    s = model.network.study(pop.baseline)
    if model.baseline_strata == "study":
        return model._stratum_of[(s.name, s.arms[0].treatment)]
    key = (s.name, treatment)
    if key not in model._stratum_of:
        raise DataError(
            f"population {pop.label!r}: study-and-arm baseline strata define "
            f"no stratum for treatment {treatment!r} in study {s.name!r}"
        )
    return model._stratum_of[key]


# ------------------------------------------------- marginal machinery


class _Marginal:
    """Everything one (population, treatment) marginal estimand needs."""

    def __init__(self, post, draws, pop, treatment):
        model = post.model
        _check_treatment(model, treatment)
        self.model = model
        self.pop = pop
        self.treatment = treatment
        con = _constrained(post, draws)
        self.n_draws = con.shape[0]
        X, Xem = _grid(model, pop)
        mu = _mu_draws(model, post, con, pop)
        gamma = _gamma_draws(model, post, con, pop, treatment)
        eta = np.broadcast_to(mu + gamma, (X.shape[0], self.n_draws)).copy()
        if model.p:
            b1 = _cols(post, con, [f"beta1[{c}]" for c in model.network.covariate_names])
            eta += X @ b1.T
        if model.p_em:
            eta += Xem @ _beta2_draws(model, post, con, treatment).T
        self.eta = eta  # (grid, draws)
        self.stratum = _stratum_index(model, pop, treatment)
        st = model.strata[self.stratum]
        if model.is_spline:
            nb = st.basis.n_basis
            self.alphas = _cols(
                post, con, [f"alpha[{st.label}:{i + 1}]" for i in range(nb)]
            )
            self.basis = st.basis
            # private basis for root finding, so scattered scalar times do
            # not pile up in the fitted model's design cache
            self._scratch = SplineBasis(st.basis.knots, st.basis.kappa)
        elif model.n_aux:
            aux = _cols(
                post, con, [f"{a}[{st.label}]" for a in model.family.aux_names]
            )
            self.a1 = aux[:, 0]
            self.a2 = aux[:, 1] if model.n_aux > 1 else np.zeros(self.n_draws)
        else:
            self.a1 = np.zeros(self.n_draws)
            self.a2 = np.zeros(self.n_draws)
        times = [a.time.max() for a in model.network.study(pop.baseline).arms]
        self.tmax = float(max(times))
        if model.is_spline:
            self.horizon = float(self.basis.knots.upper)
            self.horizon_rule = "upper boundary knot"
        else:
            self.horizon = 5.0 * self.tmax
            self.horizon_rule = "5x max observed time"

    def default_grid(self, n=128):
        return np.linspace(0.0, self.tmax, n)

    def meta(self, times=None):
        out = {
            "population": self.pop.label,
            "treatment": self.treatment,
            "baseline": self.pop.baseline,
            "horizon": self.horizon,
            "horizon_rule": self.horizon_rule,
        }
        if times is not None and times.size and float(times.max()) > self.horizon:
            out["extrapolated"] = (
                f"grid extends past the extrapolation horizon {self.horizon:g} "
                f"({self.horizon_rule})"
            )
        return out

    def curves(self, times):
        """(draws, times) marginal survival and survival-weighted hazard."""
        t = np.asarray(times, dtype=float)
        S = np.empty((self.n_draws, t.size))
        SH = np.empty_like(S)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            if self.model.is_spline:
                upper = self.basis.knots.upper
                tc = np.minimum(t, upper)
                i_mat = self.basis.i_matrix(tc)
                m_mat = self.basis.m_matrix(tc)
                beyond = t > upper
                for d in range(self.n_draws):
                    a_t = i_mat @ self.alphas[d]
                    b_t = m_mat @ self.alphas[d]
                    if beyond.any():
                        # hazard extrapolates as zero past the boundary knot
                        b_t = np.where(beyond, 0.0, b_t)
                    S[d], SH[d] = kernels.surv_curves_mspline(
                        a_t, b_t, np.ascontiguousarray(self.eta[:, d])
                    )
            else:
                fid = self.model.family.fam_id
                for d in range(self.n_draws):
                    S[d], SH[d] = kernels.surv_curves(
                        fid,
                        t,
                        np.ascontiguousarray(self.eta[:, d]),
                        self.a1[d],
                        self.a2[d],
                    )
        S[:, t == 0.0] = 1.0
        return S, SH

    def sbar(self, d, t):
        """Marginal survival of draw ``d`` at one time point."""
        if t == 0.0:
            return 1.0
        eta = np.ascontiguousarray(self.eta[:, d])
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            if self.model.is_spline:
                upper = self._scratch.knots.upper
                tt = np.array([min(t, upper)])
                a_t = self._scratch.i_matrix(tt) @ self.alphas[d]
                s, _ = kernels.surv_curves_mspline(a_t, np.zeros(1), eta)
            else:
                s, _ = kernels.surv_curves(
                    self.model.family.fam_id,
                    np.array([float(t)]),
                    eta,
                    self.a1[d],
                    self.a2[d],
                )
        return float(s[0])


def _times_arg(marg, times):
    if times is None:
        return marg.default_grid()
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("times must be a nonempty 1-d array")
    if not np.all(np.isfinite(t)) or np.any(t < 0):
        raise ValueError("times must be finite and nonnegative")
    return t


# ------------------------------------------------- estimand operations


def conditional_effect(post, draws, population, a, b):
    """Conditional log hazard ratio of ``b`` against ``a``, per draw.

    Evaluated at the population's effect-modifier means; prognostic
    covariates do not enter.  Treatments sharing an effect-modifier
    class give the same value in every population.
    """
    model = post.model
    _check_treatment(model, a)
    _check_treatment(model, b)
    con = _constrained(post, draws)
    d = _gamma_draws(model, post, con, population, b) - _gamma_draws(
        model, post, con, population, a
    )
    if model.p_em:
        xbar = em_means(model, population)
        diff = _beta2_draws(model, post, con, b) - _beta2_draws(model, post, con, a)
        d = d + diff @ xbar
    return EstimandDraws(
        f"conditional log hazard ratio {b} vs {a}",
        d,
        meta={"population": population.label, "treatments": (a, b)},
    )


def marginal_survival(post, draws, population, treatment, times=None):
    """Marginal survival curve: the grid mean of S(t | x) per draw."""
    marg = _Marginal(post, draws, population, treatment)
    t = _times_arg(marg, times)
    S, _ = marg.curves(t)
    return EstimandDraws(f"survival[{treatment}]", S, times=t, meta=marg.meta(t))


def marginal_hazard(post, draws, population, treatment, times=None):
    """Marginal hazard: survival-weighted mean of h(t | x) per draw.

    Where the marginal survival has underflowed to zero the ratio is
    undefined; those entries are masked as NaN and the mask is reported
    in ``meta``.
    """
    marg = _Marginal(post, draws, population, treatment)
    t = _times_arg(marg, times)
    S, SH = marg.curves(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = SH / S
    meta = marg.meta(t)
    dead = S == 0.0
    if dead.any():
        h[dead] = np.nan
        first = float(t[dead.any(axis=0)].min())
        meta["underflow_masked"] = int(dead.sum())
        meta["underflow_note"] = (
            f"marginal survival underflowed from t={first:g}; "
            "hazard values there are masked"
        )
    return EstimandDraws(f"hazard[{treatment}]", h, times=t, meta=meta)


def marginal_cumhaz(post, draws, population, treatment, times=None):
    """Marginal cumulative hazard, the negative log marginal survival."""
    marg = _Marginal(post, draws, population, treatment)
    t = _times_arg(marg, times)
    S, _ = marg.curves(t)
    with np.errstate(divide="ignore"):
        H = -np.log(S)
    return EstimandDraws(f"cumhaz[{treatment}]", H, times=t, meta=marg.meta(t))


def survival_quantile(post, draws, population, treatment, alpha=0.5):
    """Time at which marginal survival falls to ``1 - alpha``, per draw.

    Roots are bracketed by geometric expansion up to the extrapolation
    horizon and then bisected to a relative tolerance of 1e-8.  Draws
    whose curve never reaches the target within the horizon are flagged
    as not reached, the survival-analysis analogue of an unreached
    median, and their value is NaN.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    marg = _Marginal(post, draws, population, treatment)
    target = 1.0 - alpha
    horizon = marg.horizon
    vals = np.empty(marg.n_draws)
    not_reached = np.zeros(marg.n_draws, dtype=bool)
    start = min(max(marg.tmax, 1e-8), horizon)
    for d in range(marg.n_draws):
        if marg.sbar(d, horizon) > target:
            vals[d] = np.nan
            not_reached[d] = True
            continue
        hi = start
        while hi < horizon and marg.sbar(d, hi) > target:
            hi = min(2.0 * hi, horizon)
        lo = 0.0
        while hi - lo > _QUANTILE_RTOL * hi:
            mid = 0.5 * (lo + hi)
            if marg.sbar(d, mid) > target:
                lo = mid
            else:
                hi = mid
        vals[d] = 0.5 * (lo + hi)
    meta = marg.meta()
    meta["alpha"] = alpha
    if not_reached.any():
        meta["not_reached"] = int(not_reached.sum())
    return EstimandDraws(
        f"quantile[{treatment}]", vals, not_reached=not_reached, meta=meta
    )


def _adaptive_simpson(f, a, b, tol):
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    return _simpson_step(f, a, b, fa, fm, fb, whole, tol, 48)


def _simpson_step(f, a, b, fa, fm, fb, whole, tol, depth):
    m = 0.5 * (a + b)
    lm, rm = 0.5 * (a + m), 0.5 * (m + b)
    flm, frm = f(lm), f(rm)
    left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
    right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
    err = left + right - whole
    if depth <= 0 or abs(err) <= 15.0 * tol:
        return left + right + err / 15.0
    return _simpson_step(
        f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1
    ) + _simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)


def rmst(post, draws, population, treatment, tstar):
    """Restricted mean survival time to ``tstar``, per draw.

    The integral of the marginal survival curve over [0, tstar] by
    adaptive composite Simpson quadrature, absolute tolerance
    ``1e-6 * tstar``.  ``tstar=inf`` is allowed only for families whose
    mean provably exists; spline baselines are excluded because their
    hazard extrapolates as zero beyond the upper boundary knot, which
    makes the unrestricted mean infinite.
    """
    model = post.model
    if tstar is None or not tstar > 0:
        raise ValueError("tstar must be positive")
    marg = _Marginal(post, draws, population, treatment)
    unrestricted = not np.isfinite(tstar)
    if unrestricted:
        if model.is_spline:
            raise DataError(
                "rmst with tstar=inf is not available for spline baselines: "
                "the hazard extrapolates as zero beyond the upper boundary "
                "knot, so the unrestricted mean is infinite; pass a finite "
                "tstar within the extrapolation horizon"
            )
        if model.family_name not in _FINITE_MEAN:
            raise DataError(
                f"rmst with tstar=inf needs a family with a provably finite "
                f"mean; {model.family_name} does not guarantee one"
            )
    vals = np.empty(marg.n_draws)
    for d in range(marg.n_draws):
        f = partial(marg.sbar, d)
        if unrestricted:
            upper = marg.horizon
            while f(upper) > 0.1 * _RMST_TOL:
                upper *= 2.0
                if upper > 2**40 * marg.horizon:
                    raise DataError(
                        "rmst with tstar=inf: the survival curve of draw "
                        f"{d} decays too slowly to integrate"
                    )
        else:
            upper = float(tstar)
        vals[d] = _adaptive_simpson(f, 0.0, upper, _RMST_TOL * upper)
    meta = marg.meta(np.array([upper]))
    meta["tstar"] = float(tstar)
    return EstimandDraws(f"rmst[{treatment}]", vals, meta=meta)


def marginal_contrast(post, draws, population, a, b, kind, times=None, tstar=None):
    """Per-draw contrast of a marginal estimand between treatments.

    ``hazard-ratio`` is a curve; the median and rmst kinds are scalars.
    NaN values (masked hazards, unreached medians) propagate.
    """
    if kind == "hazard-ratio":
        ha = marginal_hazard(post, draws, population, a, times)
        hb = marginal_hazard(post, draws, population, b, times)
        with np.errstate(divide="ignore", invalid="ignore"):
            vals = hb.values / ha.values
        meta = dict(hb.meta)
        meta["treatments"] = (a, b)
        return EstimandDraws(
            f"hazard-ratio[{b}/{a}]", vals, times=ha.times, meta=meta
        )
    if kind in ("median-ratio", "median-difference"):
        qa = survival_quantile(post, draws, population, a, alpha=0.5)
        qb = survival_quantile(post, draws, population, b, alpha=0.5)
        vals = (
            qb.values / qa.values
            if kind == "median-ratio"
            else qb.values - qa.values
        )
        meta = dict(qb.meta)
        meta["treatments"] = (a, b)
        return EstimandDraws(
            f"{kind}[{b}/{a}]",
            vals,
            not_reached=qa.not_reached | qb.not_reached,
            meta=meta,
        )
    if kind == "rmst-difference":
        if tstar is None:
            raise ValueError("rmst-difference needs tstar")
        ra = rmst(post, draws, population, a, tstar)
        rb = rmst(post, draws, population, b, tstar)
        meta = dict(rb.meta)
        meta["treatments"] = (a, b)
        return EstimandDraws(f"rmst-difference[{b}/{a}]", rb.values - ra.values, meta=meta)
    raise ValueError(f"unknown contrast kind {kind!r}; choose from {CONTRAST_KINDS}")
