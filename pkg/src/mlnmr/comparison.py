"""Predictive model comparison from per-draw log-likelihood matrices.

Expected log pointwise predictive density is estimated two ways: leave-one-
out cross-validation by Pareto-smoothed importance sampling, and WAIC.  Both
reduce a draws-by-observations log-likelihood matrix to per-observation
contributions whose sum is the ELPD; the reported information criterion is
exactly -2 times that sum.  ``compare`` turns several reports into the
difference tables used for model selection, overall or per study.
"""

from dataclasses import dataclass
import math
import warnings

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from .kernels import logmeanexp

__all__ = ["ElpdReport", "compare", "elpd_diff", "loo", "waic"]

PARETO_K_WARN = 0.7
MIN_TAIL = 5
MIN_DRAWS = 400


@dataclass(frozen=True)
class ElpdReport:
    """Per-observation ELPD decomposition for one fitted model."""

    method: str
    pointwise: np.ndarray
    p_pointwise: np.ndarray
    pointwise_se: np.ndarray
    pareto_k: np.ndarray
    n_draws: int

    @property
    def n_obs(self):
        return self.pointwise.size

    @property
    def elpd(self):
        return float(self.pointwise.sum())

    @property
    def p_eff(self):
        return float(self.p_pointwise.sum())

    @property
    def criterion(self):
        return -2.0 * self.elpd

    @property
    def se(self):
        n = self.n_obs
        return float(math.sqrt(n * self.pointwise.var(ddof=1))) if n > 1 else 0.0

    @property
    def high_k(self):
        """Indices whose Pareto k exceeds the reliability threshold."""
        if self.pareto_k is None:
            return np.array([], dtype=int)
        return np.flatnonzero(self.pareto_k > PARETO_K_WARN)


def _check_matrix(loglik):
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim != 2:
        raise ValueError("loglik must be a draws x observations matrix")
    if ll.shape[0] < 2:
        raise ValueError("need at least 2 draws")
    if not np.isfinite(ll).all():
        raise ValueError("loglik contains non-finite values")
    return ll


def _gpd_fit(y):
    """Generalized-Pareto (k, sigma) for exceedances ``y`` (ascending).

    Profile-posterior point estimate over the reparameterized scale, with
    the shape shrunk toward 1/2 as if by 10 prior observations.
    """
    n = y.size
    quart = y[int(n / 4 + 0.5) - 1]
    if quart <= 0 or y[-1] <= 0:
        return 0.0, 0.0
    m = 30 + int(math.sqrt(n))
    j = np.arange(1, m + 1)
    b = 1.0 / y[-1] + (1.0 - np.sqrt(m / (j - 0.5))) / (3.0 * quart)
    k_b = np.log1p(-b[:, None] * y).mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        profile = n * (np.log(-b / k_b) - k_b - 1.0)
    profile[~np.isfinite(profile)] = -np.inf
    w = np.exp(profile - profile.max())
    w /= w.sum()
    b_hat = float(np.sum(b * w))
    k_hat = float(np.log1p(-b_hat * y).mean())
    sigma = -k_hat / b_hat
    k_hat = (n * k_hat + 5.0) / (n + 10.0)
    return k_hat, sigma


def _gpd_quantiles(p, k, sigma):
    if abs(k) < 1e-12:
        return -sigma * np.log1p(-p)
    return sigma / k * (np.power(1.0 - p, -k) - 1.0)


def _psis_smooth(lw):
    """Smooth one column of raw log importance ratios; returns (lw, khat).

    The largest-M ratios are replaced by expected order statistics of a
    generalized-Pareto fit to their exceedances over the cut point, then
    truncated at the raw maximum.
    """
    s = lw.size
    m = int(min(0.2 * s, 3.0 * math.sqrt(s)))
    x = lw - lw.max()
    if m < MIN_TAIL:
        return x, math.inf
    order = np.argsort(x)
    tail = order[s - m :]
    cut = math.exp(x[order[s - m - 1]])
    y = np.exp(x[tail]) - cut
    if y[-1] <= 0:
        return x, 0.0
    k, sigma = _gpd_fit(y)
    if not math.isfinite(k) or sigma <= 0:
        return x, math.inf
    p = (np.arange(1, m + 1) - 0.5) / m
    smoothed = np.log(_gpd_quantiles(p, k, sigma) + cut)
    out = x.copy()
    out[tail] = np.minimum(smoothed, 0.0)
    return out, k


def loo(loglik):
    """PSIS leave-one-out ELPD from a draws x observations matrix.

    Importance ratios for observation i are exp(-loglik_i); their upper
    tail is Pareto-smoothed before the weighted predictive density is
    formed.  Observations with Pareto k above 0.7 are unreliable and
    surface in ``high_k``.
    """
    ll = _check_matrix(loglik)
    s, n = ll.shape
    if s < MIN_DRAWS:
        warnings.warn(
            f"only {s} draws: PSIS tail fits are unstable below {MIN_DRAWS}",
            stacklevel=2,
        )
    pointwise = np.empty(n)
    p_eff = np.empty(n)
    naive_se = ll.std(axis=0, ddof=1) / math.sqrt(s)
    ks = np.zeros(n)
    for i in range(n):
        col = ll[:, i]
        lppd = logmeanexp(col)
        if np.ptp(col) == 0.0:
            pointwise[i] = col[0]
            p_eff[i] = 0.0
            continue
        lw, k = _psis_smooth(-col)
        ks[i] = k
        pointwise[i] = logsumexp(lw + col) - logsumexp(lw)
        p_eff[i] = lppd - pointwise[i]
    return ElpdReport(
        method="loo",
        pointwise=pointwise,
        p_pointwise=p_eff,
        pointwise_se=naive_se,
        pareto_k=ks,
        n_draws=s,
    )


def waic(loglik):
    """WAIC ELPD: lppd penalized by the per-observation draw variance."""
    ll = _check_matrix(loglik)
    s, n = ll.shape
    lppd = logmeanexp(ll, axis=0)
    p = ll.var(axis=0, ddof=1)
    p[np.ptp(ll, axis=0) == 0.0] = 0.0
    return ElpdReport(
        method="waic",
        pointwise=lppd - p,
        p_pointwise=p,
        pointwise_se=ll.std(axis=0, ddof=1) / math.sqrt(s),
        pareto_k=np.zeros(n),
        n_draws=s,
    )


def elpd_diff(a, b):
    """(ELPD_a - ELPD_b, SE) from paired per-observation contributions."""
    if a.n_obs != b.n_obs:
        raise ValueError(
            f"reports cover different observation sets ({a.n_obs} vs {b.n_obs})"
        )
    d = a.pointwise - b.pointwise
    se = math.sqrt(d.size * d.var(ddof=1)) if d.size > 1 else 0.0
    return float(d.sum()), se


def compare(reports, grouping="overall", study_labels=None):
    """Difference table across models, against the best in each group.

    ``reports`` maps model name to ElpdReport; all must cover the same
    observations.  ``grouping="by-study"`` needs ``study_labels`` (one per
    observation) and sums contributions within each study, comparing
    against the study's best model.
    """
    if grouping not in ("overall", "by-study"):
        raise ValueError(f"unknown grouping {grouping!r}")
    items = list(reports.items())
    if not items:
        raise ValueError("no reports to compare")
    n = items[0][1].n_obs
    for name, rep in items:
        if rep.n_obs != n:
            raise ValueError(
                f"report {name!r} covers {rep.n_obs} observations, expected {n}"
            )
    if grouping == "overall":
        best = max(items, key=lambda kv: kv[1].elpd)[0]
        rows = []
        for name, rep in items:
            d, se = elpd_diff(reports[name], reports[best])
            rows.append(
                {
                    "model": name,
                    "elpd": rep.elpd,
                    "se": rep.se,
                    "p_eff": rep.p_eff,
                    "criterion": rep.criterion,
                    "elpd_diff": d,
                    "se_diff": se,
                }
            )
        out = pd.DataFrame(rows).sort_values("elpd", ascending=False)
        return out.reset_index(drop=True)

    if study_labels is None:
        raise ValueError("by-study comparison needs study_labels")
    labels = np.asarray(study_labels)
    if labels.size != n:
        raise ValueError("study_labels length must match observations")
    rows = []
    for study in pd.unique(labels):
        mask = labels == study
        sub = {
            name: (rep.pointwise[mask], rep.pointwise[mask].sum())
            for name, rep in items
        }
        best = max(sub, key=lambda k: sub[k][1])
        for name, (pw, total) in sub.items():
            d = pw - sub[best][0]
            se = math.sqrt(d.size * d.var(ddof=1)) if d.size > 1 else 0.0
            rows.append(
                {
                    "study": study,
                    "model": name,
                    "elpd": float(total),
                    "elpd_diff": float(d.sum()),
                    "se_diff": se,
                }
            )
    return pd.DataFrame(rows)
