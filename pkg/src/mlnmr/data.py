"""Evidence network data model and CSV ingestion.

A network mixes two kinds of study:

* **IPD studies**: one row per subject with time, status and covariate
  values (``ipd.csv``).
* **Aggregate studies**: event/censoring times per arm, typically
  reconstructed from published curves (``agd_events.csv``), plus marginal
  covariate summaries in long format (``agd_covariates.csv``) and optionally
  a copula correlation (``correlations.csv``).

Loading validates hard (wrong shapes, impossible values, disconnected
networks are errors, not warnings) because everything downstream silently
trusts the result.  All validation failures raise :class:`DataError`, which
the CLI maps to its usage/data exit code.
"""

import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

__all__ = [
    "DataError",
    "CovariateSpec",
    "CovariateSummary",
    "SurvivalRow",
    "IPDArm",
    "AgDArm",
    "Study",
    "Network",
    "load_network",
    "write_network",
    "pool_ipd_correlation",
    "nearest_psd",
    "validate_estimability",
    "EstimabilityReport",
]

MARGINAL_FAMILIES = ("normal", "gamma", "bernoulli")
ROLES = ("prognostic", "effect_modifier")
_STATS = {"mean", "sd", "prop", "shape", "rate"}


class DataError(ValueError):
    """Invalid input data or configuration (CLI exit code 2)."""


@dataclass(frozen=True)
class CovariateSpec:
    """One covariate's marginal family and regression role.

    ``effect_modifier`` columns interact with treatment (and are implicitly
    prognostic too); ``prognostic`` columns enter only the main effects.
    """

    name: str
    marginal_family: str
    role: str = "prognostic"

    def __post_init__(self):
        if self.marginal_family not in MARGINAL_FAMILIES:
            raise DataError(
                f"covariate {self.name!r}: marginal family must be one of "
                f"{MARGINAL_FAMILIES}, got {self.marginal_family!r}"
            )
        if self.role not in ROLES:
            raise DataError(
                f"covariate {self.name!r}: role must be one of {ROLES}, "
                f"got {self.role!r}"
            )

    @property
    def is_effect_modifier(self):
        return self.role == "effect_modifier"

    @property
    def is_continuous(self):
        return self.marginal_family != "bernoulli"


@dataclass
class CovariateSummary:
    """Marginal summary statistics for one population.

    ``stats`` maps covariate name to a dict of the reported statistics
    (mean/sd, shape/rate, prop).  ``correlation`` optionally carries the
    copula correlation in schema column order.
    """

    stats: dict
    correlation: np.ndarray = None

    def marginal(self, spec):
        """(family, params) for one covariate, ready for grid construction."""
        s = self.stats.get(spec.name)
        if s is None:
            raise DataError(f"no summary statistics for covariate {spec.name!r}")
        fam = spec.marginal_family
        if fam == "normal":
            if not {"mean", "sd"} <= set(s):
                raise DataError(
                    f"normal covariate {spec.name!r} needs mean and sd, got {sorted(s)}"
                )
            if s["sd"] <= 0:
                raise DataError(f"covariate {spec.name!r}: sd must be positive")
            return "normal", {"mean": s["mean"], "sd": s["sd"]}
        if fam == "gamma":
            if {"shape", "rate"} <= set(s):
                if s["shape"] <= 0 or s["rate"] <= 0:
                    raise DataError(
                        f"covariate {spec.name!r}: shape and rate must be positive"
                    )
                return "gamma", {"shape": s["shape"], "rate": s["rate"]}
            if {"mean", "sd"} <= set(s):
                if s["mean"] <= 0 or s["sd"] <= 0:
                    raise DataError(
                        f"gamma covariate {spec.name!r}: mean and sd must be positive"
                    )
                return "gamma", {"mean": s["mean"], "sd": s["sd"]}
            raise DataError(
                f"gamma covariate {spec.name!r} needs shape+rate or mean+sd, "
                f"got {sorted(s)}"
            )
        if fam == "bernoulli":
            if "prop" not in s:
                raise DataError(f"bernoulli covariate {spec.name!r} needs prop")
            if not 0.0 <= s["prop"] <= 1.0:
                raise DataError(
                    f"covariate {spec.name!r}: prop must be in [0, 1], got {s['prop']}"
                )
            return "bernoulli", {"prop": s["prop"]}
        raise DataError(fam)

    def mean(self, spec):
        fam, params = self.marginal(spec)
        if fam == "normal":
            return params["mean"]
        if fam == "gamma":
            if "mean" in params:
                return params["mean"]
            return params["shape"] / params["rate"]
        return params["prop"]


@dataclass(frozen=True)
class SurvivalRow:
    """One observation: a subject (IPD) or a digitised event row (AgD)."""

    study: str
    treatment: str
    time: float
    status: int
    covariates: dict = None


@dataclass
class IPDArm:
    treatment: str
    time: np.ndarray
    status: np.ndarray
    x: np.ndarray  # (n, p) covariate values in schema order

    @property
    def n(self):
        return len(self.time)


@dataclass
class AgDArm:
    treatment: str
    time: np.ndarray
    status: np.ndarray
    summary: CovariateSummary

    @property
    def n(self):
        return len(self.time)


@dataclass
class Study:
    name: str
    kind: str  # "ipd" | "agd"
    arms: list

    @property
    def treatments(self):
        return [a.treatment for a in self.arms]

    @property
    def n(self):
        return sum(a.n for a in self.arms)


@dataclass
class Network:
    """A connected evidence network over a common covariate schema."""

    studies: list
    treatments: tuple  # reference first
    covariates: tuple  # CovariateSpec, fixed column order

    @property
    def reference(self):
        return self.treatments[0]

    @property
    def covariate_names(self):
        return tuple(c.name for c in self.covariates)

    @property
    def n_obs(self):
        return sum(s.n for s in self.studies)

    def ipd_studies(self):
        return [s for s in self.studies if s.kind == "ipd"]

    def agd_studies(self):
        return [s for s in self.studies if s.kind == "agd"]

    def study(self, name):
        for s in self.studies:
            if s.name == name:
                return s
        raise DataError(f"no study named {name!r} in the network")

    def treatment_index(self, treatment):
        try:
            return self.treatments.index(treatment)
        except ValueError:
            raise DataError(f"unknown treatment {treatment!r}") from None

    def rows(self):
        """Iterate all observations as :class:`SurvivalRow`."""
        names = self.covariate_names
        for s in self.studies:
            for arm in s.arms:
                for i in range(arm.n):
                    cov = None
                    if isinstance(arm, IPDArm):
                        cov = dict(zip(names, arm.x[i]))
                    yield SurvivalRow(
                        s.name, arm.treatment, float(arm.time[i]), int(arm.status[i]), cov
                    )

    def grand_mean(self):
        """Row-count-weighted mean of each covariate over all arms.

        Used as the centring point for continuous covariates during
        fitting; aggregate arms contribute their summary means.
        """
        p = len(self.covariates)
        total = np.zeros(p)
        weight = 0.0
        for s in self.studies:
            for arm in s.arms:
                if isinstance(arm, IPDArm):
                    total += arm.x.sum(axis=0)
                else:
                    means = np.array(
                        [arm.summary.mean(c) for c in self.covariates]
                    )
                    total += means * arm.n
                weight += arm.n
        return total / weight


# --------------------------------------------------------------- ingestion


def _as_frame(obj):
    if obj is None:
        return None
    if isinstance(obj, pd.DataFrame):
        return obj.copy()
    return pd.read_csv(obj)


def _check_columns(df, required, label):
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataError(f"{label}: missing required column(s) {missing}")


def _check_times_status(df, label):
    t = pd.to_numeric(df["time"], errors="coerce")
    if t.isna().any() or not np.all(np.isfinite(t)):
        raise DataError(f"{label}: non-numeric or missing time values")
    if (t <= 0).any():
        raise DataError(f"{label}: times must be strictly positive")
    s = pd.to_numeric(df["status"], errors="coerce")
    if s.isna().any() or not s.isin([0, 1]).all():
        raise DataError(f"{label}: status must be exactly 0 or 1")
    df["time"] = t.astype(float)
    df["status"] = s.astype(int)


def _connected_components(studies):
    """Components of the treatment graph (treatments joined within studies)."""
    treatments = sorted({t for s in studies for t in s.treatments})
    adjacency = {t: set() for t in treatments}
    for s in studies:
        ts = s.treatments
        for a in ts:
            adjacency[a].update(x for x in ts if x != a)
    seen, comps = set(), []
    for t in treatments:
        if t in seen:
            continue
        stack, comp = [t], set()
        while stack:
            cur = stack.pop()
            if cur in comp:
                continue
            comp.add(cur)
            stack.extend(adjacency[cur] - comp)
        seen |= comp
        comps.append(sorted(comp))
    return comps


def _parse_agd_summaries(df, covariates, studies_present):
    """Long-format summary rows -> per-study and per-(study, arm) stats."""
    _check_columns(df, ["study", "covariate", "stat", "value"], "agd_covariates")
    has_arm = "treatment" in df.columns
    by_name = {c.name: c for c in covariates}
    study_stats = {}
    arm_stats = {}
    for _, row in df.iterrows():
        study = str(row["study"])
        name = str(row["covariate"])
        stat = str(row["stat"])
        if study not in studies_present:
            raise DataError(
                f"agd_covariates: study {study!r} has no rows in agd_events"
            )
        if name not in by_name:
            raise DataError(
                f"agd_covariates: covariate {name!r} is not in the schema "
                f"({sorted(by_name)})"
            )
        if stat not in _STATS:
            raise DataError(
                f"agd_covariates: unknown stat {stat!r} (must be one of {sorted(_STATS)})"
            )
        value = float(row["value"])
        arm = None
        if has_arm and not pd.isna(row["treatment"]):
            arm = str(row["treatment"])
        target = study_stats if arm is None else arm_stats
        key = study if arm is None else (study, arm)
        target.setdefault(key, {}).setdefault(name, {})[stat] = value
    return study_stats, arm_stats


def load_network(
    ipd=None,
    agd_events=None,
    agd_covariates=None,
    covariates=(),
    correlations=None,
    reference=None,
):
    """Assemble and validate a :class:`Network` from tabular inputs.

    Parameters
    ----------
    ipd : path or DataFrame, optional
        Columns ``study, treatment, time, status`` plus one column per
        schema covariate.
    agd_events : path or DataFrame, optional
        Columns ``study, treatment, time, status``; one row per digitised
        event or censoring.
    agd_covariates : path or DataFrame, optional
        Long format ``study, covariate, stat, value`` with an optional
        ``treatment`` column for arm-level summaries (arm-level rows win,
        study-level rows fill the gaps).  Required when aggregate studies
        have covariates in the schema.
    covariates : sequence of CovariateSpec
        The common covariate schema, in model column order.
    correlations : path or DataFrame, optional
        Long format ``covariate1, covariate2, value`` (optionally with a
        ``study`` column) giving copula correlations for aggregate
        populations.  When omitted, the pooled IPD correlation is used at
        grid-building time.
    reference : str, optional
        Network reference treatment; defaults to the lexicographically
        first.
    """
    covariates = tuple(covariates)
    names = [c.name for c in covariates]
    if len(set(names)) != len(names):
        raise DataError(f"duplicate covariate names in schema: {names}")

    ipd_df = _as_frame(ipd)
    agd_df = _as_frame(agd_events)
    cov_df = _as_frame(agd_covariates)
    corr_df = _as_frame(correlations)
    if ipd_df is None and agd_df is None:
        raise DataError("no data: need ipd and/or agd_events")

    studies = []
    ipd_names = set()
    if ipd_df is not None and len(ipd_df):
        _check_columns(ipd_df, ["study", "treatment", "time", "status"], "ipd")
        _check_columns(ipd_df, names, "ipd")
        _check_times_status(ipd_df, "ipd")
        for col in names:
            vals = pd.to_numeric(ipd_df[col], errors="coerce")
            if vals.isna().any():
                raise DataError(f"ipd: covariate column {col!r} has missing values")
            ipd_df[col] = vals.astype(float)
        for study, sdf in ipd_df.groupby("study", sort=True):
            arms = []
            for trt, adf in sdf.groupby("treatment", sort=True):
                arms.append(
                    IPDArm(
                        treatment=str(trt),
                        time=adf["time"].to_numpy(),
                        status=adf["status"].to_numpy(),
                        x=adf[names].to_numpy() if names else np.empty((len(adf), 0)),
                    )
                )
            studies.append(Study(str(study), "ipd", arms))
            ipd_names.add(str(study))

    if agd_df is not None and len(agd_df):
        _check_columns(agd_df, ["study", "treatment", "time", "status"], "agd_events")
        _check_times_status(agd_df, "agd_events")
        agd_present = {str(s) for s in agd_df["study"].unique()}
        overlap = agd_present & ipd_names
        if overlap:
            raise DataError(
                f"studies appear in both ipd and agd_events: {sorted(overlap)}"
            )
        study_stats, arm_stats = {}, {}
        if cov_df is not None and len(cov_df):
            study_stats, arm_stats = _parse_agd_summaries(
                cov_df, covariates, agd_present
            )
        elif covariates:
            raise DataError(
                "aggregate studies present with a covariate schema but no "
                "agd_covariates table"
            )
        corr_by_study = _parse_correlations(corr_df, names) if corr_df is not None else {}
        for study, sdf in agd_df.groupby("study", sort=True):
            study = str(study)
            arms = []
            for trt, adf in sdf.groupby("treatment", sort=True):
                trt = str(trt)
                stats = {}
                for name in names:
                    arm_level = arm_stats.get((study, trt), {}).get(name)
                    base = study_stats.get(study, {}).get(name)
                    if arm_level is not None:
                        merged = dict(base or {})
                        merged.update(arm_level)
                        stats[name] = merged
                    elif base is not None:
                        stats[name] = dict(base)
                summary = CovariateSummary(
                    stats=stats,
                    correlation=corr_by_study.get(study, corr_by_study.get(None)),
                )
                # validate completeness now, not at grid time
                for spec in covariates:
                    summary.marginal(spec)
                arms.append(
                    AgDArm(
                        treatment=trt,
                        time=adf["time"].to_numpy(),
                        status=adf["status"].to_numpy(),
                        summary=summary,
                    )
                )
            studies.append(Study(study, "agd", arms))

    if not studies:
        raise DataError("no study rows found in the inputs")

    comps = _connected_components(studies)
    if len(comps) > 1:
        raise DataError(
            "network is disconnected; treatment components: "
            + "; ".join("{" + ", ".join(c) + "}" for c in comps)
        )

    all_treatments = sorted({t for s in studies for t in s.treatments})
    if reference is None:
        reference = all_treatments[0]
    if reference not in all_treatments:
        raise DataError(
            f"reference treatment {reference!r} does not appear in the data"
        )
    ordered = (reference,) + tuple(t for t in all_treatments if t != reference)
    studies.sort(key=lambda s: s.name)
    return Network(studies=studies, treatments=ordered, covariates=covariates)


def _parse_correlations(df, names):
    _check_columns(df, ["covariate1", "covariate2", "value"], "correlations")
    p = len(names)
    idx = {n: i for i, n in enumerate(names)}
    out = {}
    has_study = "study" in df.columns
    for key, part in df.groupby("study", sort=True) if has_study else [(None, df)]:
        mat = np.eye(p)
        for _, row in part.iterrows():
            a, b = str(row["covariate1"]), str(row["covariate2"])
            if a not in idx or b not in idx:
                raise DataError(
                    f"correlations: unknown covariate pair ({a!r}, {b!r})"
                )
            v = float(row["value"])
            if not -1.0 <= v <= 1.0:
                raise DataError(f"correlations: value {v} outside [-1, 1]")
            mat[idx[a], idx[b]] = mat[idx[b], idx[a]] = v
        out[None if key is None else str(key)] = mat
    return out


def write_network(network, directory):
    """Write a network back to the CSV layout :func:`load_network` reads."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = list(network.covariate_names)
    ipd_rows, agd_rows, cov_rows = [], [], []
    for s in network.studies:
        for arm in s.arms:
            if isinstance(arm, IPDArm):
                for i in range(arm.n):
                    row = {
                        "study": s.name,
                        "treatment": arm.treatment,
                        "time": arm.time[i],
                        "status": arm.status[i],
                    }
                    row.update(dict(zip(names, arm.x[i])))
                    ipd_rows.append(row)
            else:
                for i in range(arm.n):
                    agd_rows.append(
                        {
                            "study": s.name,
                            "treatment": arm.treatment,
                            "time": arm.time[i],
                            "status": arm.status[i],
                        }
                    )
                for name, stats in arm.summary.stats.items():
                    for stat, value in stats.items():
                        cov_rows.append(
                            {
                                "study": s.name,
                                "treatment": arm.treatment,
                                "covariate": name,
                                "stat": stat,
                                "value": value,
                            }
                        )
    paths = {}
    if ipd_rows:
        paths["ipd"] = directory / "ipd.csv"
        pd.DataFrame(ipd_rows).to_csv(paths["ipd"], index=False)
    if agd_rows:
        paths["agd_events"] = directory / "agd_events.csv"
        pd.DataFrame(agd_rows).to_csv(paths["agd_events"], index=False)
    if cov_rows:
        paths["agd_covariates"] = directory / "agd_covariates.csv"
        pd.DataFrame(cov_rows).to_csv(paths["agd_covariates"], index=False)
    return paths


# ----------------------------------------------------------- correlations


def nearest_psd(matrix):
    """Project a symmetric matrix to the nearest unit-diagonal PSD matrix.

    Eigenvalues are clipped at zero and the diagonal rescaled back to one;
    applying it to an already-PSD correlation matrix is a no-op, and the
    projection is idempotent.
    """
    m = np.asarray(matrix, dtype=float)
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    if vals.min() >= 0 and np.allclose(np.diag(m), 1.0, atol=1e-12):
        return m
    vals = np.clip(vals, 0.0, None)
    fixed = (vecs * vals) @ vecs.T
    d = np.sqrt(np.clip(np.diag(fixed), 1e-12, None))
    fixed = fixed / np.outer(d, d)
    np.fill_diagonal(fixed, 1.0)
    return 0.5 * (fixed + fixed.T)


def pool_ipd_correlation(network):
    """Subject-count-weighted Pearson correlation pooled over IPD studies.

    Zero-variance columns contribute zero correlation (with a warning);
    the pooled matrix is projected to PSD.  Returns the identity when the
    network has no IPD studies.
    """
    p = len(network.covariates)
    acc = np.zeros((p, p))
    weight = 0.0
    for s in network.ipd_studies():
        x = np.vstack([arm.x for arm in s.arms])
        n = x.shape[0]
        if n < 2:
            continue
        sd = x.std(axis=0)
        degenerate = sd == 0
        if degenerate.any():
            warnings.warn(
                f"study {s.name!r}: zero-variance covariate(s) "
                f"{[network.covariate_names[i] for i in np.nonzero(degenerate)[0]]}; "
                "treated as uncorrelated",
                RuntimeWarning,
                stacklevel=2,
            )
        with np.errstate(invalid="ignore", divide="ignore"):
            c = np.corrcoef(x, rowvar=False)
        c = np.atleast_2d(c)
        c[~np.isfinite(c)] = 0.0
        np.fill_diagonal(c, 1.0)
        acc += n * c
        weight += n
    if weight == 0:
        return np.eye(p)
    return nearest_psd(acc / weight)


# ----------------------------------------------------------- estimability


@dataclass
class EstimabilityReport:
    """Which treatment-specific effect-modifier interactions the data can pin
    down, and whether the shared-interaction option is needed instead."""

    columns: dict = field(default_factory=dict)
    requires_shared: bool = False

    def describe(self):
        lines = []
        for name, per_trt in self.columns.items():
            bad = [t for t, e in per_trt.items() if not e["estimable"]]
            if bad:
                lines.append(
                    f"effect modifier {name!r}: independent interactions NOT "
                    f"estimable for treatment(s) {bad}; use the shared "
                    "effect-modifier option"
                )
            else:
                lines.append(
                    f"effect modifier {name!r}: independent interactions estimable"
                )
        if not lines:
            lines.append("no effect modifiers in the schema")
        return "\n".join(lines)


def validate_estimability(network):
    """First-order identifiability report for independent interactions.

    A treatment's interaction with an effect modifier is counted estimable
    when the treatment appears in at least two populations with distinct
    covariate means, or in a multi-arm IPD study where the covariate varies
    within the sample.  This reports; it never changes the model.
    """
    report = EstimabilityReport()
    em_specs = [c for c in network.covariates if c.is_effect_modifier]
    non_ref = network.treatments[1:]
    for spec in em_specs:
        per_trt = {}
        for trt in non_ref:
            means = []
            ipd_pairs = False
            for s in network.studies:
                if trt not in s.treatments:
                    continue
                if s.kind == "ipd":
                    x = np.vstack([arm.x for arm in s.arms])
                    col = network.covariate_names.index(spec.name)
                    means.append(round(float(x[:, col].mean()), 8))
                    if len(s.arms) >= 2 and x[:, col].std() > 0:
                        ipd_pairs = True
                else:
                    arm = next(a for a in s.arms if a.treatment == trt)
                    means.append(round(float(arm.summary.mean(spec)), 8))
            n_distinct = len(set(means))
            per_trt[trt] = {
                "populations": len(means),
                "distinct_means": n_distinct,
                "ipd_within": ipd_pairs,
                "estimable": ipd_pairs or n_distinct >= 2,
            }
        report.columns[spec.name] = per_trt
        if any(not e["estimable"] for e in per_trt.values()):
            report.requires_shared = True
    return report


def file_checksum(path):
    """SHA-256 of a file, for run-report provenance."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
