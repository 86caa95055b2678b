"""Joint log-posterior for network meta-regression of survival outcomes.

Assembles the linear predictor, individual conditional likelihoods for IPD
arms, QMC-marginalized likelihoods for aggregate arms, priors with their
transform Jacobians, and hand-derived gradients of the whole composite on
the unconstrained scale.
"""

import re
from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import DataError, IPDArm, pool_ipd_correlation
from .families import SPLINE_FAMILIES, get_family
from .integration import build_grid
from .spline import (
    KnotSequence,
    SplineBasis,
    default_knots,
    rw_prior_scaffold,
    softmax_simplex,
)

__all__ = [
    "Prior",
    "PriorSet",
    "Posterior",
    "SurvivalModel",
    "parse_prior",
]

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


# ------------------------------------------------------------------ priors


@dataclass(frozen=True)
class Prior:
    """A prior for one parameter block.

    ``normal`` applies on the sampled (identity-transformed) scale;
    ``half_normal`` applies to a positive parameter sampled as its log,
    with the log-Jacobian included in the density.
    """

    kind: str
    loc: float
    scale: float

    def __post_init__(self):
        if self.kind not in ("normal", "half_normal"):
            raise ValueError(f"unsupported prior family {self.kind!r}")
        if self.scale <= 0:
            raise ValueError("prior scale must be positive")
        if self.kind == "half_normal" and self.loc != 0.0:
            raise ValueError("half_normal prior must be centred at zero")

    def logpdf_grad(self, theta):
        """(log density, d/d theta) elementwise on the unconstrained scale."""
        theta = np.asarray(theta, dtype=float)
        if self.kind == "normal":
            z = (theta - self.loc) / self.scale
            lp = -0.5 * z * z - np.log(self.scale) - _LOG_SQRT_2PI
            return lp, -z / self.scale
        a = np.exp(theta)
        r = (a / self.scale) ** 2
        lp = np.log(2.0) - np.log(self.scale) - _LOG_SQRT_2PI - 0.5 * r + theta
        return lp, 1.0 - r

    def sample(self, rng, size):
        if self.kind == "normal":
            return rng.normal(self.loc, self.scale, size)
        return np.log(np.abs(rng.normal(0.0, self.scale, size)))

    def describe(self):
        return f"{self.kind}({self.loc:g}, {self.scale:g})"


_PRIOR_RE = re.compile(r"^\s*(\w+)\s*\(\s*([^,\s]+)\s*,\s*([^)\s]+)\s*\)\s*$")


def parse_prior(text):
    """Parse ``"normal(0, 100)"`` / ``"half_normal(0, 10)"`` prior strings."""
    if isinstance(text, Prior):
        return text
    m = _PRIOR_RE.match(str(text))
    if m is None:
        raise ValueError(
            f"cannot parse prior {text!r}; expected e.g. 'normal(0, 100)'"
        )
    return Prior(m.group(1).lower(), float(m.group(2)), float(m.group(3)))


@dataclass(frozen=True)
class PriorSet:
    """Priors per parameter block, defaulting to the reference analysis."""

    intercept: Prior = Prior("normal", 0.0, 100.0)
    beta1: Prior = Prior("normal", 0.0, 100.0)
    beta2: Prior = Prior("normal", 0.0, 100.0)
    gamma: Prior = Prior("normal", 0.0, 100.0)
    aux: Prior = Prior("half_normal", 0.0, 10.0)
    rw_sd: Prior = Prior("half_normal", 0.0, 1.0)
    tau: Prior = Prior("half_normal", 0.0, 1.0)

    @classmethod
    def from_mapping(cls, mapping):
        if mapping is None:
            return cls()
        if isinstance(mapping, PriorSet):
            return mapping
        known = set(cls.__dataclass_fields__)
        bad = set(mapping) - known
        if bad:
            raise ValueError(f"unknown prior blocks: {sorted(bad)}")
        return cls(**{k: parse_prior(v) for k, v in mapping.items()})

    def describe(self):
        return {k: getattr(self, k).describe() for k in self.__dataclass_fields__}


# --------------------------------------------------- model-internal layout


@dataclass
class _Arm:
    study_idx: int
    study: str
    treatment: str
    kind: str  # "ipd" | "agd"
    t: np.ndarray
    logt: np.ndarray
    c: np.ndarray
    row_lo: int
    row_hi: int
    stratum: int
    class_idx: int  # index into beta2 classes, -1 for reference
    gamma_idx: int  # index into gamma vector, -1 when the term is zero
    re_pos: int  # position in the study's deviation vector, -1 for baseline
    x_all: np.ndarray = None  # IPD: centred (n, p)
    x_em: np.ndarray = None
    marginals: tuple = None  # AgD: per-covariate (family, params)
    correlation: np.ndarray = None
    m_mat: np.ndarray = None  # spline basis at the row times
    i_mat: np.ndarray = None


@dataclass
class _Stratum:
    label: str
    basis: SplineBasis = None
    rw_c: np.ndarray = None
    rw_w: np.ndarray = None


def _re_cholesky(m):
    """Cholesky factor of the deviation correlation (1 diag, 1/2 off)."""
    return np.linalg.cholesky(0.5 * (np.eye(m) + np.ones((m, m))))


class SurvivalModel:
    """A survival meta-regression model bound to an evidence network.

    Parameters
    ----------
    network : Network
        Loaded evidence network.
    family : str
        Outcome family name; ``"mspline"`` and ``"pexp"`` select the
        flexible baseline-hazard models.
    effects : {"fixed", "random"}
        Treatment-effect model.  Random effects draw study deviations
        around the mean effects with between-study standard deviation tau;
        multi-arm studies use the standard correlated construction.
    inconsistency : {"consistency", "ume"}
        ``"ume"`` replaces the consistency treatment effects with an
        unrelated mean effect per observed (study-baseline, treatment)
        design pair.
    shared_effect_modifiers : mapping, optional
        Treatment -> class label map; treatments in the same class share
        their effect-modifier coefficients.  Unmapped non-reference
        treatments get independent coefficients.
    baseline_strata : {"study", "study-and-arm"}
        Whether auxiliary (shape / spline) parameters are stratified by
        study or by individual arm.
    n_knots : int
        Internal knot count for the spline baselines.
    knots : mapping, optional
        Stratum label -> knot override (KnotSequence or internal knots).
    priors : PriorSet or mapping, optional
    center : bool
        Centre continuous covariates at the network grand mean during
        fitting (reported parameters are always on the original scale).
    """

    def __init__(
        self,
        network,
        family,
        *,
        effects="fixed",
        inconsistency="consistency",
        shared_effect_modifiers=None,
        baseline_strata="study",
        n_knots=7,
        kappa=None,
        knots=None,
        priors=None,
        center=True,
    ):
        if effects not in ("fixed", "random"):
            raise ValueError(f"effects must be 'fixed' or 'random', got {effects!r}")
        if inconsistency not in ("consistency", "ume"):
            raise ValueError(
                f"inconsistency must be 'consistency' or 'ume', got {inconsistency!r}"
            )
        if baseline_strata not in ("study", "study-and-arm"):
            raise ValueError(
                "baseline_strata must be 'study' or 'study-and-arm', "
                f"got {baseline_strata!r}"
            )
        self.network = network
        self.family_name = family
        self.is_spline = family in SPLINE_FAMILIES
        self.family = None if self.is_spline else get_family(family)
        self.effects = effects
        self.inconsistency = inconsistency
        self.baseline_strata = baseline_strata
        self.priors = PriorSet.from_mapping(priors)
        self.center = center

        covs = network.covariates
        self.p = len(covs)
        self.em_idx = np.array(
            [i for i, c in enumerate(covs) if c.is_effect_modifier], dtype=int
        )
        self.p_em = len(self.em_idx)
        self.studies = [s.name for s in network.studies]
        self.treatments = list(network.treatments)

        self._build_classes(shared_effect_modifiers)
        self._build_gamma_index()
        self._build_random_effects()
        self._build_centering()
        self._build_strata(n_knots, kappa, knots)
        self._build_arms()
        self._build_layout()
        self._posteriors = {}

    # -- construction pieces

    def _build_classes(self, mapping):
        ref = self.treatments[0]
        mapping = dict(mapping or {})
        if ref in mapping:
            raise DataError(
                f"reference treatment {ref!r} cannot have effect-modifier "
                "coefficients"
            )
        for t in mapping:
            if t not in self.treatments:
                raise DataError(f"shared_effect_modifiers: unknown treatment {t!r}")
        labels = []
        self.class_of = {}
        for t in self.treatments[1:]:
            label = str(mapping.get(t, t))
            if label not in labels:
                labels.append(label)
            self.class_of[t] = labels.index(label)
        self.class_labels = labels
        self.n_classes = len(labels) if self.p_em else 0
        if not self.p_em:
            self.class_of = {t: -1 for t in self.treatments[1:]}

    def _study_baseline(self, study):
        return study.arms[0].treatment

    def _build_gamma_index(self):
        net = self.network
        if self.inconsistency == "consistency":
            self.gamma_labels = list(self.treatments[1:])
            self._gamma_of = {t: i for i, t in enumerate(self.treatments[1:])}
        else:
            pairs = set()
            for s in net.studies:
                b = self._study_baseline(s)
                for arm in s.arms[1:]:
                    pairs.add((b, arm.treatment))
            order = {t: i for i, t in enumerate(self.treatments)}
            pairs = sorted(pairs, key=lambda p: (order[p[0]], order[p[1]]))
            self.gamma_labels = [f"{b}:{k}" for b, k in pairs]
            self._gamma_of = {p: i for i, p in enumerate(pairs)}
        self.n_gamma = len(self.gamma_labels)

    def _build_random_effects(self):
        self.re_studies = []  # (study_idx, n_dev, cholesky)
        self._re_offset_of = {}
        if self.effects != "random":
            self.n_re = 0
            return
        counts = {}
        for s in self.network.studies:
            b = self._study_baseline(s)
            for arm in s.arms[1:]:
                key = tuple(sorted((b, arm.treatment)))
                counts[key] = counts.get(key, 0) + 1
        if not counts or max(counts.values()) < 2:
            raise DataError(
                "random effects require at least one treatment contrast "
                "observed in two or more studies"
            )
        off = 0
        for j, s in enumerate(self.network.studies):
            m = len(s.arms) - 1
            if m == 0:
                continue
            self.re_studies.append((j, m, _re_cholesky(m)))
            self._re_offset_of[j] = off
            off += m
        self.n_re = off

    def _build_centering(self):
        net = self.network
        mean = net.grand_mean() if self.p else np.zeros(0)
        cont = np.array([c.is_continuous for c in net.covariates], dtype=bool)
        self.center_point = np.where(cont, mean, 0.0) if self.center else np.zeros(self.p)

    def _stratum_label(self, study, arm):
        if self.baseline_strata == "study":
            return study.name
        return f"{study.name}/{arm.treatment}"

    def _build_strata(self, n_knots, kappa, knot_overrides):
        net = self.network
        self.strata = []
        self._stratum_of = {}
        if self.is_spline and kappa is None:
            kappa = SPLINE_FAMILIES[self.family_name]
        self.kappa = kappa
        overrides = dict(knot_overrides or {})
        for s in net.studies:
            groups = [s.arms] if self.baseline_strata == "study" else [[a] for a in s.arms]
            for arms in groups:
                label = self._stratum_label(s, arms[0])
                idx = len(self.strata)
                for a in arms:
                    self._stratum_of[(s.name, a.treatment)] = idx
                if not self.is_spline:
                    self.strata.append(_Stratum(label))
                    continue
                times = np.concatenate([a.time for a in arms])
                status = np.concatenate([a.status for a in arms])
                ov = overrides.pop(label, None)
                if ov is None:
                    ks = default_knots(times, n_knots, status=status)
                elif isinstance(ov, KnotSequence):
                    ks = ov
                else:
                    ks = KnotSequence(0.0, float(times.max()), tuple(ov))
                basis = SplineBasis(ks, kappa=kappa)
                c, w = rw_prior_scaffold(ks, kappa)
                self.strata.append(_Stratum(label, basis, c, w))
        if overrides:
            raise DataError(f"knots: unknown strata {sorted(overrides)}")
        self.n_strata = len(self.strata)
        self.n_aux = 0 if self.is_spline else len(self.family.aux_names)

    def _arm_gamma_route(self, study, arm):
        """(gamma_idx, re_pos) for one arm under the configured options."""
        b = self._study_baseline(study)
        k = arm.treatment
        ref = self.treatments[0]
        if self.inconsistency == "ume":
            g = -1 if k == b else self._gamma_of[(b, k)]
        else:
            g = -1 if k == ref else self._gamma_of[k]
        re_pos = -1
        if self.effects == "random" and k != b:
            re_pos = study.treatments.index(k) - 1
        if self.inconsistency == "consistency" and self.effects == "random":
            # baseline arm keeps its consistency gamma; handled by g above
            pass
        return g, re_pos

    def _build_arms(self):
        net = self.network
        pooled = None
        self.arms = []
        self.obs_study = []
        self.obs_treatment = []
        lo = 0
        for j, s in enumerate(net.studies):
            for arm in s.arms:
                n = arm.n
                g, re_pos = self._arm_gamma_route(s, arm)
                cls = self.class_of.get(arm.treatment, -1)
                blk = _Arm(
                    study_idx=j,
                    study=s.name,
                    treatment=arm.treatment,
                    kind="ipd" if isinstance(arm, IPDArm) else "agd",
                    t=np.asarray(arm.time, dtype=float),
                    logt=np.log(np.asarray(arm.time, dtype=float)),
                    c=np.asarray(arm.status, dtype=float),
                    row_lo=lo,
                    row_hi=lo + n,
                    stratum=self._stratum_of[(s.name, arm.treatment)],
                    class_idx=cls,
                    gamma_idx=g,
                    re_pos=re_pos,
                )
                if blk.kind == "ipd":
                    x = np.asarray(arm.x, dtype=float) - self.center_point
                    blk.x_all = x
                    blk.x_em = x[:, self.em_idx]
                else:
                    blk.marginals = tuple(
                        arm.summary.marginal(c) for c in net.covariates
                    )
                    corr = arm.summary.correlation
                    if corr is None and self.p > 1:
                        if pooled is None:
                            pooled = pool_ipd_correlation(net)
                        corr = pooled
                    blk.correlation = corr
                if self.is_spline:
                    basis = self.strata[blk.stratum].basis
                    blk.m_mat = basis.m_matrix(blk.t)
                    blk.i_mat = basis.i_matrix(blk.t)
                self.arms.append(blk)
                self.obs_study.extend([s.name] * n)
                self.obs_treatment.extend([arm.treatment] * n)
                lo += n
        self.n_obs = lo

    def _build_layout(self):
        names = []
        self.idx_mu = slice(0, len(self.studies))
        names += [f"mu[{s}]" for s in self.studies]
        lo = len(names)
        self.idx_beta1 = slice(lo, lo + self.p)
        names += [f"beta1[{c}]" for c in self.network.covariate_names]
        lo = len(names)
        em_names = [self.network.covariate_names[i] for i in self.em_idx]
        self.idx_beta2 = slice(lo, lo + self.n_classes * self.p_em)
        for lab in self.class_labels if self.n_classes else []:
            names += [f"beta2[{lab}:{c}]" for c in em_names]
        lo = len(names)
        self.idx_gamma = slice(lo, lo + self.n_gamma)
        names += [f"gamma[{g}]" for g in self.gamma_labels]
        lo = len(names)
        self.idx_re = slice(lo, lo + self.n_re)
        for j, m, _ in self.re_studies:
            s = self.network.studies[j]
            names += [f"re_z[{s.name}:{a.treatment}]" for a in s.arms[1:]]
        lo = len(names)
        self.has_tau = self.effects == "random"
        self.idx_tau = lo if self.has_tau else -1
        if self.has_tau:
            names.append("log_tau")
        lo = len(names)
        self.idx_aux = slice(lo, lo + self.n_strata * self.n_aux)
        if self.n_aux:
            for st in self.strata:
                names += [f"log_{a}[{st.label}]" for a in self.family.aux_names]
        lo = len(names)
        self.spline_slices = []
        if self.is_spline:
            for st in self.strata:
                nb = st.basis.n_basis
                z = slice(lo, lo + nb - 1)
                names += [f"spline_z[{st.label}:{i + 1}]" for i in range(nb - 1)]
                lo += nb - 1
                names.append(f"log_rw_sd[{st.label}]")
                self.spline_slices.append((z, lo))
                lo += 1
        self.n_params = len(names)
        self.param_names = names

    # -- public API

    @property
    def has_agd(self):
        return any(a.kind == "agd" for a in self.arms)

    def posterior(self, n_int=64):
        """The joint posterior with aggregate grids of ``n_int`` points."""
        if n_int not in self._posteriors:
            self._posteriors[n_int] = Posterior(self, n_int)
        return self._posteriors[n_int]

    def linear_predictor(self, values, study, treatment, x):
        """Natural-scale linear predictor for one covariate vector.

        ``values`` is a nested mapping with entries ``mu`` (per study),
        ``beta1``, ``beta2`` (per treatment or class label), and ``gamma``
        (per treatment, or ``"baseline:treatment"`` under UME).
        """
        net = self.network
        s = net.study(study)
        if treatment not in s.treatments:
            raise DataError(f"treatment {treatment!r} is not in study {study!r}")
        x = np.asarray(x, dtype=float)
        if x.shape != (self.p,):
            raise DataError(f"covariate vector must have length {self.p}")
        eta = float(values["mu"][study])
        beta1 = np.asarray(values.get("beta1", np.zeros(self.p)), dtype=float)
        eta += float(x @ beta1)
        ref = self.treatments[0]
        if treatment != ref and self.p_em:
            beta2 = values.get("beta2", {})
            lab = self.class_labels[self.class_of[treatment]]
            b2 = beta2.get(treatment, beta2.get(lab))
            if b2 is not None:
                b2 = np.asarray(b2, dtype=float)
                if b2.shape == (self.p,):
                    b2 = b2[self.em_idx]
                eta += float(x[self.em_idx] @ b2)
        gamma = values.get("gamma", {})
        if self.inconsistency == "ume":
            b = self._study_baseline(s)
            if treatment != b:
                eta += float(gamma[f"{b}:{treatment}"])
        elif treatment != ref:
            eta += float(gamma[treatment])
        return eta

    def describe(self):
        lines = [
            f"family: {self.family_name}",
            f"effects: {self.effects}",
            f"inconsistency: {self.inconsistency}",
            f"baseline strata: {self.baseline_strata} ({self.n_strata})",
            f"parameters: {self.n_params} unconstrained",
        ]
        if self.n_classes:
            lines.append(
                "effect-modifier classes: "
                + ", ".join(
                    f"{lab} <- "
                    + "+".join(t for t in self.treatments[1:] if self.class_of[t] == i)
                    for i, lab in enumerate(self.class_labels)
                )
            )
        if self.is_spline:
            for st in self.strata:
                k = st.basis.knots
                lines.append(
                    f"knots[{st.label}]: ({k.lower:g}, "
                    + ", ".join(f"{z:g}" for z in k.internal)
                    + f", {k.upper:g}) order {self.kappa}"
                )
        return "\n".join(lines)


# -------------------------------------------------------------- posterior


class Posterior:
    """Log-posterior density with exact gradient, bound to one grid size.

    Evaluation is pure: identical inputs give bit-identical outputs, and
    per-arm contributions reduce in a fixed order.
    """

    def __init__(self, model, n_int):
        self.model = model
        self.n_int = int(n_int)
        if self.n_int < 1:
            raise ValueError("n_int must be >= 1")
        self.n_params = model.n_params
        self.param_names = model.param_names
        self.obs_study = list(model.obs_study)
        self.n_obs = model.n_obs
        self._grids = {}
        for i, arm in enumerate(model.arms):
            if arm.kind != "agd":
                continue
            if model.p == 0:
                self._grids[i] = (np.zeros((self.n_int, 0)),) * 2
                continue
            grid = build_grid(
                model.network.covariate_names,
                arm.marginals,
                self.n_int,
                correlation=arm.correlation,
                check=False,
            )
            pts = grid.points - model.center_point
            self._grids[i] = (pts, pts[:, model.em_idx])

    # -- parameter unpacking

    def _unpack(self, theta):
        m = self.model
        mu = theta[m.idx_mu]
        beta1 = theta[m.idx_beta1]
        beta2 = theta[m.idx_beta2].reshape(m.n_classes, m.p_em)
        gamma = theta[m.idx_gamma]
        re_z = theta[m.idx_re]
        tau = np.exp(theta[m.idx_tau]) if m.has_tau else 0.0
        aux = np.exp(theta[m.idx_aux]).reshape(m.n_strata, m.n_aux)
        return mu, beta1, beta2, gamma, re_z, tau, aux

    def _deviations(self, re_z, tau):
        """Per-study treatment-effect deviations tau * C z."""
        m = self.model
        dev = {}
        for j, nd, chol in m.re_studies:
            z = re_z[m._re_offset_of[j] : m._re_offset_of[j] + nd]
            dev[j] = tau * (chol @ z)
        return dev

    def _spline_alphas(self, theta):
        m = self.model
        out = []
        for st, (zsl, sd_idx) in zip(m.strata, m.spline_slices):
            z = theta[zsl]
            sd = np.exp(theta[sd_idx])
            v = st.rw_c + sd * np.cumsum(np.sqrt(st.rw_w) * z)
            out.append(softmax_simplex(v))
        return out

    def _eta_arm(self, arm, i, mu, beta1, beta2, gamma, dev):
        m = self.model
        off = mu[arm.study_idx]
        if arm.gamma_idx >= 0:
            off += gamma[arm.gamma_idx]
        if arm.re_pos >= 0:
            off += dev[arm.study_idx][arm.re_pos]
        if arm.kind == "ipd":
            xa, xe = arm.x_all, arm.x_em
        else:
            xa, xe = self._grids[i]
        eta = off + (xa @ beta1 if m.p else 0.0)
        if arm.class_idx >= 0 and m.p_em:
            eta = eta + xe @ beta2[arm.class_idx]
        if np.isscalar(eta) or eta.ndim == 0:
            n = len(arm.t) if arm.kind == "ipd" else self.n_int
            eta = np.full(n, float(eta))
        return eta, off

    # -- likelihood and posterior

    def loglik_rows(self, theta):
        """Per-observation log-likelihood in canonical row order."""
        # extreme points overflow to inf and come back as -inf rows;
        # silence the intermediate warnings
        with np.errstate(over="ignore", invalid="ignore"):
            return self._loglik_rows(theta)

    def _loglik_rows(self, theta):
        theta = np.asarray(theta, dtype=float)
        m = self.model
        mu, beta1, beta2, gamma, re_z, tau, aux = self._unpack(theta)
        dev = self._deviations(re_z, tau) if m.has_tau else {}
        alphas = self._spline_alphas(theta) if m.is_spline else None
        out = np.empty(self.n_obs)
        for i, arm in enumerate(m.arms):
            eta, _ = self._eta_arm(arm, i, mu, beta1, beta2, gamma, dev)
            if m.is_spline:
                a = alphas[arm.stratum]
                if arm.kind == "ipd":
                    rows = kernels.ipd_row_ll_mspline(arm.m_mat, arm.i_mat, arm.c, eta, a)
                else:
                    rows = kernels.agd_row_ll_mspline(arm.m_mat, arm.i_mat, arm.c, eta, a)
            else:
                a1, a2 = self._aux_pair(aux, arm.stratum)
                if arm.kind == "ipd":
                    rows = kernels.ipd_row_ll(
                        m.family.fam_id, arm.t, arm.logt, arm.c, eta, a1, a2
                    )
                else:
                    rows = kernels.agd_row_ll(
                        m.family.fam_id, arm.t, arm.logt, arm.c, eta, a1, a2
                    )
            out[arm.row_lo : arm.row_hi] = rows
        return out

    def _aux_pair(self, aux, stratum):
        m = self.model
        if m.n_aux == 0:
            return 0.0, 0.0
        if m.n_aux == 1:
            return float(aux[stratum, 0]), 0.0
        return float(aux[stratum, 0]), float(aux[stratum, 1])

    def log_prior(self, theta):
        return self._prior_terms(np.asarray(theta, dtype=float))[0]

    def _prior_terms(self, theta):
        m = self.model
        pr = m.priors
        lp = 0.0
        grad = np.zeros(self.n_params)
        for sl, prior in (
            (m.idx_mu, pr.intercept),
            (m.idx_beta1, pr.beta1),
            (m.idx_beta2, pr.beta2),
            (m.idx_gamma, pr.gamma),
        ):
            v, g = prior.logpdf_grad(theta[sl])
            lp += v.sum()
            grad[sl] = g
        if m.n_re:
            z = theta[m.idx_re]
            lp += float(-0.5 * z @ z - len(z) * _LOG_SQRT_2PI)
            grad[m.idx_re] = -z
        if m.has_tau:
            v, g = pr.tau.logpdf_grad(theta[m.idx_tau])
            lp += float(v)
            grad[m.idx_tau] = g
        if m.n_aux:
            v, g = pr.aux.logpdf_grad(theta[m.idx_aux])
            lp += v.sum()
            grad[m.idx_aux] = g
        for zsl, sd_idx in m.spline_slices:
            z = theta[zsl]
            lp += float(-0.5 * z @ z - len(z) * _LOG_SQRT_2PI)
            grad[zsl] = -z
            v, g = pr.rw_sd.logpdf_grad(theta[sd_idx])
            lp += float(v)
            grad[sd_idx] = g
        return lp, grad

    def logpost_grad(self, theta):
        """(log posterior, gradient) at one unconstrained point."""
        with np.errstate(over="ignore", invalid="ignore"):
            return self._logpost_grad(theta)

    def _logpost_grad(self, theta):
        theta = np.asarray(theta, dtype=float)
        m = self.model
        mu, beta1, beta2, gamma, re_z, tau, aux = self._unpack(theta)
        dev = self._deviations(re_z, tau) if m.has_tau else {}
        alphas = self._spline_alphas(theta) if m.is_spline else None

        lp, grad = self._prior_terms(theta)
        g_mu = np.zeros(len(m.studies))
        g_beta1 = np.zeros(m.p)
        g_beta2 = np.zeros((m.n_classes, m.p_em))
        g_gamma = np.zeros(m.n_gamma)
        g_dev = {j: np.zeros(nd) for j, nd, _ in m.re_studies}
        g_aux = np.zeros((m.n_strata, m.n_aux))
        g_alpha = [np.zeros(st.basis.n_basis) for st in m.strata] if m.is_spline else None

        for i, arm in enumerate(m.arms):
            eta, _ = self._eta_arm(arm, i, mu, beta1, beta2, gamma, dev)
            if m.is_spline:
                a = alphas[arm.stratum]
                if arm.kind == "ipd":
                    ll, g_eta, ga, _ = kernels.ipd_terms_mspline(
                        arm.m_mat, arm.i_mat, arm.c, eta, a
                    )
                else:
                    ll, g_eta, ga, _ = kernels.agd_terms_mspline(
                        arm.m_mat, arm.i_mat, arm.c, eta, a
                    )
                g_alpha[arm.stratum] += ga
                ga1 = ga2 = 0.0
            else:
                a1, a2 = self._aux_pair(aux, arm.stratum)
                if arm.kind == "ipd":
                    ll, g_eta, ga1, ga2, _ = kernels.ipd_terms(
                        m.family.fam_id, arm.t, arm.logt, arm.c, eta, a1, a2
                    )
                else:
                    ll, g_eta, ga1, ga2, _ = kernels.agd_terms(
                        m.family.fam_id, arm.t, arm.logt, arm.c, eta, a1, a2
                    )
            if not np.isfinite(ll):
                return -np.inf, grad
            lp += ll
            s = g_eta.sum()
            g_mu[arm.study_idx] += s
            if arm.gamma_idx >= 0:
                g_gamma[arm.gamma_idx] += s
            if arm.re_pos >= 0:
                g_dev[arm.study_idx][arm.re_pos] += s
            if m.p:
                xa = arm.x_all if arm.kind == "ipd" else self._grids[i][0]
                g_beta1 += xa.T @ g_eta
            if arm.class_idx >= 0 and m.p_em:
                xe = arm.x_em if arm.kind == "ipd" else self._grids[i][1]
                g_beta2[arm.class_idx] += xe.T @ g_eta
            if m.n_aux >= 1:
                g_aux[arm.stratum, 0] += ga1
            if m.n_aux == 2:
                g_aux[arm.stratum, 1] += ga2

        grad[m.idx_mu] += g_mu
        grad[m.idx_beta1] += g_beta1
        if m.n_classes and m.p_em:
            grad[m.idx_beta2] += g_beta2.ravel()
        grad[m.idx_gamma] += g_gamma
        if m.has_tau:
            acc = 0.0
            for j, nd, chol in m.re_studies:
                off = m._re_offset_of[j]
                z = re_z[off : off + nd]
                grad[m.idx_re][off : off + nd] += tau * (chol.T @ g_dev[j])
                acc += float((chol @ z) @ g_dev[j])
            grad[m.idx_tau] += tau * acc
        if m.n_aux:
            grad[m.idx_aux] += (g_aux * aux).ravel()
        if m.is_spline:
            for stratum, (st, (zsl, sd_idx)) in enumerate(
                zip(m.strata, m.spline_slices)
            ):
                z = theta[zsl]
                sd = np.exp(theta[sd_idx])
                sqw = np.sqrt(st.rw_w)
                a = alphas[stratum]
                ga = g_alpha[stratum]
                inner = float(a @ ga)
                g_v = a[1:] * (ga[1:] - inner)
                rev = np.cumsum(g_v[::-1])[::-1]
                grad[zsl] += sd * sqw * rev
                grad[sd_idx] += sd * float(np.cumsum(sqw * z) @ g_v)
        if not np.isfinite(lp):
            return -np.inf, grad
        return lp, grad

    def check(self, theta):
        """Raise a diagnostic naming the offending block if not finite."""
        theta = np.asarray(theta, dtype=float)
        bad = np.flatnonzero(~np.isfinite(theta))
        if bad.size:
            raise FloatingPointError(
                f"non-finite parameter value at {self.param_names[bad[0]]}"
            )
        lp, grad = self.logpost_grad(theta)
        if np.isfinite(lp) and np.isfinite(grad).all():
            return
        rows = self.loglik_rows(theta)
        bad = np.flatnonzero(~np.isfinite(rows))
        if bad.size:
            i = bad[0]
            raise FloatingPointError(
                "non-finite likelihood contribution at observation row "
                f"{i} (study {self.obs_study[i]})"
            )
        bad = np.flatnonzero(~np.isfinite(grad))
        block = self.param_names[bad[0]] if bad.size else "log-posterior value"
        raise FloatingPointError(f"non-finite gradient for {block}")

    def initial_point(self, rng):
        return rng.uniform(-2.0, 2.0, self.n_params)

    def sample_prior(self, rng):
        """One draw from the prior on the unconstrained scale."""
        m = self.model
        pr = m.priors
        theta = np.empty(self.n_params)
        theta[m.idx_mu] = pr.intercept.sample(rng, len(m.studies))
        theta[m.idx_beta1] = pr.beta1.sample(rng, m.p)
        theta[m.idx_beta2] = pr.beta2.sample(rng, m.n_classes * m.p_em)
        theta[m.idx_gamma] = pr.gamma.sample(rng, m.n_gamma)
        theta[m.idx_re] = rng.normal(0.0, 1.0, m.n_re)
        if m.has_tau:
            theta[m.idx_tau] = pr.tau.sample(rng, ())
        theta[m.idx_aux] = pr.aux.sample(rng, m.n_strata * m.n_aux)
        for zsl, sd_idx in m.spline_slices:
            theta[zsl] = rng.normal(0.0, 1.0, zsl.stop - zsl.start)
            theta[sd_idx] = pr.rw_sd.sample(rng, ())
        return theta

    # -- natural-scale reporting

    @property
    def constrained_names(self):
        self._ensure_constrained_names()
        return self._constrained_names

    def _ensure_constrained_names(self):
        if hasattr(self, "_constrained_names"):
            return
        m = self.model
        names = [f"mu[{s}]" for s in m.studies]
        names += [f"beta1[{c}]" for c in m.network.covariate_names]
        em_names = [m.network.covariate_names[i] for i in m.em_idx]
        for lab in m.class_labels if m.n_classes else []:
            names += [f"beta2[{lab}:{c}]" for c in em_names]
        names += [f"gamma[{g}]" for g in m.gamma_labels]
        if m.has_tau:
            names.append("tau")
        if m.n_aux:
            for st in m.strata:
                names += [f"{a}[{st.label}]" for a in m.family.aux_names]
        if m.is_spline:
            for st in m.strata:
                names += [
                    f"alpha[{st.label}:{i + 1}]" for i in range(st.basis.n_basis)
                ]
                names.append(f"rw_sd[{st.label}]")
        self._constrained_names = names

    def constrain(self, theta):
        """Natural-scale parameter vector, un-centred to the data origin."""
        theta = np.asarray(theta, dtype=float)
        m = self.model
        self._ensure_constrained_names()
        mu, beta1, beta2, gamma, re_z, tau, aux = self._unpack(theta)
        cp = m.center_point
        cp_em = cp[m.em_idx]
        out = []
        shift2 = beta2 @ cp_em if m.n_classes else np.zeros(0)
        out.append(mu - (cp @ beta1 if m.p else 0.0))
        out.append(beta1)
        out.append(beta2.ravel())
        if m.inconsistency == "consistency":
            g_nat = gamma.copy()
            for t, gi in m._gamma_of.items():
                cls = m.class_of.get(t, -1)
                if cls >= 0:
                    g_nat[gi] -= shift2[cls]
        else:
            g_nat = gamma.copy()
            for (b, k), gi in m._gamma_of.items():
                ck = m.class_of.get(k, -1)
                cb = m.class_of.get(b, -1)
                sk = shift2[ck] if ck >= 0 else 0.0
                sb = shift2[cb] if cb >= 0 else 0.0
                g_nat[gi] -= sk - sb
        out.append(g_nat)
        if m.has_tau:
            out.append(np.array([tau]))
        if m.n_aux:
            out.append(aux.ravel())
        if m.is_spline:
            for alpha, (zsl, sd_idx) in zip(
                self._spline_alphas(theta), m.spline_slices
            ):
                out.append(alpha)
                out.append(np.array([np.exp(theta[sd_idx])]))
        return np.concatenate(out) if out else np.zeros(0)
