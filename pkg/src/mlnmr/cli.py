"""Command-line front end: simulate, fit, compare, predict, audit.

A run is configured by a small INI file (``key = value`` under
``[data]``, ``[model]``, ``[sampler]`` and ``[output]`` sections) with
every value overridable on the command line; the command line wins.
``fit`` writes a run directory containing a human-readable report, the
posterior draws archive, the per-observation log-likelihood matrix, and
a machine-readable ``meta.json`` that lets ``predict`` and ``compare``
rebuild the fitted objects exactly.

Exit codes: 0 success, 1 model or sampler failure, 2 usage or data
errors (including missing files, which are reported by path).
"""

import argparse
import configparser
import json
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .backend import USE_NUMBA
from .comparison import compare as compare_reports
from .comparison import loo, waic
from .data import CovariateSpec, DataError, file_checksum, load_network
from .model import SurvivalModel
from .population import (
    TargetPopulation,
    conditional_effect,
    marginal_contrast,
    marginal_cumhaz,
    marginal_hazard,
    marginal_survival,
    rmst,
    survival_quantile,
)
from .sampler import (
    AdequacyError,
    ChainConfig,
    PosteriorDraws,
    SamplerError,
    ess,
    integration_adequacy_run,
    rhat,
)
from .simulate import appc_scenario, simulate as run_simulation

USAGE_EXIT = 2
FAILURE_EXIT = 1

_ROLES = ("prognostic", "effect_modifier", "both")


# ----------------------------------------------------------- run config


@dataclass
class RunConfig:
    """Everything a fit needs, merged from the INI file and the flags."""

    # [data]
    ipd: str = None
    agd_events: str = None
    agd_covariates: str = None
    correlations: str = None
    covariates: str = ""
    reference: str = None
    # [model]
    family: str = "weibull_ph"
    effects: str = "fixed"
    inconsistency: str = "consistency"
    baseline_strata: str = "study"
    shared_effect_modifiers: str = ""
    n_knots: int = 7
    kappa: int = None
    priors: dict = field(default_factory=dict)
    # [sampler]
    chains: int = 4
    warmup: int = 500
    samples: int = 1000
    seed: int = 1
    n_int: int = 64
    max_n_int: int = 4096
    threads: int = None
    # [output]
    out: str = "mlnmr_run"
    draws_format: str = "csv"

    SECTIONS = {
        "data": ("ipd", "agd_events", "agd_covariates", "correlations",
                 "covariates", "reference"),
        "model": ("family", "effects", "inconsistency", "baseline_strata",
                  "shared_effect_modifiers", "n_knots", "kappa"),
        "sampler": ("chains", "warmup", "samples", "seed", "n_int",
                    "max_n_int", "threads"),
        "output": ("out", "draws_format"),
    }
    _INTS = {"n_knots", "kappa", "chains", "warmup", "samples", "seed",
             "n_int", "max_n_int", "threads"}

    @classmethod
    def from_ini(cls, path):
        path = Path(path)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        ini = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        ini.read(path)
        cfg = cls()
        cfg.config_dir = str(path.resolve().parent)
        for section, keys in cls.SECTIONS.items():
            if not ini.has_section(section):
                continue
            for key, raw in ini.items(section):
                if section == "model" and key.startswith("prior."):
                    cfg.priors[key[len("prior."):]] = raw.strip()
                    continue
                if key not in keys:
                    raise DataError(
                        f"config {path}: unknown key {key!r} in [{section}]"
                    )
                cfg.set(key, raw.strip())
        unknown = set(ini.sections()) - set(cls.SECTIONS)
        if unknown:
            raise DataError(f"config {path}: unknown sections {sorted(unknown)}")
        return cfg

    def set(self, key, raw):
        if raw == "" or raw is None:
            return
        if key in self._INTS:
            try:
                raw = int(raw)
            except ValueError:
                raise DataError(f"config value {key} = {raw!r} is not an integer")
        setattr(self, key, raw)

    def covariate_specs(self):
        """Parse ``name:family:role`` triples from the covariates value."""
        text = (self.covariates or "").strip()
        if not text:
            return ()
        specs = []
        for chunk in text.split(","):
            parts = [p.strip() for p in chunk.split(":")]
            if len(parts) != 3:
                raise DataError(
                    f"covariates entry {chunk.strip()!r} is not "
                    "name:family:role"
                )
            if parts[2] not in _ROLES:
                raise DataError(
                    f"covariate role {parts[2]!r} must be one of {_ROLES}"
                )
            specs.append(CovariateSpec(parts[0], parts[1], parts[2]))
        return tuple(specs)

    def shared_classes(self):
        text = (self.shared_effect_modifiers or "").strip()
        if not text:
            return None
        mapping = {}
        for chunk in text.split(","):
            parts = [p.strip() for p in chunk.split(":")]
            if len(parts) != 2:
                raise DataError(
                    f"shared_effect_modifiers entry {chunk.strip()!r} is not "
                    "treatment:class"
                )
            mapping[parts[0]] = parts[1]
        return mapping

    def data_path(self, key):
        value = getattr(self, key)
        if value is None:
            return None
        p = Path(value)
        if not p.is_absolute():
            p = Path(getattr(self, "config_dir", ".")) / p
        return p

    def echo(self):
        """Deterministic key = value text of the merged configuration."""
        lines = []
        for section, keys in self.SECTIONS.items():
            lines.append(f"[{section}]")
            for key in keys:
                v = getattr(self, key)
                lines.append(f"{key} = {'' if v is None else v}")
            if section == "model":
                for name in sorted(self.priors):
                    lines.append(f"prior.{name} = {self.priors[name]}")
            lines.append("")
        return "\n".join(lines)

    def as_dict(self):
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["config_dir"] = getattr(self, "config_dir", ".")
        return out


def _apply_overrides(cfg, args):
    for key in ("ipd", "agd_events", "agd_covariates", "correlations",
                "covariates", "reference", "family", "effects",
                "inconsistency", "baseline_strata", "shared_effect_modifiers",
                "n_knots", "kappa", "chains", "warmup", "samples", "seed",
                "n_int", "max_n_int", "threads", "out", "draws_format"):
        v = getattr(args, key, None)
        if v is not None:
            cfg.set(key, v)
    # flag-supplied relative data paths are resolved from the working dir
    for key in ("ipd", "agd_events", "agd_covariates", "correlations"):
        if getattr(args, key, None) is not None:
            setattr(cfg, key, str(Path(getattr(args, key)).resolve()))
    return cfg


# ----------------------------------------------------------- fit helpers


def _load_data(cfg):
    checks = {}
    tables = {}
    for key in ("ipd", "agd_events", "agd_covariates", "correlations"):
        p = cfg.data_path(key)
        if p is None:
            tables[key] = None
            continue
        if not p.is_file():
            raise DataError(f"data file not found: {p}")
        tables[key] = pd.read_csv(p)
        checks[key] = {"path": str(p), "sha256": file_checksum(p)}
    if tables["ipd"] is None and tables["agd_events"] is None:
        raise DataError("no data: set ipd and/or agd_events in [data]")
    net = load_network(
        tables["ipd"],
        tables["agd_events"],
        tables["agd_covariates"],
        covariates=cfg.covariate_specs(),
        correlations=tables["correlations"],
        reference=cfg.reference,
    )
    return net, checks


def _build_model(cfg, network):
    return SurvivalModel(
        network,
        cfg.family,
        effects=cfg.effects,
        inconsistency=cfg.inconsistency,
        shared_effect_modifiers=cfg.shared_classes(),
        baseline_strata=cfg.baseline_strata,
        n_knots=cfg.n_knots,
        kappa=cfg.kappa,
        priors=cfg.priors or None,
    )


def _set_threads(cfg):
    n = cfg.threads or os.cpu_count() or 1
    if USE_NUMBA:
        try:
            import numba

            numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
        except (ImportError, ValueError):
            pass
    return n


def _constrained_matrix(post, draws):
    flat = draws.flat()
    out = np.empty((flat.shape[0], len(post.constrained_names)))
    for i in range(flat.shape[0]):
        out[i] = post.constrain(flat[i])
    return out


def _parameter_rows(post, draws):
    """Per-parameter natural-scale summary: mean, 95% CrI, Rhat, ESS."""
    s, c, _ = draws.draws.shape
    con = _constrained_matrix(post, draws)
    by_chain = con.reshape(c, s, -1)
    rows = []
    for j, name in enumerate(post.constrained_names):
        x = by_chain[:, :, j].T  # draws by chains
        rows.append(
            {
                "parameter": name,
                "mean": float(con[:, j].mean()),
                "q2.5": float(np.quantile(con[:, j], 0.025)),
                "q97.5": float(np.quantile(con[:, j], 0.975)),
                "rhat": float(rhat(x)),
                "ess": float(ess(x)),
            }
        )
    return rows


def _format_table(rows, columns, formats):
    header = [c for c, _ in columns]
    body = [[fmt(r[key]) for (_, key), fmt in zip(columns, formats)] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]
    out = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    for b in body:
        out.append("  ".join(v.ljust(w) for v, w in zip(b, widths)).rstrip())
    return "\n".join(out)


def _g(x):
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return "inf" if x == np.inf else ("-inf" if x == -np.inf else "nan")
    return f"{x:.6g}"


def _trail_rows(trail):
    return [
        {
            "round": i + 1,
            "n_int": r.n_int,
            "samples": r.samples,
            "rhat_within": r.rhat_within,
            "rhat_all": r.rhat_all,
            "action": r.action,
        }
        for i, r in enumerate(trail)
    ]


def _trail_text(trail):
    if not trail:
        return "no aggregate studies: grid adequacy loop not needed"
    rows = _trail_rows(trail)
    return _format_table(
        rows,
        [("round", "round"), ("n_int", "n_int"), ("samples", "samples"),
         ("rhat_within", "rhat_within"), ("rhat_all", "rhat_all"),
         ("action", "action")],
        [str, str, str, _g, _g, str],
    )


def _write_report(path, cfg, checks, model, result, rows):
    draws = result.draws
    total = draws.draws.shape[0] * draws.draws.shape[1]
    ndiv = int(draws.divergences.sum())
    lines = [
        "mlnmr fit report",
        f"version: {__version__}",
        "",
        "[configuration]",
        cfg.echo(),
        "[data]",
    ]
    for key, info in checks.items():
        lines.append(f"{key}: {info['path']}")
        lines.append(f"  sha256: {info['sha256']}")
    lines += [
        "",
        "[model]",
        model.describe(),
        "",
        "[integration adequacy]",
        _trail_text(result.trail),
        f"final integration points: {result.n_int}",
        "",
        "[sampling]",
        f"chains: {cfg.chains}  warmup: {cfg.warmup}  samples: {cfg.samples}  "
        f"seed: {cfg.seed}",
        f"divergent transitions: {ndiv} of {total}",
        "",
        "[parameters]",
        _format_table(
            rows,
            [("parameter", "parameter"), ("mean", "mean"), ("2.5%", "q2.5"),
             ("97.5%", "q97.5"), ("Rhat", "rhat"), ("ESS", "ess")],
            [str, _g, _g, _g, lambda v: f"{v:.4f}", lambda v: f"{v:.0f}"],
        ),
        "",
    ]
    text = "\n".join(lines)
    path.write_text(text)
    return text


def _save_draws(run_dir, draws, fmt):
    s, c, p = draws.draws.shape
    if fmt == "npz":
        np.savez_compressed(
            run_dir / "draws.npz",
            draws=draws.draws,
            param_names=np.array(draws.param_names),
            divergences=draws.divergences,
            chain_n_int=np.array(draws.chain_n_int or []),
        )
        return "draws.npz"
    flat = draws.flat()
    with open(run_dir / "draws.csv", "w") as fh:
        fh.write("chain,draw," + ",".join(draws.param_names) + "\n")
        for i in range(flat.shape[0]):
            chain, step = divmod(i, s)
            vals = ",".join(repr(float(v)) for v in flat[i])
            fh.write(f"{chain},{step},{vals}\n")
    return "draws.csv"


def _load_draws(run_dir, meta):
    name = meta["draws_file"]
    path = run_dir / name
    if not path.is_file():
        raise DataError(f"draws archive not found: {path}")
    if name.endswith(".npz"):
        with np.load(path, allow_pickle=False) as z:
            arr = z["draws"]
            names = tuple(str(n) for n in z["param_names"])
            div = z["divergences"]
    else:
        frame = pd.read_csv(path)
        names = tuple(frame.columns[2:])
        chains = int(frame["chain"].max()) + 1
        samples = int(frame["draw"].max()) + 1
        flat = frame.iloc[:, 2:].to_numpy(dtype=float)
        arr = flat.reshape(chains, samples, len(names)).swapaxes(0, 1)
        div = np.zeros(chains, dtype=int)
    s, c, _ = arr.shape
    return PosteriorDraws(
        draws=arr,
        param_names=names,
        divergences=div,
        step_sizes=np.full(c, np.nan),
        tree_depths=np.zeros((s, c), dtype=int),
        accept_stats=np.full((s, c), np.nan),
    )


def _save_loglik(run_dir, draws, obs_study):
    if draws.loglik is None:
        return None
    np.savez_compressed(
        run_dir / "loglik.npz",
        loglik=draws.loglik,
        obs_study=np.array(obs_study),
    )
    return "loglik.npz"


# ----------------------------------------------------------- subcommands


def _cmd_simulate(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenario = appc_scenario(seed=args.seed)
    result = run_simulation(scenario)
    result.ipd.to_csv(out / "ipd.csv", index=False)
    result.agd_events.to_csv(out / "agd_events.csv", index=False)
    result.agd_covariates.to_csv(out / "agd_covariates.csv", index=False)
    result.truth.to_csv(out / "truth.csv", index=False)
    (out / "sim_meta.json").write_text(
        json.dumps({**result.meta, "preset": args.preset,
                    "version": __version__},
                   indent=2, sort_keys=True)
    )
    covs = ",".join(
        f"{c.name}:{c.marginal_family}:{c.role}" for c in result.covariate_specs()
    )
    shared = ",".join(f"{t}:shared" for t in sorted(scenario.gamma))
    (out / "appC.ini").write_text(
        "\n".join(
            [
                "[data]",
                "ipd = ipd.csv",
                "agd_events = agd_events.csv",
                "agd_covariates = agd_covariates.csv",
                f"covariates = {covs}",
                f"reference = {scenario.reference}",
                "",
                "[model]",
                "family = weibull_ph",
                f"shared_effect_modifiers = {shared}",
                "",
                "[sampler]",
                "chains = 4",
                "warmup = 500",
                "samples = 1000",
                f"seed = {args.seed}",
                "n_int = 64",
                "",
                "[output]",
                "out = run_weibull",
                "",
            ]
        )
    )
    n = len(result.ipd) + len(result.agd_events)
    print(f"simulated {n} subjects into {out}")
    print("wrote ipd.csv, agd_events.csv, agd_covariates.csv, truth.csv, appC.ini")
    return 0


def _fit_config(args):
    cfg = RunConfig.from_ini(args.config) if args.config else RunConfig()
    if not args.config:
        cfg.config_dir = "."
    return _apply_overrides(cfg, args)


def _cmd_fit(args):
    cfg = _fit_config(args)
    threads = _set_threads(cfg)
    net, checks = _load_data(cfg)
    model = _build_model(cfg, net)
    chain_cfg = ChainConfig(
        n_chains=cfg.chains, warmup=cfg.warmup, samples=cfg.samples,
        seed=cfg.seed,
    )
    result = integration_adequacy_run(
        model, chain_cfg, n_int=cfg.n_int, max_n_int=cfg.max_n_int
    )
    post = model.posterior(result.n_int)
    rows = _parameter_rows(post, result.draws)

    run_dir = Path(cfg.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    draws_file = _save_draws(run_dir, result.draws, cfg.draws_format)
    loglik_file = _save_loglik(run_dir, result.draws, model.obs_study)
    report = _write_report(run_dir / "report.txt", cfg, checks, model, result, rows)
    meta = {
        "version": __version__,
        "config": cfg.as_dict(),
        "data_files": checks,
        "threads": threads,
        "n_int_final": result.n_int,
        "chain_n_int": list(result.draws.chain_n_int or []),
        "adequacy_trail": _trail_rows(result.trail),
        "divergences": int(result.draws.divergences.sum()),
        "draws_file": draws_file,
        "loglik_file": loglik_file,
        "label": f"{cfg.family}/{cfg.effects}",
    }
    (run_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    print(report)
    print(f"run written to {run_dir}")
    return 0


def _cmd_audit(args):
    cfg = _fit_config(args)
    _set_threads(cfg)
    net, _ = _load_data(cfg)
    model = _build_model(cfg, net)
    chain_cfg = ChainConfig(
        n_chains=cfg.chains, warmup=cfg.warmup, samples=cfg.samples,
        seed=cfg.seed,
    )
    try:
        result = integration_adequacy_run(
            model, chain_cfg, n_int=cfg.n_int, max_n_int=cfg.max_n_int,
            compute_loglik=False,
        )
    except AdequacyError as err:
        print("integration adequacy FAILED")
        print(_trail_text(err.trail))
        print(str(err).split("audit trail:")[0].rstrip())
        return FAILURE_EXIT
    print("integration adequacy audit")
    print(_trail_text(result.trail))
    print(f"final integration points: {result.n_int}")
    return 0


def _load_run(run_dir):
    run_dir = Path(run_dir)
    meta_path = run_dir / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"run directory has no meta.json: {run_dir}")
    meta = json.loads(meta_path.read_text())
    cfg = RunConfig()
    for key, value in meta["config"].items():
        if key == "config_dir":
            cfg.config_dir = value
        elif key == "priors":
            cfg.priors = dict(value)
        else:
            setattr(cfg, key, value)
    for key, info in meta["data_files"].items():
        p = Path(info["path"])
        if not p.is_file():
            raise DataError(f"data file not found: {p}")
        if file_checksum(p) != info["sha256"]:
            raise DataError(
                f"data file changed since the fit (sha256 mismatch): {p}"
            )
    net, _ = _load_data(cfg)
    model = _build_model(cfg, net)
    post = model.posterior(meta["n_int_final"])
    draws = _load_draws(run_dir, meta)
    return meta, cfg, net, model, post, draws


def _cmd_compare(args):
    reports = {}
    labels = {}
    study_labels = None
    for run in args.runs:
        run_dir = Path(run)
        meta_path = run_dir / "meta.json"
        if not meta_path.is_file():
            raise DataError(f"run directory has no meta.json: {run_dir}")
        meta = json.loads(meta_path.read_text())
        if not meta.get("loglik_file"):
            raise DataError(f"run {run_dir} has no log-likelihood archive")
        with np.load(run_dir / meta["loglik_file"], allow_pickle=False) as z:
            ll = z["loglik"]
            obs = [str(s) for s in z["obs_study"]]
        if study_labels is None:
            study_labels = obs
        elif obs != study_labels:
            raise DataError(
                f"run {run_dir} was fitted to different observations; "
                "comparison needs a common dataset"
            )
        name = meta.get("label") or run_dir.name
        if name in reports:
            name = f"{name} ({run_dir.name})"
        method = loo if args.method == "loo" else waic
        reports[name] = method(ll.T)
        labels[name] = str(run_dir)
    table = compare_reports(
        reports,
        grouping="by-study" if args.by_study else "overall",
        study_labels=study_labels if args.by_study else None,
    )
    with pd.option_context("display.width", 120, "display.max_columns", 20):
        print(table.to_string(index=False, float_format=lambda v: f"{v:.2f}"))
    for name, rep in reports.items():
        if rep.high_k.any():
            print(
                f"note: {name}: {int(rep.high_k.sum())} observations with "
                "Pareto k > 0.7; their LOO contributions are unreliable"
            )
    if args.out:
        table.to_csv(args.out, index=False)
        print(f"comparison table written to {args.out}")
    return 0


def _parse_treatments(args, model, need_pair):
    if not args.treatments:
        if need_pair:
            raise DataError(
                "this estimand contrasts two treatments; pass "
                "--treatments A,B"
            )
        return list(model.treatments)
    trts = [t.strip() for t in args.treatments.split(",") if t.strip()]
    if need_pair and len(trts) != 2:
        raise DataError("contrast estimands need exactly two treatments")
    return trts


def _cmd_predict(args):
    meta, cfg, net, model, post, draws = _load_run(args.run)
    pop = TargetPopulation.from_study(net, args.population, n_int=meta["n_int_final"])
    if args.baseline:
        pop.baseline = args.baseline
    times = None
    if args.times:
        times = np.array([float(v) for v in args.times.split(",")])
    frames = []
    est = args.estimand
    if est in ("survival", "hazard", "cumhaz"):
        fn = {"survival": marginal_survival, "hazard": marginal_hazard,
              "cumhaz": marginal_cumhaz}[est]
        for trt in _parse_treatments(args, model, need_pair=False):
            tab = fn(post, draws, pop, trt, times=times).summary()
            tab.insert(0, "treatment", trt)
            frames.append(tab)
    elif est == "quantile":
        for trt in _parse_treatments(args, model, need_pair=False):
            tab = survival_quantile(
                post, draws, pop, trt, alpha=args.alpha
            ).summary()
            tab.insert(0, "treatment", trt)
            frames.append(tab)
    elif est == "rmst":
        if args.tstar is None:
            raise DataError("rmst needs --tstar")
        for trt in _parse_treatments(args, model, need_pair=False):
            tab = rmst(post, draws, pop, trt, tstar=args.tstar).summary()
            tab.insert(0, "treatment", trt)
            frames.append(tab)
    elif est == "hr":
        a, b = _parse_treatments(args, model, need_pair=True)
        tab = marginal_contrast(
            post, draws, pop, a, b, "hazard-ratio", times=times
        ).summary()
        tab.insert(0, "treatment", f"{b}/{a}")
        frames.append(tab)
    elif est == "loghr":
        a, b = _parse_treatments(args, model, need_pair=True)
        tab = conditional_effect(post, draws, pop, a, b).summary()
        tab.insert(0, "treatment", f"{b} vs {a}")
        frames.append(tab)
    out = pd.concat(frames, ignore_index=True)
    out.insert(0, "population", args.population)
    out.insert(0, "estimand", est)
    dest = Path(args.out) if args.out else Path(args.run) / f"predict_{est}.csv"
    out.to_csv(dest, index=False)
    with pd.option_context("display.width", 140, "display.max_rows", 12):
        print(out.head(12).to_string(index=False, float_format=lambda v: f"{v:.4g}"))
        if len(out) > 12:
            print(f"... {len(out)} rows total")
    print(f"estimand table written to {dest}")
    return 0


# ----------------------------------------------------------- entry point


def _add_config_flags(p):
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--ipd", help="IPD csv (study,treatment,time,status,covariates)")
    p.add_argument("--agd-events", dest="agd_events",
                   help="aggregate event rows csv")
    p.add_argument("--agd-covariates", dest="agd_covariates",
                   help="aggregate covariate summaries csv")
    p.add_argument("--correlations", help="copula correlations csv")
    p.add_argument("--covariates", help="schema: name:family:role,...")
    p.add_argument("--reference", help="network reference treatment")
    p.add_argument("--family", help="survival family or spline baseline")
    p.add_argument("--effects", choices=["fixed", "random"])
    p.add_argument("--inconsistency", choices=["consistency", "ume"])
    p.add_argument("--baseline-strata", dest="baseline_strata",
                   choices=["study", "study-and-arm"])
    p.add_argument("--shared-effect-modifiers", dest="shared_effect_modifiers",
                   help="treatment:class,... sharing interaction coefficients")
    p.add_argument("--n-knots", dest="n_knots", type=int)
    p.add_argument("--kappa", type=int, help="spline order")
    p.add_argument("--chains", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-int", dest="n_int", type=int,
                   help="starting integration grid size")
    p.add_argument("--max-n-int", dest="max_n_int", type=int)
    p.add_argument("--threads", type=int,
                   help="worker thread cap (default: physical cores)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--draws-format", dest="draws_format",
                   choices=["csv", "npz"],
                   help="draws archive format (default csv; npz is compact)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mlnmr",
        description="Multilevel network meta-regression of survival outcomes.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated two-study dataset")
    p.add_argument("--out", default="mlnmr_sim", help="output directory")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--preset", default="appC", choices=["appC"])
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("fit", help="fit a model and write a run directory")
    _add_config_flags(p)
    p.set_defaults(fn=_cmd_fit)

    p = sub.add_parser("audit", help="run the integration adequacy loop only")
    _add_config_flags(p)
    p.set_defaults(fn=_cmd_audit)

    p = sub.add_parser("compare", help="model comparison table from fitted runs")
    p.add_argument("runs", nargs="+", help="run directories from fit")
    p.add_argument("--method", default="loo", choices=["loo", "waic"])
    p.add_argument("--by-study", dest="by_study", action="store_true")
    p.add_argument("--out", help="also write the table as csv")
    p.set_defaults(fn=_cmd_compare)

    p = sub.add_parser("predict", help="population-average estimands from a run")
    p.add_argument("--run", required=True, help="run directory from fit")
    p.add_argument("--population", required=True,
                   help="target population (study label)")
    p.add_argument("--baseline", help="borrow the baseline from this study")
    p.add_argument("--estimand", required=True,
                   choices=["survival", "hazard", "cumhaz", "quantile",
                            "rmst", "hr", "loghr"])
    p.add_argument("--treatments", help="treatment, or pair A,B for contrasts")
    p.add_argument("--times", help="comma-separated evaluation times")
    p.add_argument("--tstar", type=float, help="rmst horizon")
    p.add_argument("--alpha", type=float, default=0.5,
                   help="quantile level (0.5 = median)")
    p.add_argument("--out", help="output csv path")
    p.set_defaults(fn=_cmd_predict)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DataError as err:
        print(f"error: {err}", file=sys.stderr)
        return USAGE_EXIT
    except (SamplerError, AdequacyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return FAILURE_EXIT
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return USAGE_EXIT
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return FAILURE_EXIT


if __name__ == "__main__":
    sys.exit(main())
