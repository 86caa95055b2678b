"""Gradient-based MCMC and the integration-adequacy loop.

The sampler is a Hamiltonian Monte Carlo variant with dynamically grown
trajectories (doubling until a U-turn), dual-averaging step-size tuning
toward a target acceptance statistic, and a windowed warmup that adapts a
diagonal mass matrix.  Draws are produced on the unconstrained scale.

Convergence diagnostics follow the rank-normalised split-Rhat and Geyer
effective-sample-size constructions.  ``integration_adequacy_run`` wraps
sampling in the grid-size escalation procedure: half the chains run on a
coarsened integration grid, and disagreement between grid groups that is
not explained by within-group mixing triggers a doubling of the grid.
"""

from dataclasses import dataclass, field, replace
import math

import numpy as np
import scipy.special as sps
import scipy.stats

__all__ = [
    "AdequacyError",
    "AdequacyRecord",
    "AdequacyResult",
    "ChainConfig",
    "PosteriorDraws",
    "SamplerError",
    "adequacy_branch",
    "ess",
    "integration_adequacy_run",
    "mcse",
    "rhat",
    "sample",
]

DIVERGENCE_ENERGY = 1000.0
RHAT_THRESHOLD = 1.05


class SamplerError(RuntimeError):
    """Sampling failed in a way that invalidates the draws."""


class AdequacyError(RuntimeError):
    """The integration-adequacy procedure could not terminate."""

    def __init__(self, message, trail=()):
        super().__init__(message)
        self.trail = tuple(trail)


@dataclass(frozen=True)
class ChainConfig:
    """Run-level sampler settings.

    ``warmup`` iterations adapt step size and mass matrix and are always
    discarded; ``samples`` post-warmup draws per chain are kept.
    """

    n_chains: int = 4
    warmup: int = 500
    samples: int = 1000
    seed: int = 1
    max_treedepth: int = 10
    target_accept: float = 0.8

    def __post_init__(self):
        if self.n_chains < 2:
            raise ValueError("n_chains must be >= 2 (required for Rhat)")
        if self.warmup < 150:
            raise ValueError("warmup must be >= 150")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must be in (0, 1)")


@dataclass
class PosteriorDraws:
    """Post-warmup draws with sampler diagnostics.

    ``draws`` has shape (samples, chains, params) on the unconstrained
    scale.  ``loglik`` (rows x total draws, chain-major columns) holds the
    per-observation log-likelihood of every kept draw when computed.
    """

    draws: np.ndarray
    param_names: tuple
    divergences: np.ndarray
    step_sizes: np.ndarray
    tree_depths: np.ndarray
    accept_stats: np.ndarray
    loglik: np.ndarray = None
    chain_n_int: tuple = None

    @property
    def n_samples(self):
        return self.draws.shape[0]

    @property
    def n_chains(self):
        return self.draws.shape[1]

    @property
    def n_total(self):
        return self.draws.shape[0] * self.draws.shape[1]

    def flat(self):
        """(total draws, params), chain-major: chain 0's draws first."""
        s, c, p = self.draws.shape
        return np.swapaxes(self.draws, 0, 1).reshape(s * c, p)

    def parameter(self, name):
        """(samples, chains) matrix for one parameter."""
        return self.draws[:, :, self.param_names.index(name)]

    def rhat(self, name):
        return rhat(self.parameter(name))

    def ess(self, name):
        return ess(self.parameter(name))

    def rhat_max(self, chains=None):
        return max(
            rhat(self.draws[:, :, j], chains=chains)
            for j in range(self.draws.shape[2])
        )


# -- step size and mass adaptation


class _DualAveraging:
    """Nesterov dual averaging of log step size toward a target accept."""

    def __init__(self, step0, target=0.8, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * step0)
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.count = 0
        self.h_bar = 0.0
        self.log_step = math.log(step0)
        self.log_step_bar = 0.0

    def update(self, accept):
        self.count += 1
        frac = 1.0 / (self.count + self.t0)
        self.h_bar = (1 - frac) * self.h_bar + frac * (self.target - accept)
        self.log_step = self.mu - math.sqrt(self.count) / self.gamma * self.h_bar
        w = self.count ** -self.kappa
        self.log_step_bar = w * self.log_step + (1 - w) * self.log_step_bar
        return math.exp(self.log_step)

    def adapted(self):
        return math.exp(self.log_step_bar)


class _Welford:
    def __init__(self, dim):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x):
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)

    def variance(self):
        if self.n < 2:
            return np.ones_like(self.mean)
        var = self.m2 / (self.n - 1)
        # shrink toward a small diagonal; keeps early windows sane
        w = self.n / (self.n + 5.0)
        return w * var + 1e-3 * (1 - w)


def _warmup_windows(warmup, init_buffer=75, term_buffer=50, base_window=25):
    """Slow-adaptation window boundaries within warmup.

    Returns a list of (start, end) half-open intervals covering
    [init_buffer, warmup - term_buffer), each window doubling in size with
    the last absorbing the remainder.
    """
    slow_end = warmup - term_buffer
    windows = []
    start = init_buffer
    size = base_window
    while start < slow_end:
        end = start + size
        if end > slow_end or slow_end - end < base_window:
            end = slow_end
        windows.append((start, end))
        start = end
        size *= 2
    return windows


# -- Hamiltonian trajectory


def _find_step_size(f, theta, lp, grad, inv_mass, rng):
    """Crude bracketing of a step size with acceptance near 1/2."""
    step = 1.0
    r = rng.standard_normal(theta.size) / np.sqrt(inv_mass)
    h0 = lp - 0.5 * float(np.dot(inv_mass * r, r))
    _, r1, lp1, _ = _leapfrog(f, theta, r, grad, step, inv_mass)
    h1 = lp1 - 0.5 * float(np.dot(inv_mass * r1, r1))
    if not np.isfinite(h1):
        h1 = -np.inf
    direction = 1.0 if h1 - h0 > math.log(0.5) else -1.0
    for _ in range(100):
        _, r1, lp1, _ = _leapfrog(f, theta, r, grad, step, inv_mass)
        h1 = lp1 - 0.5 * float(np.dot(inv_mass * r1, r1))
        if not np.isfinite(h1):
            h1 = -np.inf
        if direction * (h1 - h0) <= direction * math.log(0.5):
            break
        step *= 2.0 ** direction
        if step < 1e-10 or step > 1e7:
            break
    return max(step, 1e-10)


def _leapfrog(f, theta, r, grad, step, inv_mass):
    r1 = r + 0.5 * step * grad
    theta1 = theta + step * inv_mass * r1
    lp1, grad1 = f(theta1)
    r1 = r1 + 0.5 * step * grad1
    return theta1, r1, lp1, grad1


def _no_uturn(theta_m, r_m, theta_p, r_p, inv_mass):
    d = theta_p - theta_m
    return (
        float(np.dot(d, inv_mass * r_m)) >= 0.0
        and float(np.dot(d, inv_mass * r_p)) >= 0.0
    )


def _build_tree(f, theta, r, grad, logu, v, depth, step, inv_mass, rng, h0):
    """One recursive doubling; returns the standard 11-tuple of tree state."""
    if depth == 0:
        theta1, r1, lp1, grad1 = _leapfrog(f, theta, r, grad, v * step, inv_mass)
        h1 = lp1 - 0.5 * float(np.dot(inv_mass * r1, r1))
        if not np.isfinite(h1):
            h1 = -np.inf
        n1 = 1 if logu <= h1 else 0
        divergent = (h1 - logu) < -DIVERGENCE_ENERGY
        alpha = min(1.0, math.exp(min(h1 - h0, 0.0)))
        return (
            theta1, r1, grad1,
            theta1, r1, grad1,
            theta1, lp1, grad1,
            n1, not divergent, alpha, 1, divergent,
        )
    out = _build_tree(f, theta, r, grad, logu, v, depth - 1, step, inv_mass, rng, h0)
    (tm, rm, gm, tp, rp, gp, t1, lp1, g1, n1, s1, a1, na1, div1) = out
    if s1:
        if v == -1:
            out2 = _build_tree(f, tm, rm, gm, logu, v, depth - 1, step, inv_mass, rng, h0)
            (tm, rm, gm, _, _, _, t2, lp2, g2, n2, s2, a2, na2, div2) = out2
        else:
            out2 = _build_tree(f, tp, rp, gp, logu, v, depth - 1, step, inv_mass, rng, h0)
            (_, _, _, tp, rp, gp, t2, lp2, g2, n2, s2, a2, na2, div2) = out2
        if n2 > 0 and rng.random() < n2 / max(n1 + n2, 1):
            t1, lp1, g1 = t2, lp2, g2
        n1 += n2
        s1 = s2 and _no_uturn(tm, rm, tp, rp, inv_mass)
        a1 += a2
        na1 += na2
        div1 = div1 or div2
    return (tm, rm, gm, tp, rp, gp, t1, lp1, g1, n1, s1, a1, na1, div1)


def _transition(f, theta, lp, grad, step, inv_mass, rng, max_depth):
    r0 = rng.standard_normal(theta.size) / np.sqrt(inv_mass)
    h0 = lp - 0.5 * float(np.dot(inv_mass * r0, r0))
    logu = h0 - rng.exponential()
    tm = tp = theta
    rm = rp = r0
    gm = gp = grad
    prop = (theta, lp, grad)
    n_keep = 1
    depth = 0
    divergent = False
    alpha_sum = 0.0
    alpha_n = 0
    running = True
    while running and depth < max_depth:
        v = 1 if rng.random() < 0.5 else -1
        if v == -1:
            out = _build_tree(f, tm, rm, gm, logu, v, depth, step, inv_mass, rng, h0)
            (tm, rm, gm, _, _, _, t1, lp1, g1, n1, s1, a1, na1, div) = out
        else:
            out = _build_tree(f, tp, rp, gp, logu, v, depth, step, inv_mass, rng, h0)
            (_, _, _, tp, rp, gp, t1, lp1, g1, n1, s1, a1, na1, div) = out
        divergent = divergent or div
        if s1 and rng.random() < n1 / max(n_keep, 1):
            prop = (t1, lp1, g1)
        n_keep += n1
        alpha_sum += a1
        alpha_n += na1
        running = s1 and _no_uturn(tm, rm, tp, rp, inv_mass)
        depth += 1
    accept = alpha_sum / max(alpha_n, 1)
    return prop[0], prop[1], prop[2], depth, divergent, accept


# -- per-chain driver


def _init_chain(post, rng, attempts=10):
    last_err = None
    for _ in range(attempts):
        theta = post.initial_point(rng)
        lp, grad = post.logpost_grad(theta)
        if np.isfinite(lp) and np.isfinite(grad).all():
            return theta, lp, grad
        try:
            post.check(theta)
        except FloatingPointError as err:
            last_err = err
    raise SamplerError(
        f"non-finite log-posterior at initialization: {last_err}"
    )


def _gradient_check(post, theta, rtol=1e-4, n_coords=8, rng=None):
    lp0, grad = post.logpost_grad(theta)
    idx = np.arange(theta.size)
    if theta.size > n_coords:
        idx = (rng or np.random.default_rng(0)).choice(
            theta.size, n_coords, replace=False
        )
    for j in idx:
        h = 1e-5 * (1.0 + abs(theta[j]))
        tp = theta.copy()
        tp[j] += h
        tm = theta.copy()
        tm[j] -= h
        fd = (post.logpost_grad(tp)[0] - post.logpost_grad(tm)[0]) / (2 * h)
        err = abs(fd - grad[j]) / max(abs(fd), abs(grad[j]), 1e-8)
        if err > rtol:
            raise SamplerError(
                "gradient check failed at initialization for parameter "
                f"{post.param_names[j]} (relative error {err:.2e})"
            )


def _run_chain(post, config, chain):
    f = post.logpost_grad
    rng = np.random.default_rng((config.seed, chain))
    theta, lp, grad = _init_chain(post, rng)
    n = theta.size
    inv_mass = np.ones(n)
    step = _find_step_size(f, theta, lp, grad, inv_mass, rng)
    da = _DualAveraging(step, target=config.target_accept)
    windows = _warmup_windows(config.warmup)
    window_ends = {end: start for start, end in windows}
    in_slow = np.zeros(config.warmup, dtype=bool)
    for start, end in windows:
        in_slow[start:end] = True
    welford = _Welford(n)

    for it in range(config.warmup):
        theta, lp, grad, _, _, accept = _transition(
            f, theta, lp, grad, step, inv_mass, rng, config.max_treedepth
        )
        step = da.update(accept)
        if in_slow[it]:
            welford.add(theta)
        if (it + 1) in window_ends:
            inv_mass = welford.variance()
            welford = _Welford(n)
            step = _find_step_size(f, theta, lp, grad, inv_mass, rng)
            da = _DualAveraging(step, target=config.target_accept)
    step = da.adapted()

    draws = np.empty((config.samples, n))
    depths = np.empty(config.samples, dtype=np.int64)
    accepts = np.empty(config.samples)
    n_div = 0
    for it in range(config.samples):
        theta, lp, grad, depth, divergent, accept = _transition(
            f, theta, lp, grad, step, inv_mass, rng, config.max_treedepth
        )
        draws[it] = theta
        depths[it] = depth
        accepts[it] = accept
        n_div += divergent
    return draws, depths, accepts, n_div, step


def sample(posterior, config=None, *, chain_posteriors=None, compute_loglik=True):
    """Draw from a posterior; all chains run sequentially and reproducibly.

    ``chain_posteriors`` substitutes a per-chain posterior (used by the
    adequacy loop to run chains on different integration grids); all must
    share the parameterization of ``posterior``.
    """
    config = config or ChainConfig()
    posts = list(chain_posteriors) if chain_posteriors is not None else None
    if posts is not None and len(posts) != config.n_chains:
        raise ValueError("chain_posteriors must supply one posterior per chain")
    first = posts[0] if posts else posterior
    rng = np.random.default_rng((config.seed, 1 << 20))
    theta0, _, _ = _init_chain(first, np.random.default_rng((config.seed, 0)))
    _gradient_check(first, theta0, rng=rng)

    per_chain = []
    for chain in range(config.n_chains):
        post_c = posts[chain] if posts else posterior
        per_chain.append(_run_chain(post_c, config, chain))

    n = first.n_params
    draws = np.stack([pc[0] for pc in per_chain], axis=1)
    depths = np.stack([pc[1] for pc in per_chain], axis=1)
    accepts = np.stack([pc[2] for pc in per_chain], axis=1)
    divergences = np.array([pc[3] for pc in per_chain])
    steps = np.array([pc[4] for pc in per_chain])

    total = config.samples * config.n_chains
    frac = divergences.sum() / total
    if frac > 0.10:
        raise SamplerError(
            f"{divergences.sum()} of {total} post-warmup transitions diverged "
            f"({100 * frac:.1f}%). The posterior geometry is too rough at the "
            "adapted step size; raise target_accept, tighten priors, or "
            "reparameterize (e.g. random effects are already non-centered; "
            "consider fewer spline knots)."
        )

    out = PosteriorDraws(
        draws=draws,
        param_names=tuple(first.param_names),
        divergences=divergences,
        step_sizes=steps,
        tree_depths=depths,
        accept_stats=accepts,
    )
    if compute_loglik:
        attach_loglik(out, posts or [posterior] * config.n_chains)
    return out


def attach_loglik(draws, chain_posteriors):
    """Fill ``draws.loglik`` by evaluating each kept draw's row log-liks."""
    s, c, _ = draws.draws.shape
    cols = []
    for chain in range(c):
        post = chain_posteriors[chain]
        for it in range(s):
            cols.append(post.loglik_rows(draws.draws[it, chain]))
    draws.loglik = np.column_stack(cols)
    return draws


# -- convergence diagnostics


def _split(x):
    half = x.shape[0] // 2
    return np.concatenate([x[:half], x[half : 2 * half]], axis=1)


def _rank_normalize(x):
    r = scipy.stats.rankdata(x, method="average").reshape(x.shape)
    return sps.ndtri((r - 0.375) / (x.size + 0.25))


def _basic_rhat(x):
    s = x.shape[0]
    w = x.var(axis=0, ddof=1).mean()
    b = s * x.mean(axis=0).var(ddof=1)
    if w == 0.0:
        return math.inf
    return math.sqrt(((s - 1) / s * w + b / s) / w)


def _as_chain_matrix(x, chains):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if chains is not None:
        x = x[:, list(chains)]
    if x.shape[0] < 4:
        raise ValueError("need at least 4 draws per chain")
    return x


def rhat(x, chains=None):
    """Rank-normalised split-Rhat, guarded by the raw split statistic.

    Returns the max of the rank-normalised bulk and folded (tail)
    variants and the plain split-Rhat.  Rank normalisation saturates once
    chains separate completely (ranks cannot spread further), so the raw
    statistic is kept as a lower bound; for converged chains all three
    agree near 1.  ``x`` is draws-by-chains for one parameter; ``chains``
    optionally restricts to a column subset.  Chains with no variance
    give +inf (see ``rhat_flag``).
    """
    x = _as_chain_matrix(x, chains)
    sx = _split(x)
    if np.ptp(sx) == 0.0:
        return math.inf
    bulk = _basic_rhat(_rank_normalize(sx))
    folded = _basic_rhat(_rank_normalize(np.abs(sx - np.median(sx))))
    return max(bulk, folded, _basic_rhat(sx))


def rhat_flag(x, chains=None):
    """"degenerate variance" when any split chain is constant, else None."""
    x = _as_chain_matrix(x, chains)
    sx = _split(x)
    if np.any(np.ptp(sx, axis=0) == 0.0):
        return "degenerate variance"
    return None


def ess(x, chains=None):
    """Effective sample size by Geyer's initial monotone sequence.

    Autocorrelations are estimated on split chains and summed in pairs
    until the first non-positive pair, enforcing monotone decay.  Capped
    at the total number of draws; 0 for constant draws.
    """
    x = _as_chain_matrix(x, chains)
    sx = _split(x)
    s, c = sx.shape
    if np.ptp(sx) == 0.0:
        return 0.0
    acov = np.empty((s, c))
    for k in range(c):
        acov[:, k] = _autocov(sx[:, k])
    chain_var = acov[0] * s / (s - 1)
    w = chain_var.mean()
    var_plus = w * (s - 1) / s
    if c > 1:
        var_plus += sx.mean(axis=0).var(ddof=1)
    if var_plus == 0.0:
        return 0.0
    rho = 1.0 - (w - acov.mean(axis=1)) / var_plus
    rho[0] = 1.0
    # Geyer pairs: keep while positive, then force monotone nonincreasing
    tau = 0.0
    prev = math.inf
    for k in range(0, s - 1, 2):
        pair = rho[k] + (rho[k + 1] if k + 1 < s else 0.0)
        if pair <= 0.0:
            break
        pair = min(pair, prev)
        tau += pair
        prev = pair
    tau = max(2 * tau - 1.0, 1e-12)
    n_total = x.shape[0] * x.shape[1]
    return float(min(n_total / tau, n_total))


def ess_flag(x, chains=None):
    x = _as_chain_matrix(x, chains)
    if np.ptp(_split(x)) == 0.0:
        return "degenerate variance"
    return None


def _autocov(v):
    n = v.size
    v = v - v.mean()
    m = 1
    while m < 2 * n:
        m <<= 1
    f = np.fft.rfft(v, m)
    ac = np.fft.irfft(f * np.conj(f), m)[:n].real
    return ac / n


def mcse(x, chains=None):
    """Monte Carlo standard error of the posterior mean."""
    x = _as_chain_matrix(x, chains)
    e = ess(x)
    if e <= 0.0:
        return math.inf
    return float(x.std(ddof=1) / math.sqrt(e))


# -- integration adequacy


@dataclass(frozen=True)
class AdequacyRecord:
    """One audit-trail row: the state that drove one branch decision."""

    n_int: int
    samples: int
    rhat_within: float
    rhat_all: float
    action: str


@dataclass
class AdequacyResult:
    draws: PosteriorDraws
    n_int: int
    trail: tuple

    @property
    def n_iterations(self):
        return len(self.trail)


def adequacy_branch(rhat_within, rhat_all, threshold=RHAT_THRESHOLD):
    """Pure branch rule: mixing failures outrank grid failures.

    Returns "rerun-longer" when any same-grid group fails to mix,
    "double-points" when groups mix internally but disagree with each
    other, "accept" otherwise.
    """
    if rhat_within > threshold:
        return "rerun-longer"
    if rhat_all > threshold:
        return "double-points"
    return "accept"


def _group_rhat_max(draws, groups):
    worst = 0.0
    for chains in groups:
        worst = max(worst, draws.rhat_max(chains=chains))
    return worst


class _ModelRunner:
    """Default runner: builds per-chain posteriors at the requested grids."""

    def __init__(self, model):
        self.model = model
        self.last_posteriors = None

    def __call__(self, chain_n_ints, config):
        posts = [self.model.posterior(n_int=k) for k in chain_n_ints]
        self.last_posteriors = posts
        out = sample(
            posts[0], config, chain_posteriors=posts, compute_loglik=False
        )
        out.chain_n_int = tuple(chain_n_ints)
        return out


def integration_adequacy_run(
    model,
    config=None,
    *,
    n_int=64,
    max_n_int=4096,
    threshold=RHAT_THRESHOLD,
    max_retries=3,
    runner=None,
    compute_loglik=True,
):
    """Sample with automatic escalation of the integration grid size.

    Chains 1..ceil(C/2) use the full grid, the rest its first half, so the
    two groups share a point-stream prefix and differ only by integration
    error.  Each iteration classifies the worst within-group and overall
    Rhat: poor within-group mixing reruns with doubled post-warmup samples
    (a sampler problem), poor overall agreement doubles the grid (an
    integration problem).  The audit ``trail`` records every decision.

    ``runner(chain_n_ints, config) -> PosteriorDraws`` may be injected for
    testing; the default builds posteriors from ``model``.
    """
    config = config or ChainConfig()
    own_runner = runner is None
    if own_runner:
        runner = _ModelRunner(model)
    has_agd = getattr(model, "has_agd", True)
    if not has_agd:
        draws = runner([n_int] * config.n_chains, config)
        if compute_loglik and own_runner and draws.loglik is None:
            attach_loglik(draws, runner.last_posteriors)
        return AdequacyResult(draws=draws, n_int=n_int, trail=())

    n_hi = (config.n_chains + 1) // 2
    groups = [tuple(range(n_hi)), tuple(range(n_hi, config.n_chains))]
    groups = [g for g in groups if g]
    trail = []
    cfg = config
    n = n_int
    retries = 0
    while True:
        chain_ints = [n] * n_hi + [(n + 1) // 2] * (config.n_chains - n_hi)
        draws = runner(chain_ints, cfg)
        r_all = draws.rhat_max()
        r_within = _group_rhat_max(draws, groups)
        action = adequacy_branch(r_within, r_all, threshold)
        trail.append(
            AdequacyRecord(
                n_int=n,
                samples=cfg.samples,
                rhat_within=r_within,
                rhat_all=r_all,
                action=action,
            )
        )
        if action == "rerun-longer":
            retries += 1
            if retries > max_retries:
                raise AdequacyError(
                    "chains failed to mix within their grid groups after "
                    f"{max_retries} sample-doubling retries "
                    f"(last within-group Rhat {r_within:.3f}); this is a "
                    "sampler problem, not an integration problem. "
                    + _format_trail(trail),
                    trail,
                )
            cfg = replace(cfg, samples=cfg.samples * 2)
        elif action == "double-points":
            n *= 2
            if n > max_n_int:
                raise AdequacyError(
                    f"integration grid escalated past max_n_int={max_n_int} "
                    "without chain agreement. " + _format_trail(trail),
                    trail,
                )
        else:
            if compute_loglik and own_runner and draws.loglik is None:
                attach_loglik(draws, runner.last_posteriors)
            return AdequacyResult(draws=draws, n_int=n, trail=tuple(trail))


def _format_trail(trail):
    rows = [
        f"(n_int={r.n_int}, samples={r.samples}, "
        f"rhat_within={r.rhat_within:.3f}, rhat_all={r.rhat_all:.3f}, "
        f"action={r.action})"
        for r in trail
    ]
    return "audit trail: " + "; ".join(rows)
