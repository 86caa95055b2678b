import math

import numpy as np
import pytest

from mlnmr.sampler import (
    AdequacyError,
    ChainConfig,
    PosteriorDraws,
    SamplerError,
    _warmup_windows,
    adequacy_branch,
    attach_loglik,
    ess,
    ess_flag,
    integration_adequacy_run,
    mcse,
    rhat,
    rhat_flag,
    sample,
)


class GaussianTarget:
    """Multivariate normal log density with exact gradient."""

    def __init__(self, mean, cov):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        self.cov = cov
        self.prec = np.linalg.inv(cov)
        self.n_params = self.mean.size
        self.param_names = tuple(f"p{i}" for i in range(self.n_params))

    def logpost_grad(self, theta):
        d = theta - self.mean
        g = -self.prec @ d
        return -0.5 * float(d @ self.prec @ d), g

    def loglik_rows(self, theta):
        return np.array([self.logpost_grad(theta)[0]])

    def initial_point(self, rng):
        return rng.uniform(-2.0, 2.0, self.n_params)

    def check(self, theta):
        pass


class TruncatedTarget(GaussianTarget):
    """Standard normal with a hard wall; trajectories that cross diverge."""

    def __init__(self, dim, wall):
        super().__init__(np.zeros(dim), np.eye(dim))
        self.wall = wall

    def logpost_grad(self, theta):
        if theta[0] > self.wall:
            return -np.inf, np.zeros_like(theta)
        return super().logpost_grad(theta)

    def initial_point(self, rng):
        theta = rng.uniform(-2.0, 2.0, self.n_params)
        theta[0] = -abs(theta[0])
        return theta


class BrokenGradientTarget(GaussianTarget):
    def logpost_grad(self, theta):
        lp, g = super().logpost_grad(theta)
        return lp, g + 0.5


class NowhereFiniteTarget:
    n_params = 3
    param_names = ("mu[s1]", "beta1[x]", "gamma[B]")

    def logpost_grad(self, theta):
        return -np.inf, np.zeros(3)

    def initial_point(self, rng):
        return rng.uniform(-2.0, 2.0, 3)

    def check(self, theta):
        raise FloatingPointError("non-finite gradient for mu[s1]")


def test_config_validation():
    with pytest.raises(ValueError):
        ChainConfig(n_chains=1)
    with pytest.raises(ValueError):
        ChainConfig(warmup=100)
    with pytest.raises(ValueError):
        ChainConfig(samples=0)
    with pytest.raises(ValueError):
        ChainConfig(target_accept=1.0)


def test_warmup_windows_partition():
    assert _warmup_windows(150) == [(75, 100)]
    w = _warmup_windows(500)
    assert w[0] == (75, 100)
    assert w[-1][1] == 450
    for (a, b), (c, d) in zip(w, w[1:]):
        assert b == c
    assert all(b > a for a, b in w)


def test_conjugate_normal_recovery():
    # normal prior (0, 1), one normal observation 1.5 with sd 1:
    # posterior is N(0.75, 0.5)
    target = GaussianTarget([0.75], [[0.5]])
    cfg = ChainConfig(n_chains=4, warmup=200, samples=500, seed=3)
    out = sample(target, cfg, compute_loglik=False)
    x = out.parameter("p0")
    se = mcse(x)
    assert abs(x.mean() - 0.75) < 4 * se
    e = ess(x)
    sd_se = math.sqrt(0.5) / math.sqrt(2 * (e - 1))
    assert abs(x.std(ddof=1) - math.sqrt(0.5)) < 4 * sd_se


def test_standard_normal_10d():
    target = GaussianTarget(np.zeros(10), np.eye(10))
    cfg = ChainConfig(n_chains=4, warmup=300, samples=500, seed=7)
    out = sample(target, cfg, compute_loglik=False)
    for name in out.param_names:
        x = out.parameter(name)
        e = ess(x)
        assert e > 0.5 * out.n_total
        assert abs(x.mean()) < 4.0 / math.sqrt(e)
        assert out.rhat(name) < 1.02


def test_correlated_gaussian_covariance():
    cov = np.array([[1.0, 0.9], [0.9, 1.0]])
    target = GaussianTarget(np.zeros(2), cov)
    cfg = ChainConfig(n_chains=4, warmup=400, samples=2500, seed=11)
    out = sample(target, cfg, compute_loglik=False)
    for name in out.param_names:
        assert ess(out.parameter(name)) > 1000
    emp = np.cov(out.flat().T)
    np.testing.assert_allclose(emp, cov, rtol=0.10)


def test_fixed_seed_bit_identical():
    target = GaussianTarget(np.zeros(3), np.eye(3))
    cfg = ChainConfig(n_chains=2, warmup=150, samples=50, seed=21)
    a = sample(target, cfg, compute_loglik=False)
    b = sample(target, cfg, compute_loglik=False)
    np.testing.assert_array_equal(a.draws, b.draws)
    np.testing.assert_array_equal(a.tree_depths, b.tree_depths)
    c = sample(
        target,
        ChainConfig(n_chains=2, warmup=150, samples=50, seed=22),
        compute_loglik=False,
    )
    assert not np.array_equal(a.draws, c.draws)


def test_divergence_failure_carries_guidance():
    target = TruncatedTarget(2, wall=0.3)
    cfg = ChainConfig(n_chains=2, warmup=150, samples=200, seed=5)
    with pytest.raises(SamplerError, match="diverged"):
        sample(target, cfg, compute_loglik=False)
    try:
        sample(target, cfg, compute_loglik=False)
    except SamplerError as err:
        assert "target_accept" in str(err)


def test_nonfinite_init_names_block():
    with pytest.raises(SamplerError, match=r"mu\[s1\]"):
        sample(NowhereFiniteTarget(), ChainConfig(n_chains=2), compute_loglik=False)


def test_gradient_check_failure_names_parameter():
    target = BrokenGradientTarget(np.zeros(2), np.eye(2))
    with pytest.raises(SamplerError, match="gradient check"):
        sample(target, ChainConfig(n_chains=2), compute_loglik=False)


def test_loglik_matrix_shape():
    target = GaussianTarget(np.zeros(2), np.eye(2))
    cfg = ChainConfig(n_chains=2, warmup=150, samples=40, seed=2)
    out = sample(target, cfg)
    assert out.loglik.shape == (1, 80)
    # chain-major columns: first block comes from chain 0
    np.testing.assert_allclose(
        out.loglik[0, :40],
        [target.logpost_grad(out.draws[i, 0])[0] for i in range(40)],
    )


# -- diagnostics


def test_rhat_iid_near_one():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((10_000, 2))
    assert 0.999 <= rhat(x) <= 1.01


def test_rhat_separated_chains():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2000, 2))
    x[:, 1] += 5.0
    assert rhat(x) > 2.0


def test_rhat_duplicated_chain():
    rng = np.random.default_rng(2)
    c = rng.standard_normal(4000)
    assert abs(rhat(np.column_stack([c, c])) - 1.0) < 0.01
    trend = np.linspace(0.0, 3.0, 4000) + 0.1 * rng.standard_normal(4000)
    assert rhat(np.column_stack([trend, trend])) > 1.5


def test_rhat_constant_chains_degenerate():
    x = np.ones((100, 2))
    assert rhat(x) == math.inf
    assert rhat_flag(x) == "degenerate variance"
    y = np.column_stack([np.zeros(100), np.full(100, 5.0)])
    assert rhat(y) == math.inf
    z = np.random.default_rng(3).standard_normal((100, 2))
    assert rhat_flag(z) is None


def test_rhat_chain_subset():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2000, 4))
    x[:, 2:] += 5.0
    assert rhat(x) > 2.0
    assert rhat(x, chains=(0, 1)) < 1.01
    assert rhat(x, chains=(2, 3)) < 1.01


def test_rhat_needs_four_draws():
    with pytest.raises(ValueError):
        rhat(np.ones((3, 2)))


def test_ess_iid():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((5000, 4))
    assert 0.8 <= ess(x) / x.size <= 1.2


def test_ess_ar1():
    rng = np.random.default_rng(6)
    phi = 0.9
    n, c = 20_000, 4
    x = np.empty((n, c))
    x[0] = rng.standard_normal(c)
    innov = rng.standard_normal((n, c)) * math.sqrt(1 - phi**2)
    for i in range(1, n):
        x[i] = phi * x[i - 1] + innov[i]
    ratio = ess(x) / x.size
    expected = (1 - phi) / (1 + phi)
    assert expected * 0.7 <= ratio <= expected * 1.3


def test_ess_constant_degenerate():
    x = np.ones((100, 2))
    assert ess(x) == 0.0
    assert ess_flag(x) == "degenerate variance"


def test_mcse_iid():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1000, 4))
    expected = 1.0 / math.sqrt(x.size)
    assert 0.7 * expected <= mcse(x) <= 1.4 * expected


# -- integration adequacy


def test_adequacy_branch_table():
    cases = [
        (1.20, 1.20, "rerun-longer"),
        (1.06, 1.01, "rerun-longer"),
        (1.00, 1.20, "double-points"),
        (1.05, 1.05, "accept"),
        (1.00, 1.00, "accept"),
        (1.051, 1.00, "rerun-longer"),
        (1.00, 1.051, "double-points"),
    ]
    for rw, ra, want in cases:
        assert adequacy_branch(rw, ra) == want


def _fake_draws(rng, chain_means, samples=400):
    c = len(chain_means)
    draws = rng.standard_normal((samples, c, 1)) + np.asarray(chain_means).reshape(
        1, c, 1
    )
    return PosteriorDraws(
        draws=draws,
        param_names=("x",),
        divergences=np.zeros(c, dtype=int),
        step_sizes=np.ones(c),
        tree_depths=np.ones((samples, c), dtype=int),
        accept_stats=np.full((samples, c), 0.9),
    )


class RecordingRunner:
    """Runner double whose chain means are a function of the grid size."""

    def __init__(self, mean_of_n, seed=0):
        self.mean_of_n = mean_of_n
        self.calls = []
        self.rng = np.random.default_rng(seed)

    def __call__(self, chain_n_ints, config):
        self.calls.append((tuple(chain_n_ints), config.samples))
        means = [self.mean_of_n(n, i) for i, n in enumerate(chain_n_ints)]
        return _fake_draws(self.rng, means, samples=config.samples)


def test_adequacy_accepts_first_pass():
    runner = RecordingRunner(lambda n, i: 0.0)
    res = integration_adequacy_run(None, ChainConfig(samples=400), runner=runner)
    assert res.n_int == 64
    assert len(res.trail) == 1
    assert res.trail[0].action == "accept"
    assert runner.calls == [((64, 64, 32, 32), 400)]


def test_adequacy_doubles_on_grid_sensitivity():
    # posterior location depends on the grid until it has >= 64 points
    runner = RecordingRunner(lambda n, i: 0.0 if n >= 64 else 1.0)
    res = integration_adequacy_run(None, ChainConfig(samples=400), runner=runner)
    assert [r.action for r in res.trail] == ["double-points", "accept"]
    assert res.n_int == 128
    assert runner.calls[0][0] == (64, 64, 32, 32)
    assert runner.calls[1][0] == (128, 128, 64, 64)


def test_adequacy_classifies_sticky_sampler():
    # chains within the same grid group sit at different modes: a sampler
    # failure, resolved (here) by the longer rerun
    state = {"first": True}

    def mean(n, chain):
        if state["first"]:
            return 5.0 * (chain % 2)
        return 0.0

    runner = RecordingRunner(mean)

    def flipping(chain_n_ints, config):
        out = runner(chain_n_ints, config)
        state["first"] = False
        return out

    res = integration_adequacy_run(None, ChainConfig(samples=400), runner=flipping)
    assert [r.action for r in res.trail] == ["rerun-longer", "accept"]
    assert res.n_int == 64
    assert [c[1] for c in runner.calls] == [400, 800]


def test_adequacy_retry_exhaustion():
    runner = RecordingRunner(lambda n, i: 5.0 * (i % 2))
    with pytest.raises(AdequacyError, match="sampler problem"):
        integration_adequacy_run(
            None, ChainConfig(samples=200), runner=runner, max_retries=2
        )
    assert [c[1] for c in runner.calls] == [200, 400, 800]


def test_adequacy_max_grid_failure():
    runner = RecordingRunner(lambda n, i: 0.0 if i < 2 else 1.0)
    with pytest.raises(AdequacyError) as info:
        integration_adequacy_run(
            None, ChainConfig(samples=400), runner=runner, max_n_int=256
        )
    assert "max_n_int" in str(info.value)
    assert [r.n_int for r in info.value.trail] == [64, 128, 256]
    assert all(r.action == "double-points" for r in info.value.trail)


def test_adequacy_no_agd_returns_immediately():
    class Stub:
        has_agd = False

    runner = RecordingRunner(lambda n, i: 0.0)
    res = integration_adequacy_run(Stub(), ChainConfig(samples=300), runner=runner)
    assert res.trail == ()
    assert res.n_int == 64
    assert runner.calls == [((64, 64, 64, 64), 300)]


def test_adequacy_chain_assignment_odd():
    runner = RecordingRunner(lambda n, i: 0.0)
    cfg = ChainConfig(n_chains=3, samples=400)
    integration_adequacy_run(None, cfg, runner=runner)
    assert runner.calls[0][0] == (64, 64, 32)


def test_attach_loglik_orientation():
    target = GaussianTarget(np.zeros(2), np.eye(2))
    cfg = ChainConfig(n_chains=2, warmup=150, samples=10, seed=9)
    out = sample(target, cfg, compute_loglik=False)
    assert out.loglik is None
    attach_loglik(out, [target, target])
    assert out.loglik.shape == (1, 20)
