"""Quasi-Monte Carlo covariate grids for aggregate-level populations.

An aggregate arm is summarised by marginal covariate distributions plus a
correlation matrix.  The integration grid that stands in for its joint
covariate distribution is built from an unscrambled Sobol' sequence pushed
through a Gaussian copula: uniforms -> correlated normal scores -> marginal
quantile functions.  Everything is deterministic given the marginals,
correlation and skip, and doubling the point count keeps the existing points
as a prefix, so integration refinement reuses earlier structure.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.special as sps
import scipy.stats
from scipy.stats import qmc

__all__ = ["sobol", "build_grid", "refine_grid", "IntegrationGrid", "MAX_DIM"]

# Hard cap on dimension; direction numbers beyond this are not wanted here
# and nobody should be integrating a covariate vector that wide anyway.
MAX_DIM = 64


def sobol(dim, n, skip=0):
    """First ``n`` points of the unscrambled Sobol' sequence in ``dim`` D.

    The degenerate all-zeros point at index 0 is always dropped; ``skip``
    then discards that many further points before the returned block.  All
    returned coordinates lie strictly inside (0, 1).

    Parameters
    ----------
    dim : int
        Dimension, 1..64.
    n : int
        Number of points; powers of two keep the sequence well balanced.
    skip : int
        Extra points to discard after the index-0 drop.
    """
    if not 1 <= dim <= MAX_DIM:
        raise ValueError(f"sobol dimension must be in 1..{MAX_DIM}, got {dim}")
    if n < 1:
        raise ValueError("need at least one point")
    eng = qmc.Sobol(d=dim, scramble=False)
    eng.fast_forward(1 + skip)
    with warnings.catch_warnings():
        # unbalanced n is the caller's informed choice
        warnings.simplefilter("ignore", UserWarning)
        pts = eng.random(n)
    return pts


def _factor_correlation(corr, dim):
    """Lower-triangular factor of a correlation matrix, tolerant of
    semi-definite input (eigenvalue clip plus unit-diagonal rescale)."""
    if corr is None:
        return np.eye(dim)
    corr = np.asarray(corr, dtype=float)
    if corr.shape != (dim, dim):
        raise ValueError(f"correlation must be {dim}x{dim}, got {corr.shape}")
    if not np.allclose(corr, corr.T, atol=1e-10):
        raise ValueError("correlation matrix must be symmetric")
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(0.5 * (corr + corr.T))
        vals = np.clip(vals, 0.0, None)
        fixed = (vecs * vals) @ vecs.T
        d = np.sqrt(np.clip(np.diag(fixed), 1e-12, None))
        fixed = fixed / np.outer(d, d)
        return np.linalg.cholesky(fixed + 1e-12 * np.eye(dim))


def _marginal_quantile(name, params, u, z):
    """Quantile transform of one covariate column.

    ``u`` are copula uniforms, ``z`` the matching normal scores (used
    directly for normal marginals, which keeps them exact).
    """
    if name == "normal":
        return params["mean"] + params["sd"] * z
    if name == "gamma":
        if "shape" in params and "rate" in params:
            shape, rate = params["shape"], params["rate"]
        else:
            # moment match from mean/sd
            shape = (params["mean"] / params["sd"]) ** 2
            rate = params["mean"] / params["sd"] ** 2
        return scipy.stats.gamma.ppf(u, shape, scale=1.0 / rate)
    if name == "bernoulli":
        return (u > 1.0 - params["prop"]).astype(float)
    raise KeyError(f"unknown marginal family {name!r}")


def _marginal_cdf(name, params, x):
    if name == "normal":
        return scipy.stats.norm.cdf(x, loc=params["mean"], scale=params["sd"])
    if name == "gamma":
        if "shape" in params and "rate" in params:
            shape, rate = params["shape"], params["rate"]
        else:
            shape = (params["mean"] / params["sd"]) ** 2
            rate = params["mean"] / params["sd"] ** 2
        return scipy.stats.gamma.cdf(x, shape, scale=1.0 / rate)
    if name == "bernoulli":
        p = params["prop"]
        return np.where(x < 0, 0.0, np.where(x < 1, 1 - p, 1.0))
    raise KeyError(name)


@dataclass
class IntegrationGrid:
    """A QMC covariate grid plus the recipe that built it.

    ``points`` has one row per integration point, columns in the order of
    ``names``.  The construction recipe is retained so the grid can be
    refined (doubled) while keeping existing rows as a prefix.
    """

    points: np.ndarray
    names: tuple
    marginals: tuple  # (family, params dict) per column
    correlation: np.ndarray = None
    skip: int = 0

    @property
    def n_points(self):
        return self.points.shape[0]


def build_grid(names, marginals, n_points, correlation=None, skip=0, check=True):
    """Build a QMC integration grid for one population.

    Parameters
    ----------
    names : sequence of str
        Covariate names, one per column.
    marginals : sequence of (family, params)
        Marginal spec per column: ``("normal", {"mean", "sd"})``,
        ``("gamma", {"shape", "rate"})`` or ``{"mean", "sd"}``, or
        ``("bernoulli", {"prop"})``.
    n_points : int
        Grid size; powers of two are strongly recommended (refinement
        doubles, so they stay powers of two).
    correlation : ndarray, optional
        Copula correlation; identity when omitted.
    skip : int
        Sobol' skip passed through to :func:`sobol`.
    check : bool
        Run the construction-time marginal sanity check (warning only).
    """
    names = tuple(names)
    dim = len(names)
    if dim != len(marginals):
        raise ValueError("one marginal spec per covariate is required")
    u_raw = sobol(dim, n_points, skip=skip)
    z = sps.ndtri(u_raw)
    lower = _factor_correlation(correlation, dim)
    zc = z @ lower.T
    uc = sps.ndtr(zc)
    cols = []
    for j, (fam, params) in enumerate(marginals):
        cols.append(_marginal_quantile(fam, params, uc[:, j], zc[:, j]))
    pts = np.column_stack(cols) if cols else np.empty((n_points, 0))
    grid = IntegrationGrid(
        points=pts,
        names=names,
        marginals=tuple((f, dict(p)) for f, p in marginals),
        correlation=None if correlation is None else np.asarray(correlation, float),
        skip=skip,
    )
    if check and dim:
        _marginal_check(grid)
    return grid


def _marginal_check(grid):
    """Kolmogorov-style sanity check of each column against its target
    marginal; deterministic grids should sit far below the noise of an iid
    sample, so breaching an iid-scale band means something is wrong."""
    n = grid.n_points
    band = 2.0 / np.sqrt(n) + 0.15
    for j, (fam, params) in enumerate(grid.marginals):
        x = np.sort(grid.points[:, j])
        cdf = _marginal_cdf(fam, params, x)
        if fam == "bernoulli":
            stat = abs(np.mean(grid.points[:, j]) - params["prop"])
        else:
            ecdf_hi = np.arange(1, n + 1) / n
            ecdf_lo = np.arange(0, n) / n
            stat = max(np.max(np.abs(cdf - ecdf_hi)), np.max(np.abs(cdf - ecdf_lo)))
        if stat > band:
            warnings.warn(
                f"integration grid column {grid.names[j]!r} deviates from its "
                f"{fam} marginal (discrepancy {stat:.3f})",
                RuntimeWarning,
                stacklevel=3,
            )


def refine_grid(grid):
    """Double a grid's point count, keeping existing points as the prefix.

    The whole pipeline is row-wise over the Sobol' stream, so regenerating at
    twice the size reproduces the original rows exactly and appends the new
    ones.
    """
    return build_grid(
        grid.names,
        grid.marginals,
        2 * grid.n_points,
        correlation=grid.correlation,
        skip=grid.skip,
        check=False,
    )
