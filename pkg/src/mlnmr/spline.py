"""M-spline / I-spline bases for baseline hazards.

An order-``kappa`` M-spline basis on knots ``zeta_0 < zeta_1 < ... < zeta_{L+1}``
(boundaries plus ``L`` internal knots) has ``L + kappa`` non-negative basis
functions, each integrating to one over its support.  A hazard is modelled as
``h0(t) = alpha^T M(t)`` with ``alpha`` on the simplex, and the matching
cumulative hazard is ``H0(t) = alpha^T I(t)`` where the I-splines are the
running integrals of the M-splines.

M-splines are evaluated by the Ramsay recursion; I-splines independently via
partial sums of an order-``kappa+1`` B-spline basis.  The two routes agreeing
(M equals dI/dt) is one of the test-suite invariants.

Evaluation outside the boundary knots raises; extrapolation policy is the
survival model's business, not the basis's.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "KnotSequence",
    "SplineBasis",
    "default_knots",
    "mspline_eval",
    "ispline_eval",
    "softmax_simplex",
    "inverse_softmax",
    "rw_prior_scaffold",
]


@dataclass(frozen=True)
class KnotSequence:
    """Boundary and internal knots defining a spline basis.

    Parameters
    ----------
    lower, upper : float
        Boundary knots, ``lower < upper``.
    internal : tuple of float
        Strictly increasing knots inside the open interval.
    """

    lower: float
    upper: float
    internal: tuple = ()

    def __post_init__(self):
        internal = tuple(float(v) for v in self.internal)
        object.__setattr__(self, "internal", internal)
        object.__setattr__(self, "lower", float(self.lower))
        object.__setattr__(self, "upper", float(self.upper))
        if not np.isfinite(self.lower) or not np.isfinite(self.upper):
            raise ValueError("knot boundaries must be finite")
        if self.lower >= self.upper:
            raise ValueError(
                f"lower boundary {self.lower} must be below upper {self.upper}"
            )
        arr = np.asarray(internal)
        if arr.size:
            if np.any(np.diff(arr) <= 0):
                raise ValueError("internal knots must be strictly increasing")
            if arr[0] <= self.lower or arr[-1] >= self.upper:
                raise ValueError("internal knots must lie strictly inside the boundaries")

    @property
    def range(self):
        return self.upper - self.lower

    @property
    def all_knots(self):
        return np.concatenate(([self.lower], self.internal, [self.upper]))

    def augmented(self, kappa):
        """Knot vector with each boundary replicated ``kappa`` times."""
        if kappa < 1:
            raise ValueError("spline order kappa must be >= 1")
        return np.concatenate(
            (
                np.full(kappa, self.lower),
                self.internal,
                np.full(kappa, self.upper),
            )
        )

    def n_basis(self, kappa):
        return len(self.internal) + kappa

    def scaled(self, factor):
        """Knots multiplied by a positive factor (timescale change)."""
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        return KnotSequence(
            self.lower * factor,
            self.upper * factor,
            tuple(z * factor for z in self.internal),
        )


def default_knots(times, n_internal, status=None, boundary=None):
    """Quantile-based knot placement from observed times.

    Internal knots sit at evenly spaced quantiles of the event times
    (censored rows are excluded when ``status`` is given); boundaries default
    to 0 and the maximum observed time over all rows.  Tied quantiles are
    nudged apart by ``1e-9 * range`` so the sequence stays strictly
    increasing.

    Parameters
    ----------
    times : array_like
        Observed times, events and censorings alike.
    n_internal : int
        Number of internal knots ``L >= 0``.
    status : array_like of {0, 1}, optional
        Event indicators; quantiles are taken over ``times[status == 1]``.
    boundary : (float, float), optional
        Override the default ``(0, max(times))`` boundaries.

    Returns
    -------
    KnotSequence
    """
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise ValueError("cannot place knots on an empty time vector")
    if n_internal < 0:
        raise ValueError("n_internal must be >= 0")
    if boundary is None:
        lower, upper = 0.0, float(np.max(times))
    else:
        lower, upper = float(boundary[0]), float(boundary[1])
    pool = times if status is None else times[np.asarray(status) == 1]
    if pool.size == 0:
        pool = times
    if n_internal == 0:
        return KnotSequence(lower, upper, ())
    probs = np.arange(1, n_internal + 1) / (n_internal + 1)
    internal = np.quantile(pool, probs)
    internal = np.clip(internal, lower, upper)
    # break ties / degenerate placement with a tiny deterministic jitter
    eps = 1e-9 * (upper - lower)
    for i in range(1, len(internal)):
        if internal[i] <= internal[i - 1]:
            internal[i] = internal[i - 1] + eps
    lo = lower + eps
    hi = upper - eps * (n_internal + 1)
    internal = np.clip(internal, lo, None)
    for i in range(len(internal)):
        internal[i] = max(internal[i], lo + i * eps)
    if internal[-1] >= upper:
        internal = np.minimum(internal, np.linspace(hi, upper - eps, n_internal))
    return KnotSequence(lower, upper, tuple(internal))


def _interval_index(taus, t, lower, upper):
    """Index s with taus[s] <= t < taus[s+1], top boundary clamped left."""
    idx = np.searchsorted(taus, t, side="right") - 1
    widths = np.diff(taus)
    nonempty = np.nonzero(widths > 0)[0]
    last = nonempty[-1]
    idx = np.where(t >= upper, last, idx)
    return idx


def _bspline_matrix(taus, order, t, lower, upper):
    """Dense (len(t), len(taus) - order) B-spline design by Cox-de Boor."""
    t = np.asarray(t, dtype=float)
    n = t.shape[0]
    idx = _interval_index(taus, t, lower, upper)
    m1 = len(taus) - 1
    b = np.zeros((n, m1))
    b[np.arange(n), idx] = 1.0
    for r in range(2, order + 1):
        cols = len(taus) - r
        nxt = np.zeros((n, cols))
        for s in range(cols):
            left_den = taus[s + r - 1] - taus[s]
            right_den = taus[s + r] - taus[s + 1]
            acc = 0.0
            if left_den > 0:
                acc = (t - taus[s]) / left_den * b[:, s]
            if right_den > 0:
                acc = acc + (taus[s + r] - t) / right_den * b[:, s + 1]
            nxt[:, s] = acc
        b = nxt
    return b


def _mspline_matrix(taus, kappa, t, lower, upper):
    """Dense M-spline design via the Ramsay recursion."""
    t = np.asarray(t, dtype=float)
    n = t.shape[0]
    idx = _interval_index(taus, t, lower, upper)
    m1 = len(taus) - 1
    widths = np.diff(taus)
    m = np.zeros((n, m1))
    ok = widths[idx] > 0
    m[np.arange(n)[ok], idx[ok]] = 1.0 / widths[idx[ok]]
    for r in range(2, kappa + 1):
        cols = len(taus) - r
        nxt = np.zeros((n, cols))
        for s in range(cols):
            den = (r - 1) * (taus[s + r] - taus[s])
            if den > 0:
                nxt[:, s] = (
                    r
                    * ((t - taus[s]) * m[:, s] + (taus[s + r] - t) * m[:, s + 1])
                    / den
                )
        m = nxt
    return m


@dataclass
class SplineBasis:
    """An M/I-spline basis of order ``kappa`` on a knot sequence.

    Design matrices are cached per distinct time vector, since model fitting
    evaluates the same observation times at every iteration.
    """

    knots: KnotSequence
    kappa: int = 4
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kappa < 1:
            raise ValueError("spline order kappa must be >= 1")

    @property
    def n_basis(self):
        return self.knots.n_basis(self.kappa)

    def _validate(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t < self.knots.lower) or np.any(t > self.knots.upper):
            raise ValueError(
                "time outside the boundary knots "
                f"[{self.knots.lower}, {self.knots.upper}]; extrapolation is "
                "handled by the survival model, not the basis"
            )
        return t

    def m_matrix(self, t):
        """M-spline design matrix, shape ``(len(t), n_basis)``."""
        t = self._validate(t)
        key = ("m", t.tobytes())
        if key not in self._cache:
            taus = self.knots.augmented(self.kappa)
            self._cache[key] = _mspline_matrix(
                taus, self.kappa, t, self.knots.lower, self.knots.upper
            )
        return self._cache[key]

    def i_matrix(self, t):
        """I-spline design matrix (running integrals of the M-splines)."""
        t = self._validate(t)
        key = ("i", t.tobytes())
        if key not in self._cache:
            aug2 = np.concatenate(
                ([self.knots.lower], self.knots.augmented(self.kappa), [self.knots.upper])
            )
            b2 = _bspline_matrix(
                aug2, self.kappa + 1, t, self.knots.lower, self.knots.upper
            )
            # I_s(t) = sum of higher-order B-splines with index > s
            suffix = np.cumsum(b2[:, ::-1], axis=1)[:, ::-1]
            self._cache[key] = np.ascontiguousarray(suffix[:, 1:])
        return self._cache[key]


def mspline_eval(basis, t):
    """Evaluate every M-spline basis function at scalar or vector ``t``."""
    return basis.m_matrix(np.atleast_1d(t))


def ispline_eval(basis, t):
    """Evaluate every I-spline basis function at scalar or vector ``t``."""
    return basis.i_matrix(np.atleast_1d(t))


def softmax_simplex(v):
    """Map ``R^(S-1)`` to the interior of the S-simplex.

    The first coordinate is the anchored one: ``softmax_simplex(zeros)`` is
    uniform, and the inverse of the map is :func:`inverse_softmax`.
    """
    v = np.asarray(v, dtype=float)
    m = max(0.0, np.max(v)) if v.size else 0.0
    e = np.concatenate(([np.exp(-m)], np.exp(v - m)))
    return e / e.sum()


def inverse_softmax(alpha):
    """Logits of a simplex vector relative to its first coordinate."""
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise ValueError("simplex coordinates must be strictly positive")
    return np.log(alpha[1:]) - np.log(alpha[0])


def rw_prior_scaffold(knots, kappa):
    """Prior mean and step weights for the random-walk prior on spline logits.

    Returns
    -------
    c : ndarray, shape (n_basis - 1,)
        Logit prior mean; its softmax gives coefficients whose hazard is
        exactly flat at ``1 / knots.range``.
    w : ndarray, shape (n_basis - 1,)
        Positive step-variance weights, normalised to sum one.  Proportional
        to the augmented-knot span each logit increment bridges, so they are
        invariant to a change of timescale.
    """
    taus = knots.augmented(kappa)
    nb = knots.n_basis(kappa)
    alpha_hat = (taus[kappa : kappa + nb] - taus[:nb]) / (kappa * knots.range)
    c = inverse_softmax(alpha_hat)
    if kappa >= 2:
        w = taus[kappa : kappa + nb - 1] - taus[1:nb]
    else:
        # order 1: span between midpoints of the two intervals the
        # increment connects
        w = 0.5 * (taus[2 : nb + 1] - taus[: nb - 1])
    w = np.asarray(w, dtype=float)
    w = w / w.sum()
    return c, w
