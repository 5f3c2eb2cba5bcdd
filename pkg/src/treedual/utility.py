"""Utility/conjugate pairs on the whole real line.

Two built-in families:

* ``exponential``: ``U(x) = shift - exp(-gamma*x)/gamma`` with closed-form
  conjugate ``V(y) = shift + (y/gamma)*(ln y - 1)``.
* ``two_power``: polynomial tails ``U(x) = shift + ((1+x)^(1-a) - 1)/(1-a)``
  for ``x >= 0`` and ``U(x) = shift - ((1-x)^(1+b) - 1)/(1+b)`` for ``x < 0``.
  The conjugate has no closed form here and is evaluated by safeguarded
  root-finding on the strictly decreasing marginal ``U'``.

Boundary conventions use explicit infinities: ``V(0) = U(inf)``,
``V(inf) = inf``, ``V'(0) = -inf`` and ``V'(inf) = inf``.  Tail-elasticity and
growth conditions are certified numerically by :func:`certify_assumptions`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import AssumptionFailError, DomainError, ParseError

INF = float("inf")

# root-finding residual target for conjugate evaluation: |U'(x*) - y| <= RES*(1+y)
_MARGINAL_RESIDUAL = 1e-12


@dataclass(frozen=True, eq=False)
class UtilityPair:
    """A utility function with its convex conjugate and derivatives.

    All evaluators are vectorized over numpy arrays.  ``u_inf`` is the
    supremum of U (finite for the exponential family), ``ae_plus`` and
    ``ae_minus`` are the claimed tail elasticities, and ``growth_constant``
    bounds ``y*|V'(y)| / V(y)`` when known analytically.
    """

    family: str
    params: Mapping[str, float]
    u: Callable
    u_prime: Callable
    v: Callable
    v_prime: Callable
    v_second: Callable
    u_inf: float
    ae_plus: float
    ae_minus: float
    growth_constant: float | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def describe(self) -> str:
        ps = ",".join(f"{k}={v:g}" for k, v in self.params.items())
        return f"{self.family}:{ps}"


def _vectorized(fn):
    """Wrap an array-in/array-out function so scalars come back as floats."""

    def wrapped(x):
        arr = np.asarray(x, dtype=float)
        out = fn(np.atleast_1d(arr))
        return float(out[0]) if arr.ndim == 0 else out

    return wrapped


# -- exponential family -------------------------------------------------------

def exponential_utility(gamma: float, shift: float = 0.0) -> UtilityPair:
    """Exponential utility with absolute risk aversion ``gamma`` (> 0).

    ``shift`` moves U additively; ``shift > 1/gamma`` makes U(0) positive,
    which the certification checks require.
    """
    if gamma <= 0:
        raise DomainError("gamma must be positive")
    g = float(gamma)
    c = float(shift)

    def u(x):
        with np.errstate(over="ignore"):
            return c - np.exp(-g * x) / g

    def u_prime(x):
        with np.errstate(over="ignore"):
            return np.exp(-g * x)

    def v(y):
        _check_conjugate_domain(y)
        out = np.empty_like(y)
        pos = y > 0
        finite = pos & np.isfinite(y)
        with np.errstate(divide="ignore", invalid="ignore"):
            yy = y[finite]
            out[finite] = c + yy * (np.log(yy) - 1.0) / g
        out[y == 0] = c          # V(0) = U(inf)
        out[np.isinf(y)] = INF
        return out

    def v_prime(y):
        _check_conjugate_domain(y)
        with np.errstate(divide="ignore"):
            return np.log(y) / g  # -inf at 0, +inf at inf

    def v_second(y):
        _check_conjugate_domain(y)
        with np.errstate(divide="ignore"):
            return 1.0 / (g * y)

    return UtilityPair(
        family="exponential",
        params={"gamma": g, "C": c},
        u=_vectorized(u),
        u_prime=_vectorized(u_prime),
        v=_vectorized(v),
        v_prime=_vectorized(v_prime),
        v_second=_vectorized(v_second),
        u_inf=c,
        ae_plus=0.0,
        ae_minus=INF,
    )


def _check_conjugate_domain(y):
    if np.any(y < 0) or np.any(np.isnan(y)):
        raise DomainError("conjugate argument must be >= 0")


# -- two-power family ----------------------------------------------------------

def two_power_utility(a: float, b: float, shift: float = 1.0) -> UtilityPair:
    """Polynomial-tail utility: right tail exponent ``1-a``, left ``1+b``.

    Requires ``a`` in (0,1) and ``b > 0``; ``shift > 0`` keeps U(0) positive.
    The marginal is ``U'(x) = (1+x)^(-a)`` for x >= 0 and ``(1-x)^b`` below,
    so it is C^1 at 0 with U'(0) = 1.  Tail elasticities are ``1-a`` and
    ``1+b``.  V is evaluated by root-finding on U'.
    """
    if not (0.0 < a < 1.0):
        raise DomainError("a must lie in (0, 1)")
    if b <= 0:
        raise DomainError("b must be positive")
    a = float(a)
    b = float(b)
    c = float(shift)

    def u(x):
        out = np.empty_like(x)
        pos = x >= 0
        with np.errstate(over="ignore"):
            out[pos] = c + (np.power(1.0 + x[pos], 1.0 - a) - 1.0) / (1.0 - a)
            out[~pos] = c - (np.power(1.0 - x[~pos], 1.0 + b) - 1.0) / (1.0 + b)
        return out

    def u_prime(x):
        out = np.empty_like(x)
        pos = x >= 0
        with np.errstate(over="ignore"):
            out[pos] = np.power(1.0 + x[pos], -a)
            out[~pos] = np.power(1.0 - x[~pos], b)
        return out

    def _newton_polish(xs, yy, iters=3):
        """Safeguarded Newton on U'(x) - y with the analytic U''."""
        for _ in range(iters):
            upx = u_prime(xs)
            with np.errstate(over="ignore"):
                upp = np.where(xs >= 0,
                               -a * np.power(1.0 + np.abs(xs), -a - 1.0),
                               -b * np.power(1.0 + np.abs(xs), b - 1.0))
            step = (upx - yy) / upp
            # cap at half the distance to the kink's scale to stay bracketed
            cap = 0.5 * (1.0 + np.abs(xs))
            xs = xs - np.clip(step, -cap, cap)
        return xs

    def _bisect_fallback(yy):
        """Bracketed bisection in s = log(1+|x|); slow path, always converges."""
        right = yy <= 1.0
        out = np.empty_like(yy)
        for mask, rate, sign in ((right, -a, 1.0), (~right, b, -1.0)):
            if not np.any(mask):
                continue
            target = np.log(yy[mask])
            hi = np.ones_like(target)
            for _ in range(1100):
                todo = rate * hi - target < 0 if rate > 0 else rate * hi - target > 0
                if not np.any(todo):
                    break
                hi[todo] *= 2.0
            lo = np.zeros_like(target)
            for _ in range(110):
                mid = 0.5 * (lo + hi)
                f = rate * mid - target
                up = f < 0 if rate > 0 else f > 0
                lo[up] = mid[up]
                hi[~up] = mid[~up]
            out[mask] = sign * np.expm1(0.5 * (lo + hi))
        return out

    def inverse_marginal(y):
        """Solve U'(x) = y: Newton from a log-space guess, certified residual.

        The guess inverts each tail's exponential form in s = log(1+|x|);
        Newton with the analytic U'' then certifies
        |U'(x*) - y| <= 1e-12 (1+y), falling back to bracketed bisection
        for any entry that fails.
        """
        _check_conjugate_domain(y)
        x = np.empty_like(y)
        zero = y == 0
        inf = np.isinf(y)
        interior = ~zero & ~inf
        yy = y[interior]
        with np.errstate(over="ignore", divide="ignore"):
            s = np.where(yy <= 1.0, np.log(yy) / (-a), np.log(yy) / b)
            xs = np.where(yy <= 1.0, np.expm1(s), -np.expm1(s))
        xs = _newton_polish(xs, yy)
        with np.errstate(over="ignore", invalid="ignore"):
            resid = np.abs(u_prime(xs) - yy)
        bad = ~(resid <= _MARGINAL_RESIDUAL * (1.0 + yy)) & np.isfinite(xs)
        if np.any(bad):
            xs = xs.copy()
            xs[bad] = _newton_polish(_bisect_fallback(yy[bad]), yy[bad])
            resid = np.abs(u_prime(xs) - yy)
            still = ~(resid <= _MARGINAL_RESIDUAL * (1.0 + yy)) & np.isfinite(xs)
            if np.any(still):
                raise ArithmeticError(
                    f"marginal inversion residual {resid[still].max():.3e} above target")
        x[interior] = xs
        x[zero] = INF     # U'(x) -> 0 only as x -> inf
        x[inf] = -INF
        return x

    def v(y):
        xs = inverse_marginal(y)
        out = np.full_like(y, INF)  # V(0) = U(inf) = inf, V(inf) = inf
        interior = np.isfinite(xs)
        out[interior] = u(xs[interior]) - xs[interior] * y[interior]
        return out

    def v_prime(y):
        return -inverse_marginal(y)

    def v_second(y, h=1e-6):
        # no closed form here: central differences of V'
        _check_conjugate_domain(y)
        up = v_prime(y * (1.0 + h))
        dn = v_prime(y * (1.0 - h))
        return (up - dn) / (2.0 * h * y)

    return UtilityPair(
        family="two_power",
        params={"a": a, "b": b, "C": c},
        u=_vectorized(u),
        u_prime=_vectorized(u_prime),
        v=_vectorized(v),
        v_prime=_vectorized(v_prime),
        v_second=_vectorized(v_second),
        u_inf=INF,
        ae_plus=1.0 - a,
        ae_minus=1.0 + b,
    )


# -- generic operations --------------------------------------------------------

_WHICH = {"U": "u", "U'": "u_prime", "V": "v", "V'": "v_prime"}


def evaluate(pair: UtilityPair, which: str, arg):
    """Evaluate U, U', V or V' with the boundary conventions of the pair.

    ``which`` is one of ``"U"``, ``"U'"``, ``"V"``, ``"V'"``.  Conjugate
    arguments must be non-negative; infinities are explicit sentinels.
    """
    try:
        attr = _WHICH[which]
    except KeyError:
        raise DomainError(f"unknown evaluator {which!r}") from None
    return getattr(pair, attr)(arg)


def parse_utility_spec(spec: str) -> UtilityPair:
    """Build a pair from a CLI spec like ``exp:gamma=1,C=2``.

    Families: ``exp`` (params gamma, C) and ``twopower`` (params a, b, C).
    """
    try:
        family, _, rest = spec.partition(":")
        params = {}
        if rest:
            for item in rest.split(","):
                k, _, v = item.partition("=")
                params[k.strip()] = float(v)
    except ValueError:
        raise ParseError(f"malformed utility spec: {spec!r}") from None
    family = family.strip().lower()
    if family in ("exp", "exponential"):
        return exponential_utility(params.pop("gamma", 1.0), params.pop("C", 2.0))
    if family in ("twopower", "two_power"):
        return two_power_utility(params.pop("a", 0.5), params.pop("b", 1.0),
                                 params.pop("C", 1.0))
    raise ParseError(f"unknown utility family {family!r}")


@dataclass(frozen=True)
class CertificationReport:
    """Numeric certification of the standing assumptions on a pair."""

    inada_ok: bool
    ae_plus_estimate: float
    ae_minus_estimate: float
    growth_constant_estimate: float
    conjugacy_max_residual: float
    u_at_zero: float
    passed: bool


def _finite_window(f, xs, positive=False):
    """Points of xs (order kept) where f is finite, optionally positive.

    Overflow/underflow at extreme arguments is treated as "outside the
    numeric window" rather than an assumption failure.
    """
    vals = f(xs)
    ok = np.isfinite(vals)
    if positive:
        ok &= vals > 0
    return xs[ok], vals[ok]


def certify_assumptions(pair: UtilityPair,
                        x_extent: float = 1e6,
                        n_grid: int = 400) -> CertificationReport:
    """Certify Inada, strict concavity, tail elasticity and conjugate growth.

    Grids are log-spaced out to ``+-x_extent`` (at least 1e6).  Raises
    :class:`AssumptionFailError` naming the first violated assumption;
    otherwise returns the report with the empirical estimates.
    """
    if x_extent < 1e6:
        raise DomainError("certification grid must span at least [-1e6, 1e6]")

    # strict monotonicity / strict concavity / positive U(0) on a dense grid
    xs = np.concatenate([
        -np.logspace(math.log10(x_extent), -8, n_grid),
        [0.0],
        np.logspace(-8, math.log10(x_extent), n_grid),
    ])
    xs = np.unique(xs)
    raw_up = pair.u_prime(xs)
    if np.any(np.isfinite(raw_up) & (raw_up <= 0) & (xs < 1.0)):
        # underflow of U' at very large x is numeric, not a violation
        raise AssumptionFailError("monotonicity", "U' not strictly positive")
    xs_f, up = _finite_window(pair.u_prime, xs, positive=True)
    flat = np.where(np.diff(up) >= 0)[0]
    if flat.size:
        raise AssumptionFailError("strict concavity",
                                  f"U' non-decreasing near x={xs_f[flat[0]]:.3g}")
    u0 = pair.u(0.0)
    if not u0 > 0:
        raise AssumptionFailError("positive utility at zero", f"U(0)={u0:.3g}")

    # C1: central differences of U against U' on a moderate window
    mid = xs[(np.abs(xs) > 1e-3) & (np.abs(xs) < 100.0)]
    h = 1e-6 * (1.0 + np.abs(mid))
    fd = (pair.u(mid + h) - pair.u(mid - h)) / (2.0 * h)
    upm = pair.u_prime(mid)
    okc = np.isfinite(fd) & np.isfinite(upm)
    if np.max(np.abs(fd[okc] - upm[okc]) / (1.0 + np.abs(upm[okc]))) > 1e-5:
        raise AssumptionFailError("continuous differentiability",
                                  "U' disagrees with finite differences of U")

    # Inada: monotone decay of U' on expanding grids, both directions
    pos_grid = np.logspace(0, math.log10(x_extent), 60)
    xp, upp = _finite_window(pair.u_prime, pos_grid, positive=True)
    xn, upn = _finite_window(pair.u_prime, -pos_grid, positive=True)
    inada_ok = (upp[-1] < 1e-2 and np.all(np.diff(upp) < 0)
                and upn[-1] > 1e2 and np.all(np.diff(upn) > 0))
    if not inada_ok:
        raise AssumptionFailError("Inada conditions",
                                  f"U'({xp[-1]:.3g})={upp[-1]:.3g}, "
                                  f"U'({xn[-1]:.3g})={upn[-1]:.3g}")

    # tail elasticity x U'(x)/U(x) at the largest finite grid points
    def elasticity(x):
        return x * pair.u_prime(x) / pair.u(x)

    with np.errstate(over="ignore", invalid="ignore"):
        xp_f, _ = _finite_window(lambda t: pair.u_prime(t) * pair.u(t), pos_grid)
        xn_f, _ = _finite_window(lambda t: pair.u_prime(t) * pair.u(t), -pos_grid)
    ae_plus_est = float(elasticity(xp_f[-1]))
    ae_minus_est = float(elasticity(xn_f[-1]))
    if not ae_plus_est < 1.0 - 1e-3:
        raise AssumptionFailError("reasonable asymptotic elasticity",
                                  f"limsup estimate {ae_plus_est:.6g} not < 1")
    if not ae_minus_est > 1.0 + 1e-3:
        raise AssumptionFailError("reasonable asymptotic elasticity",
                                  f"liminf estimate {ae_minus_est:.6g} not > 1")

    # conjugate growth: C' = max y|V'(y)|/V(y) over a log grid (V > 0 when U(0) > 0)
    ys = np.logspace(-6, 6, 200)
    vy = pair.v(ys)
    vpy = pair.v_prime(ys)
    ok = np.isfinite(vy) & np.isfinite(vpy) & (vy > 0)
    growth = float(np.max(ys[ok] * np.abs(vpy[ok]) / vy[ok]))
    if not math.isfinite(growth):
        raise AssumptionFailError("conjugate growth", "y|V'|/V unbounded on grid")

    # biconjugacy: U(x) = min_y { V(y) + x y }, inner min by 1-D golden
    # section; |x| <= 10 keeps the cancellation in V(y) + x y below the
    # absolute certification tolerance in double precision
    conj_x = np.concatenate([-np.logspace(-2, 1, 25), [0.0],
                             np.logspace(-2, 1, 25)])
    resid = 0.0
    for x in conj_x:
        y_star = _golden_min(lambda s, x=x: pair.v(math.exp(s)) + x * math.exp(s),
                             math.log(pair.u_prime(x)) - 8.0,
                             math.log(pair.u_prime(x)) + 8.0)
        val = pair.v(math.exp(y_star)) + x * math.exp(y_star)
        resid = max(resid, abs(pair.u(x) - val))

    return CertificationReport(
        inada_ok=True,
        ae_plus_estimate=ae_plus_est,
        ae_minus_estimate=ae_minus_est,
        growth_constant_estimate=growth,
        conjugacy_max_residual=float(resid),
        u_at_zero=float(u0),
        passed=True,
    )


def _golden_min(f, lo, hi, iters=90):
    """Scalar golden-section minimizer on [lo, hi]; returns the argmin."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)
