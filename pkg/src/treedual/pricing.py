"""Utility-based prices: indifference, entropic-penalty, marginal, bounds.

The bid price of a claim makes the agent indifferent between holding the
claim minus cash and holding nothing, located by bisection on the strictly
cash-monotone optimal value.  The same price is recomputed independently as
a penalized worst-case expectation (inf over martingale measures of the
expectation plus a normalized excess-entropy penalty); the two methods agree
to cross-method tolerance on every instance and that residual is reported.
Marginal (zero-volume) prices are expectations under the normalized optimal
dual measure; no-arbitrage bounds come from linear programs over the
martingale polytope; price processes for new assets are accepted exactly
when they are martingales under that measure, verified both by drift and by
re-solving the augmented market.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dual import (DualSolution, solve_dual, solve_dual_fixed_mass)
from .errors import (AugmentInfeasibleError, BracketFailError,
                     EvaluationOverflowError, InfeasibleEntropyError,
                     InfiniteEntropyError, NoMartingaleMeasureError)
from .geometry import (MeasureVector, build_constraints, find_equivalent_mm,
                       relative_entropy, _support_structure)
from .market import (AdaptedProcess, MarketTree, RandomVariable, leaf_values,
                     market_from_dict, market_to_dict)
from .simplex import solve_lp
from .utility import UtilityPair

PRICE_TOL = 1e-9       # |u(endow + claim - p) - u(endow)| <= tol * (1 + |u|)
AGREEMENT_TOL = 1e-6   # cross-method relative agreement


def price_bounds(tree: MarketTree, claim) -> tuple[float, float]:
    """No-arbitrage interval: extremal claim expectations over the polytope."""
    b = leaf_values(tree, claim)
    A = build_constraints(tree).matrix
    m, L = A.shape
    rows = np.vstack([A, np.ones((1, L))])
    rhs = np.zeros(m + 1)
    rhs[m] = 1.0
    lo = solve_lp(b, rows, rhs)
    hi = solve_lp(-b, rows, rhs)
    if lo.status != "optimal" or hi.status != "optimal":
        raise NoMartingaleMeasureError("empty martingale polytope")
    return float(lo.value), float(-hi.value)


def _value(tree, pair, endow, *, tol, start=None):
    """Optimal value for the given endowment; -inf when below float range."""
    try:
        sol = solve_dual(tree, pair, endow, tol=tol, start=start)
        return sol.value, sol
    except EvaluationOverflowError:
        return -math.inf, None


def indifference_price(tree: MarketTree, pair: UtilityPair, endow, claim, *,
                       tol: float = PRICE_TOL, solver_tol: float = 1e-9,
                       base_value: float | None = None) -> float:
    """Bid price by bisection on the cash-shifted optimal value.

    The bracket starts one unit beyond the no-arbitrage bounds and widens
    geometrically if needed (the optimal value is strictly decreasing in the
    cash subtracted, so a sign change identifies the root).
    """
    endow = _as_rv(tree, endow)
    claim = _as_rv(tree, claim)
    if base_value is None:
        base_value = solve_dual(tree, pair, endow, tol=solver_tol).value
    lo_b, hi_b = price_bounds(tree, claim)
    lo, hi = lo_b - 1.0, hi_b + 1.0
    f_tol = tol * (1.0 + abs(base_value))
    warm = None

    def g(p):
        nonlocal warm
        val, sol = _value(tree, pair, endow + claim + (-p), tol=solver_tol,
                          start=warm)
        if sol is not None:
            warm = sol._mu_arr
        return val - base_value

    g_lo = g(lo)
    g_hi = g(hi)
    for _ in range(60):
        if g_lo >= -f_tol and g_hi <= f_tol:
            break
        width = hi - lo
        if g_lo < -f_tol:
            lo -= width
            g_lo = g(lo)
        if g_hi > f_tol:
            hi += width
            g_hi = g(hi)
    else:
        raise BracketFailError(
            f"no monotone bracket for the indifference price in [{lo}, {hi}]")

    best = (abs(g_lo), lo)
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        if abs(gm) < best[0]:
            best = (abs(gm), mid)
        if abs(gm) <= f_tol:
            return mid
        if gm > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * (1.0 + abs(mid)):
            break
    if best[0] <= 10 * f_tol:
        return best[1]
    raise BracketFailError(
        f"bisection stalled; best indifference residual {best[0]:.3e}")


def _as_rv(tree, x) -> RandomVariable:
    if isinstance(x, RandomVariable):
        return x
    return RandomVariable.from_array(tree, leaf_values(tree, x))


def entropic_penalty(tree: MarketTree, pair: UtilityPair, endow,
                     q: MeasureVector, *, base_value: float | None = None,
                     solver_tol: float = 1e-9) -> float:
    """Normalized excess entropy of a martingale probability measure.

    For a fixed measure this is a one-dimensional convex minimization over
    the mass, performed by golden section on the log-mass axis with bracket
    expansion.  Zero exactly at the normalized dual optimizer; raises
    :class:`InfiniteEntropyError` when the measure has infinite entropy.
    """
    if not math.isfinite(relative_entropy(tree, pair, q)):
        raise InfiniteEntropyError("measure has infinite relative entropy")
    if base_value is None:
        base_value = solve_dual(tree, pair, endow, tol=solver_tol).value
    e = leaf_values(tree, endow)
    p = tree.leaf_probability_array
    qa = q.as_array(tree)
    eq = float(np.dot(qa, e))

    def phi(s):
        y = math.exp(s)
        dens = y * qa / p
        return (float(np.dot(p, pair.v(dens))) + y * eq - base_value) / y

    return _golden_log_min(phi)[1]


def _golden_log_min(phi, s0: float = 0.0, span: float = 3.0,
                    s_tol: float = 1e-13):
    """Minimize a unimodal function of log-mass; returns (argmin s, value).

    Expands the bracket geometrically until the midpoint beats both ends,
    then golden section down to ``s_tol`` (value error is quadratic in it).
    """
    lo, hi = s0 - span, s0 + span
    f_lo, f_hi = phi(lo), phi(hi)
    f_mid = phi(0.5 * (lo + hi))
    for _ in range(80):
        moved = False
        if not (f_mid <= f_lo + 1e-18 * abs(f_mid)):
            lo = lo - (hi - lo)
            f_lo = phi(lo)
            moved = True
        if not (f_mid <= f_hi + 1e-18 * abs(f_mid)):
            hi = hi + (hi - lo)
            f_hi = phi(hi)
            moved = True
        f_mid = phi(0.5 * (lo + hi))
        if not moved:
            break
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = phi(c), phi(d)
    for _ in range(200):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = phi(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = phi(d)
        if b - a < s_tol:
            break
    s = 0.5 * (a + b)
    return s, phi(s)


def price_via_penalty(tree: MarketTree, pair: UtilityPair, endow, claim, *,
                      base_value: float | None = None,
                      solver_tol: float = 1e-9) -> float:
    """Bid price as a penalized worst-case expectation.

    Equivalent single program: minimize, over measures in the cone, the
    normalized gap between the entropy-plus-endowment objective with the
    claim added and the claim-free optimum.  For fixed mass the inner
    problem is convex and solved by the dual machinery; the outer mass
    search is golden section on the log axis (the mass-indexed gap ratio is
    unimodal).  Independent of the bisection route.
    """
    endow = _as_rv(tree, endow)
    claim = _as_rv(tree, claim)
    if base_value is None:
        base_value = solve_dual(tree, pair, endow, tol=solver_tol).value
    shifted = endow + claim
    state = {"warm": None, "warm_y": None}

    def phi(s):
        y = math.exp(s)
        start = None
        if state["warm"] is not None:
            start = state["warm"] * (y / state["warm_y"])
        sol = solve_dual_fixed_mass(tree, pair, shifted, y, tol=solver_tol,
                                    start=start)
        state["warm"] = sol._mu_arr
        state["warm_y"] = y
        return (sol.value - base_value) / y

    # each probe is a full inner solve; 1e-5 on the log axis puts the value
    # error around 1e-10, well inside the cross-method tolerance
    return _golden_log_min(phi, s_tol=1e-5)[1]


def davis_price(tree: MarketTree, pair: UtilityPair, endow, claim, *,
                sol: DualSolution | None = None,
                solver_tol: float = 1e-9) -> float:
    """Marginal price: claim expectation under the normalized optimal measure."""
    if sol is None:
        sol = solve_dual(tree, pair, endow, tol=solver_tol)
    return float(np.dot(sol.q_hat_array, leaf_values(tree, claim)))


def certainty_equivalent(tree: MarketTree, pair: UtilityPair, endow, claim, *,
                         tol: float = PRICE_TOL,
                         solver_tol: float = 1e-9) -> float:
    """Cash amount with the same optimal value as holding the claim."""
    endow = _as_rv(tree, endow)
    claim = _as_rv(tree, claim)
    target = solve_dual(tree, pair, endow + claim, tol=solver_tol).value
    lo_b, hi_b = price_bounds(tree, claim)
    # risk aversion can push the equivalent below the pricing bounds, but
    # never below the worst payoff
    lo = min(lo_b, min(claim.values.values())) - 1.0
    hi = hi_b + 1.0
    f_tol = tol * (1.0 + abs(target))

    def g(c):
        val, _ = _value(tree, pair, endow + c, tol=solver_tol)
        return val - target

    g_lo, g_hi = g(lo), g(hi)
    for _ in range(60):
        if g_lo <= f_tol and g_hi >= -f_tol:
            break
        width = hi - lo
        if g_lo > f_tol:
            lo -= width
            g_lo = g(lo)
        if g_hi < -f_tol:
            hi += width
            g_hi = g(hi)
    else:
        raise BracketFailError("no bracket for the certainty equivalent")
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        if abs(gm) <= f_tol:
            return mid
        if gm < 0:
            lo = mid
        else:
            hi = mid
    raise BracketFailError("certainty-equivalent bisection stalled")


@dataclass(frozen=True)
class PriceReport:
    """Bid/offer, certainty equivalent, marginal price and bounds."""

    bid: float
    offer: float
    certainty_equivalent: float
    davis: float
    lp_bounds: tuple[float, float]
    method_agreement_residual: float


def price_report(tree: MarketTree, pair: UtilityPair, endow, claim, *,
                 solver_tol: float = 1e-9) -> PriceReport:
    endow = _as_rv(tree, endow)
    claim = _as_rv(tree, claim)
    sol = solve_dual(tree, pair, endow, tol=solver_tol)
    bid = indifference_price(tree, pair, endow, claim,
                             base_value=sol.value, solver_tol=solver_tol)
    pen = price_via_penalty(tree, pair, endow, claim,
                            base_value=sol.value, solver_tol=solver_tol)
    offer = -indifference_price(tree, pair, endow, -claim,
                                base_value=sol.value, solver_tol=solver_tol)
    ce = certainty_equivalent(tree, pair, endow, claim, solver_tol=solver_tol)
    return PriceReport(
        bid=bid,
        offer=offer,
        certainty_equivalent=ce,
        davis=davis_price(tree, pair, endow, claim, sol=sol),
        lp_bounds=price_bounds(tree, claim),
        method_agreement_residual=abs(bid - pen) / (1.0 + abs(bid)),
    )


@dataclass(frozen=True)
class VolumeCurveReport:
    betas: tuple[float, ...]
    prices: tuple[float, ...]            # average price per unit at each volume
    lp_lower: float                      # large-volume limit
    davis: float                         # zero-volume limit
    monotone: bool
    large_volume_gap: float
    small_volume_gap: float


def average_price_curve(tree: MarketTree, pair: UtilityPair, endow, claim,
                        betas, *, solver_tol: float = 1e-9) -> VolumeCurveReport:
    """Average per-unit bid price across volumes, with its two limits.

    Non-increasing in volume; converges to the lower no-arbitrage bound as
    the volume grows and to the marginal price as it vanishes.
    """
    endow = _as_rv(tree, endow)
    claim = _as_rv(tree, claim)
    betas = sorted(float(b) for b in betas)
    sol = solve_dual(tree, pair, endow, tol=solver_tol)
    prices = []
    for beta in betas:
        p_total = indifference_price(tree, pair, endow, claim * beta,
                                     base_value=sol.value, solver_tol=solver_tol)
        prices.append(p_total / beta)
    lp_lo, _ = price_bounds(tree, claim)
    dav = davis_price(tree, pair, endow, claim, sol=sol)
    scale = 1.0 + max(abs(p) for p in prices)
    monotone = all(b <= a + 1e-9 * scale for a, b in zip(prices, prices[1:]))
    return VolumeCurveReport(
        betas=tuple(betas),
        prices=tuple(prices),
        lp_lower=lp_lo,
        davis=dav,
        monotone=monotone,
        large_volume_gap=abs(prices[-1] - lp_lo),
        small_volume_gap=abs(prices[0] - dav),
    )


def indifference_price_lipschitz_bound(tree: MarketTree, b1, b2) -> float:
    """Upper bound for the price move between two claims.

    The indifference price is 1-Lipschitz in the worst-case expectation
    distance over the martingale polytope; this returns that distance.
    """
    d = leaf_values(tree, b1) - leaf_values(tree, b2)
    lo, hi = price_bounds(tree, RandomVariable.from_array(tree, d))
    return max(abs(lo), abs(hi))


# -- marginal utility-based price processes -------------------------------------


@dataclass(frozen=True)
class MubppReport:
    is_mubpp: bool
    drift_verdict: bool
    utility_verdict: bool
    max_abs_drift: float
    node_drifts: tuple[tuple[str, float], ...]
    base_value: float
    augmented_value: float | None
    agree: bool


def check_mubpp(tree: MarketTree, pair: UtilityPair, endow,
                sprime: AdaptedProcess, *, drift_tol: float = 1e-8,
                value_tol: float = 1e-7,
                solver_tol: float = 1e-9) -> MubppReport:
    """Is the candidate process a fair price process for a new asset?

    Method A computes per-node drifts under the normalized optimal measure;
    method B augments the market with the candidate as extra assets and
    re-solves.  The two verdicts agree (that equivalence is the theorem this
    verifies); ``is_mubpp`` reports the utility-comparison verdict.  Raises
    :class:`AugmentInfeasibleError` when the augmented market admits
    arbitrage (then the candidate is certainly not fair).
    """
    endow = _as_rv(tree, endow)
    vals = {nid: np.atleast_1d(np.asarray(sprime.at(nid), dtype=float))
            for nid in tree.node_ids}
    d_new = len(next(iter(vals.values())))
    if any(v.shape != (d_new,) for v in vals.values()):
        raise ValueError("candidate process must have the same width on all nodes")

    sol = solve_dual(tree, pair, endow, tol=solver_tol)
    q = sol.q_hat_array
    drifts = []
    max_drift = 0.0
    for nid in tree.nonleaf_ids:
        lo, hi = tree.leaf_slice(nid)
        mass = q[lo:hi].sum()
        if mass <= 0:
            continue
        cond = np.zeros(d_new)
        for c in tree.children(nid):
            clo, chi = tree.leaf_slice(c)
            cond += q[clo:chi].sum() * vals[c]
        drift = float(np.abs(cond / mass - vals[nid]).max())
        scale = 1.0 + float(np.abs(vals[nid]).max())
        drifts.append((nid, drift))
        max_drift = max(max_drift, drift / scale)
    drift_verdict = max_drift <= drift_tol

    doc = market_to_dict(tree)
    doc["assets"] = doc["assets"] + [f"candidate{k}" for k in range(d_new)]
    for nd in doc["nodes"]:
        nd["prices"] = nd["prices"] + [repr(float(x)) for x in vals[nd["id"]]]
    try:
        augmented = market_from_dict(doc)
    except Exception as exc:  # validation cannot fail here; defensive
        raise AugmentInfeasibleError(f"cannot build augmented market: {exc}")
    try:
        aug_value = solve_dual(augmented, pair,
                               RandomVariable(dict(endow.values)),
                               tol=solver_tol).value
    except NoMartingaleMeasureError:
        raise AugmentInfeasibleError(
            "augmented market admits arbitrage; candidate is not a fair "
            "price process") from None
    except InfeasibleEntropyError:
        # feasible but only with infinite entropy: optimal value is U(inf)
        aug_value = None

    if aug_value is None:
        utility_verdict = False
    else:
        utility_verdict = (abs(aug_value - sol.value)
                           <= value_tol * (1.0 + abs(sol.value)))
    return MubppReport(
        is_mubpp=utility_verdict,
        drift_verdict=drift_verdict,
        utility_verdict=utility_verdict,
        max_abs_drift=max_drift,
        node_drifts=tuple(drifts),
        base_value=sol.value,
        augmented_value=aug_value,
        agree=drift_verdict == utility_verdict,
    )


def optimal_measure_price_process(tree: MarketTree, sol: DualSolution,
                                  claim) -> AdaptedProcess:
    """Conditional claim expectations under the normalized optimal measure.

    By construction a martingale under that measure, hence a fair price
    process for the claim.
    """
    b = leaf_values(tree, claim)
    q = sol.q_hat_array
    out = {}
    for nid in tree.node_ids:
        lo, hi = tree.leaf_slice(nid)
        mass = q[lo:hi].sum()
        if mass <= 0:
            out[nid] = 0.0
            continue
        out[nid] = float(np.dot(q[lo:hi], b[lo:hi]) / mass)
    return AdaptedProcess(out)


# -- dependence on the endowment --------------------------------------------------


@dataclass(frozen=True)
class ContinuityEntry:
    sup_bound: float       # worst-case expectation distance to the limit
    value_gap: float       # |u_n - u|
    dominated: bool        # value gap <= radius * sup bound + tol


@dataclass(frozen=True)
class SensitivityReport:
    values: tuple[float, ...]
    monotone_margins: tuple[tuple[int, int, float], ...]  # (i, j, u_j - u_i)
    strict_ok: bool
    concavity_margins: tuple[tuple[float, float], ...]    # (lambda, margin)
    continuity: tuple[ContinuityEntry, ...]
    mass_radius: float | None
    sandwich: tuple[float, float] | None   # (lower slack, upper slack), >= 0


def _mass_radius(tree, pair, endow_arrays):
    """Radius bounding the mass of every optimizer across the endowments.

    Convexity gives entropy >= V(mass); any measure whose mass makes
    V(mass) + mass * (worst claim expectation) beat a fixed feasible
    measure's objective cannot be optimal.
    """
    A = build_constraints(tree).matrix
    m, L = A.shape
    rows = np.vstack([A, np.ones((1, L))])
    rhs = np.zeros(m + 1)
    rhs[m] = 1.0
    c_lp = math.inf
    for e in endow_arrays:
        res = solve_lp(e, rows, rhs)
        if res.status != "optimal":
            raise NoMartingaleMeasureError("empty martingale polytope")
        c_lp = min(c_lp, res.value)
    _, q_int = _support_structure(tree)
    h_q = relative_entropy(tree, pair, MeasureVector.from_array(tree, q_int))
    c_up = max(h_q + float(np.dot(q_int, e)) for e in endow_arrays)
    ys = np.logspace(-6, 12, 400)
    vals = pair.v(ys) + c_lp * ys
    below = np.where(vals <= c_up)[0]
    if below.size == 0:
        return 2.0
    if below[-1] == ys.size - 1:
        raise ArithmeticError("mass radius scan did not terminate")
    return 2.0 * float(ys[below[-1] + 1])


def endowment_sensitivity(tree: MarketTree, pair: UtilityPair, endowments, *,
                          lambdas=(0.25, 0.5, 0.75), sequence=None,
                          claim=None, tol: float = 1e-9,
                          solver_tol: float = 1e-9) -> SensitivityReport:
    """Monotonicity/concavity/continuity certificates for the optimal value.

    ``endowments`` is a list of random variables on the same tree; ordered
    pairs are checked for monotonicity (strictly when an equivalent measure
    exists), the first two for concavity along the ``lambdas`` grid.  A
    ``sequence`` converging to ``endowments[0]`` is checked for dominated
    continuity with the computed mass radius; a ``claim`` adds the
    recentered-claim sandwich around the base value.  Report-only.
    """
    endowments = [_as_rv(tree, e) for e in endowments]
    sols = [solve_dual(tree, pair, e, tol=solver_tol) for e in endowments]
    values = [s.value for s in sols]
    arrays = [e.as_array(tree) for e in endowments]
    has_equivalent = find_equivalent_mm(tree) is not None

    monotone = []
    strict_ok = True
    for i in range(len(endowments)):
        for j in range(len(endowments)):
            if i == j:
                continue
            di = arrays[j] - arrays[i]
            if np.all(di >= 0) and np.any(di > 0):
                margin = values[j] - values[i]
                monotone.append((i, j, margin))
                if has_equivalent and margin <= 0:
                    strict_ok = False

    concavity = []
    if len(endowments) >= 2:
        e0, e1 = endowments[0], endowments[1]
        v0, v1 = values[0], values[1]
        for lam in lambdas:
            mix = e0 * lam + e1 * (1.0 - lam)
            vm = solve_dual(tree, pair, mix, tol=solver_tol).value
            concavity.append((float(lam), vm - (lam * v0 + (1.0 - lam) * v1)))

    continuity = []
    radius = None
    if sequence:
        seq = [_as_rv(tree, e) for e in sequence]
        radius = _mass_radius(tree, pair, arrays + [s.as_array(tree) for s in seq])
        base = values[0]
        for e_n in seq:
            sup = indifference_price_lipschitz_bound(tree, e_n, endowments[0])
            v_n = solve_dual(tree, pair, e_n, tol=solver_tol).value
            gap = abs(v_n - base)
            continuity.append(ContinuityEntry(
                sup_bound=sup, value_gap=gap,
                dominated=gap <= radius * sup + tol * (1.0 + abs(base))))

    sandwich = None
    if claim is not None:
        b = _as_rv(tree, claim)
        dav = davis_price(tree, pair, endowments[0], b, sol=sols[0])
        lo_b, _ = price_bounds(tree, b)
        v_low = solve_dual(tree, pair, endowments[0] + b + (-dav),
                           tol=solver_tol).value
        v_high = solve_dual(tree, pair, endowments[0] + b + (-lo_b),
                            tol=solver_tol).value
        sandwich = (values[0] - v_low, v_high - values[0])

    return SensitivityReport(
        values=tuple(values),
        monotone_margins=tuple(monotone),
        strict_ok=strict_ok,
        concavity_margins=tuple(concavity),
        continuity=tuple(continuity),
        mass_radius=radius,
        sandwich=sandwich,
    )
