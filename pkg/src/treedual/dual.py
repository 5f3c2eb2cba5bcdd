"""Dual problem: entropy-plus-endowment minimization over the martingale cone.

The objective is ``F(mu) = sum_l [ p_l V(mu_l/p_l) + mu_l e_l ]`` minimized
over non-negative leaf measures satisfying the martingale equality rows (and
optionally a fixed total mass).  The solver is a primal-feasible interior
point method: a logarithmic barrier on ``mu >= 0`` with Newton steps in the
null space of the equality rows, barrier weight shrunk geometrically, and a
final barrier-free polish.  Curvature uses the closed-form V'' for the
exponential family and finite differences of V' otherwise.

Stationarity is measured by the norm of the gradient projected onto the
feasible directions, with sign conditions at leaves whose optimal mass is at
the numerical floor (those arise when the optimal density underflows; the
objective value is still accurate there).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import null_space

from .errors import (EvaluationOverflowError, InfeasibleEntropyError,
                     NoMartingaleMeasureError, NonconvergedError)
from .geometry import (MeasureVector, _support_structure, build_constraints,
                       relative_entropy)
from .market import MarketTree, RandomVariable, leaf_values
from .utility import UtilityPair

DEFAULT_TOL = 1e-9
DEFAULT_NEWTON_CAP = 200
BARRIER_SHRINK = 0.2
_VALUE_FLOOR = -1e250  # below this the optimal utility is numerically -inf


@dataclass(frozen=True, eq=False)
class DualSolution:
    """Optimal measure, mass, normalization, value and diagnostics."""

    tree: MarketTree
    pair: UtilityPair
    mu: MeasureVector
    mass: float
    q_hat: MeasureVector
    value: float
    stationarity: float
    support: str                      # "EQUIVALENT" | "DEGENERATE"
    iterations: tuple[dict, ...]
    _mu_arr: np.ndarray = field(repr=False, default=None)
    _endow_arr: np.ndarray = field(repr=False, default=None)

    @property
    def q_hat_array(self) -> np.ndarray:
        return self._mu_arr / self.mass

    @property
    def density_array(self) -> np.ndarray:
        return self._mu_arr / self.tree.leaf_probability_array


# -- raw Newton core -----------------------------------------------------------


def _objective(pair, p, e, mu):
    dens = mu / p
    vals = pair.v(dens)
    if not np.all(np.isfinite(vals)):
        return math.inf
    return float(np.dot(p, vals) + np.dot(mu, e))


def _gradient(pair, p, e, mu):
    return pair.v_prime(mu / p) + e


def _hess_diag(pair, p, mu):
    return pair.v_second(mu / p) / p


def _line_min_log_mass(pair, p, e, mu):
    """Minimize the objective along the ray through ``mu``; rescaled copy back.

    The feasible cone is scale-invariant, so any rescaling is admissible.
    Used as a rigorous upper-bound probe: when even a single ray drives the
    objective below the floating-point floor, the infimum is certainly below
    it too and :class:`EvaluationOverflowError` is raised.
    """

    best = [0.0, math.inf]

    def f(s):
        if abs(s) > 700.0:
            return math.inf
        val = _objective(pair, p, e, math.exp(s) * mu)
        if val < best[1]:
            best[0], best[1] = s, val
        if val < _VALUE_FLOOR:
            raise EvaluationOverflowError(
                "dual objective fell below the floating-point range")
        return val

    lo, hi = -3.0, 3.0
    f_lo, f_hi = f(lo), f(hi)
    f_mid = f(0.0)
    for _ in range(60):
        moved = False
        if not (f_mid <= f_lo):
            lo = lo - (hi - lo)
            f_lo = f(lo)
            moved = True
        if not (f_mid <= f_hi):
            hi = hi + (hi - lo)
            f_hi = f(hi)
            moved = True
        f_mid = f(0.5 * (lo + hi))
        if not moved:
            break
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(80):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
        if b - a < 1e-8:
            break
    s = best[0]
    return mu if abs(s) < 1e-12 else math.exp(s) * mu


def _stationarity_residual(M, mu, g):
    """Projected-gradient norm with sign conditions at floored leaves.

    A leaf counts as active (pinned at the numeric floor) when its
    multiplier estimate is significantly positive and the complementarity
    product ``mu * s`` is negligible; masses at a genuine interior optimum
    can span many orders of magnitude, so activity cannot be read off the
    masses alone.  Classification and multipliers are re-fitted until the
    active set stabilizes.
    """
    if not np.all(np.isfinite(g)):
        return math.inf
    gnorm = 1.0 + float(np.linalg.norm(g))
    pin = 1e-8 * (1.0 + float(mu.sum())) / mu.size
    act = np.zeros(mu.size, dtype=bool)
    for _ in range(4):
        Mi = M[:, ~act]
        gi = g[~act]
        if Mi.shape[1] == 0:
            lam = np.zeros(M.shape[0])
        else:
            lam, *_ = np.linalg.lstsq(Mi.T, gi, rcond=None)
        s = g - M.T @ lam
        new_act = (mu <= pin) & (s > 1e-7 * gnorm)
        if np.array_equal(new_act, act):
            break
        act = new_act
    r = np.where(act, 0.0, s)
    viol = np.where(act, np.minimum(s, 0.0), 0.0)
    num = math.sqrt(float(r @ r) + float(viol @ viol))
    return num / gnorm


def _polish_loop(M, Z, p, e, pair, mu, residual, *, tol, max_steps):
    """Barrier-free Newton accepted on stationarity decrease.

    Near the optimum the objective is flat to rounding, so progress is
    measured on the projected gradient; also serves as the warm-start path.
    """
    steps = 0
    while residual > tol and steps < max_steps:
        g = _gradient(pair, p, e, mu)
        if not np.all(np.isfinite(g)):
            break
        h = _hess_diag(pair, p, mu)
        gr = Z.T @ g
        Hr = (Z.T * h) @ Z
        try:
            dw = np.linalg.solve(Hr, -gr)
        except np.linalg.LinAlgError:
            dw, *_ = np.linalg.lstsq(Hr, -gr, rcond=None)
        dmu = Z @ dw
        neg = dmu < 0
        alpha = 1.0
        if np.any(neg):
            alpha = min(1.0, 0.999 * float(np.min(-mu[neg] / dmu[neg])))
        improved = False
        for _ in range(60):
            trial = mu + alpha * dmu
            if np.all(trial > 0):
                res_trial = _stationarity_residual(
                    M, trial, _gradient(pair, p, e, trial))
                if res_trial < residual:
                    improved = True
                    break
            alpha *= 0.5
        if not improved:
            break
        mu = trial
        residual = res_trial
        steps += 1
    return mu, residual, steps


def _newton_core(A, p, e, pair, q0, *, mass=None, tol=DEFAULT_TOL,
                 newton_cap=DEFAULT_NEWTON_CAP, start_mu=None):
    """Minimize F over {A mu = 0 (, sum mu = mass), mu >= 0}.

    ``q0`` must be strictly positive and feasible for the equalities with
    unit mass.  Returns (mu, value, residual, iteration log).
    """
    n = p.size
    M = A if mass is None else np.vstack([A, np.ones((1, n))])
    Z = null_space(M) if M.size else np.eye(n)
    mu = np.array(start_mu if start_mu is not None
                  else q0 * (1.0 if mass is None else mass), dtype=float)
    if mass is not None and Z.shape[1] == 0:
        # unique feasible point; nothing to optimize
        g = _gradient(pair, p, e, mu)
        res = _stationarity_residual(M, mu, g)
        return mu, _objective(pair, p, e, mu), res, ({"tau": 0.0, "steps": 0,
                                                      "residual": res},)

    if start_mu is not None and np.all(mu > 0):
        # warm start: try pure Newton before paying for a barrier sweep
        res0 = _stationarity_residual(M, mu, _gradient(pair, p, e, mu))
        mu_w, res_w, used = _polish_loop(M, Z, p, e, pair, mu, res0,
                                         tol=tol, max_steps=25)
        if res_w <= tol:
            f = _objective(pair, p, e, mu_w)
            if f < _VALUE_FLOOR:
                raise EvaluationOverflowError(
                    "dual objective fell below the floating-point range")
            return mu_w, f, res_w, ({"tau": 0.0, "steps": used,
                                     "residual": res_w},)
        mu = mu_w if res_w < res0 else np.array(
            q0 * (1.0 if mass is None else mass), dtype=float)

    def barrier_value(m, tau):
        f = _objective(pair, p, e, m)
        if not math.isfinite(f):
            return math.inf
        return f - tau * float(np.log(m).sum())

    g0 = _gradient(pair, p, e, mu)
    tau = 0.1 * (1.0 + float(np.abs(g0[np.isfinite(g0)]).max(initial=0.0)))
    steps = 0
    log = []
    best = (math.inf, mu)

    def one_stage(tau, stage_tol):
        nonlocal mu, steps
        for it in range(60):
            if steps >= newton_cap:
                return False
            with np.errstate(over="ignore", divide="ignore"):
                g = _gradient(pair, p, e, mu) - tau / mu
                h = _hess_diag(pair, p, mu) + tau / mu ** 2
            h = np.where(np.isfinite(h), h, 1e300)
            gr = Z.T @ g
            Hr = (Z.T * h) @ Z
            try:
                dw = np.linalg.solve(Hr, -gr)
            except np.linalg.LinAlgError:
                dw, *_ = np.linalg.lstsq(Hr + 1e-12 * np.trace(Hr) * np.eye(Hr.shape[0]),
                                         -gr, rcond=None)
            dmu = Z @ dw
            steps += 1
            neg = dmu < 0
            alpha = 1.0
            if np.any(neg):
                alpha = min(1.0, 0.99 * float(np.min(-mu[neg] / dmu[neg])))
            phi0 = barrier_value(mu, tau)
            slope = float(gr @ dw)
            for _ in range(50):
                trial = mu + alpha * dmu
                phi1 = barrier_value(trial, tau)
                if phi1 <= phi0 + 1e-4 * alpha * slope or phi1 <= phi0 - 1e-16 * abs(phi0):
                    break
                alpha *= 0.5
            else:
                return True  # no progress at this barrier weight
            mu = trial
            f_now = _objective(pair, p, e, mu)
            if f_now < _VALUE_FLOOR:
                raise EvaluationOverflowError(
                    "dual objective fell below the floating-point range")
            gnorm = float(np.linalg.norm(Z.T @ (_gradient(pair, p, e, mu) - tau / mu)))
            if gnorm <= stage_tol * (1.0 + tau):
                return True
        return True

    residual = math.inf
    for stage in range(80):
        one_stage(tau, stage_tol=0.1)
        g = _gradient(pair, p, e, mu)
        residual = _stationarity_residual(M, mu, g)
        f_now = _objective(pair, p, e, mu)
        log.append({"tau": tau, "steps": steps, "residual": residual})
        if f_now < best[0]:
            best = (f_now, mu.copy())
        if residual <= tol:
            break
        if steps >= newton_cap:
            raise NonconvergedError(
                f"Newton cap {newton_cap} reached (residual {residual:.3e})",
                best=best[1], residual=residual)
        tau *= BARRIER_SHRINK
        if tau < 1e-18:
            # barrier exhausted; barrier-free polish below
            break

    mu, residual, used = _polish_loop(M, Z, p, e, pair, mu, residual,
                                      tol=tol, max_steps=min(40, newton_cap - steps))
    steps += used
    log.append({"tau": 0.0, "steps": steps, "residual": residual})

    if residual > tol:
        raise NonconvergedError(
            f"stationarity {residual:.3e} above tolerance {tol:.1e}",
            best=mu, residual=residual)
    return mu, _objective(pair, p, e, mu), residual, tuple(log)


# -- public solver ---------------------------------------------------------------


def _prepare(tree, pair):
    """Support mask, interior start and flag for the tree's polytope."""
    mask, q_int = _support_structure(tree)
    flag = "EQUIVALENT" if bool(mask.all()) else "DEGENERATE"
    if flag == "DEGENERATE" and not math.isfinite(pair.u_inf):
        # V(0) = U(inf) = inf: every feasible measure has infinite entropy
        raise InfeasibleEntropyError(
            "no full-support martingale measure and V(0) is infinite; "
            "the dual is +inf over the whole cone")
    return mask, q_int, flag


def _overflow_precheck(pair, p, e, A, q_int):
    """Classify the below-float-range regime before iterating.

    An upper bound for the dual value is its minimum along any feasible ray;
    the ray through the endowment-cost-minimizing vertex is the steepest.
    Only relevant for conjugates finite at zero (otherwise values stay in
    range at desk scale).
    """
    if not math.isfinite(pair.u_inf):
        return
    from .simplex import solve_lp

    m, L = A.shape
    rows = np.vstack([A, np.ones((1, L))])
    rhs = np.zeros(m + 1)
    rhs[m] = 1.0
    res = solve_lp(e, rows, rhs)
    rays = [q_int]
    if res.status == "optimal":
        rays.append(np.clip(res.x, 0.0, None))
    for q in rays:
        _line_min_log_mass(pair, p, e, q)  # raises on overflow


def solve_dual(tree: MarketTree, pair: UtilityPair, endow=0.0, *,
               tol: float = DEFAULT_TOL, newton_cap: int = DEFAULT_NEWTON_CAP,
               start=None) -> DualSolution:
    """Minimize entropy plus endowment cost over the martingale cone.

    ``endow`` is a RandomVariable / mapping / array / scalar on the leaves.
    Returns the unique optimal measure with its mass, normalization, value
    and stationarity residual.  The support flag is DEGENERATE when no
    equivalent martingale measure exists (the optimum then sits on the
    boundary and primal recovery refuses).
    """
    e = leaf_values(tree, endow)
    p = tree.leaf_probability_array
    mask, q_int, flag = _prepare(tree, pair)
    A = build_constraints(tree).matrix
    A_s = A[:, mask]
    _overflow_precheck(pair, p[mask], e[mask], A_s, q_int[mask])
    start_s = None
    if start is not None:
        arr = start.as_array(tree) if isinstance(start, MeasureVector) \
            else leaf_values(tree, start)
        if np.any(arr[~mask] > 0):
            raise NoMartingaleMeasureError("start measure charges dead leaves")
        start_s = arr[mask]
    mu_s, _, res, log = _newton_core(
        A_s, p[mask], e[mask], pair, q_int[mask], mass=None,
        tol=tol, newton_cap=newton_cap, start_mu=start_s)
    mu = np.zeros(tree.n_leaves)
    mu[mask] = mu_s
    value = _objective(pair, p, e, mu)  # includes V(0) terms on dead leaves
    mass = float(mu.sum())
    assert mass > 0.0, "dual minimizer must be a non-zero measure"
    if math.isfinite(pair.u_inf):
        assert value < pair.u_inf, "dual value must beat the zero measure"
    return DualSolution(
        tree=tree, pair=pair,
        mu=MeasureVector.from_array(tree, mu),
        mass=mass,
        q_hat=MeasureVector.from_array(tree, mu / mass),
        value=value,
        stationarity=res,
        support=flag,
        iterations=log,
        _mu_arr=mu,
        _endow_arr=e,
    )


def solve_dual_fixed_mass(tree: MarketTree, pair: UtilityPair, endow, y: float, *,
                          tol: float = DEFAULT_TOL,
                          newton_cap: int = DEFAULT_NEWTON_CAP,
                          start=None) -> DualSolution:
    """Same as :func:`solve_dual` with total mass pinned to ``y > 0``."""
    if y <= 0:
        raise NoMartingaleMeasureError("mass must be positive")
    e = leaf_values(tree, endow)
    p = tree.leaf_probability_array
    mask, q_int, flag = _prepare(tree, pair)
    A = build_constraints(tree).matrix
    A_s = A[:, mask]
    start_s = start[mask] if start is not None else None
    mu_s, _, res, log = _newton_core(
        A_s, p[mask], e[mask], pair, q_int[mask], mass=y,
        tol=tol, newton_cap=newton_cap, start_mu=start_s)
    mu = np.zeros(tree.n_leaves)
    mu[mask] = mu_s
    value = _objective(pair, p, e, mu)
    return DualSolution(
        tree=tree, pair=pair,
        mu=MeasureVector.from_array(tree, mu),
        mass=float(mu.sum()),
        q_hat=MeasureVector.from_array(tree, mu / y),
        value=value,
        stationarity=res,
        support=flag,
        iterations=log,
        _mu_arr=mu,
        _endow_arr=e,
    )


@dataclass(frozen=True)
class CurvePoint:
    y: float
    value: float
    q_hat: MeasureVector
    derivative: float


@dataclass(frozen=True)
class CurveReport:
    points: tuple[CurvePoint, ...]
    min_second_difference: float    # convexity margin on the given grid
    min_value: float


def dual_value_curve(tree: MarketTree, pair: UtilityPair, endow,
                     ys: Sequence[float], *, tol: float = DEFAULT_TOL,
                     newton_cap: int = DEFAULT_NEWTON_CAP) -> CurveReport:
    """The mass-indexed dual value curve on a grid of positive masses.

    Each point solves the inner problem with total mass pinned; the report
    carries the worst second difference as a numeric convexity certificate.
    """
    ys = [float(y) for y in ys]
    if any(y <= 0 for y in ys):
        raise NoMartingaleMeasureError("curve masses must be positive")
    pts = []
    prev = None
    for y in sorted(ys):
        start = prev._mu_arr * (y / prev.mass) if prev is not None else None
        sol = solve_dual_fixed_mass(tree, pair, endow, y, tol=tol,
                                    newton_cap=newton_cap, start=start)
        d = float(np.dot(sol.q_hat_array,
                         pair.v_prime(sol.density_array) + sol._endow_arr))
        pts.append(CurvePoint(y=y, value=sol.value, q_hat=sol.q_hat, derivative=d))
        prev = sol
    second = math.inf
    for a, b, c in zip(pts, pts[1:], pts[2:]):
        la = (b.value - a.value) / (b.y - a.y)
        lb = (c.value - b.value) / (c.y - b.y)
        second = min(second, lb - la)
    return CurveReport(points=tuple(pts),
                       min_second_difference=second,
                       min_value=min(p.value for p in pts))


def dual_derivative(tree: MarketTree, pair: UtilityPair, endow, y: float, *,
                    tol: float = DEFAULT_TOL) -> float:
    """Derivative of the mass-indexed dual value at ``y``.

    Evaluated by the envelope formula: the conditional expectation, under the
    inner optimizer at mass ``y``, of V' of its density plus the endowment.
    """
    sol = solve_dual_fixed_mass(tree, pair, endow, y, tol=tol)
    return float(np.dot(sol.q_hat_array,
                        pair.v_prime(sol.density_array) + sol._endow_arr))


@dataclass(frozen=True)
class SupportCheck:
    violations: tuple[tuple[int, str], ...]  # (vertex index, leaf id)
    vertices_tested: int
    vertices_skipped_infinite_entropy: int


def check_maximal_support(tree: MarketTree, sol: DualSolution,
                          vertices) -> SupportCheck:
    """Check that the optimal measure dominates every finite-entropy vertex.

    Any leaf charged by a finite-entropy polytope vertex must also be charged
    by the optimal measure (the optimizer is "as equivalent as possible").
    Report-only.
    """
    mu = sol._mu_arr
    thresh = 1e-12 * (1.0 + sol.mass)
    violations = []
    tested = 0
    skipped = 0
    for k, vtx in enumerate(vertices):
        if not math.isfinite(relative_entropy(tree, sol.pair, vtx)):
            skipped += 1
            continue
        tested += 1
        q = vtx.as_array(tree)
        for i, leaf in enumerate(tree.leaf_ids):
            if q[i] > 1e-10 and mu[i] <= thresh:
                violations.append((k, leaf))
    return SupportCheck(tuple(violations), tested, skipped)
