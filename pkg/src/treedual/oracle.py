"""Brute-force certification of the dual and primal optima at desk scale.

The dual oracle eliminates the equality constraints, grids the resulting
low-dimensional parameter box (with zoom refinement that keeps the running
minimum monotone), and one-dimensionally minimizes over the mass on each
grid point.  The primal oracle maximizes expected utility directly over the
unconstrained strategy coefficients with multi-start quasi-Newton.  Both are
deliberately independent of the interior-point solver: they exist to certify
it, not to compete with it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import minimize

from .dual import solve_dual
from .errors import (DimensionError, GapDetectedError, InfeasibleEntropyError,
                     NoMartingaleMeasureError)
from .geometry import build_constraints, vertex_enumerate
from .market import MarketTree, leaf_values
from .recovery import recover
from .utility import UtilityPair


def polytope_dimension(tree: MarketTree) -> int:
    """Affine dimension of the martingale polytope."""
    A = build_constraints(tree).matrix
    M = np.vstack([A, np.ones((1, tree.n_leaves))])
    return tree.n_leaves - int(np.linalg.matrix_rank(M, tol=1e-10))


def strategy_dimension(tree: MarketTree) -> int:
    """Number of free strategy coefficients (assets times non-leaf nodes)."""
    return tree.n_assets * len(tree.nonleaf_ids)


GRID_DIM_LIMIT = 3
PRIMAL_DIM_LIMIT = 12


def _mass_profile(pair, p, e_q, dens_dirs, y_grid_iters=38):
    """Vector golden-section over the mass for a batch of directions.

    ``dens_dirs``: (m, L) array of probability rows q; minimizes
    ``sum(p V(y q/p)) + y E_q[e]`` over y > 0 per row, on the log axis.
    """
    m = dens_dirs.shape[0]
    lo = np.full(m, -40.0)
    hi = np.full(m, 40.0)

    def val(s):
        y = np.exp(s)
        dens = (y[:, None] * dens_dirs) / p[None, :]
        with np.errstate(over="ignore", invalid="ignore"):
            vals = pair.v(dens)
        out = vals @ p + y * e_q
        out[~np.isfinite(out)] = np.inf
        return out

    # bracket expansion on the log-mass axis
    f_lo, f_hi = val(lo), val(hi)
    f_mid = val(0.5 * (lo + hi))
    for _ in range(30):
        grow_lo = ~(f_mid <= f_lo)
        grow_hi = ~(f_mid <= f_hi)
        if not grow_lo.any() and not grow_hi.any():
            break
        width = hi - lo
        lo = np.where(grow_lo, lo - width, lo)
        hi = np.where(grow_hi, hi + width, hi)
        f_lo = np.where(grow_lo, val(lo), f_lo)
        f_hi = np.where(grow_hi, val(hi), f_hi)
        f_mid = val(0.5 * (lo + hi))
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = val(c), val(d)
    for _ in range(y_grid_iters):
        left = fc <= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        c = b - invphi * (b - a)
        d = a + invphi * (b - a)
        fc, fd = val(c), val(d)
    return np.minimum(fc, fd)


def brute_force_dual(tree: MarketTree, pair: UtilityPair, endow, *,
                     points_per_dim: int = 13, rounds: int = 8,
                     mode: str = "auto", n_samples: int = 2048,
                     seed: int = 0) -> float:
    """Direct minimization of the dual objective on a discretized polytope.

    Grid mode requires the polytope dimension (after constraint elimination)
    to be at most 3; the box is zoomed around the incumbent across
    ``rounds`` refinements, and the returned value is the monotone running
    minimum.  Otherwise SAMPLE mode draws seeded random polytope points,
    which is weaker evidence.  The value can only sit above the true
    infimum, so it certifies the solver from one side and matches it to the
    discretization error.
    """
    e = leaf_values(tree, endow)
    p = tree.leaf_probability_array
    A = build_constraints(tree).matrix
    L = tree.n_leaves
    M = np.vstack([A, np.ones((1, L))])
    rhs = np.zeros(M.shape[0])
    rhs[-1] = 1.0
    q_part, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    if np.abs(M @ q_part - rhs).max() > 1e-9:
        raise NoMartingaleMeasureError("martingale polytope is empty")
    N = null_space(M)
    k = N.shape[1]

    if mode == "auto":
        mode = "grid" if k <= GRID_DIM_LIMIT else "sample"
    if mode == "grid" and k > GRID_DIM_LIMIT:
        raise DimensionError(
            f"polytope dimension {k} exceeds grid-mode limit {GRID_DIM_LIMIT}")

    def batch_min(qs):
        qs = qs[np.all(qs >= -1e-12, axis=1)]
        if qs.size == 0:
            return math.inf
        qs = np.clip(qs, 0.0, None)
        qs /= qs.sum(axis=1, keepdims=True)
        return float(np.min(_mass_profile(pair, p, qs @ e, qs)))

    if mode == "sample":
        rng = np.random.default_rng(seed)
        try:
            verts = vertex_enumerate(build_constraints(tree))
        except Exception:
            verts = []
        pts = []
        if verts:
            V = np.array([v.as_array(tree) for v in verts])
            w = rng.dirichlet(np.ones(len(verts)), size=n_samples)
            pts.append(w @ V)
        pts.append(q_part[None, :] + rng.standard_normal((n_samples, k)) @ N.T * 0.3)
        return batch_min(np.vstack(pts))

    if k == 0:
        return batch_min(q_part[None, :])

    R = 1.0 + float(np.linalg.norm(q_part))
    centers = np.zeros((1, k))
    half = R
    best = math.inf
    for _ in range(max(1, rounds)):
        axes = [np.linspace(-half, half, points_per_dim) for _ in range(k)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, k)
        thetas = np.vstack([c[None, :] + mesh for c in centers])
        qs = q_part[None, :] + thetas @ N.T
        feas = np.all(qs >= -1e-12, axis=1)
        if feas.any():
            qs_f = np.clip(qs[feas], 0.0, None)
            qs_f /= qs_f.sum(axis=1, keepdims=True)
            vals = _mass_profile(pair, p, qs_f @ e, qs_f)
            i = int(np.argmin(vals))
            if vals[i] < best:
                best = float(vals[i])
                best_theta = thetas[feas][i]
            order = np.argsort(vals)[:3]
            centers = thetas[feas][order]
        half *= 0.35
    return best


def brute_force_primal(tree: MarketTree, pair: UtilityPair, endow, *,
                       n_starts: int = 32, seed: int = 0) -> float:
    """Direct expected-utility maximization over strategy coefficients.

    The terminal gain is linear in the per-node holdings, so the objective
    is smooth and concave; multi-start quasi-Newton from seeded random
    points is overkill by design.  Refuses above 12 free coefficients.
    """
    D = strategy_dimension(tree)
    if D > PRIMAL_DIM_LIMIT:
        raise DimensionError(
            f"strategy dimension {D} exceeds the oracle limit {PRIMAL_DIM_LIMIT}")
    e = leaf_values(tree, endow)
    p = tree.leaf_probability_array
    G = build_constraints(tree).matrix.T  # leaf-by-coefficient gain matrix

    def neg_value_and_grad(h):
        x = G @ h + e
        u = pair.u(x)
        up = pair.u_prime(x)
        return -float(np.dot(p, u)), -(G.T @ (p * up))

    rng = np.random.default_rng(seed)
    best = -math.inf
    for _ in range(n_starts):
        h0 = rng.standard_normal(D)
        res = minimize(neg_value_and_grad, h0, jac=True, method="L-BFGS-B",
                       options={"maxiter": 500, "ftol": 1e-15, "gtol": 1e-12})
        best = max(best, -float(res.fun))
    return best


@dataclass(frozen=True)
class OracleReport:
    regime: str                      # "OK" | "NO_MM" | "INFEASIBLE_ENTROPY"
    solver_dual: float | None
    solver_primal: float | None
    brute_dual: float | None
    brute_primal: float | None
    dual_mode: str | None
    polytope_dim: int | None
    strategy_dim: int | None
    gap_solver: float | None         # |solver primal - solver dual|, scaled
    gap_brute_dual: float | None
    gap_brute_primal: float | None


def check_duality_gap(tree: MarketTree, pair: UtilityPair, endow, *,
                      oracle_tol: float = 1e-5, gap_tol: float = 1e-7,
                      solver_tol: float = 1e-10, seed: int = 0,
                      points_per_dim: int = 13, rounds: int = 8) -> OracleReport:
    """Assemble solver and oracle values and assert their agreement.

    Raises :class:`GapDetectedError` (carrying the report) whenever any
    bound is violated beyond tolerance: solver primal vs dual at ``gap_tol``
    (scaled), oracle values vs solver dual at ``oracle_tol`` when the
    exhaustive modes apply, and weak duality between the oracle values.
    Markets without martingale measures are reported, not raised.
    """
    try:
        sol = solve_dual(tree, pair, endow, tol=solver_tol)
    except NoMartingaleMeasureError:
        return OracleReport("NO_MM", None, None, None, None, None,
                            None, None, None, None, None)
    except InfeasibleEntropyError:
        return OracleReport("INFEASIBLE_ENTROPY", None, None, None, None,
                            None, None, None, None, None, None)
    v = sol.value
    scale = 1.0 + abs(v)

    u_primal = None
    gap_solver = None
    if sol.support == "EQUIVALENT":
        ps = recover(tree, pair, endow, sol)
        u_primal = ps.value
        gap_solver = abs(u_primal - v) / scale

    k = polytope_dimension(tree)
    bd = brute_force_dual(tree, pair, endow, seed=seed,
                          points_per_dim=points_per_dim, rounds=rounds)
    dual_mode = "grid" if k <= GRID_DIM_LIMIT else "sample"

    D = strategy_dimension(tree)
    bp = None
    if D <= PRIMAL_DIM_LIMIT and sol.support == "EQUIVALENT":
        bp = brute_force_primal(tree, pair, endow, seed=seed)

    gap_bd = abs(bd - v) / scale
    gap_bp = abs(bp - v) / scale if bp is not None else None
    report = OracleReport(
        regime="OK", solver_dual=v, solver_primal=u_primal,
        brute_dual=bd, brute_primal=bp, dual_mode=dual_mode,
        polytope_dim=k, strategy_dim=D,
        gap_solver=gap_solver, gap_brute_dual=gap_bd, gap_brute_primal=gap_bp)

    problems = []
    if gap_solver is not None and gap_solver > gap_tol:
        problems.append(f"solver duality gap {gap_solver:.3e}")
    if bd < v - oracle_tol * scale:
        problems.append(f"oracle dual {bd!r} undercuts solver {v!r}")
    if dual_mode == "grid" and gap_bd > oracle_tol:
        problems.append(f"oracle dual gap {gap_bd:.3e}")
    if bp is not None:
        if gap_bp > oracle_tol:
            problems.append(f"oracle primal gap {gap_bp:.3e}")
        if bp > bd + oracle_tol * scale:
            problems.append("weak duality violated between oracle values")
    if problems:
        raise GapDetectedError("; ".join(problems), report=report)
    return report
