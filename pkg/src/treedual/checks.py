"""Runtime verification battery for a solved market instance.

Each check exercises one of the theorem-level properties on a concrete
(market, utility, endowment) triple and returns a named result with the
worst observed residual.  The CLI ``verify`` subcommand prints one line per
check and exits non-zero on any failure; the acceptance tests reuse the same
functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dual import (DualSolution, check_maximal_support, dual_derivative,
                   dual_value_curve, solve_dual)
from .errors import CapExceededError
from .geometry import (build_constraints, find_equivalent_mm,
                       is_martingale_measure, relative_entropy,
                       sample_martingale_measures, vertex_enumerate)
from .market import MarketTree, leaf_values
from .recovery import (PrimalSolution, dynamic_dual, recover,
                       snell_envelope_exponential, verify_supermartingale)
from .utility import UtilityPair, certify_assumptions


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    residual: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return (f"[{status}] {self.name}: residual {self.residual:.3e}"
                f" <= {self.tolerance:.1e}{extra}")


def _measures_for_checks(tree, cap=10_000, n_fallback=256):
    """Polytope vertices, or seeded samples when enumeration blows the cap."""
    try:
        return vertex_enumerate(build_constraints(tree), cap=cap), "vertices"
    except CapExceededError:
        return sample_martingale_measures(tree, n_fallback), "samples"


def run_battery(tree: MarketTree, pair: UtilityPair, endow, *,
                solver_tol: float = 1e-11,
                mu_override=None) -> list[CheckResult]:
    """All instance-level checks; returns one result per check.

    ``mu_override`` replaces the optimal measure before the downstream
    checks run (testing hook: a corrupted optimizer must make them fail).
    """
    results = []
    e = leaf_values(tree, endow)
    p = tree.leaf_probability_array

    cert = certify_assumptions(pair)
    results.append(CheckResult(
        "utility certification", cert.passed and cert.conjugacy_max_residual <= 1e-7,
        cert.conjugacy_max_residual, 1e-7,
        f"AE est ({cert.ae_minus_estimate:.3g}, {cert.ae_plus_estimate:.3g})"))

    sol = solve_dual(tree, pair, endow, tol=solver_tol)
    if mu_override is not None:
        arr = np.asarray(mu_override, dtype=float)
        sol = DualSolution(
            tree=tree, pair=pair, mu=sol.mu, mass=float(arr.sum()),
            q_hat=sol.q_hat, value=sol.value, stationarity=sol.stationarity,
            support=sol.support, iterations=sol.iterations,
            _mu_arr=arr, _endow_arr=sol._endow_arr)

    A = build_constraints(tree).matrix
    cons_res = float(np.abs(A @ sol._mu_arr).max()) if A.size else 0.0
    results.append(CheckResult(
        "martingale constraints at optimum", cons_res <= 1e-10 * (1 + sol.mass),
        cons_res, 1e-10))

    # KKT of the entropy program: gradient in the row space at charged leaves
    g = pair.v_prime(sol._mu_arr / p) + e
    live = sol._mu_arr > 0
    lam, *_ = np.linalg.lstsq(A[:, live].T, g[live], rcond=None)
    kkt = float(np.abs(g[live] - A[:, live].T @ lam).max()) / (1.0 + float(np.abs(g[live]).max()))
    results.append(CheckResult("dual first-order conditions", kkt <= 1e-8, kkt, 1e-8))

    support_ok = (sol.support == "EQUIVALENT") == (find_equivalent_mm(tree) is not None)
    results.append(CheckResult(
        "support flag matches market", support_ok, 0.0 if support_ok else 1.0, 0.5,
        sol.support))

    measures, kind = _measures_for_checks(tree)
    sc = check_maximal_support(tree, sol, measures)
    results.append(CheckResult(
        "maximal support", not sc.violations, float(len(sc.violations)), 0.5,
        f"{sc.vertices_tested} {kind} tested"))

    if sol.support != "EQUIVALENT":
        return results

    try:
        ps = recover(tree, pair, endow, sol)
    except Exception as exc:
        results.append(CheckResult(
            "primal recovery", False, math.inf, 1e-8,
            f"{type(exc).__name__}: {exc}"))
        return results
    scale_v = 1.0 + abs(sol.value)
    gap = abs(ps.value - sol.value) / scale_v
    results.append(CheckResult("zero duality gap", gap <= 1e-7, gap, 1e-7))
    results.append(CheckResult(
        "terminal first-order condition", ps.first_order_residual <= 1e-8 * (1 + sol.mass),
        ps.first_order_residual, 1e-8))
    results.append(CheckResult(
        "one-step self-financing", ps.replication_residual <= 1e-8,
        ps.replication_residual, 1e-8))
    w0 = abs(float(ps.wealth.at(tree.root_id)))
    results.append(CheckResult("zero-cost wealth at the root", w0 <= 1e-8, w0, 1e-8))

    sm = verify_supermartingale(tree, ps.wealth, measures, pair, q_hat=sol.q_hat)
    results.append(CheckResult(
        "supermartingale under tested measures", not sm.violations,
        max(sm.max_drift, 0.0), 1e-8, f"{sm.measures_tested} measures"))
    results.append(CheckResult(
        "martingale under the optimal measure",
        sm.max_abs_drift_under_optimal <= 1e-8,
        sm.max_abs_drift_under_optimal, 1e-8))

    worst = 0.0
    for t in range(tree.horizon + 1):
        for noderes in dynamic_dual(tree, pair, endow, t, sol, wealth=ps.wealth):
            worst = max(worst, noderes.wealth_residual)
    results.append(CheckResult(
        "dynamic dual consistency", worst <= 1e-7, worst, 1e-7))

    if pair.family == "exponential":
        sn = snell_envelope_exponential(tree, pair, endow, sol, measures,
                                        wealth=ps.wealth)
        results.append(CheckResult(
            "exponential Snell envelope", sn.max_equality_gap <= 1e-5,
            sn.max_equality_gap, 1e-5))
        results.append(CheckResult(
            "Snell lower bounds", sn.max_lower_bound_excess <= 1e-7,
            max(sn.max_lower_bound_excess, 0.0), 1e-7))

    ys = sol.mass * np.array([0.5, 0.75, 1.0, 1.5, 2.0])
    curve = dual_value_curve(tree, pair, endow, ys, tol=solver_tol)
    conv = -min(curve.min_second_difference, 0.0)
    results.append(CheckResult("value curve convexity", conv <= 1e-8, conv, 1e-8))
    results.append(CheckResult(
        "curve minimum vs optimum", curve.min_value >= sol.value - 1e-8 * scale_v,
        max(sol.value - curve.min_value, 0.0), 1e-8))
    d_opt = abs(dual_derivative(tree, pair, endow, sol.mass, tol=solver_tol))
    results.append(CheckResult(
        "stationarity of the mass derivative", d_opt <= 1e-7, d_opt, 1e-7))

    if pair.u(0.0) > 0:
        # growth of the value curve from the conjugate growth constant:
        # y v'(y) <= C' v(y) - (C' - 1) x' y with x' the worst endowment
        cprime = cert.growth_constant_estimate
        x_low = float(e.min())
        worst_g = -math.inf
        for pt in curve.points:
            lhs = pt.y * pt.derivative
            rhs = cprime * pt.value - (cprime - 1.0) * x_low * pt.y
            worst_g = max(worst_g, (lhs - rhs) / (1.0 + abs(rhs)))
        results.append(CheckResult(
            "conjugate growth bound along the curve", worst_g <= 1e-6,
            max(worst_g, 0.0), 1e-6, f"C'={cprime:.3g}"))

    return results
