import math

import numpy as np
import pytest

import treegen
from treedual import (InfeasibleEntropyError, MeasureVector,
                      NoMartingaleMeasureError, build_constraints,
                      check_maximal_support, dual_derivative,
                      dual_value_curve, exponential_utility, leaf_values,
                      solve_dual, solve_dual_fixed_mass, two_power_utility,
                      vertex_enumerate)

# closed form for the binomial market with unit risk aversion and no
# endowment: mass solves E_Q[log(y q/p)] = 0 with q = (1/3, 2/3), p = (1/2, 1/2)
BIN1_MASS = 3.0 * 2.0 ** (-5.0 / 3.0)


def tri1_grid_oracle(pair, endow_arr, steps_a=2001, stages=3):
    """Grid search over the trinomial's one-parameter martingale family.

    For each family member the mass minimization is a scalar convex problem,
    done here by an independent vectorized golden section on the log axis.
    The family grid is refined around the incumbent; minima over nested
    grids only improve.
    """
    p = np.full(3, 1 / 3)

    def best_over_mass(a_grid):
        Q = np.column_stack([a_grid / 2.0, 1.0 - 1.5 * a_grid, a_grid])
        eq = Q @ endow_arr

        def val(s):
            y = np.exp(s)
            with np.errstate(over="ignore", invalid="ignore"):
                vals = pair.v((y[:, None] * Q) / p[None, :])
            out = vals @ p + y * eq
            out[~np.isfinite(out)] = math.inf
            return out

        lo = np.full(a_grid.size, -30.0)
        hi = np.full(a_grid.size, 30.0)
        phi = (math.sqrt(5.0) - 1.0) / 2.0
        c = hi - phi * (hi - lo)
        d = lo + phi * (hi - lo)
        fc, fd = val(c), val(d)
        for _ in range(70):
            left = fc <= fd
            hi = np.where(left, d, hi)
            lo = np.where(left, lo, c)
            c = hi - phi * (hi - lo)
            d = lo + phi * (hi - lo)
            fc, fd = val(c), val(d)
        return np.minimum(fc, fd)

    a_lo, a_hi = 1e-12, 2 / 3 - 1e-12
    best = math.inf
    for _ in range(stages):
        grid = np.linspace(a_lo, a_hi, steps_a)
        vals = best_over_mass(grid)
        i = int(np.argmin(vals))
        best = min(best, float(vals[i]))
        span = (a_hi - a_lo) / steps_a * 4
        a_lo = max(1e-12, grid[i] - span)
        a_hi = min(2 / 3 - 1e-12, grid[i] + span)
    return best


def test_bin1_exponential_closed_form(bin1, exp_pair_raw):
    sol = solve_dual(bin1, exp_pair_raw, 0.0)
    assert sol.q_hat_array == pytest.approx([1 / 3, 2 / 3], abs=1e-9)
    assert sol.mass == pytest.approx(BIN1_MASS, abs=1e-8)
    assert sol.value == pytest.approx(-BIN1_MASS, abs=1e-10)
    assert sol.support == "EQUIVALENT"
    assert sol.stationarity <= 1e-9


def test_tri1_minimal_entropy_measure(tri1, exp_pair_raw):
    sol = solve_dual(tri1, exp_pair_raw, 0.0)
    oracle = tri1_grid_oracle(exp_pair_raw, np.zeros(3))
    assert sol.value == pytest.approx(oracle, abs=1e-6)
    # minimal relative entropy: the normalized optimizer beats both vertices
    kl = float(np.sum(sol.q_hat_array * np.log(sol.q_hat_array * 3)))
    for v in vertex_enumerate(build_constraints(tri1)):
        q = v.as_array(tri1)
        m = q > 0
        assert kl <= float(np.sum(q[m] * np.log(q[m] * 3))) + 1e-9


def test_tri1_with_endowment_matches_grid_oracle(tri1, exp_pair):
    e = {"a": 0.4, "b": -0.3, "c": 0.2}
    sol = solve_dual(tri1, exp_pair, e)
    oracle = tri1_grid_oracle(exp_pair, leaf_values(tri1, e))
    assert sol.value == pytest.approx(oracle, abs=1e-6)


def test_tri1_two_power_matches_grid_oracle(tri1, tp_pair):
    e = {"a": 0.3, "b": -0.2, "c": 0.1}
    sol = solve_dual(tri1, tp_pair, e)
    oracle = tri1_grid_oracle(tp_pair, leaf_values(tri1, e))
    assert sol.value == pytest.approx(oracle, abs=1e-6)


def test_solution_invariants(tri1, exp_pair):
    sol = solve_dual(tri1, exp_pair, {"a": 0.3, "b": -0.2, "c": 0.1})
    A = build_constraints(tri1).matrix
    assert np.abs(A @ sol._mu_arr).max() <= 1e-9
    assert sol.mass > 0
    assert sol.value < exp_pair.u_inf
    assert sol.support == "EQUIVALENT"
    # value is re-evaluated at the returned measure, bit for bit
    p = tri1.leaf_probability_array
    e = leaf_values(tri1, {"a": 0.3, "b": -0.2, "c": 0.1})
    again = float(p @ exp_pair.v(sol._mu_arr / p) + sol._mu_arr @ e)
    assert again == sol.value


def test_kkt_certificate(tri1, exp_pair):
    e = {"a": 0.3, "b": -0.2, "c": 0.1}
    sol = solve_dual(tri1, exp_pair, e, tol=1e-11)
    A = build_constraints(tri1).matrix
    g = exp_pair.v_prime(sol.density_array) + leaf_values(tri1, e)
    lam, *_ = np.linalg.lstsq(A.T, g, rcond=None)
    s = g - A.T @ lam
    live = sol._mu_arr > 0
    assert np.abs(s[live]).max() <= 1e-8 * (1 + np.abs(g).max())


def test_uniqueness_from_random_starts(tri1, exp_pair):
    e = {"a": 0.5, "b": 0.0, "c": -0.5}
    rng = np.random.default_rng(11)
    verts = [v.as_array(tri1) for v in vertex_enumerate(build_constraints(tri1))]
    ref = solve_dual(tri1, exp_pair, e, tol=1e-11)
    for _ in range(4):
        w = rng.dirichlet(np.ones(len(verts)))
        q = 0.8 * (w @ np.array(verts)) + 0.2 * ref.q_hat_array
        start = MeasureVector.from_array(tri1, q * rng.uniform(0.3, 3.0))
        sol = solve_dual(tri1, exp_pair, e, tol=1e-11, start=start)
        assert np.abs(sol._mu_arr - ref._mu_arr).max() <= 1e-7


def test_endowment_shift_consistency(tri1, exp_pair):
    e = {"a": 0.1, "b": 0.2, "c": -0.1}
    base = solve_dual(tri1, exp_pair, e)
    for c in (0.5, -0.25):
        shifted = solve_dual(tri1, exp_pair,
                             {k: v + c for k, v in e.items()})
        # tangent sandwich from concavity of the value in a cash shift
        assert shifted.value <= base.value + base.mass * c + 1e-9
        assert shifted.value >= base.value + shifted.mass * c - 1e-9


def test_value_curve(tri1, exp_pair):
    e = {"a": 0.3, "b": -0.2, "c": 0.1}
    sol = solve_dual(tri1, exp_pair, e)
    ys = sol.mass * np.array([0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 4.0])
    rep = dual_value_curve(tri1, exp_pair, e, ys)
    at_opt = [p for p in rep.points if p.y == pytest.approx(sol.mass)]
    assert at_opt[0].value == pytest.approx(sol.value, abs=1e-8)
    assert rep.min_second_difference >= -1e-8
    assert rep.min_value >= sol.value - 1e-9


def test_value_curve_bin1_closed_form(bin1, exp_pair_raw):
    # single measure: the curve is one conjugate evaluation per mass
    q = np.array([1 / 3, 2 / 3])
    p = np.array([0.5, 0.5])
    ys = [0.4, 0.8, 1.2, 2.0]
    rep = dual_value_curve(bin1, exp_pair_raw, 0.0, ys)
    for pt in rep.points:
        direct = float(p @ exp_pair_raw.v(pt.y * q / p))
        assert pt.value == pytest.approx(direct, abs=1e-10)


def test_derivative_zero_at_optimum(tri1, exp_pair):
    e = {"a": 0.3, "b": -0.2, "c": 0.1}
    sol = solve_dual(tri1, exp_pair, e)
    assert abs(dual_derivative(tri1, exp_pair, e, sol.mass)) <= 1e-7


@pytest.mark.parametrize("y", [0.5, 1.0, 2.0])
def test_derivative_matches_finite_differences(tri1, tp_pair, y):
    e = {"a": 0.3, "b": -0.2, "c": 0.1}
    d = dual_derivative(tri1, tp_pair, e, y)
    h = 1e-5 * y
    up = solve_dual_fixed_mass(tri1, tp_pair, e, y + h).value
    dn = solve_dual_fixed_mass(tri1, tp_pair, e, y - h).value
    fd = (up - dn) / (2 * h)
    assert d == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_derivative_increases_to_infinity(tri1, exp_pair):
    ds = [dual_derivative(tri1, exp_pair, 0.0, y)
          for y in (1.0, 2.0, 4.0, 8.0, 16.0)]
    assert all(b > a for a, b in zip(ds, ds[1:]))


def test_fixed_mass_consistency(tri1, exp_pair):
    e = {"a": 0.3, "b": -0.2, "c": 0.1}
    sol = solve_dual(tri1, exp_pair, e)
    pinned = solve_dual_fixed_mass(tri1, exp_pair, e, sol.mass)
    assert pinned.value == pytest.approx(sol.value, abs=1e-8)


def test_maximal_support_full(tri1, exp_pair):
    sol = solve_dual(tri1, exp_pair, 0.0)
    verts = vertex_enumerate(build_constraints(tri1))
    rep = check_maximal_support(tri1, sol, verts)
    assert not rep.violations
    assert rep.vertices_tested == 2


def test_maximal_support_dead_leaf_vacuous(exp_pair):
    tree = treegen.dead_leaf_market()
    sol = solve_dual(tree, exp_pair, 0.0)
    assert sol.support == "DEGENERATE"
    verts = vertex_enumerate(build_constraints(tree))
    rep = check_maximal_support(tree, sol, verts)
    assert not rep.violations  # dead leaf uncharged by every vertex


def test_degenerate_flag_and_value(exp_pair_raw):
    tree = treegen.dead_leaf_market()
    sol = solve_dual(tree, exp_pair_raw, 0.0)
    assert sol.support == "DEGENERATE"
    # only measure is the point mass on the flat branch: 1-D problem in mass
    assert sol._mu_arr[0] == 0.0
    assert sol.value == pytest.approx(-0.5, abs=1e-10)


def test_two_power_degenerate_infeasible():
    tree = treegen.dead_leaf_market()
    with pytest.raises(InfeasibleEntropyError):
        solve_dual(tree, two_power_utility(0.5, 1.0, 1.0), 0.0)


def test_no_mm_propagates(exp_pair):
    with pytest.raises(NoMartingaleMeasureError):
        solve_dual(treegen.arbitrage_market(), exp_pair, 0.0)


def test_two_period_grid_oracle(exp_pair):
    tree = treegen.product_market([[2.0, 1.0, 0.5], [1.6, 0.7]])
    rng = np.random.default_rng(5)
    e = treegen.random_endowment(rng, tree)
    sol = solve_dual(tree, exp_pair, e, tol=1e-11)
    # independent check through the oracle module's exhaustive grid
    from treedual import brute_force_dual
    bd = brute_force_dual(tree, exp_pair, e, points_per_dim=21, rounds=10)
    assert bd == pytest.approx(sol.value, abs=1e-6)
    assert bd >= sol.value - 1e-9
