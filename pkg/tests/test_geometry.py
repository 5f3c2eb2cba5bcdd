import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import treegen
from treedual import (CapExceededError, MeasureVector,
                      NoMartingaleMeasureError, build_constraints,
                      exponential_utility, find_equivalent_mm,
                      is_martingale_measure, market_from_dict,
                      relative_entropy, sample_martingale_measures,
                      two_power_utility, vertex_enumerate)


def test_bin1_constraint_row(bin1):
    cons = build_constraints(bin1)
    assert cons.matrix.shape == (1, 2)
    assert cons.matrix[0] == pytest.approx([1.0, -0.5])
    assert cons.row_labels == (("root", 0),)


def test_tri1_constraint_row(tri1):
    cons = build_constraints(tri1)
    assert cons.matrix[0] == pytest.approx([1.0, 0.0, -0.5])


def test_reference_measure_martingale_when_prices_drift_free():
    # symmetric moves with matching probabilities make P itself a martingale
    tree = treegen.product_market([[1.5, 0.5]], prob_lists=[[0.5, 0.5]])
    p = tree.leaf_probability_array
    assert np.abs(build_constraints(tree).matrix @ p).max() < 1e-12
    assert is_martingale_measure(tree, p)


def test_find_equivalent_mm_bin1(bin1):
    q = find_equivalent_mm(bin1)
    assert q.as_array(bin1) == pytest.approx([1 / 3, 2 / 3], abs=1e-9)


def test_no_mm_on_arbitrage_tree():
    with pytest.raises(NoMartingaleMeasureError):
        find_equivalent_mm(treegen.arbitrage_market())


def test_dead_leaf_market_not_equivalent():
    tree = treegen.dead_leaf_market()
    assert find_equivalent_mm(tree) is None
    # the only measure is the point mass on the unmoved branch
    verts = vertex_enumerate(build_constraints(tree))
    assert len(verts) == 1
    assert verts[0].as_array(tree) == pytest.approx([0.0, 1.0])


def test_vertices_tri1(tri1):
    verts = vertex_enumerate(build_constraints(tri1))
    arrs = sorted(tuple(np.round(v.as_array(tri1), 10)) for v in verts)
    assert len(arrs) == 2
    assert arrs[0] == pytest.approx([0.0, 1.0, 0.0])
    assert arrs[1] == pytest.approx([1 / 3, 0.0, 2 / 3])


def test_vertex_unique_bin1(bin1):
    verts = vertex_enumerate(build_constraints(bin1))
    assert len(verts) == 1
    assert verts[0].as_array(bin1) == pytest.approx([1 / 3, 2 / 3], abs=1e-10)


def test_vertices_two_period_all_martingale():
    tree = treegen.product_market([[2.0, 1.0, 0.5], [2.0, 1.0, 0.5]])
    cons = build_constraints(tree)
    verts = vertex_enumerate(cons)
    assert verts
    for v in verts:
        arr = v.as_array(tree)
        assert np.abs(cons.matrix @ arr).max() <= 1e-10
        assert is_martingale_measure(tree, v, tol=1e-9)
        assert arr.sum() == pytest.approx(1.0, abs=1e-12)


def test_vertex_cap():
    tree = treegen.product_market([[2.0, 1.0, 0.5]] * 3)
    with pytest.raises(CapExceededError):
        vertex_enumerate(build_constraints(tree), cap=2)


def test_no_equivalent_mm_implies_every_vertex_degenerate():
    tree = treegen.dead_leaf_market()
    assert find_equivalent_mm(tree) is None
    for v in vertex_enumerate(build_constraints(tree)):
        assert min(v.values.values()) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 5.0), st.lists(st.floats(0.0, 2.0), min_size=3, max_size=3))
def test_cone_homogeneity(scale, mu_raw):
    tree = treegen.tri1()
    A = build_constraints(tree).matrix
    base = np.array([0.2, 0.4, 0.4])  # satisfies the constraint row
    mu = base * np.asarray(mu_raw).mean()
    if np.abs(A @ mu).max() > 1e-12:
        return
    assert np.abs(A @ (scale * mu)).max() <= 1e-12 * max(1.0, scale)


def test_relative_entropy_reference_measure(tri1):
    pair = exponential_utility(1.0, 0.0)
    p = MeasureVector.from_array(tri1, tri1.leaf_probability_array)
    assert relative_entropy(tri1, pair, p) == pytest.approx(-1.0, abs=1e-12)


def test_relative_entropy_zero_measure(tri1):
    pair_exp = exponential_utility(1.0, 0.0)
    zero = MeasureVector.from_array(tri1, np.zeros(3))
    assert relative_entropy(tri1, pair_exp, zero) == pytest.approx(0.0)
    pair_tp = two_power_utility(0.5, 1.0, 1.0)
    assert relative_entropy(tri1, pair_tp, zero) == math.inf


def test_relative_entropy_vertex_value(tri1):
    pair = exponential_utility(1.0, 0.0)
    q = MeasureVector.from_array(tri1, np.array([1 / 3, 0.0, 2 / 3]))
    # densities (1, 0, 2) under the uniform reference: V(1)/3 + 0 + V(2)/3
    expected = (1 / 3) * (-1.0) + (1 / 3) * (2 * math.log(2) - 2)
    assert relative_entropy(tri1, pair, q) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.99))
def test_relative_entropy_convex_along_segments(lam):
    tree = treegen.tri1()
    pair = exponential_utility(1.0, 0.0)
    mu0 = MeasureVector.from_array(tree, np.array([0.1, 0.6, 0.2]))
    mu1 = MeasureVector.from_array(tree, np.array([0.5, 0.1, 1.0]))
    mix = MeasureVector.from_array(
        tree, lam * mu1.as_array(tree) + (1 - lam) * mu0.as_array(tree))
    lhs = relative_entropy(tree, pair, mix)
    rhs = (lam * relative_entropy(tree, pair, mu1)
           + (1 - lam) * relative_entropy(tree, pair, mu0))
    assert lhs <= rhs + 1e-10


def test_sampled_measures_are_martingale_measures():
    tree = treegen.product_market([[2.0, 1.0, 0.5], [1.5, 0.7]])
    for q in sample_martingale_measures(tree, 25, seed=3):
        assert is_martingale_measure(tree, q, tol=1e-8)
        assert q.mass == pytest.approx(1.0, abs=1e-9)


def test_measure_vector_api(tri1):
    mv = MeasureVector({"a": 0.2, "b": 0.3, "c": 0.5})
    assert mv.mass == pytest.approx(1.0)
    assert mv.density(tri1) == pytest.approx([0.6, 0.9, 1.5])
    assert mv.normalized().mass == pytest.approx(1.0)
