"""Primal recovery: optimal terminal wealth, trading strategy, verification.

The optimal terminal gain is read off the dual optimizer through the inverse
marginal: ``X_l = -V'(density_l) - e_l``.  The wealth process is its
conditional expectation under the normalized optimal measure, and the
strategy solves the one-step replication systems node by node.  On a finite
tree the gain of any strategy is an exact martingale under every martingale
measure wherever the conditional expectation is defined, so the
supermartingale verification reports per-node drifts against enumerated
polytope vertices.  The dynamic checks re-solve conditional dual problems on
subtrees and compare their mass derivatives with the wealth process.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dual import DualSolution, _newton_core, _objective
from .errors import (NoPrimalOptimizerError, NotExponentialError,
                     ReplicationGapError)
from .geometry import MeasureVector, build_constraints, relative_entropy
from .market import AdaptedProcess, MarketTree, RandomVariable, leaf_values
from .utility import UtilityPair


@dataclass(frozen=True, eq=False)
class PrimalSolution:
    """Terminal wealth, wealth process, strategy and diagnostics."""

    terminal_wealth: RandomVariable
    wealth: AdaptedProcess             # scalar per node
    strategy: AdaptedProcess           # vector in R^d per non-leaf node
    replication_residual: float
    value: float                       # expected utility at the optimum
    first_order_residual: float
    unreached: tuple[str, ...]


def recover_terminal_wealth(tree: MarketTree, pair: UtilityPair, endow,
                            sol: DualSolution) -> RandomVariable:
    """Optimal terminal gain from the dual optimizer.

    Requires an equivalent (full-support) optimal measure; with a degenerate
    optimizer the candidate wealth is infinite on the null leaves and no
    primal optimizer exists.
    """
    if sol.support != "EQUIVALENT":
        raise NoPrimalOptimizerError(
            "dual optimizer is degenerate (no equivalent martingale measure "
            "with finite entropy); the primal problem has no optimizer")
    e = leaf_values(tree, endow)
    dens = sol.density_array
    x = -sol.pair.v_prime(dens) - e
    resid = np.abs(pair.u_prime(x + e) - dens)
    scale = 1.0 + np.abs(dens).max()
    if resid.max() > 1e-8 * scale:
        raise ReplicationGapError(
            f"first-order residual {resid.max():.3e} above tolerance; "
            "dual solution is not accurate enough", residual=float(resid.max()))
    return RandomVariable.from_array(tree, x)


def extract_strategy(tree: MarketTree, sol: DualSolution, xhat: RandomVariable,
                     pair: UtilityPair, endow, *,
                     tol: float = 1e-8) -> PrimalSolution:
    """Wealth by backward induction under the optimal measure, strategy by
    one-step least-squares replication.

    The replication residual certifies exact attainability; a residual above
    ``tol`` is a solver-failure diagnostic, not a mathematical outcome, and
    raises :class:`ReplicationGapError` naming the worst node.
    """
    e = leaf_values(tree, endow)
    x = xhat.as_array(tree)
    q = sol.q_hat_array
    wealth: dict[str, float] = {}
    strategy: dict[str, np.ndarray] = {}
    unreached: list[str] = []
    scale = 1.0 + float(np.abs(x).max())

    for leaf in tree.leaf_ids:
        wealth[leaf] = float(x[tree.leaf_index(leaf)])

    worst = (0.0, None)
    for t in range(tree.horizon - 1, -1, -1):
        for nid in tree.nodes_at(t):
            if tree.is_leaf(nid):
                continue
            kids = tree.children(nid)
            lo, hi = tree.leaf_slice(nid)
            mass_n = q[lo:hi].sum()
            dS = np.array([tree.price(c) - tree.price(nid) for c in kids])
            w_kids = np.array([wealth[c] for c in kids])
            if mass_n > 0:
                masses = np.array([q[slice(*tree.leaf_slice(c))].sum() for c in kids])
                w_n = float(np.dot(masses, w_kids) / mass_n)
                h, *_ = np.linalg.lstsq(dS, w_kids - w_n, rcond=None)
            else:
                # 0/0 convention: joint least-squares over (wealth, strategy)
                unreached.append(nid)
                M = np.column_stack([np.ones(len(kids)), dS])
                coef, *_ = np.linalg.lstsq(M, w_kids, rcond=None)
                w_n, h = float(coef[0]), coef[1:]
            resid = float(np.abs(w_kids - w_n - dS @ h).max())
            wealth[nid] = w_n
            strategy[nid] = h
            if mass_n > 0 and resid > worst[0]:
                worst = (resid, nid)

    if worst[0] > tol * scale:
        raise ReplicationGapError(
            f"replication residual {worst[0]:.3e} at node {worst[1]!r} "
            f"exceeds {tol:.1e} (scaled)", node_id=worst[1], residual=worst[0])

    p = tree.leaf_probability_array
    value = float(np.dot(p, pair.u(x + e)))
    dens = sol.density_array
    foc = float(np.abs(pair.u_prime(x + e) - dens).max())
    return PrimalSolution(
        terminal_wealth=xhat,
        wealth=AdaptedProcess(wealth),
        strategy=AdaptedProcess(strategy),
        replication_residual=worst[0],
        value=value,
        first_order_residual=foc,
        unreached=tuple(unreached),
    )


def recover(tree: MarketTree, pair: UtilityPair, endow,
            sol: DualSolution, *, tol: float = 1e-8) -> PrimalSolution:
    """Terminal wealth plus strategy extraction in one call."""
    xhat = recover_terminal_wealth(tree, pair, endow, sol)
    return extract_strategy(tree, sol, xhat, pair, endow, tol=tol)


# -- verification -----------------------------------------------------------------


@dataclass(frozen=True)
class DriftViolation:
    measure_index: int
    node_id: str
    drift: float


@dataclass(frozen=True)
class SupermartingaleReport:
    violations: tuple[DriftViolation, ...]
    max_drift: float                     # most positive drift over tested pairs
    max_abs_drift_under_optimal: float   # martingale check under the optimizer
    measures_tested: int
    measures_skipped: int                # infinite relative entropy


def verify_supermartingale(tree: MarketTree, wealth: AdaptedProcess, measures,
                           pair: UtilityPair, q_hat: MeasureVector | None = None,
                           tol: float = 1e-8) -> SupermartingaleReport:
    """Per-node drift of the wealth process under each finite-entropy measure.

    Report-only: lists (measure, node) pairs whose conditional drift exceeds
    ``tol`` (scaled), and the exact-martingale residual under the optimal
    measure when given.
    """
    w_scale = 1.0 + max(abs(float(wealth.at(n))) for n in tree.node_ids)
    max_drift = -math.inf
    violations = []
    tested = skipped = 0

    def node_drifts(q_arr):
        out = []
        for nid in tree.nonleaf_ids:
            lo, hi = tree.leaf_slice(nid)
            mass = q_arr[lo:hi].sum()
            if mass <= 0:
                continue
            cond = 0.0
            for c in tree.children(nid):
                clo, chi = tree.leaf_slice(c)
                cond += q_arr[clo:chi].sum() * float(wealth.at(c))
            out.append((nid, cond / mass - float(wealth.at(nid))))
        return out

    for k, q in enumerate(measures):
        if not math.isfinite(relative_entropy(tree, pair, q)):
            skipped += 1
            continue
        tested += 1
        arr = q.as_array(tree) if isinstance(q, MeasureVector) else leaf_values(tree, q)
        for nid, drift in node_drifts(arr):
            max_drift = max(max_drift, drift)
            if drift > tol * w_scale:
                violations.append(DriftViolation(k, nid, drift))

    opt_drift = 0.0
    if q_hat is not None:
        arr = q_hat.as_array(tree)
        opt_drift = max((abs(d) for _, d in node_drifts(arr)), default=0.0)

    return SupermartingaleReport(
        violations=tuple(violations),
        max_drift=max_drift if tested else 0.0,
        max_abs_drift_under_optimal=opt_drift,
        measures_tested=tested,
        measures_skipped=skipped,
    )


# -- dynamic dual -------------------------------------------------------------------


@dataclass(frozen=True)
class DynamicDualNode:
    node_id: str
    value: float             # conditional dual value at the node
    derivative: float        # mass derivative of the conditional value
    restriction_gap: float   # value vs the restricted global optimizer
    wealth_residual: float | None  # |W + derivative|, scaled, when W given


def dynamic_dual(tree: MarketTree, pair: UtilityPair, endow, t: int,
                 sol: DualSolution, wealth: AdaptedProcess | None = None, *,
                 tol: float = 1e-9) -> list[DynamicDualNode]:
    """Conditional dual problems at the time-``t`` nodes.

    For each positive-mass node, minimizes the conditional entropy-plus-
    endowment objective over subtree measures matching the optimizer's mass
    on the node, then differentiates in that mass by the envelope formula.
    Deterministic time grid only.  Consistency: the derivative should equal
    minus the wealth at the node.
    """
    if not (0 <= t <= tree.horizon):
        raise ValueError(f"time {t} outside 0..{tree.horizon}")
    e = leaf_values(tree, endow)
    p = tree.leaf_probability_array
    mu = sol._mu_arr
    A = build_constraints(tree).matrix
    labels = build_constraints(tree).row_labels
    out = []
    for nid in tree.nodes_at(t):
        lo, hi = tree.leaf_slice(nid)
        m_n = float(mu[lo:hi].sum())
        if m_n <= 0:
            continue
        P_n = tree.node_probability(nid)
        rows = [i for i, (rn, _) in enumerate(labels)
                if tree.leaf_slice(rn)[0] >= lo and tree.leaf_slice(rn)[1] <= hi]
        A_sub = A[np.ix_(rows, range(lo, hi))] if rows else np.zeros((0, hi - lo))
        p_sub = p[lo:hi]
        e_sub = e[lo:hi]
        q0 = mu[lo:hi] / m_n
        mu_sub, raw, _, _ = _newton_core(A_sub, p_sub, e_sub, pair, q0,
                                         mass=m_n, tol=tol, start_mu=mu[lo:hi])
        value = raw / P_n
        dens = mu_sub / p_sub
        deriv = float(np.dot(mu_sub / m_n, pair.v_prime(dens) + e_sub))
        gap = abs(raw - _objective(pair, p_sub, e_sub, mu[lo:hi])) / (1.0 + abs(raw))
        wres = None
        if wealth is not None:
            w = float(wealth.at(nid))
            wres = abs(w + deriv) / (1.0 + abs(w))
        out.append(DynamicDualNode(nid, value, deriv, gap, wres))
    return out


# -- exponential Snell envelope ------------------------------------------------------


@dataclass(frozen=True)
class SnellReport:
    envelope: AdaptedProcess
    max_equality_gap: float        # |max over measures - wealth|, scaled
    max_lower_bound_excess: float  # most positive (value - wealth) over measures
    measures_tested: int


def snell_envelope_exponential(tree: MarketTree, pair: UtilityPair, endow,
                               sol: DualSolution, vertices, *,
                               wealth: AdaptedProcess,
                               mollify: float = 1e-6) -> SnellReport:
    """Essential-supremum representation of the optimal wealth (exponential).

    At each node, the wealth should equal the supremum over equivalent
    finite-entropy martingale measures of the conditional expectation of the
    log-density payoff ``(1/gamma) ln(dP/d(optimal measure)) - endowment``.
    Vertices are mollified toward an equivalent measure to yield certified
    interior test measures; the optimal measure attains the supremum.
    """
    if pair.family != "exponential":
        raise NotExponentialError("Snell-envelope check requires exponential utility")
    if sol.support != "EQUIVALENT":
        raise NoPrimalOptimizerError("requires an equivalent optimal measure")
    gamma = pair.params["gamma"]
    e = leaf_values(tree, endow)
    p = tree.leaf_probability_array
    mu = sol._mu_arr
    payoff = np.log(p / mu) / gamma - e   # leaf random variable inside the essmax

    q_e = sol.q_hat_array
    tested = [q_e]
    for v in vertices:
        arr = v.as_array(tree)
        tested.append((1.0 - mollify) * arr + mollify * q_e)

    w_scale = 1.0 + max(abs(float(wealth.at(n))) for n in tree.node_ids)
    env: dict[str, float] = {}
    eq_gap = 0.0
    lb_excess = -math.inf
    for nid in tree.node_ids:
        lo, hi = tree.leaf_slice(nid)
        best = -math.inf
        for q in tested:
            mass = q[lo:hi].sum()
            val = float(np.dot(q[lo:hi], payoff[lo:hi]) / mass)
            best = max(best, val)
            lb_excess = max(lb_excess, (val - float(wealth.at(nid))) / w_scale)
        env[nid] = best
        eq_gap = max(eq_gap, abs(best - float(wealth.at(nid))) / w_scale)
    return SnellReport(
        envelope=AdaptedProcess(env),
        max_equality_gap=eq_gap,
        max_lower_bound_excess=lb_excess,
        measures_tested=len(tested),
    )
