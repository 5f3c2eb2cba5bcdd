"""Command-line front end.

Subcommands: ``solve``, ``recover``, ``price``, ``curve``, ``mubpp``,
``sensitivity``, ``verify``, ``oracle``, ``geometry``.  Numeric output is
printed with 12 significant digits; every run with an ``--output-dir`` also
writes a ``manifest.json`` (command, arguments, package and library versions,
seed) plus machine-readable CSV files.  Identical configuration and seed
produce byte-identical CSV output.

Exit codes: 0 success, 1 verification/market failure (arbitrage, failed
invariants), 2 input error (bad files, unknown names, bad flags).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checks import run_battery
from .dual import solve_dual
from .errors import ParseError, TreedualError
from .geometry import build_constraints, find_equivalent_mm, vertex_enumerate
from .market import AdaptedProcess, MarketTree, RandomVariable, load_market
from .oracle import check_duality_gap
from .pricing import (average_price_curve, check_mubpp, endowment_sensitivity,
                      price_report)
from .recovery import recover
from .utility import parse_utility_spec

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_INPUT = 2


def f12(x) -> str:
    return format(float(x), ".12g")


def _pick_endowment(tree: MarketTree, name: str | None) -> RandomVariable:
    """Endowment by name: the file's endowment, a claim name, or zero."""
    if name is None or name == "endowment":
        return tree.endowment
    if name == "zero":
        return RandomVariable.constant(tree, 0.0)
    if name in tree.claims:
        return tree.claims[name]
    raise ParseError(f"unknown endowment name {name!r} "
                     f"(use 'endowment', 'zero' or one of {sorted(tree.claims)})")


def _pick_claim(tree: MarketTree, name: str) -> RandomVariable:
    if name in tree.claims:
        return tree.claims[name]
    raise ParseError(f"unknown claim {name!r}; file defines {sorted(tree.claims)}")


class _Out:
    """Collects text lines and CSV files; flushes to stdout / output dir."""

    def __init__(self, args):
        self.lines: list[str] = []
        self.csvs: dict[str, list[str]] = {}
        self.fmt = args.format
        self.outdir = Path(args.output_dir) if args.output_dir else None
        self.manifest = {
            "command": args.command,
            "config": {k: v for k, v in sorted(vars(args).items())
                       if k not in ("func",)},
            "versions": {"treedual": __version__,
                         "numpy": np.__version__,
                         "python": sys.version.split()[0]},
        }

    def say(self, text=""):
        self.lines.append(text)

    def csv(self, name, header, rows):
        body = [",".join(header)]
        body += [",".join(str(c) for c in row) for row in rows]
        self.csvs[name] = body

    def flush(self):
        if self.fmt == "text":
            print("\n".join(self.lines))
        elif self.fmt == "csv":
            for body in self.csvs.values():
                print("\n".join(body))
        else:  # structured
            print(json.dumps({"report": self.lines,
                              "tables": self.csvs,
                              "manifest": self.manifest},
                             indent=2, sort_keys=True, default=str))
        if self.outdir is not None:
            self.outdir.mkdir(parents=True, exist_ok=True)
            for name, body in self.csvs.items():
                (self.outdir / name).write_text("\n".join(body) + "\n")
            (self.outdir / "manifest.json").write_text(
                json.dumps(self.manifest, indent=2, sort_keys=True,
                           default=str) + "\n")


def _cmd_geometry(args, out: _Out):
    tree = load_market(args.market)
    cons = build_constraints(tree)
    out.say(f"market: {tree!r}")
    out.say(f"constraint rows: {cons.matrix.shape[0]} over {tree.n_leaves} leaves")
    for (nid, asset), row in zip(cons.row_labels, cons.matrix):
        out.say(f"  node {nid} asset {tree.assets[asset]}: "
                + " ".join(f12(c) for c in row))
    q = find_equivalent_mm(tree)
    out.say("equivalent martingale measure: "
            + ("none (degenerate market)" if q is None else "exists"))
    verts = vertex_enumerate(cons, cap=args.vertex_cap)
    out.say(f"polytope vertices: {len(verts)}")
    rows = [[k] + [f12(v.values[l]) for l in tree.leaf_ids]
            for k, v in enumerate(verts)]
    out.csv("vertices.csv", ["vertex"] + list(tree.leaf_ids), rows)
    out.csv("constraints.csv",
            ["node", "asset"] + list(tree.leaf_ids),
            [[nid, tree.assets[a]] + [f12(c) for c in row]
             for (nid, a), row in zip(cons.row_labels, cons.matrix)])
    return EXIT_OK


def _cmd_solve(args, out: _Out):
    tree = load_market(args.market)
    pair = parse_utility_spec(args.utility)
    endow = _pick_endowment(tree, args.endowment)
    sol = solve_dual(tree, pair, endow, tol=args.tol)
    out.say(f"dual value: {f12(sol.value)}")
    out.say(f"optimal mass: {f12(sol.mass)}")
    out.say(f"support: {sol.support}")
    out.say(f"stationarity residual: {f12(sol.stationarity)}")
    out.say("leaf  mass  normalized  density")
    for leaf in tree.leaf_ids:
        m = sol.mu.values[leaf]
        out.say(f"  {leaf}  {f12(m)}  {f12(m / sol.mass)}  "
                f"{f12(m / tree.node_probability(leaf))}")
    out.csv("optimal_measure.csv",
            ["leaf", "mass", "normalized", "density"],
            [[leaf, f12(sol.mu.values[leaf]),
              f12(sol.mu.values[leaf] / sol.mass),
              f12(sol.mu.values[leaf] / tree.node_probability(leaf))]
             for leaf in tree.leaf_ids])
    return EXIT_OK


def _cmd_recover(args, out: _Out):
    tree = load_market(args.market)
    pair = parse_utility_spec(args.utility)
    endow = _pick_endowment(tree, args.endowment)
    sol = solve_dual(tree, pair, endow, tol=args.tol)
    ps = recover(tree, pair, endow, sol)
    out.say(f"primal value: {f12(ps.value)}")
    out.say(f"dual value:   {f12(sol.value)}")
    out.say(f"replication residual: {f12(ps.replication_residual)}")
    rows = []
    for nid in tree.node_ids:
        h = ps.strategy.values.get(nid)
        hs = [f12(c) for c in np.atleast_1d(h)] if h is not None \
            else [""] * tree.n_assets
        rows.append([nid, tree.time(nid), f12(ps.wealth.at(nid))] + hs)
    out.csv("wealth_strategy.csv",
            ["node", "t", "wealth"] + [f"h_{a}" for a in tree.assets], rows)
    out.say("node  t  wealth  holdings")
    for r in rows:
        out.say("  " + "  ".join(str(c) for c in r))
    return EXIT_OK


def _cmd_price(args, out: _Out):
    tree = load_market(args.market)
    pair = parse_utility_spec(args.utility)
    endow = _pick_endowment(tree, args.endowment)
    claim = _pick_claim(tree, args.claim)
    rep = price_report(tree, pair, endow, claim, solver_tol=args.tol)
    out.say(f"bid:   {f12(rep.bid)}")
    out.say(f"offer: {f12(rep.offer)}")
    out.say(f"certainty equivalent: {f12(rep.certainty_equivalent)}")
    out.say(f"marginal (davis): {f12(rep.davis)}")
    out.say(f"bounds: [{f12(rep.lp_bounds[0])}, {f12(rep.lp_bounds[1])}]")
    out.say(f"cross-method residual: {f12(rep.method_agreement_residual)}")
    out.csv("price.csv",
            ["claim", "bid", "offer", "certainty_equivalent", "davis",
             "bound_lo", "bound_hi", "method_residual"],
            [[args.claim, f12(rep.bid), f12(rep.offer),
              f12(rep.certainty_equivalent), f12(rep.davis),
              f12(rep.lp_bounds[0]), f12(rep.lp_bounds[1]),
              f12(rep.method_agreement_residual)]])
    return EXIT_OK


def _parse_betas(spec: str):
    lo, hi, n = spec.split(":")
    return np.logspace(np.log10(float(lo)), np.log10(float(hi)), int(n)).tolist()


def _cmd_curve(args, out: _Out):
    tree = load_market(args.market)
    pair = parse_utility_spec(args.utility)
    endow = _pick_endowment(tree, args.endowment)
    claim = _pick_claim(tree, args.claim)
    betas = _parse_betas(args.betas)
    if args.workers > 1:
        # independent volumes parallelize; assembly order is fixed by input
        with concurrent.futures.ThreadPoolExecutor(args.workers) as ex:
            parts = list(ex.map(
                lambda b: average_price_curve(tree, pair, endow, claim, [b],
                                              solver_tol=args.tol), betas))
        prices = [p.prices[0] for p in parts]
        lp_lo, davis = parts[0].lp_lower, parts[0].davis
    else:
        rep = average_price_curve(tree, pair, endow, claim, betas,
                                  solver_tol=args.tol)
        prices = list(rep.prices)
        lp_lo, davis = rep.lp_lower, rep.davis
    out.say("beta  average_price")
    for b, p in zip(betas, prices):
        out.say(f"  {f12(b)}  {f12(p)}")
    out.say(f"large-volume limit (lower bound): {f12(lp_lo)}")
    out.say(f"zero-volume limit (marginal price): {f12(davis)}")
    out.csv("volume_curve.csv", ["beta", "average_price", "lp_lower", "davis"],
            [[f12(b), f12(p), f12(lp_lo), f12(davis)]
             for b, p in zip(betas, prices)])
    return EXIT_OK


def _cmd_mubpp(args, out: _Out):
    tree = load_market(args.market)
    pair = parse_utility_spec(args.utility)
    endow = _pick_endowment(tree, args.endowment)
    with open(args.process, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    missing = [nid for nid in tree.node_ids if nid not in raw]
    if missing:
        raise ParseError(f"process file missing nodes: {missing[:5]}")
    sprime = AdaptedProcess({k: v for k, v in raw.items()})
    rep = check_mubpp(tree, pair, endow, sprime, solver_tol=args.tol)
    out.say(f"marginal utility-based price process: {rep.is_mubpp}")
    out.say(f"drift verdict: {rep.drift_verdict} "
            f"(max scaled drift {f12(rep.max_abs_drift)})")
    out.say(f"utility verdict: {rep.utility_verdict} "
            f"(base {f12(rep.base_value)}, augmented "
            f"{f12(rep.augmented_value) if rep.augmented_value is not None else 'inf'})")
    out.say(f"verdicts agree: {rep.agree}")
    out.csv("mubpp_drifts.csv", ["node", "abs_drift"],
            [[nid, f12(d)] for nid, d in rep.node_drifts])
    return EXIT_OK if rep.agree else EXIT_VERIFY


def _cmd_sensitivity(args, out: _Out):
    tree = load_market(args.market)
    pair = parse_utility_spec(args.utility)
    names = args.endowments.split(",")
    endows = [_pick_endowment(tree, n.strip()) for n in names]
    claim = _pick_claim(tree, args.claim) if args.claim else None
    seq = None
    if args.continuity_steps > 0:
        seq = [endows[0] + 1.0 / n for n in range(1, args.continuity_steps + 1)]
    rep = endowment_sensitivity(tree, pair, endows, sequence=seq, claim=claim,
                                solver_tol=args.tol)
    out.say("optimal values: " + " ".join(f12(v) for v in rep.values))
    for i, j, margin in rep.monotone_margins:
        out.say(f"monotone {names[i]} <= {names[j]}: margin {f12(margin)}")
    out.say(f"strict monotonicity consistent: {rep.strict_ok}")
    for lam, margin in rep.concavity_margins:
        out.say(f"concavity at lambda={f12(lam)}: margin {f12(margin)}")
    ok = rep.strict_ok and all(m >= -1e-9 for _, m in rep.concavity_margins)
    for entry in rep.continuity:
        out.say(f"continuity: |du| {f12(entry.value_gap)} <= "
                f"r*sup {f12((rep.mass_radius or 0.0) * entry.sup_bound)}"
                f" ({'ok' if entry.dominated else 'VIOLATED'})")
        ok = ok and entry.dominated
    if rep.sandwich is not None:
        lo_slack, hi_slack = rep.sandwich
        out.say(f"recentred-claim sandwich slacks: {f12(lo_slack)}, {f12(hi_slack)}")
        ok = ok and lo_slack >= -1e-9 and hi_slack >= -1e-9
    out.csv("sensitivity.csv", ["check", "value"],
            [["value_" + names[i], f12(v)] for i, v in enumerate(rep.values)]
            + [[f"concavity_{f12(l)}", f12(m)] for l, m in rep.concavity_margins])
    return EXIT_OK if ok else EXIT_VERIFY


def _cmd_verify(args, out: _Out):
    tree = load_market(args.market)
    pair = parse_utility_spec(args.utility)
    endow = _pick_endowment(tree, args.endowment)
    override = None
    if args.inject_mu:
        # test hook: corrupt the optimal measure before verification
        sol = solve_dual(tree, pair, endow, tol=args.tol)
        override = sol._mu_arr.copy()
        leaf, delta = args.inject_mu.split(":")
        override[tree.leaf_index(leaf)] += float(delta)
    results = run_battery(tree, pair, endow, solver_tol=min(args.tol, 1e-11),
                          mu_override=override)
    failed = 0
    for r in results:
        out.say(r.line())
        failed += not r.passed
    out.say(f"{len(results) - failed}/{len(results)} checks passed")
    out.csv("verify.csv", ["check", "passed", "residual", "tolerance"],
            [[r.name, int(r.passed), f12(r.residual), f12(r.tolerance)]
             for r in results])
    return EXIT_OK if failed == 0 else EXIT_VERIFY


def _cmd_oracle(args, out: _Out):
    tree = load_market(args.market)
    pair = parse_utility_spec(args.utility)
    endow = _pick_endowment(tree, args.endowment)
    rep = check_duality_gap(tree, pair, endow, seed=args.seed)
    out.say(f"regime: {rep.regime}")
    if rep.regime == "OK":
        out.say(f"solver dual:   {f12(rep.solver_dual)}")
        if rep.solver_primal is not None:
            out.say(f"solver primal: {f12(rep.solver_primal)}")
        out.say(f"brute dual:    {f12(rep.brute_dual)} ({rep.dual_mode}, "
                f"polytope dim {rep.polytope_dim})")
        if rep.brute_primal is not None:
            out.say(f"brute primal:  {f12(rep.brute_primal)} "
                    f"(strategy dim {rep.strategy_dim})")
        gaps = [g for g in (rep.gap_solver, rep.gap_brute_dual,
                            rep.gap_brute_primal) if g is not None]
        out.say("max gap: " + f12(max(gaps)))
    out.csv("oracle.csv",
            ["regime", "solver_dual", "solver_primal", "brute_dual",
             "brute_primal"],
            [[rep.regime] + [f12(x) if x is not None else "" for x in
                             (rep.solver_dual, rep.solver_primal,
                              rep.brute_dual, rep.brute_primal)]])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="treedual",
        description="Utility maximization and pricing on scenario trees")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, utility=True):
        p.add_argument("--market", required=True, help="scenario file (JSON)")
        if utility:
            p.add_argument("--utility", required=True,
                           help="e.g. exp:gamma=1,C=2 or twopower:a=0.5,b=1,C=1")
            p.add_argument("--endowment", default=None,
                           help="'endowment' (file default), 'zero', or a claim name")
        p.add_argument("--tol", type=float, default=1e-9)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--format", choices=("text", "csv", "structured"),
                       default="text")
        p.add_argument("--output-dir", default=None)
        p.add_argument("--workers", type=int,
                       default=int(os.environ.get("TREEDUAL_WORKERS", "1")))

    p = sub.add_parser("geometry", help="constraints, feasibility, vertices")
    common(p, utility=False)
    p.add_argument("--vertex-cap", type=int, default=10_000)
    p.set_defaults(func=_cmd_geometry)

    p = sub.add_parser("solve", help="solve the dual problem")
    common(p)
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("recover", help="optimal wealth and strategy")
    common(p)
    p.set_defaults(func=_cmd_recover)

    p = sub.add_parser("price", help="indifference/marginal prices for a claim")
    common(p)
    p.add_argument("--claim", required=True)
    p.set_defaults(func=_cmd_price)

    p = sub.add_parser("curve", help="volume asymptotics of the average price")
    common(p)
    p.add_argument("--claim", required=True)
    p.add_argument("--betas", default="1e-4:1e4:9",
                   help="log grid as lo:hi:n")
    p.set_defaults(func=_cmd_curve)

    p = sub.add_parser("mubpp", help="marginal utility-based price process check")
    common(p)
    p.add_argument("--process", required=True,
                   help="JSON file: node id -> value (or list of values)")
    p.set_defaults(func=_cmd_mubpp)

    p = sub.add_parser("sensitivity", help="endowment dependence certificates")
    common(p)
    p.add_argument("--endowments", required=True,
                   help="comma-separated names ('endowment', 'zero', claim names)")
    p.add_argument("--claim", default=None)
    p.add_argument("--continuity-steps", type=int, default=0)
    p.set_defaults(func=_cmd_sensitivity)

    p = sub.add_parser("verify", help="run the invariant battery")
    common(p)
    p.add_argument("--inject-mu", default=None, metavar="LEAF:DELTA",
                   help=argparse.SUPPRESS)  # test hook
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("oracle", help="brute-force certification")
    common(p)
    p.set_defaults(func=_cmd_oracle)
    return ap


def run(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    out = _Out(args)
    try:
        code = args.func(args, out)
    except ParseError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TreedualError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    out.flush()
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
