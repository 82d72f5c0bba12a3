"""Command-line front end.

Machine-readable output (CSV or JSON) goes to files under ``--out`` when it
is given, otherwise to stdout.  Human-readable summaries go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from typing import Any, Sequence

import numpy as np

from . import centralized as cen
from . import coordinated as coo
from . import pbp
from .beliefs import INF, RecursionMode, belief_oracle_deviation, check_conditional_independence, q_value, z_value
from .config import RunConfig
from .mdp import MdpValidationError, finite_horizon_dp
from .model import NeverTransmit
from .simulate import compare_dp_mc, default_horizon, evaluate_mc

# ----------------------------------------------------------------------------
# output helpers


class Output:
    def __init__(self, out: str | None):
        self.dir = out
        if out:
            os.makedirs(out, exist_ok=True)

    def path(self, name: str) -> str | None:
        return os.path.join(self.dir, name) if self.dir else None

    def csv_rows(self, name: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
        fh = open(self.path(name), "w", newline="") if self.dir else sys.stdout
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
        if fh is not sys.stdout:
            fh.close()

    def json(self, name: str, obj: Any) -> None:
        text = json.dumps(obj, indent=2, default=_jsonable)
        if self.dir:
            with open(self.path(name), "w") as fh:
                fh.write(text + "\n")
        else:
            print(text)


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if x == INF:
        return "inf"
    raise TypeError(f"not serialisable: {type(x)}")


def say(msg: str) -> None:
    print(msg, file=sys.stderr)


# ----------------------------------------------------------------------------
# commands


def cmd_solve_centralized(cfg: RunConfig, args) -> int:
    params, mode = cfg.params, cfg.recursion
    sol = cen.solve_centralized(params, cfg.cap_m, mode, cfg.tol)
    k0, k1 = (cen.format_threshold(k, cfg.cap_m) for k in sol.thresholds)
    out = Output(cfg.out)
    out.csv_rows("centralized.csv", ["p", "c", "k0", "k1", "mode"], [[params.p1, params.c, k0, k1, mode.value]])
    if cfg.out:
        cen.write_policy_csv(sol, out.path("centralized_policy.csv"))
    say(f"centralized ({mode.value}): k0={k0} k1={k1} after {sol.result.iterations} sweeps")
    return 0


def cmd_reproduce_table1(cfg: RunConfig, args) -> int:
    rows = cen.reproduce_table1(cfg.cap_m, cfg.tol)
    out = Output(cfg.out)
    header = ["p", "c", "k0", "k1", "mode", "expected_k0", "expected_k1", "match"]
    out.csv_rows("table1.csv", header, [[r[h] for h in header] for r in rows])
    full = []
    for mode in RecursionMode:
        hits = [r for r in rows if r["mode"] == mode.value]
        n = sum(r["match"] for r in hits)
        say(f"{mode.value}: {n}/{len(hits)} cells match")
        for r in hits:
            if not r["match"]:
                say(f"  p={r['p']} c={r['c']}: got ({r['k0']},{r['k1']}) expected ({r['expected_k0']},{r['expected_k1']})")
        if n == len(hits):
            full.append(mode.value)
    say("modes matching every cell: " + (", ".join(full) if full else "none"))
    return 0


def reference_spec(cfg: RunConfig) -> coo.PatternSpec | None:
    ref, specs = coo.published_strategies()
    if any(getattr(cfg, k) != v for k, v in ref.items()):
        return None
    return specs.get(cfg.c)


def cmd_solve_decentralized(cfg: RunConfig, args) -> int:
    sol = coo.solve_coordinated(cfg.params, cfg.cap_k, cfg.cap_m, cfg.recursion, cfg.tol)
    out = Output(cfg.out)
    if cfg.out:
        coo.write_policy_csv(sol, out.path("coordinated_policy.csv"))
    spec = reference_spec(cfg)
    report: dict[str, Any] = {
        "params": cfg.params.as_dict(), "mode": sol.mode.value,
        "caps": {"K": cfg.cap_k, "M": cfg.cap_m},
        "iterations": sol.result.iterations, "initial_value": sol.initial_value(),
    }
    if spec is not None:
        match = coo.match_solution(sol, spec, args.region)
        report.update(coo.pattern_report(sol, match))
        say(f"pattern {spec.name} ({sol.mode.value}): "
            + ("matches" if match.matched else f"{len(match.mismatches)} of {match.checked} states differ"))
    else:
        say("parameters differ from the reference set; no pattern comparison")
    out.json("pattern_report.json", report)
    say(f"value at synchronised start: {sol.initial_value():.10f}")
    return 0


def _fixed_strategy(cfg: RunConfig, args, space: coo.CoordSpace, partner: int) -> pbp.DeviceStrategy:
    if args.fixed:
        return pbp.read_strategy_csv(args.fixed, space, args.fixed_column)
    if args.fixed_kind == "never":
        return pbp.DeviceStrategy.never(space)
    if args.fixed_kind == "always":
        return pbp.DeviceStrategy.always(space)
    sol = coo.solve_coordinated(cfg.params, cfg.cap_k, cfg.cap_m, cfg.recursion, cfg.tol)
    return pbp.DeviceStrategy.from_solution(sol, partner)


def _own_thresholds(strategy: pbp.DeviceStrategy, responder: int) -> dict[str, str]:
    """Smallest staleness at which a device known to be full is told to send."""
    space = strategy.space
    out = {}
    for s in (0, 1):
        idx = [(INF, 1, s, m) if responder == 1 else (1, INF, s, m) for m in range(1, space.M + 1)]
        hits = [m for m, st in zip(range(1, space.M + 1), idx) if strategy.at(*st)]
        out[f"k{s}"] = cen.format_threshold(hits[0] if hits else None, space.M)
    return out


def cmd_best_response(cfg: RunConfig, args) -> int:
    params, mode = cfg.params, cfg.recursion
    coord = coo.build_coordinated_mdp(params, cfg.cap_k, cfg.cap_m, mode)
    space = coord.labels
    partner = 3 - args.responder
    fixed = _fixed_strategy(cfg, args, space, partner)
    br = pbp.best_response(params, fixed, args.responder, mode=mode, tol=cfg.tol, coord=coord)
    report = {
        "params": params.as_dict(), "mode": mode.value, "responder": args.responder,
        "fixed": args.fixed or args.fixed_kind, "iterations": br.result.iterations,
        "initial_value": coo.initial_value(params, space, br.values),
        "thresholds_when_full": _own_thresholds(br.strategy, args.responder),
    }
    out = Output(cfg.out)
    if cfg.out:
        pbp.write_strategy_csv(br.strategy, out.path(f"best_response_{args.responder}.csv"))
    out.json("best_response.json", report)
    say(f"best response of device {args.responder}: value {report['initial_value']:.10f}, "
        f"thresholds when full {report['thresholds_when_full']}")
    return 0


def cmd_pbp(cfg: RunConfig, args) -> int:
    params, mode = cfg.params, cfg.recursion
    space = coo.CoordSpace(cfg.cap_k, cfg.cap_m)
    if args.init == "never":
        init = (pbp.DeviceStrategy.never(space), pbp.DeviceStrategy.never(space))
    else:
        sol = coo.solve_coordinated(params, cfg.cap_k, cfg.cap_m, mode, cfg.tol)
        init = (pbp.DeviceStrategy.from_solution(sol, 1), pbp.DeviceStrategy.from_solution(sol, 2))
    order = (1, 2) if args.first == 1 else (2, 1)
    res = pbp.pbp_iteration(params, init, cfg.cap_k, cfg.cap_m, mode, args.max_rounds, cfg.tol, order)
    report = res.report(params, mode)
    report["init"] = args.init
    out = Output(cfg.out)
    if cfg.out:
        for i, st in enumerate(res.strategies, 1):
            pbp.write_strategy_csv(st, out.path(f"pbp_device{i}.csv"))
    out.json("pbp_report.json", report)
    status = "converged" if res.converged else ("cycled" if res.cycle else "stopped")
    say(f"pbp {status} after {res.rounds} round(s); final value {report['initial_values'][-1]:.10f}")
    return 0


def cmd_simulate(cfg: RunConfig, args) -> int:
    params = cfg.params
    horizon = args.horizon or default_horizon(params.beta)
    if args.solver == "never":
        ctl = [NeverTransmit(), NeverTransmit()]
        rep = evaluate_mc(params, ctl, cfg.episodes, horizon, cfg.seed)
        rep.solver = "never"
    else:
        rep = compare_dp_mc(params, args.solver, cfg.episodes, cfg.seed, cfg.cap_k, cfg.cap_m,
                            cfg.recursion, horizon, cfg.tol)
    Output(cfg.out).json("simulation.json", rep.as_dict())
    msg = f"{rep.solver}: mean {rep.mean:.6f} +- {rep.stderr:.6f} ({rep.episodes} episodes, horizon {rep.horizon})"
    if rep.dp_value is not None:
        msg += f"; DP {rep.dp_value:.6f}, " + ("consistent" if rep.consistent() else "INCONSISTENT")
    say(msg)
    return 0


def two_slot_check(params, mode: RecursionMode, K: int, M: int, buffers=(1, 2, 3, INF), stalenesses=(1, 2, 5)):
    """Largest gap between the two-slot DP value and exhaustive plan enumeration."""
    mdp = coo.build_coordinated_mdp(params, K, M, mode)
    v2 = finite_horizon_dp(mdp, 2)[1]
    space = mdp.labels
    gap = 0.0
    for k in buffers:
        for l in buffers:
            for s in (0, 1):
                for m in stalenesses:
                    ref = coo.two_slot_plan_value(params, z_value(params, 1, k), z_value(params, 2, l),
                                                  q_value(params, s, m))
                    gap = max(gap, abs(ref - v2[space.state_index(k, l, s, m)]))
    return gap


def cmd_oracle_check(cfg: RunConfig, args) -> int:
    params = cfg.params
    report: dict[str, Any] = {"params": params.as_dict(), "horizon": args.horizon}
    for mode in RecursionMode:
        report[f"beliefs_{mode.value}"] = belief_oracle_deviation(params, args.horizon, mode)
    report["independence_gap"] = check_conditional_independence(params, args.horizon)
    report["correlated_gap"] = check_conditional_independence(params, args.horizon, arrivals="correlated")
    report["two_slot_gap"] = two_slot_check(params, RecursionMode.BAYES, cfg.cap_k, cfg.cap_m)
    ok = (report["beliefs_bayes"]["max_deviation"] <= 1e-12 and report["independence_gap"] <= 1e-12
          and report["two_slot_gap"] <= 1e-10)
    report["ok"] = ok
    Output(cfg.out).json("oracle_check.json", report)
    for mode in RecursionMode:
        say(f"belief deviation ({mode.value}): {report[f'beliefs_{mode.value}']['max_deviation']:.3e}")
    say(f"independence gap: {report['independence_gap']:.3e} (correlated arrivals: {report['correlated_gap']:.3e})")
    say(f"two-slot plan gap: {report['two_slot_gap']:.3e}")
    return 0 if ok else 1


# ----------------------------------------------------------------------------
# argument parsing

FLAGS = {
    "p1": float, "p2": float, "alpha0": float, "alpha1": float, "c": float, "r": float, "beta": float,
    "cap_k": int, "cap_m": int, "tol": float, "seed": int, "episodes": int, "out": str,
}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run configuration")
    for name, typ in FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    g.add_argument("--mode", choices=[m.value for m in RecursionMode], default=None)
    g.add_argument("--config", help="read settings from a key = value file (flags override it)")
    g.add_argument("--save-config", help="write the resolved settings to this file")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="teamdp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    sub.add_parser("solve-centralized", parents=[common], help="single-device thresholds").set_defaults(
        func=cmd_solve_centralized)
    sub.add_parser("reproduce-table1", parents=[common], help="threshold grid in both modes").set_defaults(
        func=cmd_reproduce_table1)

    p = sub.add_parser("solve-decentralized", parents=[common], help="coordinator DP and pattern check")
    p.add_argument("--region", type=int, default=coo.DEFAULT_REGION)
    p.set_defaults(func=cmd_solve_decentralized)

    p = sub.add_parser("best-response", parents=[common], help="best response to a fixed partner")
    p.add_argument("--responder", type=int, choices=(1, 2), default=1)
    p.add_argument("--fixed", help="partner strategy CSV (k,l,s,m,d or a policy dump)")
    p.add_argument("--fixed-column", default="d", help="column of --fixed holding the partner bit")
    p.add_argument("--fixed-kind", choices=("never", "always", "optimal"), default="never")
    p.set_defaults(func=cmd_best_response)

    p = sub.add_parser("pbp", parents=[common], help="best-response iteration")
    p.add_argument("--init", choices=("never", "optimal"), default="never")
    p.add_argument("--max-rounds", type=int, default=50)
    p.add_argument("--first", type=int, choices=(1, 2), default=1)
    p.set_defaults(func=cmd_pbp)

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo evaluation against the DP value")
    p.add_argument("--solver", choices=("centralized", "coordinated", "pbp", "never"), default="coordinated")
    p.add_argument("--horizon", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("oracle-check", parents=[common], help="belief, independence and plan oracles")
    p.add_argument("--horizon", type=int, default=6)
    p.set_defaults(func=cmd_oracle_check)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k) for k in (*FLAGS, "mode") if getattr(args, k) is not None}
    cfg = cfg.replace(**overrides)
    if args.save_config:
        cfg.save(args.save_config)
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(cfg, args)
    except (ValueError, MdpValidationError, OSError) as exc:
        say(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
