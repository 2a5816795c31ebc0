"""Command-line entry point: ``python -m dca <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .engine import (ConfigError, DcaConfig, DcaEngine, run_bench, run_dca, run_oracle,
                     serve_region, write_oracle)
from .jfng import JfngParams
from .screening import rank_and_group

FIXTURES = Path(__file__).resolve().parent / "fixtures"

CASE_HELP = """\
case file (JSON): {"name", "base_mva", "buses": [{"id", "kind": PQ|PV|Slack, "v_mag",
"v_ang_deg", "p_mw", "q_mvar", ...}], "branches": [{"id", "from", "to", "r_pu", "x_pu",
"b_pu", "tap", "p_max_mw", "circuit"}]}
partition file (JSON): {"regions": {bus: region}, "links": [branch ids],
"dominant_slack": bus, "region_slacks": {region: bus}}"""


def _paths(args):
    if args.fixture:
        return (str(FIXTURES / f"{args.fixture}.case.json"),
                str(FIXTURES / f"{args.fixture}.partition.json"))
    if not (args.case and args.partition):
        raise ConfigError("give --case and --partition, or --fixture")
    return args.case, args.partition


def _config(args, **over) -> DcaConfig:
    case, part = _paths(args)
    peers = None
    if getattr(args, "peers", None):
        peers = {int(k): v for k, v in json.loads(Path(args.peers).read_text()).items()}
    params = JfngParams(m=args.m, tol_boundary=args.tol, max_outer=args.max_outer,
                        max_inner=args.max_inner, fd_epsilon=args.fd_eps, forcing=args.forcing)
    kw = dict(case_path=case, partition_path=part, limits_path=args.limits, params=params,
              workers=args.workers, k_stop=args.k_stop, warm_start=args.warm_start,
              transport="tcp" if peers else args.transport, peers=peers,
              latency_mean_ms=args.latency_ms, seed=args.seed, out_dir=args.out,
              mode=args.mode, thevenin=not args.raw_distance,
              handshake_timeout=args.handshake_timeout, slot_timeout=args.slot_timeout)
    kw.update(over)
    return DcaConfig(**kw)


def _common(p: argparse.ArgumentParser, run_flags: bool = True):
    g = p.add_argument_group("inputs")
    g.add_argument("--case", help="case JSON file")
    g.add_argument("--partition", help="partition JSON file")
    g.add_argument("--fixture", help="shipped fixture name (ieee14, ieee30, ieee118, two_area)")
    g.add_argument("--limits", help="optional limits override JSON")
    g.add_argument("--out", help="output directory")
    if not run_flags:
        return
    g = p.add_argument_group("solver")
    g.add_argument("--m", type=int, default=20, help="GMRES restart dimension")
    g.add_argument("--tol", type=float, default=1e-6, help="boundary residual tolerance (p.u.)")
    g.add_argument("--max-outer", type=int, default=50)
    g.add_argument("--max-inner", type=int, default=1000)
    g.add_argument("--fd-eps", type=float, default=1e-7)
    g.add_argument("--forcing", type=float, default=1e-3)
    g = p.add_argument_group("sweep")
    g.add_argument("-D", "--workers", type=int, default=1, help="worker lanes")
    g.add_argument("--k-stop", type=int, default=2)
    g.add_argument("--warm-start", choices=("group", "base", "off"), default="group")
    g.add_argument("--mode", choices=("screen", "exhaustive"), default="screen")
    g.add_argument("--raw-distance", action="store_true", help="rank by |Z_ij| instead of Thevenin")
    g = p.add_argument_group("transport")
    g.add_argument("--transport", choices=("inprocess", "tcp"), default="inprocess")
    g.add_argument("--peers", help="JSON roster {region: host:port} of running servers")
    g.add_argument("--latency-ms", type=float, default=0.0, help="mean injected latency (in-process)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--handshake-timeout", type=float, default=10.0)
    g.add_argument("--slot-timeout", type=float, default=30.0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dca", description="Distributed N-1 contingency analysis",
                                 epilog=CASE_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in [("solve", "distributed base-case power flow"),
                       ("run", "full distributed contingency analysis"),
                       ("oracle", "compare the distributed base case with a centralized solve"),
                       ("bench", "makespan T for several worker counts")]:
        p = sub.add_parser(name, help=text, epilog=CASE_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        _common(p)
        if name == "oracle":
            p.add_argument("--n1", action="store_true", help="also run the centralized N-1 sweep")
        if name == "bench":
            p.add_argument("--d-values", default="1,2,4,8")
            p.add_argument("--reps", type=int, default=3)
    p = sub.add_parser("screen", help="contingency screening tables only", epilog=CASE_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _common(p, run_flags=False)
    p.add_argument("--raw-distance", action="store_true")
    p = sub.add_parser("serve", help="serve one region over TCP", epilog=CASE_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _common(p, run_flags=False)
    p.add_argument("--region", type=int, required=True)
    p.add_argument("--listen", default="127.0.0.1:7000")
    p.add_argument("--once", action="store_true", help="exit after one session")
    return ap


def _cmd_solve(args) -> int:
    engine = DcaEngine(_config(args))
    try:
        base = engine.solve_base_case()
    finally:
        engine.close()
    print(f"status {base.status}  outer {base.outer_iterations}  inner {base.inner_iterations}  "
          f"evaluations {base.residual_evaluations}  |F|inf {base.final_norm:.3e}  start {base.start}")
    if base.solution is not None:
        for (region, bus, qty), val in zip(engine.layout.descriptor(), base.solution):
            print(f"  region {region}  bus {bus:>5}  {qty:<5} {val: .10f}")
    return 0 if base.status == "Converged" else 2


def _cmd_screen(args) -> int:
    case, part = _paths(args)
    from .engine import load_system
    system = load_system(case, part)
    rows = []
    for region in system.regions:
        _, groups = rank_and_group(region, thevenin=not args.raw_distance)
        for g in groups:
            rows.append((g.anchor, region.region_index, g.distance, ";".join(g.to_nodes)))
    print(f"{'from_node':>9} {'region':>6} {'distance':>12}  to_nodes")
    for a, r, d, t in rows:
        print(f"{a:>9} {r:>6} {d:>12.6f}  {t}")
    if args.out:
        import csv
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "screening.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["from_node", "region", "distance", "to_nodes", "violations", "stop"])
            w.writerows([a, r, f"{d:.6g}", t, "", ""] for a, r, d, t in rows)
    return 0


def _cmd_run(args) -> int:
    cfg = _config(args, out_dir=args.out or "dca-out")
    report = run_dca(cfg)
    b = report.body
    if report.aborted:
        print(f"aborted: {b.get('abort_reason')}", file=sys.stderr)
    else:
        print(f"{b['summary']['contingencies']} contingencies {b['summary']['status_counts']}, "
              f"{len(b['violations'])} distinct violations, T = {report.timing['T_s']:.3f} s")
        for row in b["screening"]:
            print(f"  {row['from_node']!s:>6} r{row['region']}  {', '.join(row['violations']) or 'None'}"
                  f"{'  Stop' if row['stop'] else ''}")
    print(f"report written to {cfg.out_dir}")
    return report.exit_code()


def _cmd_oracle(args) -> int:
    res = run_oracle(_config(args), n1=args.n1)
    print(f"{'region':>6} {'max |dV| (pu)':>15} {'max |dtheta| (rad)':>19}")
    for region in sorted({r["region"] for r in res["rows"]}):
        rows = [r for r in res["rows"] if r["region"] == region]
        print(f"{region:>6} {max(r['abs_diff_v_mag'] for r in rows):>15.3e} "
              f"{max(r['abs_diff_v_ang'] for r in rows):>19.3e}")
    print(f"max abs difference {res['max_abs_diff']:.3e}")
    if args.n1:
        print("centralized N-1 violations:", ", ".join(f"{k}:{e}@{r}" for k, e, r in res["n1_violations"])
              or "None")
    if args.out:
        write_oracle(res, args.out)
    return 0


def _cmd_bench(args) -> int:
    d_values = [int(x) for x in args.d_values.split(",")]
    rows = run_bench(_config(args, out_dir=None), d_values, args.reps)
    print(f"{'D':>3} {'T (s)':>10}")
    for r in rows:
        print(f"{r['d']:>3} {r['T']:>10.4f}")
    if args.out:
        import csv
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "bench.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["d", "T"])
            w.writerows([r["d"], f"{r['T']:.6f}"] for r in rows)
    return 0


def _cmd_serve(args) -> int:
    case, part = _paths(args)
    serve_region(case, part, args.region, args.listen, args.limits, once=args.once,
                 on_ready=lambda addr: print(f"region {args.region} serving on {addr}", flush=True))
    return 0


COMMANDS = {"solve": _cmd_solve, "screen": _cmd_screen, "run": _cmd_run,
            "oracle": _cmd_oracle, "bench": _cmd_bench, "serve": _cmd_serve}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DCA_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 2
