"""Command line entry point.

    postchain run --suite scalability --out results/
    postchain run --nodes 8 --txs 240 --mode SciChain --out single/
    postchain trace-gen --nodes 1024 --records 12288 --out trace.tsv
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from postchain.bench import SUITES, ExperimentResult, run_suite, summarize, write_cdfs, write_results
from postchain.simnet import ConfigError, PlanError, SimConfig, Simulation, SystemMode, dump_trace, load_config
from postchain.storage import CorruptLedger, ledger_path_from_env
from postchain.workload import ParseError, gen_transfers, load_trace, synth_trace, trace_to_txs, write_trace

log = logging.getLogger("postchain")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="postchain", description="Blockchain consensus simulator and benchmarks")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment suite, or a single simulation without --suite")
    r.add_argument("--suite", choices=sorted(SUITES))
    r.add_argument("--nodes", type=int, help="node count (a suite's scales collapse to this one)")
    r.add_argument("--difficulty", type=int)
    r.add_argument("--mode", choices=[m.value for m in SystemMode])
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", type=Path, default=Path("."), help="output directory")
    r.add_argument("--config", type=Path, help="INI file with a [simulation] section")
    r.add_argument("--workers", type=int, default=1, help="parallel simulations for suites")
    r.add_argument("--workload", choices=["transfers", "trace"], default="transfers")
    r.add_argument("--trace-path", type=Path)
    r.add_argument("--txs", type=int, default=1200, help="transactions (transfers) or records (synthetic trace)")
    r.add_argument("--ledger-path", help="persist the shared ledger here (SciChain; env POSTCHAIN_LEDGER)")
    r.add_argument("--trace-dump", type=Path, help="write the processed event log here (single runs)")

    g = sub.add_parser("trace-gen", help="write a synthetic four-application I/O trace")
    g.add_argument("--nodes", type=int, default=1024)
    g.add_argument("--records", type=int, default=12288)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)
    return parser


def suite_overrides(args: argparse.Namespace, base: Optional[SimConfig]) -> dict:
    params = SUITES[args.suite]
    over: dict = {"seed": args.seed}
    if base is not None:
        over["config"] = {k: v for k, v in vars(base).items() if k not in ("nodes", "mode", "difficulty", "seed")}
    if args.nodes is not None:
        if "scales" in params:
            over["scales"] = [args.nodes]
        else:
            over["nodes"] = args.nodes
    if args.difficulty is not None:
        if "difficulties" in params:
            over["difficulties"] = [args.difficulty]
        else:
            over["difficulty"] = args.difficulty
    if args.mode is not None:
        if "modes" in params:
            over["modes"] = [args.mode]
        elif "mode" in params:
            over["mode"] = args.mode
        else:
            raise SystemExit(f"error: suite {args.suite} fixes its modes")
    if args.suite == "trace1k":
        if args.trace_path is not None:
            over["trace_path"] = str(args.trace_path)
        if args.workload == "trace" and args.txs != 1200:
            over["records"] = args.txs
    return over


def single_run(args: argparse.Namespace, base: Optional[SimConfig]) -> list[ExperimentResult]:
    cfg = base or SimConfig()
    changes = {"seed": args.seed}
    for key in ("nodes", "difficulty", "mode"):
        if getattr(args, key) is not None:
            changes[key] = getattr(args, key)
    ledger = args.ledger_path or ledger_path_from_env()
    if ledger:
        changes["ledger_path"] = ledger
        changes["fsync"] = True
    cfg = cfg.replace(**changes).validate()
    if args.workload == "trace":
        records = load_trace(args.trace_path) if args.trace_path else synth_trace(cfg.nodes, args.txs, cfg.seed)
        txs = trace_to_txs(records, cfg.seed, cfg.nodes)
    else:
        txs = gen_transfers(cfg.nodes, args.txs, cfg.seed)
    sim = Simulation(cfg, txs, keep_trace=args.trace_dump is not None)
    report = sim.run()
    if args.trace_dump is not None:
        dump_trace(sim, args.trace_dump)
    log.info("%d events, trace digest %s", report.events, report.trace_digest)
    return [ExperimentResult.from_report("single", report)]


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "trace-gen":
            write_trace(args.out, synth_trace(args.nodes, args.records, args.seed))
            print(f"wrote {args.records} records to {args.out}")
            return 0
        base = load_config(args.config) if args.config else None
        args.out.mkdir(parents=True, exist_ok=True)
        if args.suite:
            name = args.suite
            results = run_suite(name, suite_overrides(args, base), workers=args.workers)
        else:
            name = "single"
            results = single_run(args, base)
        write_results(args.out / "results.csv", results)
        if name in ("scalability", "single", "trace1k", "overhead"):
            write_cdfs(args.out, results)
        print(summarize(name, results))
        return 0
    except (ConfigError, PlanError, ParseError, CorruptLedger, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
