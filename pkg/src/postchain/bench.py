"""Experiment suites over the simulator, with CSV and CDF output.

Each suite expands into independent simulations (one per mode, scale,
difficulty and seed), runs them, and returns one ExperimentResult per
simulation. Results are ordered by task, never by completion, so the CSV
output is byte-identical for identical parameters.
"""

from __future__ import annotations

import csv
import math
import random
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

from postchain.consensus import validity_ratio
from postchain.simnet import FaultAction, FaultKind, FaultPlan, SimConfig, SimReport, SystemMode, run
from postchain.workload import gen_transfers, load_trace, synth_trace, trace_to_txs

__all__ = [
    "SUITES",
    "EmptySamples",
    "ExperimentResult",
    "SystemMode",
    "compute_cdf",
    "run_suite",
    "summarize",
    "validity_ratio",
    "write_cdfs",
    "write_results",
]

SCALES = [20, 40, 60, 80, 100]
MODES = [m.value for m in (SystemMode.MEMORY_ONLY, SystemMode.SCICHAIN, SystemMode.CONVENTIONAL)]
CSV_HEADER = ["suite", "mode", "nodes", "difficulty", "seed", "block", "commit_latency_us", "storage_pulls",
              "storage_pushes", "valid_ratio"]

SUITES: dict[str, dict[str, Any]] = {
    "trustworthiness": dict(runs=15, nodes=100, max_tampered=49, duration_s=600, mode="SciChain",
                            difficulty=1, seed=0, config={}),
    "overhead": dict(scales=SCALES, seeds=3, blocks=100, difficulty=1, seed=0, config={}),
    "sensitivity": dict(scales=SCALES, difficulties=[1, 2, 3, 4, 5, 6], blocks=48, top_blocks=4,
                        cap_difficulty=6, cap_factor=2, mode="SciChain", seeds=1, seed=0, config={}),
    "scalability": dict(scales=SCALES, seeds=3, blocks=100, modes=MODES, difficulty=1, seed=0, config={}),
    "trace1k": dict(nodes=1024, records=12288, trace_path=None, mode="SciChain", difficulty=1, seed=0,
                    config={}),
}


class EmptySamples(ValueError):
    pass


@dataclass
class ExperimentResult:
    suite: str
    mode: str
    nodes: int
    difficulty: int
    seed: int
    labels: list[str]
    latencies_us: list[float]
    pulled: list[bool]
    pushed: list[bool]
    mining_us: list[float]
    valid_ratio: float
    storage_pulls: int
    storage_pushes: int
    queued: int = 0
    dropped: int = 0
    tampered: int = 0
    trace_digest: str = ""

    def __post_init__(self):
        if len(self.latencies_us) != len(self.labels):
            raise ValueError("one latency sample per committed block")

    @property
    def committed(self) -> int:
        return len(self.labels)

    @property
    def mean_latency(self) -> float:
        return statistics.fmean(self.latencies_us) if self.latencies_us else math.nan

    @property
    def mean_mining(self) -> float:
        return statistics.fmean(self.mining_us) if self.mining_us else math.nan

    @classmethod
    def from_report(cls, suite: str, report: SimReport) -> "ExperimentResult":
        return cls(
            suite=suite, mode=report.mode, nodes=report.nodes, difficulty=report.difficulty, seed=report.seed,
            labels=[b.label for b in report.blocks], latencies_us=[b.latency_us for b in report.blocks],
            pulled=[b.storage_pulled for b in report.blocks], pushed=[b.storage_pushed for b in report.blocks],
            mining_us=[b.mining_us for b in report.blocks], valid_ratio=report.validity_ratio,
            storage_pulls=report.storage_pulls, storage_pushes=report.storage_pushes, queued=report.queued,
            dropped=report.dropped, tampered=len(report.tampered),
            trace_digest=report.trace_digest)


def compute_cdf(samples: Sequence[float], n_points: int = 100) -> list[tuple[float, float]]:
    """Empirical CDF at `n_points` evenly spaced cumulative fractions.

    Point i pairs fraction i/n with the smallest sample whose empirical CDF
    reaches it.
    """
    if not samples:
        raise EmptySamples("no samples")
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    ordered = sorted(samples)
    m = len(ordered)
    out = []
    for i in range(1, n_points + 1):
        frac = i / n_points
        idx = min(m - 1, max(0, math.ceil(frac * m - 1e-9) - 1))
        out.append((ordered[idx], frac))
    return out


def percentile(samples: Sequence[float], q: float) -> float:
    if not samples:
        raise EmptySamples("no samples")
    ordered = sorted(samples)
    return ordered[min(len(ordered) - 1, max(0, math.ceil(q * len(ordered)) - 1))]


# task construction

@dataclass
class _Task:
    suite: str
    config: SimConfig
    workload: str
    n_txs: int = 0
    interval_us: int = 1000
    trace_path: Optional[str] = None
    records: int = 0
    plan: Optional[FaultPlan] = field(default=None)


def _params(name: str, overrides: Optional[dict]) -> dict[str, Any]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    params = dict(SUITES[name])
    for key, value in (overrides or {}).items():
        if key not in params:
            raise ValueError(f"suite {name} has no parameter {key!r}")
        params[key] = value
    return params


def _seeds(p: dict) -> list[int]:
    return [p["seed"] + k for k in range(p["seeds"])]


def _config(p: dict, **fields) -> SimConfig:
    return SimConfig(**{**p["config"], **fields})


def _tamper_plan(rng: random.Random, n: int, k: int, span_us: float, window: int) -> FaultPlan:
    nodes = sorted(rng.sample(range(1, n + 1), k))
    return FaultPlan([FaultAction(rng.uniform(0.0, span_us), node, FaultKind.TAMPER, rng.randrange(window))
                      for node in nodes])


def _tasks(name: str, p: dict) -> list[_Task]:
    tasks = []
    if name == "trustworthiness":
        rng = random.Random(f"{p['seed']}:trust")
        n = p["nodes"]
        span = p["duration_s"] * 1e6
        # one transaction per node every 10 simulated seconds
        interval = 10_000_000
        n_txs = n * int(span // interval)
        for r in range(p["runs"]):
            cfg = _config(p, nodes=n, mode=p["mode"], difficulty=p["difficulty"], seed=p["seed"] + r)
            k = rng.randint(0, p["max_tampered"])
            plan = _tamper_plan(rng, n, k, span, cfg.window_capacity)
            tasks.append(_Task(name, cfg, "transfers", n_txs, interval, plan=plan))
    elif name in ("overhead", "scalability"):
        modes = [SystemMode.MEMORY_ONLY.value, SystemMode.SCICHAIN.value] if name == "overhead" else p["modes"]
        for n in p["scales"]:
            for mode in modes:
                for seed in _seeds(p):
                    cfg = _config(p, nodes=n, mode=mode, difficulty=p["difficulty"], seed=seed)
                    tasks.append(_Task(name, cfg, "transfers", p["blocks"] * cfg.batch_size))
    elif name == "sensitivity":
        for d in p["difficulties"]:
            capped = p["cap_difficulty"] is not None and d >= p["cap_difficulty"]
            blocks = p["top_blocks"] if capped else p["blocks"]
            extra = {"mining_cap": p["cap_factor"] * 16 ** d} if capped else {}
            for n in p["scales"]:
                for seed in _seeds(p):
                    cfg = _config(p, nodes=n, mode=p["mode"], difficulty=d, seed=seed, **extra)
                    tasks.append(_Task(name, cfg, "transfers", blocks * cfg.batch_size))
    elif name == "trace1k":
        cfg = _config(p, nodes=p["nodes"], mode=p["mode"], difficulty=p["difficulty"], seed=p["seed"])
        tasks.append(_Task(name, cfg, "trace", trace_path=p["trace_path"], records=p["records"]))
    return tasks


def _execute(task: _Task) -> ExperimentResult:
    cfg = task.config
    if task.workload == "trace":
        if task.trace_path:
            records = load_trace(task.trace_path)
        else:
            records = synth_trace(cfg.nodes, task.records, cfg.seed)
        txs = trace_to_txs(records, cfg.seed, cfg.nodes)
    else:
        txs = gen_transfers(cfg.nodes, task.n_txs, cfg.seed, task.interval_us)
    return ExperimentResult.from_report(task.suite, run(cfg, txs, task.plan))


def run_suite(name: str, overrides: Optional[dict] = None, *, workers: int = 1) -> list[ExperimentResult]:
    """Run every simulation of suite `name`; `overrides` replaces entries of
    ``SUITES[name]`` (its ``config`` entry holds SimConfig fields)."""
    tasks = _tasks(name, _params(name, overrides))
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_execute, tasks))
    return [_execute(t) for t in tasks]


# output

def write_results(path: Union[str, Path], results: Iterable[ExperimentResult]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in results:
            for label, lat, pulled, pushed in zip(r.labels, r.latencies_us, r.pulled, r.pushed):
                w.writerow([r.suite, r.mode, r.nodes, r.difficulty, r.seed, label, f"{lat:.3f}", int(pulled),
                            int(pushed), f"{r.valid_ratio:.4f}"])
    return path


def pooled(results: Iterable[ExperimentResult]) -> dict[tuple[str, int], list[float]]:
    """Latency samples pooled over seeds, keyed by (mode, nodes)."""
    groups: dict[tuple[str, int], list[float]] = {}
    for r in results:
        groups.setdefault((r.mode, r.nodes), []).extend(r.latencies_us)
    return groups


def write_cdfs(out_dir: Union[str, Path], results: Iterable[ExperimentResult], n_points: int = 100) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for (mode, nodes), samples in sorted(pooled(results).items()):
        if not samples:
            continue
        path = out_dir / f"cdf_{mode}_{nodes}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["latency_us", "fraction"])
            for lat, frac in compute_cdf(samples, n_points):
                w.writerow([f"{lat:.3f}", f"{frac:.4f}"])
        paths.append(path)
    return paths


def mean_latency_table(results: Iterable[ExperimentResult]) -> dict[tuple[str, int], float]:
    return {key: statistics.fmean(s) for key, s in pooled(results).items() if s}


def tail_ratio(samples: Sequence[float]) -> float:
    return percentile(samples, 0.99) / percentile(samples, 0.50)


def mining_table(results: Iterable[ExperimentResult]) -> dict[tuple[int, int], float]:
    """Mean mining time in microseconds keyed by (difficulty, nodes)."""
    groups: dict[tuple[int, int], list[float]] = {}
    for r in results:
        groups.setdefault((r.difficulty, r.nodes), []).extend(r.mining_us)
    return {key: statistics.fmean(v) for key, v in groups.items() if v}


def summarize(name: str, results: Sequence[ExperimentResult]) -> str:
    lines = [f"suite {name}: {len(results)} simulations, "
             f"{sum(r.committed for r in results)} committed blocks"]
    if name == "trustworthiness":
        for r in results:
            lines.append(f"  seed {r.seed:3d}  tampered {r.tampered:3d}  validity {r.valid_ratio:.3f}")
        above = sum(r.valid_ratio > 0.5 for r in results)
        lines.append(f"  runs above 50% validity: {above}/{len(results)}")
    elif name in ("overhead", "scalability"):
        table = mean_latency_table(results)
        groups = pooled(results)
        modes = [m for m in MODES if any(k[0] == m for k in table)]
        lines.append("  nodes  " + "  ".join(f"{m:>14s}" for m in modes) + "  (mean us, p99/p50)")
        for n in sorted({k[1] for k in table}):
            cells = [f"{table[(m, n)]:8.1f} {tail_ratio(groups[(m, n)]):5.3f}" if (m, n) in table else " " * 14
                     for m in modes]
            line = f"  {n:5d}  " + "  ".join(cells)
            if (SystemMode.SCICHAIN.value, n) in table and (SystemMode.MEMORY_ONLY.value, n) in table:
                line += f"  SciChain/MemoryOnly {table[('SciChain', n)] / table[('MemoryOnly', n)]:.3f}"
            if (SystemMode.CONVENTIONAL.value, n) in table and (SystemMode.SCICHAIN.value, n) in table:
                line += f"  Conventional/SciChain {table[('Conventional', n)] / table[('SciChain', n)]:.2f}"
            lines.append(line)
    elif name == "sensitivity":
        mining = mining_table(results)
        latency: dict[tuple[int, int], list[float]] = {}
        for r in results:
            latency.setdefault((r.difficulty, r.nodes), []).extend(r.latencies_us)
        lines.append("  difficulty  nodes   mean mining us   mean latency us")
        for d, n in sorted(mining):
            lines.append(f"  {d:10d}  {n:5d}  {mining[(d, n)]:15.1f}  {statistics.fmean(latency[(d, n)]):16.1f}")
    elif name == "trace1k":
        for r in results:
            lats = r.latencies_us
            if lats:
                med = statistics.median(lats)
                lines.append(f"  nodes {r.nodes}  blocks {r.committed}  median {med:.1f} us  "
                             f"spread (max-min)/median {(max(lats) - min(lats)) / med:.4f}")
            lines.append(f"  queued {r.queued}  dropped {r.dropped}  validity {r.valid_ratio:.3f}")
    return "\n".join(lines)
