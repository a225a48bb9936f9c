"""Transaction sources.

Two workloads feed the simulator:

* synthetic fund transfers between node accounts, and
* I/O trace records (one line per operation) mapped to transfers so that a
  filesystem trace can be pushed through the ledger.

Trace file format, UTF-8, one record per line, tab separated::

    t<TAB>app<TAB>node<TAB>op<TAB>path<TAB>bytes

`t` is a microsecond offset, `op` one of read/write/create/delete. Blank
lines and lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

from postchain.core import MIN_BATCH, Transaction

INITIAL_BALANCE = 1_000_000
MIN_AMOUNT = 1
MAX_AMOUNT = 100
FULL_SCALE_TXS = 1_036_303
DEFAULT_INTERVAL_US = 1_000

OPS = ("read", "write", "create", "delete")
APPS = ("PlasmaPhysics", "Turbulence", "AstroPhysics", "ParallelBLAST")

# Synthetic stand-ins, not measured profiles: op weights (read, write, create,
# delete) and a typical transfer size per app.
APP_PROFILES = {
    "PlasmaPhysics": ((0.15, 0.70, 0.10, 0.05), 8 << 20),
    "Turbulence": ((0.35, 0.50, 0.10, 0.05), 4 << 20),
    "AstroPhysics": ((0.50, 0.35, 0.10, 0.05), 2 << 20),
    "ParallelBLAST": ((0.85, 0.08, 0.05, 0.02), 1 << 20),
}


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class TraceRecord:
    t: int
    app: str
    node: int
    op: str
    path: str
    bytes: int


def initial_balances(n_nodes: int, amount: int = INITIAL_BALANCE) -> dict[int, int]:
    return {node: amount for node in range(1, n_nodes + 1)}


def gen_transfers(n_nodes: int, n_txs: int, seed: int, interval_us: int = DEFAULT_INTERVAL_US) -> list[Transaction]:
    """Seeded stream of transfers.

    Every `interval_us` each node submits one transaction; the order of nodes
    within an interval is a fresh random permutation. Submissions inside an
    interval are spread evenly so timestamps are strictly increasing.
    """
    if n_nodes < 2:
        raise ValueError("need at least two nodes")
    if n_txs < MIN_BATCH:
        raise ValueError(f"need at least {MIN_BATCH} transactions")
    rng = random.Random(seed)
    balances = initial_balances(n_nodes)
    nodes = list(range(1, n_nodes + 1))
    step = interval_us / n_nodes
    txs = []
    order: list[int] = []
    for i in range(n_txs):
        if not order:
            order = nodes[:]
            rng.shuffle(order)
        sender = order.pop()
        receiver = rng.randrange(1, n_nodes)
        if receiver >= sender:
            receiver += 1
        amount = min(rng.randint(MIN_AMOUNT, MAX_AMOUNT), balances[sender])
        balances[sender] -= amount
        balances[receiver] += amount
        txs.append(Transaction(i + 1, sender, receiver, amount, int(i * step)))
    return txs


def format_trace(records: Iterable[TraceRecord]) -> str:
    return "".join(f"{r.t}\t{r.app}\t{r.node}\t{r.op}\t{r.path}\t{r.bytes}\n" for r in records)


def write_trace(path: Union[str, Path], records: Iterable[TraceRecord]) -> None:
    Path(path).write_text("# t\tapp\tnode\top\tpath\tbytes\n" + format_trace(records), encoding="utf-8")


def parse_trace(lines: Iterable[str]) -> list[TraceRecord]:
    records = []
    last_t: dict[int, int] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise ParseError(lineno, f"expected 6 tab-separated fields, got {len(parts)}")
        t, app, node, op, path, size = parts
        try:
            t_val, node_val, size_val = int(t), int(node), int(size)
        except ValueError:
            raise ParseError(lineno, "t, node and bytes must be integers") from None
        if op not in OPS:
            raise ParseError(lineno, f"unknown op {op!r}")
        if t_val < 0 or size_val < 0 or node_val < 1:
            raise ParseError(lineno, "negative time/size or node id < 1")
        if not app or not path:
            raise ParseError(lineno, "empty app or path")
        if t_val < last_t.get(node_val, 0):
            raise ParseError(lineno, f"time goes backwards for node {node_val}")
        last_t[node_val] = t_val
        records.append(TraceRecord(t_val, app, node_val, op, path, size_val))
    records.sort(key=lambda r: r.t)  # stable: file order kept for equal t
    return records


def load_trace(path: Union[str, Path]) -> list[TraceRecord]:
    with open(path, encoding="utf-8") as fh:
        return parse_trace(fh)


def synth_trace(n_nodes: int, n_records: int, seed: int, interval_us: int = DEFAULT_INTERVAL_US,
                apps: Sequence[str] = APPS) -> list[TraceRecord]:
    """Synthetic multi-application I/O trace.

    Nodes are split evenly across `apps`; each node issues operations in turn
    every `interval_us`, drawn from its application's op mix.
    """
    rng = random.Random(seed)
    records = []
    step = interval_us / n_nodes
    for i in range(n_records):
        node = i % n_nodes + 1
        app = apps[(node - 1) * len(apps) // n_nodes]
        weights, size = APP_PROFILES.get(app, ((0.25, 0.25, 0.25, 0.25), 1 << 20))
        op = rng.choices(OPS, weights)[0]
        path = f"/{app.lower()}/rank{node:04d}/f{rng.randrange(64):02d}.dat"
        nbytes = 0 if op in ("create", "delete") else rng.randint(size // 4, size)
        records.append(TraceRecord(int(i * step), app, node, op, path, nbytes))
    return records


def path_account(path: str, n_nodes: int) -> int:
    return int.from_bytes(hashlib.sha256(path.encode()).digest()[:8], "little") % n_nodes + 1


def trace_to_txs(records: Sequence[TraceRecord], seed: int, n_nodes: int) -> list[Transaction]:
    """One transfer per record: the acting node pays the account owning the
    file path a seeded random amount. The original operation rides along in
    the annotation, which is not hashed."""
    rng = random.Random(seed)
    txs = []
    for i, r in enumerate(records):
        if r.node > n_nodes:
            raise ValueError(f"trace node {r.node} exceeds {n_nodes} nodes")
        txs.append(Transaction(i + 1, r.node, path_account(r.path, n_nodes), rng.randint(MIN_AMOUNT, MAX_AMOUNT),
                               r.t, annotation=f"{r.app}:{r.op}:{r.path}:{r.bytes}"))
    return txs


def iter_balances(txs: Iterable[Transaction], balances: dict[int, int]) -> Iterator[dict[int, int]]:
    """Replay transfers, yielding the balance map after each one."""
    state = dict(balances)
    for tx in txs:
        state[tx.sender] = state.get(tx.sender, 0) - tx.amount
        state[tx.receiver] = state.get(tx.receiver, 0) + tx.amount
        yield state
