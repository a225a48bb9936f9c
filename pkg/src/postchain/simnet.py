"""Deterministic discrete-event simulation of a POST cluster.

Time is virtual (microseconds, float). Every event sits in a heap keyed by
(fire_at, seq); handlers only schedule events at or after the current clock,
so a run is a pure function of (config, workload, fault plan).

One block is in consensus at a time. A round goes

    mine -> BlockProposed -> network queue -> QueuePop -> BlockDeliver (peers)
    -> VoteDeliver (proposer) -> StorageRequest/RoundDecide -> StorageReply

Nodes have a serial CPU (validation and vote handling) and, in the
conventional baseline, a serial local disk that every block is written to
before the node votes.
"""

from __future__ import annotations

import configparser
import dataclasses
import enum
import hashlib
import heapq
import json
import math
import random
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, NamedTuple, Optional, Sequence, Union

from postchain.consensus import (
    MAX_RETRIES,
    ComputeNode,
    Decision,
    Phase,
    QuorumSet,
    compute_consensus,
    has_quorum,
    post_consensus,
    recover_node,
    validity_ratio,
)
from postchain.core import (
    Block,
    LocalLedger,
    MiningAborted,
    Transaction,
    check_difficulty,
    genesis_block,
    mine_block,
    pack_block,
)
from postchain.storage import SharedLedger
from postchain.workload import initial_balances


class ConfigError(ValueError):
    pass


class PlanError(ValueError):
    pass


class SystemMode(enum.Enum):
    CONVENTIONAL = "Conventional"
    MEMORY_ONLY = "MemoryOnly"
    SCICHAIN = "SciChain"


class LinkClass(enum.Enum):
    INFINIBAND = "InfiniBand"
    ETHERNET = "Ethernet"
    CUSTOM = "Custom"


LINK_MEANS_US = {LinkClass.INFINIBAND: 2.0, LinkClass.ETHERNET: 250.0}
DEFAULT_JITTER_CV = 0.1


class EventKind(enum.Enum):
    TX_SUBMIT = "TxSubmit"
    BLOCK_PROPOSED = "BlockProposed"
    QUEUE_POP = "QueuePop"
    BLOCK_DELIVER = "BlockDeliver"
    VOTE_DELIVER = "VoteDeliver"
    ROUND_TIMEOUT = "RoundTimeout"
    ROUND_DECIDE = "RoundDecide"
    STORAGE_REQUEST = "StorageRequest"
    STORAGE_REPLY = "StorageReply"
    NODE_FAIL = "NodeFail"
    NODE_RESTART = "NodeRestart"
    NODE_TAMPER = "NodeTamper"


class SimEvent(NamedTuple):
    fire_at: float
    seq: int
    kind: EventKind
    node: int
    detail: str
    payload: Any = None


@dataclass
class SimConfig:
    """Simulation parameters. Latency fields left as None take the default
    of the mode's link class."""

    nodes: int = 4
    difficulty: int = 1
    mode: str = "SciChain"
    seed: int = 0
    link_class: Optional[str] = None
    mean_us: Optional[float] = None
    jitter_var: Optional[float] = None
    window_capacity: int = 64
    batch_size: int = 12
    pop_interval_us: float = 300.0
    storage_override: bool = False
    tamper_fraction: float = 0.0
    storage_latency_us: float = 250.0
    disk_write_us: float = 2500.0
    disk_jitter_cv: float = 0.5
    hash_cost_us: float = 0.5
    msg_cost_us: float = 5.0
    vote_cost_us: float = 10.0
    vote_timeout_us: float = 50_000.0
    mining_cap: Optional[int] = None
    ledger_path: Optional[str] = None
    fsync: bool = False

    @property
    def system_mode(self) -> SystemMode:
        return SystemMode(self.mode)

    @property
    def link(self) -> LinkClass:
        if self.link_class is not None:
            return LinkClass(self.link_class)
        return LinkClass.ETHERNET if self.system_mode is SystemMode.CONVENTIONAL else LinkClass.INFINIBAND

    def validate(self) -> "SimConfig":
        try:
            mode = self.system_mode
            link = self.link
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.nodes < 2:
            raise ConfigError("need at least 2 nodes")
        try:
            check_difficulty(self.difficulty)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.batch_size < 12:
            raise ConfigError("batch_size must be at least 12")
        if self.window_capacity < 1:
            raise ConfigError("window_capacity must be >= 1")
        if link is LinkClass.CUSTOM and self.mean_us is None:
            raise ConfigError("Custom link class needs mean_us")
        mean = self.link_mean_us
        if mean < 0 or (self.jitter_var is not None and self.jitter_var < 0):
            raise ConfigError("latency mean and variance must be non-negative")
        if self.pop_interval_us <= mean:
            raise ConfigError(f"pop_interval_us {self.pop_interval_us} must exceed link latency {mean}")
        if not 0.0 <= self.tamper_fraction <= 0.49:
            raise ConfigError("tamper_fraction must lie in [0, 0.49]")
        for name in ("storage_latency_us", "disk_write_us", "disk_jitter_cv", "hash_cost_us", "msg_cost_us",
                     "vote_cost_us"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.vote_timeout_us <= 0:
            raise ConfigError("vote_timeout_us must be positive")
        if self.mining_cap is not None and self.mining_cap < 1:
            raise ConfigError("mining_cap must be >= 1")
        if mode is not SystemMode.SCICHAIN and self.ledger_path is not None:
            raise ConfigError("ledger_path only applies to SciChain mode")
        return self

    @property
    def link_mean_us(self) -> float:
        return self.mean_us if self.mean_us is not None else LINK_MEANS_US[self.link]

    def latency_model(self, purpose: str = "net") -> "LatencyModel":
        mean = self.link_mean_us
        var = self.jitter_var if self.jitter_var is not None else (DEFAULT_JITTER_CV * mean) ** 2
        return LatencyModel(self.link, mean, var, f"{self.seed}:{purpose}")

    def disk_model(self) -> "LatencyModel":
        return LatencyModel(LinkClass.CUSTOM, self.disk_write_us, (self.disk_jitter_cv * self.disk_write_us) ** 2,
                            f"{self.seed}:disk", distribution="lognormal")

    @property
    def capacity(self) -> Optional[int]:
        # the conventional baseline keeps the whole chain on every node
        return None if self.system_mode is SystemMode.CONVENTIONAL else self.window_capacity

    @classmethod
    def from_mapping(cls, values: dict[str, Any]) -> "SimConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, known[key], raw)
        return cls(**kwargs)

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)


_BOOL = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}


def _coerce(key: str, f: dataclasses.Field, raw: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    if text.lower() in ("", "none") and "Optional" in kind:
        return None
    try:
        if "bool" in kind:
            return _BOOL[text.lower()]
        if "int" in kind:
            return int(text)
        if "float" in kind:
            return float(text)
    except (KeyError, ValueError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


def load_config(path: Union[str, Path], section: str = "simulation") -> SimConfig:
    """Read an INI file; keys of the `section` section map onto SimConfig."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not parser.read(path, encoding="utf-8"):
        raise ConfigError(f"cannot read config {path}")
    if not parser.has_section(section):
        raise ConfigError(f"{path}: missing [{section}] section")
    return SimConfig.from_mapping(dict(parser.items(section))).validate()


class LatencyModel:
    """Delay with a given mean and variance drawn from its own seeded stream.

    "normal" is clipped at zero; "lognormal" is right-skewed and keeps the
    exact mean, which suits device service times.
    """

    def __init__(self, link_class: LinkClass, mean_us: float, jitter_var: float = 0.0, seed: Any = 0,
                 distribution: str = "normal"):
        if distribution not in ("normal", "lognormal"):
            raise ValueError(f"unknown distribution {distribution!r}")
        self.link_class = link_class
        self.mean_us = mean_us
        self.jitter_var = jitter_var
        self.distribution = distribution
        self._sd = math.sqrt(jitter_var)
        self._rng = random.Random(seed)
        if distribution == "lognormal" and mean_us > 0:
            s2 = math.log1p(jitter_var / mean_us ** 2)
            self._mu, self._sigma = math.log(mean_us) - s2 / 2, math.sqrt(s2)

    @classmethod
    def for_class(cls, link_class: Union[str, LinkClass], jitter_var: float = 0.0, seed: Any = 0) -> "LatencyModel":
        link = LinkClass(link_class)
        return cls(link, LINK_MEANS_US[link], jitter_var, seed)

    def sample(self) -> float:
        if self._sd == 0.0:
            return self.mean_us
        if self.distribution == "lognormal":
            return self._rng.lognormvariate(self._mu, self._sigma)
        return max(0.0, self._rng.gauss(self.mean_us, self._sd))


class NetworkQueue:
    """FIFO of outgoing blocks. The head leaves as soon as one full interval
    has passed since the previous dispatch, so a backlog drains at exactly
    one block per `pop_interval_us`."""

    def __init__(self, pop_interval_us: float):
        if pop_interval_us <= 0:
            raise ValueError("pop interval must be positive")
        self.pop_interval_us = pop_interval_us
        self.pending: deque = deque()
        self.last_pop: Optional[float] = None

    def __len__(self) -> int:
        return len(self.pending)

    def push(self, item: Any) -> None:
        self.pending.append(item)

    def next_pop(self, now: float) -> float:
        if self.last_pop is None:
            return now
        return max(now, self.last_pop + self.pop_interval_us)

    def pop(self, now: float) -> Any:
        self.last_pop = now
        return self.pending.popleft()


class FaultKind(enum.Enum):
    FAIL = "Fail"
    RESTART = "Restart"
    TAMPER = "TamperBlock"


@dataclass(frozen=True, order=True)
class FaultAction:
    time: float
    node: int
    action: FaultKind = field(compare=False)
    index: int = field(default=0, compare=False)


@dataclass
class FaultPlan:
    schedule: list[FaultAction] = field(default_factory=list)
    byzantine_fraction: float = 0.0

    def validate(self, n_nodes: Optional[int] = None) -> "FaultPlan":
        if not 0.0 <= self.byzantine_fraction <= 0.49:
            raise PlanError("byzantine_fraction must lie in [0, 0.49]")
        failed: set[int] = set()
        for act in sorted(self.schedule, key=lambda a: a.time):
            if act.time < 0:
                raise PlanError(f"negative time in {act}")
            if n_nodes is not None and not 1 <= act.node <= n_nodes:
                raise PlanError(f"node {act.node} outside 1..{n_nodes}")
            if act.action is FaultKind.FAIL:
                failed.add(act.node)
            elif act.action is FaultKind.RESTART:
                if act.node not in failed:
                    raise PlanError(f"restart of node {act.node} at {act.time} without a prior fail")
                failed.discard(act.node)
        return self

    def ordered(self) -> list[FaultAction]:
        return sorted(self.schedule, key=lambda a: a.time)


def mining_time(hash_evals: int, hash_cost_us: float = 0.5) -> float:
    if hash_evals < 1:
        raise ValueError("hash_evals must be >= 1")
    return hash_evals * hash_cost_us


def tamper(block: Block) -> Block:
    """Copy of `block` with one byte changed but the stored hash kept."""
    if block.transactions:
        tx = block.transactions[0]
        bad = dataclasses.replace(tx, amount=tx.amount ^ 1)
        return dataclasses.replace(block, transactions=(bad,) + block.transactions[1:])
    return dataclasses.replace(block, nonce=block.nonce ^ 1)


@dataclass
class Pending:
    """A batch of transactions on its way into the chain."""

    creator: int
    seq: int
    txs: list[Transaction]
    first_start: float
    attempts: int = 0
    content_failures: int = 0
    prior_evals: int = 0
    block: Optional[Block] = None

    @property
    def label(self) -> str:
        return f"{self.creator}_{self.seq}"


@dataclass
class NodeState:
    node: ComputeNode
    epoch: int = 0
    fail_times: list[float] = field(default_factory=list)
    cpu_busy: float = 0.0
    disk_busy: float = 0.0
    next_seq: int = 1
    waiting: list[Pending] = field(default_factory=list)
    in_flight: list[Pending] = field(default_factory=list)


@dataclass
class Round:
    id: int
    pending: Pending
    proposer: int
    epoch: int
    block: Optional[Block] = None
    evals: int = 0
    aborted: bool = False
    votes: Optional[QuorumSet] = None
    responses: int = 0
    expected: int = 0
    decided: bool = False


@dataclass
class BlockRecord:
    label: str
    creator: int
    seq: int
    height: int
    hash: str
    started_us: float
    committed_us: float
    latency_us: float
    mining_evals: int
    mining_us: float
    attempts: int
    validators: int
    storage_pulled: bool
    storage_pushed: bool


@dataclass
class SimReport:
    mode: str
    nodes: int
    difficulty: int
    seed: int
    blocks: list[BlockRecord]
    committed: int
    committed_txs: int
    queued: int
    dropped: int
    pool_left: int
    mining_aborts: int
    storage_lookups: int
    storage_pulls: int
    storage_pushes: int
    storage_syncs: int
    storage_height: int
    validity_ratio: float
    node_heights: list[int]
    tampered: list[int]
    rewards: dict[int, int]
    events: int
    end_us: float
    trace_digest: str

    @property
    def latencies(self) -> list[float]:
        return [b.latency_us for b in self.blocks]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class Simulation:
    def __init__(
        self,
        config: SimConfig,
        workload: Sequence[Transaction],
        fault_plan: Optional[FaultPlan] = None,
        *,
        keep_trace: bool = False,
    ):
        self.cfg = config.validate()
        self.mode = config.system_mode
        plan = fault_plan if fault_plan is not None else FaultPlan(byzantine_fraction=config.tamper_fraction)
        self.plan = plan.validate(config.nodes)
        self.workload = list(workload)
        self.clock = 0.0
        self._heap: list[SimEvent] = []
        self._seq = 0
        self._events = 0
        self._digest = hashlib.sha256()
        self.trace: Optional[list[str]] = [] if keep_trace else None
        self._rng = random.Random(f"{config.seed}:sim")
        self.net = config.latency_model("net")
        self.disk = config.disk_model()

        n = config.nodes
        balances = initial_balances(n)
        genesis = genesis_block()
        self.capacity = config.capacity
        if self.mode is SystemMode.SCICHAIN and config.ledger_path is not None:
            self.shared = SharedLedger.recover_from_file(config.ledger_path, balances, config.difficulty,
                                                         fsync=config.fsync)
        else:
            self.shared = SharedLedger(balances, difficulty=config.difficulty)
        self.states: dict[int, NodeState] = {}
        for i in range(1, n + 1):
            if self.shared.height > 1:
                ledger = LocalLedger.from_blocks(i, self.shared.sync_window(self.capacity), self.shared.height,
                                                 self.shared.balances, self.capacity, config.difficulty)
            else:
                ledger = LocalLedger(i, genesis, balances, self.capacity, config.difficulty)
            self.states[i] = NodeState(ComputeNode(i, ledger))
        self.node_list = [s.node for s in self.states.values()]
        self.queue = NetworkQueue(config.pop_interval_us)
        self.pool: deque[Transaction] = deque()
        self.round: Optional[Round] = None
        self._round_ids = 0
        self._next_proposer = 1
        self._pop_scheduled = False
        self.retry: deque[Pending] = deque()
        self.records: list[BlockRecord] = []
        self.rewards: dict[int, int] = {}
        self.dropped = 0
        self.mining_aborts = 0
        self.tampered: set[int] = set()
        self.applied: list[FaultAction] = []
        self._pending_faults: deque[FaultAction] = deque()

    # event plumbing

    def schedule(self, fire_at: float, kind: EventKind, node: int = 0, detail: str = "", payload: Any = None) -> None:
        if fire_at < self.clock:
            raise RuntimeError(f"{kind.value} scheduled in the past ({fire_at} < {self.clock})")
        self._seq += 1
        heapq.heappush(self._heap, SimEvent(fire_at, self._seq, kind, node, detail, payload))

    def _log(self, ev: SimEvent) -> None:
        line = f"{ev.fire_at:.3f}\t{ev.kind.value}\t{ev.node}\t{ev.detail}\n"
        self._digest.update(line.encode())
        if self.trace is not None:
            self.trace.append(line)

    def run(self) -> SimReport:
        for tx in self.workload:
            self.schedule(float(tx.timestamp), EventKind.TX_SUBMIT, tx.sender, str(tx.tx_id), tx)
        for act in self._expand_plan():
            kind = {FaultKind.FAIL: EventKind.NODE_FAIL, FaultKind.RESTART: EventKind.NODE_RESTART,
                    FaultKind.TAMPER: EventKind.NODE_TAMPER}[act.action]
            self.schedule(float(act.time), kind, act.node, str(act.index) if act.action is FaultKind.TAMPER else "",
                          act)
        handlers = {
            EventKind.TX_SUBMIT: self._on_tx_submit,
            EventKind.BLOCK_PROPOSED: self._on_block_proposed,
            EventKind.QUEUE_POP: self._on_queue_pop,
            EventKind.BLOCK_DELIVER: self._on_block_deliver,
            EventKind.VOTE_DELIVER: self._on_vote,
            EventKind.ROUND_TIMEOUT: self._on_timeout,
            EventKind.ROUND_DECIDE: self._on_decide,
            EventKind.STORAGE_REQUEST: self._on_decide,
            EventKind.STORAGE_REPLY: self._on_storage_reply,
            EventKind.NODE_FAIL: self._on_fault,
            EventKind.NODE_RESTART: self._on_fault,
            EventKind.NODE_TAMPER: self._on_fault,
        }
        heap = self._heap
        while heap:
            ev = heapq.heappop(heap)
            self.clock = ev.fire_at
            self._events += 1
            self._log(ev)
            handlers[ev.kind](ev)
        return self.report()

    def _expand_plan(self) -> list[FaultAction]:
        actions = list(self.plan.ordered())
        k = int(self.plan.byzantine_fraction * self.cfg.nodes)
        if k:
            span = max((float(tx.timestamp) for tx in self.workload), default=0.0)
            for node in sorted(self._rng.sample(range(1, self.cfg.nodes + 1), k)):
                actions.append(FaultAction(self._rng.uniform(0.0, span), node, FaultKind.TAMPER,
                                           self._rng.randrange(max(1, self.cfg.window_capacity))))
        return sorted(actions, key=lambda a: a.time)

    # faults

    def inject(self, actions: Iterable[FaultAction]) -> list[FaultAction]:
        """Apply fault actions at the current clock; returns those that took
        effect (tampering a failed node does nothing)."""
        done = []
        for act in actions:
            st = self.states[act.node]
            node = st.node
            if act.action is FaultKind.FAIL:
                if node.phase is Phase.FAILED:
                    continue
                node.phase = Phase.FAILED
                node.ledger = None
                st.epoch += 1
                st.fail_times.append(self.clock)
            elif act.action is FaultKind.RESTART:
                if node.phase is not Phase.FAILED:
                    raise PlanError(f"restart of node {act.node} at {self.clock} without a prior fail")
                node.phase = Phase.RESTARTING
                self._recover(st)
            else:
                if not node.up or node.ledger is None or not node.ledger.window:
                    continue
                window = node.ledger.window
                i = act.index % len(window)
                window[i] = tamper(window[i])
                node.byzantine = True
                self.tampered.add(act.node)
            done.append(act)
        self.applied.extend(done)
        return done

    def _on_fault(self, ev: SimEvent) -> None:
        self.inject([ev.payload])
        if ev.payload.action is FaultKind.RESTART:
            self._try_propose()

    def _recover(self, st: NodeState) -> None:
        """Restart from storage and settle every batch the node had in flight:
        commit if its block reached storage, otherwise abort and resubmit.
        A batch still being mined has no block yet and always aborts."""
        node = st.node
        first = next((p.block for p in st.in_flight if p.block is not None), None)
        status = recover_node(node, self.shared, first, capacity=self.capacity, difficulty=self.cfg.difficulty)
        if status.phase is not Phase.UP:
            return
        st.cpu_busy = st.disk_busy = self.clock
        for pending in st.in_flight:
            if pending.block is first:
                decision = status.decision
            else:
                decision = Decision.COMMIT if pending.block.hash in self.shared.index else Decision.ABORT
            if decision is not Decision.COMMIT:
                st.waiting.append(pending)
        st.in_flight.clear()
        self._trigger_retries()

    def _settle(self, rnd: Round) -> bool:
        """Take the round's batch off its proposer's in-flight list. False
        means a restart already settled it."""
        in_flight = self.states[rnd.proposer].in_flight
        if rnd.pending in in_flight:
            in_flight.remove(rnd.pending)
            return True
        return False

    # proposing and mining

    def _trigger_retries(self) -> None:
        queued = {id(p) for p in self.retry}
        for i in sorted(self.states):
            for pending in self.states[i].waiting:
                if id(pending) not in queued:
                    self.retry.append(pending)

    def _pick_proposer(self) -> Optional[int]:
        n = self.cfg.nodes
        for k in range(n):
            i = (self._next_proposer - 1 + k) % n + 1
            node = self.states[i].node
            if node.up and not node.byzantine:
                self._next_proposer = i % n + 1
                return i
        return None

    def _next_work(self) -> Optional[Pending]:
        for _ in range(len(self.retry)):
            pending = self.retry.popleft()
            node = self.states[pending.creator].node
            if node.up and not node.byzantine:
                return pending
            waiting = self.states[pending.creator].waiting
            if pending not in waiting:
                waiting.append(pending)  # picked up again at the next trigger
        if len(self.pool) < self.cfg.batch_size:
            return None
        creator = self._pick_proposer()
        if creator is None:
            return None
        st = self.states[creator]
        pending = Pending(creator, st.next_seq, pack_block(self.pool, self.cfg.batch_size), self.clock)
        st.next_seq += 1
        return pending

    def _try_propose(self) -> None:
        if self.round is not None:
            return
        pending = self._next_work()
        if pending is None:
            return
        st = self.states[pending.creator]
        if pending in st.waiting:
            st.waiting.remove(pending)
        pending.block = None
        st.in_flight.append(pending)
        self._round_ids += 1
        rnd = Round(self._round_ids, pending, pending.creator, st.epoch)
        self.round = rnd
        pending.attempts += 1
        ledger = st.node.ledger
        start = max(self.clock, st.cpu_busy)
        try:
            block = mine_block(ledger.tip_hash, pending.txs, pending.creator, pending.seq, self.cfg.difficulty,
                               max_evals=self.cfg.mining_cap, mined_at=start,
                               min_transactions=self.cfg.batch_size)
            rnd.block, rnd.evals = block, block.evals
        except MiningAborted as exc:
            rnd.aborted, rnd.evals = True, exc.evals
        done = start + mining_time(max(rnd.evals, 1), self.cfg.hash_cost_us)
        st.cpu_busy = done
        self.schedule(done, EventKind.BLOCK_PROPOSED, pending.creator, pending.label, rnd)

    def _release(self) -> None:
        self.round = None
        self._try_propose()

    def _requeue_txs(self, pending: Pending, evals: int) -> None:
        """Hand an abandoned batch to the next proposer, keeping its start time
        and the hashing already spent on it."""
        self.mining_aborts += 1
        nxt = self._pick_proposer()
        if nxt is None:
            self.pool.extendleft(reversed(pending.txs))
            return
        st = self.states[nxt]
        again = Pending(nxt, st.next_seq, pending.txs, pending.first_start,
                        prior_evals=pending.prior_evals + evals)
        st.next_seq += 1
        self.retry.appendleft(again)

    def _on_tx_submit(self, ev: SimEvent) -> None:
        self.pool.append(ev.payload)
        self._try_propose()

    def _on_block_proposed(self, ev: SimEvent) -> None:
        rnd: Round = ev.payload
        st = self.states[rnd.proposer]
        if rnd.aborted or st.epoch != rnd.epoch:
            self.round = None
            if self._settle(rnd):
                self._requeue_txs(rnd.pending, rnd.evals)
            self._try_propose()
            return
        rnd.pending.block = rnd.block
        rnd.votes = QuorumSet(self.cfg.nodes)
        if st.node.ledger.check(rnd.block) is None:
            rnd.votes.add(rnd.proposer)
        self.queue.push(rnd)
        if not self._pop_scheduled:
            self._pop_scheduled = True
            self.schedule(self.queue.next_pop(self.clock), EventKind.QUEUE_POP)

    def broadcast_block(self, sender: int, block: Block) -> None:
        """Queue a block for delivery to every peer of `sender`."""
        rnd = Round(0, Pending(sender, block.seq, list(block.transactions), self.clock), sender,
                    self.states[sender].epoch, block=block, votes=QuorumSet(self.cfg.nodes))
        self.queue.push(rnd)
        if not self._pop_scheduled:
            self._pop_scheduled = True
            self.schedule(self.queue.next_pop(self.clock), EventKind.QUEUE_POP)

    def _on_queue_pop(self, ev: SimEvent) -> None:
        rnd: Round = self.queue.pop(self.clock)
        block = rnd.block
        label = block.label
        for i, st in self.states.items():
            if i == rnd.proposer or not st.node.up:
                continue
            rnd.expected += 1
            self.schedule(self.clock + self.net.sample(), EventKind.BLOCK_DELIVER, i, label, (rnd, st.epoch))
        if self.queue:
            self.schedule(self.queue.next_pop(self.clock), EventKind.QUEUE_POP)
        else:
            self._pop_scheduled = False
        if rnd.id:
            self.schedule(self.clock + self.cfg.vote_timeout_us, EventKind.ROUND_TIMEOUT, rnd.proposer, label, rnd)
            self._maybe_decide(rnd, self.clock)

    def _on_block_deliver(self, ev: SimEvent) -> None:
        rnd, epoch = ev.payload
        st = self.states[ev.node]
        if st.epoch != epoch or not st.node.up:
            return
        cfg = self.cfg
        block = rnd.block
        start = max(self.clock, st.cpu_busy)
        done = start + cfg.msg_cost_us + (len(block.transactions) + 1) * cfg.hash_cost_us
        st.cpu_busy = done
        ok = st.node.ledger.check(block) is None
        if not rnd.id:
            if ok:
                st.node.ledger.append(block, check=False)
            return
        send = done
        if ok and self.mode is SystemMode.CONVENTIONAL:
            send = max(done, st.disk_busy) + self.disk.sample()
            st.disk_busy = send
        self.schedule(send + self.net.sample(), EventKind.VOTE_DELIVER, rnd.proposer,
                      f"{block.label} {ev.node} {int(ok)}", (rnd, ev.node, ok, self.clock, send))

    def _voter_alive(self, voter: int, delivered: float, sent: float) -> bool:
        for t in self.states[voter].fail_times:
            if delivered < t <= sent:
                return False
        return True

    def _on_vote(self, ev: SimEvent) -> None:
        rnd, voter, ok, delivered, sent = ev.payload
        if rnd is not self.round or rnd.decided:
            return
        st = self.states[rnd.proposer]
        if st.epoch != rnd.epoch or not self._voter_alive(voter, delivered, sent):
            return
        done = max(self.clock, st.cpu_busy) + self.cfg.vote_cost_us
        st.cpu_busy = done
        rnd.responses += 1
        if ok:
            rnd.votes.add(voter)
        self._maybe_decide(rnd, done)

    def _maybe_decide(self, rnd: Round, at: float) -> None:
        if rnd.decided:
            return
        if has_quorum(len(rnd.votes), self.cfg.nodes) or rnd.responses >= rnd.expected:
            rnd.decided = True
            kind = EventKind.STORAGE_REQUEST if self.mode is SystemMode.SCICHAIN else EventKind.ROUND_DECIDE
            self.schedule(at, kind, rnd.proposer, rnd.block.label, rnd)

    def _on_timeout(self, ev: SimEvent) -> None:
        rnd: Round = ev.payload
        if rnd is not self.round or rnd.decided:
            return
        rnd.decided = True
        self._on_decide(ev)

    def _orphan(self, rnd: Round) -> None:
        # the proposer crashed before deciding; its batch stays in flight
        # until the node restarts (or already was settled by a restart)
        self._release()

    def _on_decide(self, ev: SimEvent) -> None:
        rnd: Round = ev.payload
        if rnd is not self.round:
            return
        if self.states[rnd.proposer].epoch != rnd.epoch:
            self._orphan(rnd)
            return
        if self.mode is SystemMode.SCICHAIN:
            outcome = post_consensus(rnd.block, self.node_list, self.shared, votes=rnd.votes,
                                     storage_override=self.cfg.storage_override)
            trips = max(outcome.storage_accesses, 0 if outcome.already_persisted else 1)
            self.schedule(self.clock + trips * self.cfg.storage_latency_us, EventKind.STORAGE_REPLY,
                          rnd.proposer, f"{rnd.block.label} {outcome.status.value}", (rnd, outcome))
        else:
            outcome = compute_consensus(rnd.block, self.node_list, self.shared, votes=rnd.votes)
            self._finalize(rnd, outcome)

    def _on_storage_reply(self, ev: SimEvent) -> None:
        rnd, outcome = ev.payload
        self._finalize(rnd, outcome)

    def _finalize(self, rnd: Round, outcome) -> None:
        pending = rnd.pending
        st = self.states[rnd.proposer]
        acked = st.epoch == rnd.epoch
        if outcome.committed:
            if not outcome.already_persisted:
                evals = pending.prior_evals + rnd.evals
                self.records.append(BlockRecord(
                    label=pending.label, creator=pending.creator, seq=pending.seq,
                    height=self.shared.index[rnd.block.hash], hash=rnd.block.hash.hex(),
                    started_us=pending.first_start, committed_us=self.clock,
                    latency_us=self.clock - pending.first_start, mining_evals=evals,
                    mining_us=evals * self.cfg.hash_cost_us, attempts=pending.attempts,
                    validators=len(outcome.validators), storage_pulled=outcome.storage_pulled,
                    storage_pushed=outcome.storage_pushed))
                self.rewards[pending.creator] = self.rewards.get(pending.creator, 0) + 1
            if acked:
                self._settle(rnd)
            self._trigger_retries()
        elif acked:
            self._settle(rnd)
            if outcome.rejection is not None and outcome.rejection.content_fault:
                pending.content_failures += 1
            if pending.content_failures > MAX_RETRIES:
                self.dropped += 1
            else:
                st.waiting.append(pending)
        # an unacknowledged outcome is settled by the proposer's restart
        self._release()

    def report(self) -> SimReport:
        shared = self.shared
        scichain = self.mode is SystemMode.SCICHAIN
        acc = shared.access
        return SimReport(
            mode=self.mode.value, nodes=self.cfg.nodes, difficulty=self.cfg.difficulty, seed=self.cfg.seed,
            blocks=list(self.records), committed=len(self.records),
            committed_txs=sum(len(b.transactions) for b in shared.chain),
            queued=sum(len(s.waiting) + len(s.in_flight) for s in self.states.values()),
            dropped=self.dropped, pool_left=len(self.pool), mining_aborts=self.mining_aborts,
            storage_lookups=acc.lookups if scichain else 0, storage_pulls=acc.pulls if scichain else 0,
            storage_pushes=acc.pushes if scichain else 0, storage_syncs=acc.syncs if scichain else 0,
            storage_height=shared.height, validity_ratio=validity_ratio(self.node_list, shared),
            node_heights=[s.node.ledger.height if s.node.ledger is not None else 0 for s in self.states.values()],
            tampered=sorted(self.tampered), rewards=dict(sorted(self.rewards.items())),
            events=self._events, end_us=self.clock, trace_digest=self._digest.hexdigest())


def run(
    config: SimConfig,
    workload: Sequence[Transaction],
    fault_plan: Optional[FaultPlan] = None,
) -> SimReport:
    return Simulation(config, workload, fault_plan).run()


def dump_trace(sim: Simulation, path: Union[str, Path]) -> None:
    if sim.trace is None:
        raise ValueError("simulation was not created with keep_trace=True")
    Path(path).write_text("".join(sim.trace), encoding="utf-8")
