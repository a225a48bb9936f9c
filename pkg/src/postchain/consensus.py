"""POST consensus: compute-node quorum (push) with storage fallback (pull).

Three entry points mirror the protocol family:

* ``pss_persist``  - nodes validate and append; a majority pushes to storage.
* ``poet_validate`` - like pss, but storage validates when the majority fails.
* ``post_consensus`` - vote first, then commit everywhere; storage adds one
  vote when the compute majority is missing.

All functions mutate the given nodes and shared ledger in place and report
what happened in a ``ConsensusOutcome``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from postchain.core import Block, LocalLedger, Rejection
from postchain.storage import OverdraftRejected, ParentMismatch, SharedLedger, StorageUnavailable

STORAGE_ID = 0
MAX_RETRIES = 3


class Phase(enum.Enum):
    UP = "Up"
    FAILED = "Failed"
    RESTARTING = "Restarting"


class Status(enum.Enum):
    COMMITTED = "Committed"
    QUEUED = "Queued"


class Decision(enum.Enum):
    COMMIT = "commit"
    ABORT = "abort"


def has_quorum(votes: int, n: int) -> bool:
    """Strict majority of the N compute nodes: votes > floor(N/2)."""
    return votes > n // 2


@dataclass
class ComputeNode:
    id: int
    ledger: Optional[LocalLedger]
    phase: Phase = Phase.UP
    byzantine: bool = False

    @property
    def up(self) -> bool:
        return self.phase is Phase.UP

    def holds(self, block: Block) -> bool:
        return self.ledger is not None and block.hash in self.ledger


@dataclass
class QuorumSet:
    n: int
    voters: set[int] = field(default_factory=set)

    def add(self, voter: int) -> None:
        if voter != STORAGE_ID and not 1 <= voter <= self.n:
            raise ValueError(f"voter {voter} outside 1..{self.n}")
        self.voters.add(voter)

    def __len__(self) -> int:
        return len(self.voters)

    @property
    def reached(self) -> bool:
        return has_quorum(len(self.voters), self.n)

    @property
    def compute_votes(self) -> int:
        return len(self.voters - {STORAGE_ID})


@dataclass
class ConsensusOutcome:
    status: Status
    validators: QuorumSet
    storage_pulled: bool = False
    storage_pushed: bool = False
    storage_accesses: int = 0
    already_persisted: bool = False
    error: Optional[str] = None
    rejection: Optional[Rejection] = None

    @property
    def committed(self) -> bool:
        return self.status is Status.COMMITTED


@dataclass
class NodePhase:
    phase: Phase
    committed_marker: Optional[bytes] = None
    decision: Optional[Decision] = None


def sync_node(node: ComputeNode, shared: SharedLedger, capacity: Optional[int], difficulty: int) -> None:
    """Replace the node's window with the storage suffix (fast-sync)."""
    blocks = shared.sync_window(capacity)
    node.ledger = LocalLedger.from_blocks(node.id, blocks, shared.height, shared.balances, capacity, difficulty)


def _shape(nodes: Sequence[ComputeNode]) -> tuple[Optional[int], int]:
    for node in nodes:
        if node.ledger is not None:
            return node.ledger.capacity, node.ledger.difficulty
    return None, 0


def distribute(block: Block, nodes: Iterable[ComputeNode], shared: SharedLedger,
               validated: Iterable[int] = ()) -> None:
    """Bring every live honest node up to a block already on storage.

    Nodes in `validated` checked the block against their current state and
    append it directly; others validate now, and lagging ones resync.
    """
    nodes = list(nodes)
    capacity, difficulty = _shape(nodes)
    validated = set(validated)
    for node in nodes:
        if not node.up or node.byzantine or node.holds(block):
            continue
        if node.id in validated:
            node.ledger.append(block, check=False)
            continue
        cause = node.ledger.check(block) if node.ledger is not None else Rejection.PARENT_NOT_IN_WINDOW
        if cause is None:
            node.ledger.append(block, check=False)
        elif cause is not Rejection.CORRUPT_WINDOW:
            sync_node(node, shared, capacity, difficulty)


def collect_votes(block: Block, nodes: Iterable[ComputeNode], n: int) -> QuorumSet:
    votes = QuorumSet(n)
    for node in nodes:
        if node.up and node.ledger is not None and node.ledger.check(block) is None:
            votes.add(node.id)
    return votes


def pss_persist(block: Block, nodes: Sequence[ComputeNode], shared: SharedLedger) -> ConsensusOutcome:
    """Persist-in-shared-storage (push method)."""
    n = len(nodes)
    votes = QuorumSet(n)
    try:
        if shared.contains(block.hash):
            return ConsensusOutcome(Status.COMMITTED, votes, already_persisted=True)
    except StorageUnavailable:
        return ConsensusOutcome(Status.QUEUED, votes, error="StorageUnavailable")
    for node in nodes:
        if node.up and node.ledger is not None and node.ledger.check(block) is None:
            node.ledger.append(block, check=False)
            votes.add(node.id)
    if not votes.reached:
        return ConsensusOutcome(Status.QUEUED, votes, error="NoQuorum")
    try:
        shared.push(block)
    except (StorageUnavailable, ParentMismatch, OverdraftRejected) as exc:
        return ConsensusOutcome(Status.QUEUED, votes, storage_accesses=1, error=type(exc).__name__)
    return ConsensusOutcome(Status.COMMITTED, votes, storage_pushed=True, storage_accesses=1)


def poet_validate(block: Block, nodes: Sequence[ComputeNode], shared: SharedLedger) -> ConsensusOutcome:
    """Proof-of-extended-traceability: storage validates when the compute
    majority cannot. Storage success alone commits here, as in the original
    protocol; ``post_consensus`` is stricter."""
    n = len(nodes)
    votes = QuorumSet(n)
    for node in nodes:
        if node.up and node.ledger is not None and node.ledger.check(block) is None:
            node.ledger.append(block, check=False)
            votes.add(node.id)
    try:
        if votes.reached:
            shared.push(block)
            return ConsensusOutcome(Status.COMMITTED, votes, storage_pushed=True, storage_accesses=1)
        cause = shared.pull_check(block)
        if cause is not None:
            return ConsensusOutcome(Status.QUEUED, votes, storage_pulled=True, storage_accesses=1,
                                    error="ValidationFailed", rejection=cause)
        shared.push(block)
    except (StorageUnavailable, ParentMismatch, OverdraftRejected) as exc:
        return ConsensusOutcome(Status.QUEUED, votes, error=type(exc).__name__)
    votes.add(STORAGE_ID)
    distribute(block, nodes, shared)
    return ConsensusOutcome(Status.COMMITTED, votes, storage_pulled=True, storage_pushed=True, storage_accesses=1)


def post_consensus(
    block: Block,
    nodes: Sequence[ComputeNode],
    shared: SharedLedger,
    *,
    votes: Optional[QuorumSet] = None,
    storage_override: bool = False,
) -> ConsensusOutcome:
    """Reach agreement on `block` among all compute nodes and storage.

    `votes` may carry a vote set gathered elsewhere (the simulator collects
    them over the network); otherwise every live node is polled here. The
    storage vote counts as one voter; with `storage_override` a storage
    validation commits on its own.
    """
    n = len(nodes)
    try:
        if shared.contains(block.hash):
            return ConsensusOutcome(Status.COMMITTED, votes or QuorumSet(n), already_persisted=True)
    except StorageUnavailable:
        return ConsensusOutcome(Status.QUEUED, votes or QuorumSet(n), error="StorageUnavailable")
    if votes is None:
        votes = collect_votes(block, nodes, n)
    compute_voters = set(votes.voters)
    pulled = False
    try:
        if not votes.reached:
            pulled = True
            cause = shared.pull_check(block)
            if cause is not None:
                return ConsensusOutcome(Status.QUEUED, votes, storage_pulled=True, storage_accesses=1,
                                        error="ValidationFailed", rejection=cause)
            votes.add(STORAGE_ID)
            if not (votes.reached or storage_override):
                return ConsensusOutcome(Status.QUEUED, votes, storage_pulled=True, storage_accesses=1,
                                        error="NoQuorum")
        shared.push(block)
    except (StorageUnavailable, ParentMismatch, OverdraftRejected) as exc:
        return ConsensusOutcome(Status.QUEUED, votes, storage_pulled=pulled, storage_accesses=int(pulled),
                                error=type(exc).__name__)
    distribute(block, nodes, shared, validated=compute_voters)
    return ConsensusOutcome(Status.COMMITTED, votes, storage_pulled=pulled, storage_pushed=True,
                            storage_accesses=1)


def compute_consensus(
    block: Block,
    nodes: Sequence[ComputeNode],
    record: SharedLedger,
    *,
    votes: Optional[QuorumSet] = None,
) -> ConsensusOutcome:
    """Plain majority among compute nodes, no storage participant.

    `record` only tracks the agreed chain so lagging or restarted nodes have
    a peer copy to sync from; it is not a voter.
    """
    n = len(nodes)
    if votes is None:
        votes = collect_votes(block, nodes, n)
    if not votes.reached:
        return ConsensusOutcome(Status.QUEUED, votes, error="NoQuorum")
    try:
        record.push(block)
    except (ParentMismatch, OverdraftRejected) as exc:
        return ConsensusOutcome(Status.QUEUED, votes, error=type(exc).__name__)
    distribute(block, nodes, record, validated=votes.voters)
    return ConsensusOutcome(Status.COMMITTED, votes)


def recover_node(
    node: ComputeNode,
    shared: SharedLedger,
    in_flight_block: Optional[Block] = None,
    *,
    capacity: Optional[int] = 64,
    difficulty: int = 1,
) -> NodePhase:
    """Bring a restarting node back from the persistent ground truth.

    A block the node had in flight is either already on storage (commit: the
    node marks it done) or not (abort: the caller resubmits it). There is no
    third outcome. If storage is unreachable the node stays Restarting.
    """
    if node.phase is not Phase.RESTARTING:
        raise ValueError(f"node {node.id} is {node.phase.value}, not Restarting")
    try:
        sync_node(node, shared, capacity, difficulty)
        decision = None
        marker = None
        if in_flight_block is not None:
            if shared.contains(in_flight_block.hash):
                decision, marker = Decision.COMMIT, in_flight_block.hash
            else:
                decision = Decision.ABORT
    except StorageUnavailable:
        return NodePhase(Phase.RESTARTING)
    node.phase = Phase.UP
    node.byzantine = False
    return NodePhase(Phase.UP, committed_marker=marker, decision=decision)


def resolve_fork(candidates: Sequence[LocalLedger], shared: SharedLedger) -> bytes:
    """Pick the tip of the longest intact chain; ties go to the tip storage
    already holds, then to the smallest hash."""
    valid = [c for c in candidates if c.verify_window()]
    if not valid:
        raise ValueError("no intact candidate chain")
    longest = max(c.height for c in valid)
    tips = sorted({c.tip_hash for c in valid if c.height == longest})
    for tip in tips:
        if tip in shared.index:
            return tip
    return tips[0]


def window_matches(node: ComputeNode, shared: SharedLedger) -> bool:
    """True if the node is up and its retained blocks are intact and equal
    to the newest blocks of the shared ledger."""
    ledger = node.ledger
    if not node.up or ledger is None or ledger.height != shared.height:
        return False
    if not ledger.verify_window():
        return False
    suffix = shared.chain[len(shared.chain) - len(ledger.window):]
    return all(a.hash == b.hash for a, b in zip(ledger.window, suffix))


def validity_ratio(nodes: Sequence[ComputeNode], shared: SharedLedger) -> float:
    if not nodes:
        return 0.0
    return sum(window_matches(node, shared) for node in nodes) / len(nodes)
