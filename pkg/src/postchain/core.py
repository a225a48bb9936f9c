"""Block and transaction model, hashing, the leading-zeros puzzle and
single-ledger validation.

Byte layouts are little-endian and fixed width:

    transaction: tx_id(u64) | sender(u64) | receiver(u64) | amount(u64) | timestamp(u64)
    block hash input: creator(u64) | seq(u64) | parent_hash(32B) | tx_count(u32)
                      | tx digests (32B each) | nonce(u64)
"""

from __future__ import annotations

import enum
import hashlib
import operator
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

HASH_SIZE = 32
ZERO_HASH = bytes(HASH_SIZE)
MIN_BATCH = 12
DEFAULT_DIFFICULTY = 1
DEFAULT_WINDOW = 64
MAX_DIFFICULTY = 16
U64_MAX = 2**64 - 1

_TX = struct.Struct("<QQQQQ")
_HEAD = struct.Struct("<QQ32sI")
_NONCE = struct.Struct("<Q")
_ABORT_CHECK_EVERY = 4096


class MiningAborted(Exception):
    """Mining stopped before a valid nonce was found."""

    def __init__(self, evals: int, reason: str = "cancelled"):
        super().__init__(f"mining aborted after {evals} hash evaluations ({reason})")
        self.evals = evals
        self.reason = reason


class InvalidAppend(Exception):
    pass


class NotEnoughTransactions(ValueError):
    pass


class Rejection(enum.Enum):
    """Why a ledger refused a block."""

    ALREADY_PRESENT = "AlreadyPresent"
    CORRUPT_WINDOW = "CorruptWindow"
    BAD_DIGEST = "BadDigest"
    BAD_POW = "BadPow"
    PARENT_NOT_IN_WINDOW = "ParentNotInWindow"
    STALE_PARENT = "StaleParent"
    BAD_BALANCE = "BadBalance"

    @property
    def content_fault(self) -> bool:
        """True when the block itself is broken, independent of who checks it."""
        return self in (Rejection.BAD_DIGEST, Rejection.BAD_POW, Rejection.BAD_BALANCE)


def check_difficulty(difficulty: int) -> int:
    if not isinstance(difficulty, int) or not 0 <= difficulty <= MAX_DIFFICULTY:
        raise ValueError(f"difficulty must be an int in [0, {MAX_DIFFICULTY}], got {difficulty!r}")
    return difficulty


def meets_difficulty(digest: bytes, difficulty: int) -> bool:
    """True iff the first `difficulty` hex digits of `digest` are zero."""
    if difficulty == 0:
        return True
    return int.from_bytes(digest[:8], "big") >> (64 - 4 * difficulty) == 0


def tx_bytes(tx_id: int, sender: int, receiver: int, amount: int, timestamp: int) -> bytes:
    return _TX.pack(tx_id, sender, receiver, amount, timestamp)


@dataclass(frozen=True)
class Transaction:
    """A fund-transfer record. `digest` is filled in when left empty.

    `annotation` carries provenance metadata and is excluded from the digest.
    """

    tx_id: int
    sender: int
    receiver: int
    amount: int
    timestamp: int
    digest: bytes = b""
    annotation: str = field(default="", compare=False)

    def __post_init__(self):
        for name in ("tx_id", "sender", "receiver", "amount", "timestamp"):
            value = getattr(self, name)
            if not 0 <= value <= U64_MAX:
                raise ValueError(f"{name}={value} outside u64 range")
        if not self.digest:
            object.__setattr__(self, "digest", self.compute_digest())

    def canonical(self) -> bytes:
        return tx_bytes(self.tx_id, self.sender, self.receiver, self.amount, self.timestamp)

    def compute_digest(self) -> bytes:
        return hashlib.sha256(self.canonical()).digest()

    def verify(self) -> bool:
        return self.digest == self.compute_digest()


def header_prefix(creator: int, seq: int, parent_hash: bytes, tx_digests: Sequence[bytes]) -> bytes:
    if len(parent_hash) != HASH_SIZE:
        raise ValueError("parent_hash must be 32 bytes")
    return _HEAD.pack(creator, seq, parent_hash, len(tx_digests)) + b"".join(tx_digests)


def hash_block(creator: int, seq: int, parent_hash: bytes, tx_digests: Sequence[bytes], nonce: int) -> bytes:
    """SHA-256 over the canonical block layout."""
    return hashlib.sha256(header_prefix(creator, seq, parent_hash, tx_digests) + _NONCE.pack(nonce)).digest()


@dataclass(frozen=True)
class Block:
    creator: int
    seq: int
    parent_hash: bytes
    transactions: tuple
    nonce: int
    hash: bytes
    mined_at: float = field(default=0.0, compare=False)
    evals: int = field(default=0, compare=False)
    # memoized content checks; not copied by dataclasses.replace
    _memo: dict = field(default_factory=dict, init=False, compare=False, repr=False, hash=False)

    @property
    def label(self) -> str:
        return f"{self.creator}_{self.seq}"

    @property
    def is_genesis(self) -> bool:
        return self.seq == 0 and self.parent_hash == ZERO_HASH and not self.transactions

    def tx_digests(self) -> list[bytes]:
        return [tx.digest for tx in self.transactions]

    def compute_hash(self) -> bytes:
        """Hash recomputed from transaction contents, not from stored digests."""
        if "hash" not in self._memo:
            digests = [tx.compute_digest() for tx in self.transactions]
            self._memo["hash"] = hash_block(self.creator, self.seq, self.parent_hash, digests, self.nonce)
        return self._memo["hash"]

    def digests_ok(self) -> bool:
        if "digests" not in self._memo:
            self._memo["digests"] = all(tx.verify() for tx in self.transactions)
        return self._memo["digests"]

    def hash_ok(self) -> bool:
        return self.compute_hash() == self.hash


def genesis_block() -> Block:
    return Block(creator=0, seq=0, parent_hash=ZERO_HASH, transactions=(), nonce=0,
                 hash=hash_block(0, 0, ZERO_HASH, [], 0))


def mine_block(
    parent_hash: bytes,
    transactions: Sequence[Transaction],
    creator: int,
    seq: int,
    difficulty: int = DEFAULT_DIFFICULTY,
    *,
    start_nonce: int = 0,
    max_evals: Optional[int] = None,
    should_abort: Optional[Callable[[], bool]] = None,
    mined_at: float = 0.0,
    min_transactions: int = MIN_BATCH,
) -> Block:
    """Search nonces upward from `start_nonce` until the hash meets `difficulty`.

    The returned block records the number of hash evaluations in `evals`.
    Raises MiningAborted when `max_evals` is exhausted or `should_abort()`
    turns true (polled every few thousand evaluations).
    """
    check_difficulty(difficulty)
    if len(transactions) < min_transactions:
        raise NotEnoughTransactions(f"{len(transactions)} transactions, need at least {min_transactions}")
    txs = tuple(transactions)
    base = hashlib.sha256(header_prefix(creator, seq, parent_hash, [tx.digest for tx in txs]))
    pack = _NONCE.pack
    shift = 64 - 4 * difficulty
    nonce = start_nonce & U64_MAX
    evals = 0
    while True:
        if max_evals is not None and evals >= max_evals:
            raise MiningAborted(evals, "cap")
        if should_abort is not None and evals % _ABORT_CHECK_EVERY == 0 and should_abort():
            raise MiningAborted(evals)
        h = base.copy()
        h.update(pack(nonce))
        digest = h.digest()
        evals += 1
        if difficulty == 0 or int.from_bytes(digest[:8], "big") >> shift == 0:
            return Block(creator, seq, parent_hash, txs, nonce, digest, mined_at=mined_at, evals=evals)
        nonce = (nonce + 1) & U64_MAX


def verify_pow(block: Block, difficulty: int) -> bool:
    key = ("pow", difficulty)
    if key not in block._memo:
        block._memo[key] = meets_difficulty(block.hash, difficulty) and block.hash_ok()
    return block._memo[key]


def pack_block(pending: deque, batch_size: int = MIN_BATCH) -> list[Transaction]:
    """Remove and return the `batch_size` oldest pending transactions."""
    if batch_size < MIN_BATCH:
        raise ValueError(f"batch size must be at least {MIN_BATCH}")
    if len(pending) < batch_size:
        raise NotEnoughTransactions(f"{len(pending)} pending, need {batch_size}")
    return [pending.popleft() for _ in range(batch_size)]


def apply_transfers(balances: Mapping[int, int], transactions: Iterable[Transaction]) -> Optional[dict[int, int]]:
    """Return the changed balances after applying `transactions` in order,
    or None if any balance would go negative along the way."""
    changed: dict[int, int] = {}
    for tx in transactions:
        sent = changed.get(tx.sender, balances.get(tx.sender, 0)) - tx.amount
        if sent < 0:
            return None
        changed[tx.sender] = sent
        changed[tx.receiver] = changed.get(tx.receiver, balances.get(tx.receiver, 0)) + tx.amount
    return changed


class LocalLedger:
    """Volatile chain held by one compute node: only the most recent
    `capacity` blocks are kept (None keeps everything)."""

    def __init__(
        self,
        owner: int,
        genesis: Block,
        balances: Mapping[int, int],
        capacity: Optional[int] = DEFAULT_WINDOW,
        difficulty: int = DEFAULT_DIFFICULTY,
    ):
        if capacity is not None and capacity < 1:
            raise ValueError("window capacity must be >= 1")
        self.owner = owner
        self.capacity = capacity
        self.difficulty = check_difficulty(difficulty)
        self.window: deque[Block] = deque([genesis])
        self._sealed: deque[Block] = deque([genesis])
        self._hashes: set[bytes] = {genesis.hash}
        self.height = 1
        self.balances: dict[int, int] = dict(balances)

    @classmethod
    def from_blocks(
        cls,
        owner: int,
        blocks: Sequence[Block],
        height: int,
        balances: Mapping[int, int],
        capacity: Optional[int] = DEFAULT_WINDOW,
        difficulty: int = DEFAULT_DIFFICULTY,
    ) -> "LocalLedger":
        """Rebuild a window from a trusted block suffix (storage sync)."""
        if not blocks:
            raise ValueError("need at least one block")
        if capacity is not None:
            blocks = list(blocks)[-capacity:]
        ledger = cls(owner, blocks[0], balances, capacity, difficulty)
        ledger.window = deque(blocks)
        ledger._sealed = deque(blocks)
        ledger._hashes = {b.hash for b in blocks}
        ledger.height = height
        return ledger

    @property
    def tip(self) -> Block:
        return self.window[-1]

    @property
    def tip_hash(self) -> bytes:
        return self.window[-1].hash

    def __contains__(self, block_hash: bytes) -> bool:
        return block_hash in self._hashes

    def __len__(self) -> int:
        return len(self.window)

    def copy(self) -> "LocalLedger":
        other = LocalLedger.__new__(LocalLedger)
        other.owner = self.owner
        other.capacity = self.capacity
        other.difficulty = self.difficulty
        other.window = deque(self.window)
        other._sealed = deque(self._sealed)
        other._hashes = set(self._hashes)
        other.height = self.height
        other.balances = dict(self.balances)
        return other

    def verify_window(self) -> bool:
        """Check every retained block still hashes to its stored value and links
        to its predecessor. Blocks untouched since they were appended are
        skipped by identity."""
        if all(map(operator.is_, self.window, self._sealed)) and len(self.window) == len(self._sealed):
            return True
        blocks = list(self.window)
        for i, block in enumerate(blocks):
            if block is self._sealed[i]:
                continue
            if not (block.hash_ok() and block.digests_ok()):
                return False
            if i > 0 and block.parent_hash != blocks[i - 1].hash:
                return False
            if i + 1 < len(blocks) and blocks[i + 1].parent_hash != block.hash:
                return False
        return True

    def check(self, block: Block) -> Optional[Rejection]:
        """Return None if `block` may be appended, else the first failing cause."""
        if block.hash in self._hashes:
            return Rejection.ALREADY_PRESENT
        if not self.verify_window():
            return Rejection.CORRUPT_WINDOW
        if not block.digests_ok():
            return Rejection.BAD_DIGEST
        if not verify_pow(block, self.difficulty):
            return Rejection.BAD_POW
        if block.parent_hash != self.tip_hash:
            if block.parent_hash in self._hashes:
                return Rejection.STALE_PARENT
            return Rejection.PARENT_NOT_IN_WINDOW
        if apply_transfers(self.balances, block.transactions) is None:
            return Rejection.BAD_BALANCE
        return None

    def append(self, block: Block, *, check: bool = True) -> None:
        """Append `block` as the new tip. Pass check=False only when the
        block was validated against this exact ledger state."""
        if check:
            cause = self.check(block)
            if cause is not None:
                raise InvalidAppend(f"block {block.label} rejected: {cause.value}")
        changed = apply_transfers(self.balances, block.transactions)
        if changed is None:
            raise InvalidAppend(f"block {block.label} overdraws an account")
        self.balances.update(changed)
        self.window.append(block)
        self._sealed.append(block)
        self._hashes.add(block.hash)
        self.height += 1
        if self.capacity is not None and len(self.window) > self.capacity:
            old = self.window.popleft()
            self._sealed.popleft()
            self._hashes.discard(old.hash)


def validate_block(ledger: LocalLedger, block: Block) -> bool:
    return ledger.check(block) is None


def append_block(ledger: LocalLedger, block: Block) -> LocalLedger:
    ledger.append(block)
    return ledger


def chain_intact(blocks: Sequence[Block], difficulty: int) -> bool:
    """Recompute every hash and parent link of a contiguous block run.

    The first block's own parent is not checked (it may have been evicted);
    genesis is exempt from the difficulty predicate.
    """
    for i, block in enumerate(blocks):
        if not (block.hash_ok() and block.digests_ok()):
            return False
        if not block.is_genesis and not meets_difficulty(block.hash, difficulty):
            return False
        if i and block.parent_hash != blocks[i - 1].hash:
            return False
    return True
