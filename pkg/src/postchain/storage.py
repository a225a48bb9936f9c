"""Shared persistent ledger held by the storage node.

On-disk log: a sequence of records, genesis implied (an empty file is a
genesis-only ledger). Each record is

    length(u32) | payload | sha256(length | payload)[:4]

where payload is the block's hash-input layout followed by the full
transaction bodies (40 bytes each) and mined_at (f64). The payload length is
fully determined by tx_count, which lets a reader tell a torn tail (file ends
early) from a damaged interior record.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Union

from postchain.core import (
    HASH_SIZE,
    Block,
    Rejection,
    Transaction,
    apply_transfers,
    genesis_block,
    hash_block,
    meets_difficulty,
    verify_pow,
)

log = logging.getLogger(__name__)

LEDGER_ENV = "POSTCHAIN_LEDGER"

_LEN = struct.Struct("<I")
_HEAD = struct.Struct("<QQ32sI")
_TAIL = struct.Struct("<Qd")  # nonce, mined_at
_TXREC = struct.Struct("<QQQQQ")
_DIGEST_AT = 4 + _HEAD.size
CHECKSUM_SIZE = 4


class StorageUnavailable(Exception):
    pass


class ParentMismatch(Exception):
    pass


class CorruptLedger(Exception):
    pass


class OverdraftRejected(Exception):
    pass


def payload_size(tx_count: int) -> int:
    return _HEAD.size + tx_count * (HASH_SIZE + _TXREC.size) + _TAIL.size


def encode_block(block: Block) -> bytes:
    parts = [_HEAD.pack(block.creator, block.seq, block.parent_hash, len(block.transactions))]
    parts.extend(tx.digest for tx in block.transactions)
    parts.extend(tx.canonical() for tx in block.transactions)
    parts.append(_TAIL.pack(block.nonce, block.mined_at))
    return b"".join(parts)


def decode_block(payload: bytes) -> Block:
    creator, seq, parent, count = _HEAD.unpack_from(payload, 0)
    if len(payload) != payload_size(count):
        raise CorruptLedger("payload length does not match tx_count")
    off = _HEAD.size
    digests = [payload[off + i * HASH_SIZE: off + (i + 1) * HASH_SIZE] for i in range(count)]
    off += count * HASH_SIZE
    txs = []
    for i in range(count):
        fields = _TXREC.unpack_from(payload, off + i * _TXREC.size)
        txs.append(Transaction(*fields, digest=digests[i]))
    off += count * _TXREC.size
    nonce, mined_at = _TAIL.unpack_from(payload, off)
    # hash derives from the stored digests; recovery compares it with the
    # content-derived hash
    return Block(creator, seq, parent, tuple(txs), nonce, hash_block(creator, seq, parent, digests, nonce),
                 mined_at=mined_at)


def encode_record(block: Block) -> bytes:
    payload = encode_block(block)
    head = _LEN.pack(len(payload))
    return head + payload + hashlib.sha256(head + payload).digest()[:CHECKSUM_SIZE]


def scan_records(data: bytes) -> tuple[list[Block], int]:
    """Parse records from `data`.

    Returns the decoded blocks and the byte length of the intact prefix. A
    record cut short by end-of-file is treated as a torn write and excluded;
    any other inconsistency raises CorruptLedger.
    """
    blocks: list[Block] = []
    pos = 0
    end = len(data)
    while pos < end:
        if end - pos < _DIGEST_AT:
            break  # torn inside the fixed header
        (length,) = _LEN.unpack_from(data, pos)
        count = _HEAD.unpack_from(data, pos + 4)[3]
        if length != payload_size(count):
            raise CorruptLedger(f"record at byte {pos}: length {length} inconsistent with tx_count {count}")
        record_end = pos + 4 + length + CHECKSUM_SIZE
        if record_end > end:
            break  # torn tail
        body = data[pos: pos + 4 + length]
        if hashlib.sha256(body).digest()[:CHECKSUM_SIZE] != data[record_end - CHECKSUM_SIZE: record_end]:
            raise CorruptLedger(f"record at byte {pos}: checksum mismatch")
        blocks.append(decode_block(body[4:]))
        pos = record_end
    return blocks, pos


@dataclass
class AccessLog:
    lookups: int = 0
    pulls: int = 0
    pushes: int = 0
    syncs: int = 0


class SharedLedger:
    """Full, append-only chain on the storage node: the ground truth."""

    def __init__(
        self,
        balances: Mapping[int, int],
        path: Optional[Union[str, os.PathLike]] = None,
        difficulty: Optional[int] = None,
        fsync: bool = True,
    ):
        genesis = genesis_block()
        self.chain: list[Block] = [genesis]
        self.index: dict[bytes, int] = {genesis.hash: 0}
        self.initial_balances = dict(balances)
        self.balances: dict[int, int] = dict(balances)
        self.difficulty = difficulty
        self.access = AccessLog()
        self.available = True
        self.path = Path(path) if path is not None else None
        self.fsync = fsync
        if self.path is not None and not self.path.exists():
            self.path.touch()

    @property
    def height(self) -> int:
        return len(self.chain)

    @property
    def tip(self) -> Block:
        return self.chain[-1]

    def _require(self):
        if not self.available:
            raise StorageUnavailable("shared storage unreachable")

    def contains(self, block_hash: bytes) -> bool:
        self._require()
        self.access.lookups += 1
        return block_hash in self.index

    def check(self, block: Block) -> Optional[Rejection]:
        """Full validation against the complete chain (no window limit)."""
        if block.hash in self.index:
            return Rejection.ALREADY_PRESENT
        if not block.digests_ok():
            return Rejection.BAD_DIGEST
        if not block.hash_ok() or (self.difficulty is not None and not verify_pow(block, self.difficulty)):
            return Rejection.BAD_POW
        if block.parent_hash != self.tip.hash:
            return Rejection.STALE_PARENT if block.parent_hash in self.index else Rejection.PARENT_NOT_IN_WINDOW
        if apply_transfers(self.balances, block.transactions) is None:
            return Rejection.BAD_BALANCE
        return None

    def pull_check(self, block: Block) -> Optional[Rejection]:
        """Counted storage-side validation; returns the rejection cause."""
        self._require()
        self.access.pulls += 1
        return self.check(block)

    def pull_validate(self, block: Block) -> bool:
        return self.pull_check(block) is None

    def push(self, block: Block) -> int:
        """Append `block` durably; returns its chain position. Pushing a block
        already present is an acknowledged no-op."""
        self._require()
        if block.hash in self.index:
            return self.index[block.hash]
        if block.parent_hash != self.tip.hash:
            raise ParentMismatch(f"block {block.label} does not extend the storage tip")
        changed = apply_transfers(self.balances, block.transactions)
        if changed is None:
            raise OverdraftRejected(f"block {block.label} overdraws an account against storage state")
        if self.path is not None:
            try:
                with open(self.path, "ab") as fh:
                    fh.write(encode_record(block))
                    fh.flush()
                    if self.fsync:
                        os.fsync(fh.fileno())
            except OSError as exc:
                raise StorageUnavailable(str(exc)) from exc
        self.access.pushes += 1
        self.balances.update(changed)
        self.index[block.hash] = len(self.chain)
        self.chain.append(block)
        return len(self.chain) - 1

    def sync_window(self, capacity: Optional[int]) -> list[Block]:
        """Most recent min(capacity, height) blocks, for node recovery."""
        self._require()
        self.access.syncs += 1
        if capacity is None:
            return list(self.chain)
        return self.chain[-capacity:]

    @classmethod
    def recover_from_file(
        cls,
        path: Union[str, os.PathLike],
        balances: Mapping[int, int],
        difficulty: Optional[int] = None,
        fsync: bool = True,
    ) -> "SharedLedger":
        """Replay the ledger log, truncating a torn final record."""
        path = Path(path)
        data = path.read_bytes() if path.exists() else b""
        blocks, intact = scan_records(data)
        if intact < len(data):
            log.warning("truncating torn tail of %s: %d bytes", path, len(data) - intact)
            with open(path, "r+b") as fh:
                fh.truncate(intact)
        ledger = cls(balances, path=path, difficulty=difficulty, fsync=fsync)
        for n, block in enumerate(blocks, start=1):
            if not block.digests_ok() or not block.hash_ok():
                raise CorruptLedger(f"record {n}: content does not match its hash")
            if difficulty is not None and not meets_difficulty(block.hash, difficulty):
                raise CorruptLedger(f"record {n}: hash misses difficulty {difficulty}")
            if block.parent_hash != ledger.tip.hash:
                raise CorruptLedger(f"record {n}: broken parent link")
            changed = apply_transfers(ledger.balances, block.transactions)
            if changed is None:
                raise CorruptLedger(f"record {n}: negative balance on replay")
            ledger.balances.update(changed)
            ledger.index[block.hash] = len(ledger.chain)
            ledger.chain.append(block)
        return ledger


def ledger_path_from_env(default: Optional[str] = None) -> Optional[str]:
    return os.environ.get(LEDGER_ENV, default)
