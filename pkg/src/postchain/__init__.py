"""Blockchain ledger with storage-assisted consensus, plus a deterministic
cluster simulator and benchmark harness."""

from postchain.core import Block, LocalLedger, Transaction, genesis_block, mine_block, validate_block, verify_pow
from postchain.storage import SharedLedger

__version__ = "0.1.0"

__all__ = [
    "Block",
    "LocalLedger",
    "SharedLedger",
    "Transaction",
    "genesis_block",
    "mine_block",
    "validate_block",
    "verify_pow",
]
