from collections import deque

import pytest

from postchain.core import LocalLedger, Transaction, genesis_block, mine_block
from postchain.workload import initial_balances

N_ACCOUNTS = 4


def make_txs(count, start=1, n_accounts=N_ACCOUNTS, amount=5):
    return [Transaction(start + i, i % n_accounts + 1, (i + 1) % n_accounts + 1, amount, start + i)
            for i in range(count)]


def build_chain(length, difficulty=1, creator=1, n_accounts=N_ACCOUNTS):
    """Genesis plus `length` mined blocks of 12 transfers each."""
    blocks = [genesis_block()]
    for k in range(length):
        txs = make_txs(12, start=1 + 12 * k, n_accounts=n_accounts)
        blocks.append(mine_block(blocks[-1].hash, txs, creator, k + 1, difficulty))
    return blocks


@pytest.fixture
def balances():
    return initial_balances(N_ACCOUNTS)


@pytest.fixture
def ledger(balances):
    return LocalLedger(1, genesis_block(), balances)


@pytest.fixture
def pending():
    return deque(make_txs(30))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
