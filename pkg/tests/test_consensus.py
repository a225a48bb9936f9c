import dataclasses
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from postchain.consensus import (
    STORAGE_ID,
    ComputeNode,
    Decision,
    Phase,
    QuorumSet,
    Status,
    compute_consensus,
    has_quorum,
    poet_validate,
    post_consensus,
    pss_persist,
    recover_node,
    resolve_fork,
    validity_ratio,
    window_matches,
)
from postchain.core import LocalLedger, genesis_block, mine_block
from postchain.storage import SharedLedger
from postchain.workload import initial_balances
from conftest import build_chain, make_txs

BALANCES = initial_balances(4)


def cluster(n, capacity=64):
    shared = SharedLedger(BALANCES, difficulty=1, fsync=False)
    nodes = [ComputeNode(i, LocalLedger(i, genesis_block(), BALANCES, capacity)) for i in range(1, n + 1)]
    return nodes, shared


def next_block(shared, start=1, creator=1):
    return mine_block(shared.tip.hash, make_txs(12, start=start), creator, shared.height)


@pytest.mark.parametrize("votes,n,ok", [(3, 5, True), (2, 5, False), (2, 4, False), (3, 4, True),
                                        (51, 100, True), (50, 100, False), (2, 2, True), (1, 2, False),
                                        (1, 1, True)])
def test_quorum_threshold(votes, n, ok):
    assert has_quorum(votes, n) is ok


def test_storage_vote_completes_quorum():
    q = QuorumSet(100)
    for i in range(1, 51):
        q.add(i)
    assert not q.reached
    q.add(STORAGE_ID)
    assert q.reached and q.compute_votes == 50
    with pytest.raises(ValueError):
        q.add(101)


def test_post_commits_with_majority():
    nodes, shared = cluster(5)
    for node in nodes[3:]:
        node.phase = Phase.FAILED
    block = next_block(shared)
    out = post_consensus(block, nodes, shared)
    assert out.committed and out.validators.voters == {1, 2, 3}
    assert not out.storage_pulled and out.storage_pushed
    assert shared.tip.hash == block.hash
    assert all(n.ledger.tip_hash == block.hash for n in nodes[:3])


def test_post_pull_path_on_two_of_four():
    nodes, shared = cluster(4)
    for node in nodes[2:]:
        node.phase = Phase.FAILED
    out = post_consensus(next_block(shared), nodes, shared)
    assert out.committed and out.storage_pulled
    assert out.validators.voters == {STORAGE_ID, 1, 2}


def test_post_one_of_four_plus_storage_is_short():
    nodes, shared = cluster(4)
    for node in nodes[1:]:
        node.phase = Phase.FAILED
    out = post_consensus(next_block(shared), nodes, shared)
    assert out.status is Status.QUEUED and out.storage_pulled and out.error == "NoQuorum"
    assert shared.height == 1


def test_post_fifty_plus_storage_commits():
    nodes, shared = cluster(100)
    for node in nodes[50:]:
        node.phase = Phase.FAILED
    block = next_block(shared)
    out = post_consensus(block, nodes, shared)
    assert out.committed and out.storage_pulled
    assert out.validators.compute_votes == 50 and STORAGE_ID in out.validators.voters


def test_post_two_nodes_both_vote():
    nodes, shared = cluster(2)
    out = post_consensus(next_block(shared), nodes, shared)
    assert out.committed and len(out.validators) == 2


def test_post_storage_override():
    nodes, shared = cluster(4)
    for node in nodes[1:]:
        node.phase = Phase.FAILED
    block = next_block(shared)
    assert not post_consensus(block, nodes, shared).committed
    out = post_consensus(block, nodes, shared, storage_override=True)
    assert out.committed and shared.tip.hash == block.hash


def test_post_already_persisted_is_lookup_only():
    nodes, shared = cluster(3)
    block = next_block(shared)
    post_consensus(block, nodes, shared)
    pushes, pulls = shared.access.pushes, shared.access.pulls
    out = post_consensus(block, nodes, shared)
    assert out.committed and out.already_persisted
    assert (shared.access.pushes, shared.access.pulls) == (pushes, pulls)


def test_post_rejects_tampered():
    nodes, shared = cluster(4)
    block = next_block(shared)
    tx = block.transactions[0]
    bad = dataclasses.replace(block, transactions=(dataclasses.replace(tx, amount=tx.amount + 1),)
                              + block.transactions[1:])
    out = post_consensus(bad, nodes, shared)
    assert out.status is Status.QUEUED and out.error == "ValidationFailed"
    assert shared.height == 1


def test_poet_wrong_parent_queued():
    nodes, shared = cluster(4)
    chain = build_chain(2)
    for block in chain[1:]:
        post_consensus(block, nodes, shared)
    for node in nodes[1:]:
        node.phase = Phase.FAILED
    fork = mine_block(chain[1].hash, make_txs(12, start=900), 2, 2)
    out = poet_validate(fork, nodes, shared)
    assert out.status is Status.QUEUED and out.storage_pulled


def test_poet_storage_alone_commits():
    nodes, shared = cluster(4)
    for node in nodes[1:]:
        node.phase = Phase.FAILED
    out = poet_validate(next_block(shared), nodes, shared)
    assert out.committed and out.storage_pulled


def test_pss_push_after_quorum():
    nodes, shared = cluster(3)
    block = next_block(shared)
    out = pss_persist(block, nodes, shared)
    assert out.committed and out.storage_pushed and not out.storage_pulled
    assert pss_persist(block, nodes, shared).already_persisted


def test_compute_consensus_never_touches_storage_votes():
    nodes, record = cluster(4)
    for node in nodes[2:]:
        node.phase = Phase.FAILED
    out = compute_consensus(next_block(record), nodes, record)
    assert out.status is Status.QUEUED and record.access.pulls == 0


def restarting(node):
    node.phase = Phase.RESTARTING
    node.ledger = None
    return node


def test_recover_commit_when_on_storage():
    nodes, shared = cluster(3)
    block = next_block(shared)
    post_consensus(block, nodes, shared)
    state = recover_node(restarting(nodes[0]), shared, block)
    assert state.phase is Phase.UP and state.decision is Decision.COMMIT and state.committed_marker == block.hash
    assert nodes[0].ledger.tip_hash == block.hash


def test_recover_abort_when_missing():
    nodes, shared = cluster(3)
    state = recover_node(restarting(nodes[0]), shared, next_block(shared))
    assert state.decision is Decision.ABORT and nodes[0].ledger.height == 1


def test_recover_without_in_flight():
    nodes, shared = cluster(3)
    state = recover_node(restarting(nodes[0]), shared)
    assert state.phase is Phase.UP and state.decision is None


def test_recover_waits_for_storage():
    nodes, shared = cluster(3)
    shared.available = False
    state = recover_node(restarting(nodes[0]), shared)
    assert state.phase is Phase.RESTARTING and nodes[0].phase is Phase.RESTARTING
    with pytest.raises(ValueError):
        recover_node(nodes[1], shared)


def test_recover_matches_storage_window():
    nodes, shared = cluster(3, capacity=8)
    for k, block in enumerate(build_chain(20)[1:]):
        post_consensus(block, nodes, shared)
    recover_node(restarting(nodes[2]), shared, capacity=8)
    assert window_matches(nodes[2], shared)
    assert [b.hash for b in nodes[2].ledger.window] == [b.hash for b in shared.chain[-8:]]


def test_resolve_fork_prefers_longest_then_storage():
    chain = build_chain(3)
    shared = SharedLedger(BALANCES, fsync=False)
    for block in chain[1:3]:
        shared.push(block)
    short = LocalLedger(1, chain[0], BALANCES)
    short.append(chain[1])
    long_ = LocalLedger(2, chain[0], BALANCES)
    for block in chain[1:4]:
        long_.append(block)
    assert resolve_fork([short, long_], shared) == chain[3].hash
    rival = LocalLedger(3, chain[0], BALANCES)
    rival.append(chain[1])
    rival.append(mine_block(chain[1].hash, make_txs(12, start=800), 3, 2))
    twin = LocalLedger(4, chain[0], BALANCES)
    twin.append(chain[1])
    twin.append(chain[2])
    assert resolve_fork([rival, twin], shared) == chain[2].hash
    with pytest.raises(ValueError):
        resolve_fork([], shared)


def test_validity_ratio_counts_matching_nodes():
    nodes, shared = cluster(4)
    post_consensus(next_block(shared), nodes, shared)
    assert validity_ratio(nodes, shared) == 1.0
    nodes[0].ledger.window[-1] = dataclasses.replace(nodes[0].ledger.window[-1], nonce=7)
    nodes[1].phase = Phase.FAILED
    assert validity_ratio(nodes, shared) == 0.5
    assert validity_ratio([], shared) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9), st.data())
def test_pull_path_equivalence(n, data):
    """A block committed with the storage vote leaves every live honest node
    holding the same chain as one committed by a compute majority."""
    down = data.draw(st.sets(st.integers(1, n), max_size=(n - 1) // 2 + 1))
    nodes_a, shared_a = cluster(n)
    nodes_b, shared_b = cluster(n)
    for node in nodes_b:
        if node.id in down:
            node.phase = Phase.FAILED
    block = next_block(shared_a)
    out_a = post_consensus(block, nodes_a, shared_a)
    out_b = post_consensus(block, nodes_b, shared_b)
    assert out_a.committed
    if out_b.committed:
        assert [b.hash for b in shared_a.chain] == [b.hash for b in shared_b.chain]
        for a, b in zip(nodes_a, nodes_b):
            if b.up:
                assert b.ledger.tip_hash == a.ledger.tip_hash
                assert b.ledger.balances == a.ledger.balances
    assert out_b.committed == has_quorum(n - len(down) + (0 if has_quorum(n - len(down), n) else 1), n)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_committed_blocks_have_quorum_and_single_copy(n, seed):
    rng = random.Random(seed)
    nodes, shared = cluster(n)
    chain = build_chain(4)
    for block in chain[1:]:
        for node in nodes:
            node.phase = Phase.FAILED if rng.random() < 0.3 else Phase.UP
        out = post_consensus(block, nodes, shared)
        if out.committed and not out.already_persisted:
            assert has_quorum(len(out.validators), n)
        assert out.storage_accesses <= 1 and out.storage_pushed + out.storage_pulled <= 2
        hashes = [b.hash for b in shared.chain]
        assert len(hashes) == len(set(hashes))
