import random
import statistics
from collections import defaultdict

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from postchain.simnet import (
    ConfigError,
    EventKind,
    FaultAction,
    FaultKind,
    FaultPlan,
    LatencyModel,
    LinkClass,
    NetworkQueue,
    PlanError,
    SimConfig,
    Simulation,
    dump_trace,
    load_config,
    mining_time,
    run,
    tamper,
)
from postchain.workload import gen_transfers
from conftest import build_chain


def traced(cfg, txs, plan=None):
    sim = Simulation(cfg, txs, plan, keep_trace=True)
    report = sim.run()
    rows = [line.rstrip("\n").split("\t") for line in sim.trace]
    return sim, report, [(float(t), kind, int(node), detail) for t, kind, node, detail in rows]


def test_two_nodes_one_block():
    sim = Simulation(SimConfig(nodes=2), gen_transfers(2, 12, 0))
    report = sim.run()
    assert report.committed == 1 and report.committed_txs == 12
    assert report.storage_height == 2 and report.node_heights == [2, 2]
    tip = sim.shared.tip.hash
    assert all(s.node.ledger.tip_hash == tip for s in sim.states.values())
    assert report.blocks[0].validators == 2


def test_same_seed_same_report():
    cfg = SimConfig(nodes=6, seed=3)
    txs = gen_transfers(6, 240, 3)
    assert run(cfg, txs).to_json() == run(cfg, txs).to_json()
    assert run(cfg, txs).trace_digest != run(cfg.replace(seed=4), txs).trace_digest


def test_three_of_five_down_commits_through_storage():
    plan = FaultPlan([FaultAction(0.0, n, FaultKind.FAIL) for n in (3, 4, 5)])
    report = run(SimConfig(nodes=5), gen_transfers(5, 12, 0), plan)
    assert report.committed == 1
    block = report.blocks[0]
    assert block.storage_pulled and block.validators == 3


def test_two_of_five_up_without_storage_stalls():
    plan = FaultPlan([FaultAction(0.0, n, FaultKind.FAIL) for n in (3, 4, 5)])
    report = run(SimConfig(nodes=5, mode="MemoryOnly"), gen_transfers(5, 12, 0), plan)
    assert report.committed == 0 and report.queued == 1


@pytest.mark.parametrize("link,mean", [("InfiniBand", 2.0), ("Ethernet", 250.0)])
def test_link_means_without_jitter(link, mean):
    model = LatencyModel.for_class(link)
    assert model.link_class is LinkClass(link)
    assert [model.sample() for _ in range(3)] == [mean] * 3


def test_jittered_samples_match_moments():
    model = LatencyModel(LinkClass.ETHERNET, 250.0, 25.0 ** 2, seed=1)
    xs = [model.sample() for _ in range(20000)]
    assert abs(statistics.fmean(xs) - 250.0) < 1.0
    assert abs(statistics.stdev(xs) - 25.0) < 1.0
    disk = SimConfig().disk_model()
    ys = [disk.sample() for _ in range(20000)]
    assert abs(statistics.fmean(ys) / 2500.0 - 1) < 0.03
    assert min(ys) > 0


def test_queue_pops_fifo_at_interval():
    q = NetworkQueue(100.0)
    t0 = 1000.0
    for item in "abc":
        q.push(item)
    out = []
    now = t0
    while q:
        now = q.next_pop(now)
        out.append((now, q.pop(now)))
    assert out == [(t0, "a"), (t0 + 100, "b"), (t0 + 200, "c")]
    q.push("d")
    assert q.next_pop(t0 + 1000) == t0 + 1000
    with pytest.raises(ValueError):
        NetworkQueue(0)


def test_mining_time():
    assert mining_time(4096) == 2048.0
    assert mining_time(1, 2.0) == 2.0
    with pytest.raises(ValueError):
        mining_time(0)


def test_tamper_changes_hash_preimage():
    block = build_chain(1)[1]
    bad = tamper(block)
    assert bad.hash == block.hash and not bad.digests_ok()
    genesis = build_chain(0)[0]
    assert not tamper(genesis).hash_ok()


def test_plan_errors():
    with pytest.raises(PlanError):
        FaultPlan([FaultAction(5.0, 1, FaultKind.RESTART)]).validate(4)
    with pytest.raises(PlanError):
        FaultPlan([FaultAction(5.0, 9, FaultKind.FAIL)]).validate(4)
    with pytest.raises(PlanError):
        FaultPlan(byzantine_fraction=0.5).validate(4)
    FaultPlan([FaultAction(1.0, 1, FaultKind.FAIL), FaultAction(2.0, 1, FaultKind.RESTART)]).validate(4)


@pytest.mark.parametrize("changes", [
    {"nodes": 1}, {"difficulty": -1}, {"difficulty": 17}, {"mode": "Cloud"}, {"batch_size": 11},
    {"link_class": "Custom"}, {"pop_interval_us": 100.0, "mode": "Conventional"}, {"tamper_fraction": 0.5},
    {"mode": "MemoryOnly", "ledger_path": "x.bin"}, {"window_capacity": 0},
])
def test_config_errors(changes):
    with pytest.raises(ConfigError):
        SimConfig(**changes).validate()


def test_mode_link_defaults():
    assert SimConfig(mode="Conventional").link is LinkClass.ETHERNET
    assert SimConfig(mode="SciChain").link is LinkClass.INFINIBAND
    assert SimConfig(mode="Conventional").capacity is None


def test_ini_load(tmp_path):
    path = tmp_path / "sim.ini"
    path.write_text("[simulation]\nnodes = 7   ; compute nodes\nmode = MemoryOnly\nstorage_override = yes\n"
                    "jitter_var = 0\nmining_cap =\n")
    cfg = load_config(path)
    assert (cfg.nodes, cfg.mode, cfg.storage_override, cfg.jitter_var, cfg.mining_cap) == \
        (7, "MemoryOnly", True, 0.0, None)
    path.write_text("[simulation]\nwarp = 9\n")
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text("[other]\nnodes = 3\n")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


@pytest.mark.parametrize("mode", ["SciChain", "MemoryOnly", "Conventional"])
def test_clock_and_causality(mode):
    _, report, events = traced(SimConfig(nodes=5, mode=mode, seed=2), gen_transfers(5, 240, 2))
    times = [e[0] for e in events]
    assert times == sorted(times)
    first = defaultdict(dict)
    for t, kind, node, detail in events:
        if kind in ("BlockProposed", "BlockDeliver", "VoteDeliver", "StorageRequest", "StorageReply"):
            first[detail.split()[0]].setdefault(kind, t)
    for label, seen in first.items():
        order = [seen[k] for k in ("BlockProposed", "BlockDeliver", "VoteDeliver", "StorageRequest", "StorageReply")
                 if k in seen]
        assert order == sorted(order), label
    assert report.committed == 20


def test_mode_storage_use():
    txs = gen_transfers(4, 240, 0)
    sci = run(SimConfig(nodes=4), txs)
    assert sci.storage_pulls == 0 and sci.storage_pushes == sci.committed == 20
    mem = run(SimConfig(nodes=4, mode="MemoryOnly"), txs)
    assert mem.storage_pulls == mem.storage_pushes == 0 and mem.committed == 20


def test_conventional_keeps_whole_chain():
    report = run(SimConfig(nodes=3, mode="Conventional", window_capacity=4), gen_transfers(3, 240, 0))
    assert report.committed == 20 and report.node_heights == [21, 21, 21]


def test_tampered_minority_leaves_majority_valid():
    report = run(SimConfig(nodes=100, tamper_fraction=0.49), gen_transfers(100, 1200, 0))
    assert len(report.tampered) == 49
    assert report.validity_ratio > 0.5
    assert report.committed == 100


def test_fail_mid_mining_is_remined():
    txs = gen_transfers(3, 12, 0)
    cfg = SimConfig(nodes=3, difficulty=3)
    _, clean, events = traced(cfg, txs)
    proposer = clean.blocks[0].creator
    started = clean.blocks[0].started_us
    mid = started + clean.blocks[0].mining_us / 2
    plan = FaultPlan([FaultAction(mid, proposer, FaultKind.FAIL)])
    report = run(cfg, txs, plan)
    assert report.committed == 1 and report.committed_txs == 12
    assert report.blocks[0].creator != proposer and report.mining_aborts >= 1


def test_restart_syncs_from_storage():
    plan = FaultPlan([FaultAction(0.0, 2, FaultKind.FAIL), FaultAction(500_000.0, 2, FaultKind.RESTART)])
    sim = Simulation(SimConfig(nodes=4), gen_transfers(4, 480, 0), plan)
    report = sim.run()
    assert report.committed == 40
    assert report.node_heights[1] == report.storage_height == 41
    assert report.validity_ratio == 1.0


def test_inject_rejects_restart_of_live_node():
    sim = Simulation(SimConfig(nodes=3), gen_transfers(3, 12, 0))
    with pytest.raises(PlanError):
        sim.inject([FaultAction(0.0, 1, FaultKind.RESTART)])


def test_dump_trace(tmp_path):
    sim = Simulation(SimConfig(nodes=2), gen_transfers(2, 24, 0), keep_trace=True)
    report = sim.run()
    path = tmp_path / "trace.tsv"
    dump_trace(sim, path)
    lines = path.read_text().splitlines()
    assert len(lines) == report.events
    assert EventKind(lines[0].split("\t")[1]) is EventKind.TX_SUBMIT


def test_scichain_ledger_file_survives_rerun(tmp_path):
    path = tmp_path / "ledger.bin"
    cfg = SimConfig(nodes=3, ledger_path=str(path))
    first = run(cfg, gen_transfers(3, 24, 0))
    assert first.storage_height == 3
    second = run(cfg, gen_transfers(3, 24, 1))
    assert second.storage_height >= 3


def test_pull_path_leaves_same_persisted_history():
    """Same workload with and without enough failures to force the storage
    vote: the shared ledger ends with the same transactions in the same
    order and the same balances."""
    txs = gen_transfers(4, 240, 5)
    clean = Simulation(SimConfig(nodes=4, seed=5), txs)
    clean.run()
    plan = FaultPlan([FaultAction(0.0, 3, FaultKind.FAIL), FaultAction(0.0, 4, FaultKind.FAIL)])
    degraded = Simulation(SimConfig(nodes=4, seed=5), txs, plan)
    report = degraded.run()
    assert all(b.storage_pulled for b in report.blocks)
    ids = [[t.tx_id for b in sim.shared.chain for t in b.transactions] for sim in (clean, degraded)]
    assert ids[0] == ids[1] == list(range(1, 241))
    assert clean.shared.balances == degraded.shared.balances


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 20), st.integers(0, 10**6))
def test_post_run_agreement_with_tampered_minority(n, seed):
    rng = random.Random(seed)
    k = rng.randint(0, (n - 1) // 2)
    txs = gen_transfers(n, 12 * 6, seed)
    span = float(txs[-1].timestamp)
    plan = FaultPlan([FaultAction(rng.uniform(0, span), node, FaultKind.TAMPER, rng.randrange(64))
                      for node in rng.sample(range(1, n + 1), k)])
    report = run(SimConfig(nodes=n, seed=seed), txs, plan)
    assert report.validity_ratio > 0.5
    assert report.committed == 6


@settings(max_examples=40, deadline=None)
@given(st.integers(6, 7), st.integers(0, 10**6))
def test_liveness_random_schedules_larger_clusters(n, seed):
    """Random fail/restart schedules where every node eventually comes back:
    all work commits and nothing is left queued."""
    rng = random.Random(seed)
    txs = gen_transfers(n, 36, seed, interval_us=10)
    times = sorted(rng.uniform(0, 6000) for _ in range(rng.randint(1, 5)))
    acts = [(t, rng.randint(1, n)) for t in times]
    down, ordered = set(), []
    for t, node in acts:
        if node in down:
            ordered.append(FaultAction(t, node, FaultKind.RESTART))
            down.discard(node)
        else:
            ordered.append(FaultAction(t, node, FaultKind.FAIL))
            down.add(node)
    ordered += [FaultAction(200_000.0, node, FaultKind.RESTART) for node in sorted(down)]
    report = run(SimConfig(nodes=n, seed=seed), txs, FaultPlan(ordered))
    assert report.committed_txs == 36
    assert report.queued == report.dropped == report.pool_left == 0
    assert report.validity_ratio == 1.0
