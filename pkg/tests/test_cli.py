import csv

from postchain.bench import CSV_HEADER
from postchain.cli import main
from postchain.workload import load_trace


def rows(path):
    return list(csv.reader(path.open()))


def test_single_run(tmp_path, capsys):
    assert main(["run", "--nodes", "4", "--txs", "48", "--out", str(tmp_path)]) == 0
    table = rows(tmp_path / "results.csv")
    assert table[0] == CSV_HEADER and len(table) == 5
    assert (tmp_path / "cdf_SciChain_4.csv").exists()
    assert "4 committed blocks" in capsys.readouterr().out


def test_suite_run_with_config(tmp_path):
    ini = tmp_path / "sim.ini"
    ini.write_text("[simulation]\nwindow_capacity = 8\n")
    out = tmp_path / "out"
    assert main(["run", "--suite", "overhead", "--nodes", "4", "--config", str(ini), "--out", str(out)]) == 0
    table = rows(out / "results.csv")
    assert {r[1] for r in table[1:]} == {"MemoryOnly", "SciChain"}
    assert len(table) == 1 + 2 * 3 * 100


def test_trace_gen_and_replay(tmp_path):
    trace = tmp_path / "trace.tsv"
    assert main(["trace-gen", "--nodes", "8", "--records", "96", "--out", str(trace)]) == 0
    assert len(load_trace(trace)) == 96
    dump = tmp_path / "events.tsv"
    assert main(["run", "--nodes", "8", "--workload", "trace", "--trace-path", str(trace), "--out",
                 str(tmp_path), "--trace-dump", str(dump)]) == 0
    assert len(rows(tmp_path / "results.csv")) == 1 + 8
    assert dump.read_text().startswith("0.000\tTxSubmit")


def test_ledger_path_from_env(tmp_path, monkeypatch):
    ledger = tmp_path / "ledger.bin"
    monkeypatch.setenv("POSTCHAIN_LEDGER", str(ledger))
    assert main(["run", "--nodes", "3", "--txs", "24", "--out", str(tmp_path)]) == 0
    assert ledger.stat().st_size > 0


def test_errors_exit_two(tmp_path, capsys):
    assert main(["run", "--nodes", "1", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.tsv"
    bad.write_text("1\ta\t1\tfly\t/x\t1\n")
    assert main(["run", "--nodes", "2", "--workload", "trace", "--trace-path", str(bad), "--out", str(tmp_path)]) == 2
    assert "line 1" in capsys.readouterr().err
