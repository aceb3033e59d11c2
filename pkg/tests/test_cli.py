import json
import subprocess
import sys

import pandas as pd
import pytest

from flowrecovery.cli import run
from flowrecovery.pcap import TcpFlags
from flowrecovery.synth import Scenario, Session, Sessions, SynFlood, TruncateHead, synth_packets, write_pcap


@pytest.fixture
def trace(tmp_path):
    scen = Scenario(seed=5, elements=[Sessions(count=30, mean_gap=0.5), SynFlood(n=20, spoofed=True, answered=False)])
    packets, truth = synth_packets(scen)
    path = tmp_path / "trace.pcap"
    write_pcap(packets, path)
    return path, packets, truth


def diag(path):
    return json.loads(path.read_text())


def test_extract_writes_csv_and_diagnostics(tmp_path, trace):
    path, _, truth = trace
    out = tmp_path / "flows.csv"
    assert run(["extract", "--in", str(path), "--out", str(out)]) == 0
    df = pd.read_csv(out)
    assert len(df) == len(truth.flows)
    d = diag(tmp_path / "flows.diagnostics.json")
    assert d["packets_total"] == truth.packets and d["flows_exported"] == len(df)
    assert (tmp_path / "flows.diagnostics.txt").exists()


def test_drop_policy_filters_rows_not_counts(tmp_path, trace):
    path, _, _ = trace
    out = tmp_path / "f.csv"
    assert run(["extract", "--in", str(path), "--out", str(out), "--drop", "unterminated"]) == 0
    df = pd.read_csv(out)
    d = diag(tmp_path / "f.diagnostics.json")
    assert "unterminated" not in set(df["disposition"])
    assert d["flows_by_disposition"]["unterminated"] == 20 == d["flows_dropped"]


def test_split_input_matches_single_file(tmp_path, trace):
    path, packets, _ = trace
    half = len(packets) // 2
    write_pcap(packets[:half], tmp_path / "a.pcap")
    write_pcap(packets[half:], tmp_path / "b.pcap")
    assert run(["extract", "--in", str(path), "--out", str(tmp_path / "one.csv")]) == 0
    assert run(["extract", "--in", str(tmp_path / "a.pcap"), "--in", str(tmp_path / "b.pcap"),
                "--out", str(tmp_path / "two.csv")]) == 0
    assert (tmp_path / "one.csv").read_bytes() == (tmp_path / "two.csv").read_bytes()


def test_feature_subset_and_symbols(tmp_path, trace):
    path, _, _ = trace
    (tmp_path / "cols.txt").write_text("flow_id\nduration_us\ndisposition\n")
    assert run(["extract", "--in", str(path), "--out", str(tmp_path / "f.csv"), "--features",
                str(tmp_path / "cols.txt"), "--symbols", str(tmp_path / "sym.txt")]) == 0
    assert list(pd.read_csv(tmp_path / "f.csv").columns) == ["flow_id", "duration_us", "disposition"]
    text = (tmp_path / "sym.txt").read_text()
    assert text.startswith(". ") and all(len(line) <= 100 for line in text.splitlines())


def test_symbols_command(tmp_path):
    packets, _ = synth_packets(Scenario(elements=[Session(requests=[100], responses=[100])]))
    write_pcap(packets, tmp_path / "s.pcap")
    assert run(["symbols", "--in", str(tmp_path / "s.pcap"), "--out", str(tmp_path / "s.txt")]) == 0
    assert (tmp_path / "s.txt").read_text().startswith(". S sa A")


def test_analyze_to_stdout(tmp_path, trace, capsys):
    path, _, _ = trace
    run(["extract", "--in", str(path), "--out", str(tmp_path / "f.csv")])
    capsys.readouterr()
    assert run(["analyze", "--flows", str(tmp_path / "f.csv"), "--window", "5"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert "max_concurrent_flows" in report
    assert (tmp_path / "f.diagnostics.json").exists()


def test_labels_round_trip(tmp_path, trace):
    path, _, _ = trace
    flows = tmp_path / "f.csv"
    run(["extract", "--in", str(path), "--out", str(flows)])
    df = pd.read_csv(flows)
    df["label"] = ["attack" if i % 4 == 0 else "normal" for i in range(len(df))]
    df.to_csv(tmp_path / "legacy.csv", index=False)
    out = tmp_path / "labelled.csv"
    assert run(["labels", "--flows", str(flows), "--legacy", str(tmp_path / "legacy.csv"), "--exact",
                "--out", str(out)]) == 0
    got = pd.read_csv(out).set_index("flow_id")["label"]
    want = df.set_index("flow_id")["label"]
    assert (got.loc[want.index] == want).all()
    assert (tmp_path / "labelled.unmatched.csv").exists()
    assert diag(tmp_path / "labelled.diagnostics.json")["labels"]["relabelled"] == (want == "attack").sum()


def test_labels_with_column_map(tmp_path, trace):
    path, _, _ = trace
    flows = tmp_path / "f.csv"
    run(["extract", "--in", str(path), "--out", str(flows)])
    df = pd.read_csv(flows).head(3)
    legacy = pd.DataFrame({"ts_ms": df["start_ts"] / 1000, "dur": df["duration_us"] / 1e6, "p": df["proto"],
                           "a": df["src_ip"], "b": df["dst_ip"], "pa": df["src_port"], "pb": df["dst_port"],
                           "tag": "bad"})
    legacy.to_csv(tmp_path / "legacy.csv", index=False)
    (tmp_path / "map.cfg").write_text("timestamp = ts_ms\nts_format = epoch_ms\nduration = dur\n"
                                      "duration_unit = s\nproto = p\nsrc_ip = a\ndst_ip = b\n"
                                      "src_port = pa\ndst_port = pb\nlabel = tag\n")
    assert run(["labels", "--flows", str(flows), "--legacy", str(tmp_path / "legacy.csv"),
                "--map", str(tmp_path / "map.cfg"), "--out", str(tmp_path / "l.csv")]) == 0
    assert (pd.read_csv(tmp_path / "l.csv")["label"] == "bad").sum() == 3


def test_synth_command(tmp_path):
    scen = tmp_path / "s.json"
    scen.write_text(json.dumps(Scenario(elements=[Session(), TruncateHead(k=3)]).to_dict()))
    assert run(["synth", "--scenario", str(scen), "--out", str(tmp_path / "x.pcap")]) == 0
    truth = json.loads((tmp_path / "x.truth.json").read_text())
    assert truth["flows"][0]["disposition"] == "uninitialised"
    assert run(["extract", "--in", str(tmp_path / "x.pcap"), "--out", str(tmp_path / "x.csv")]) == 0
    assert pd.read_csv(tmp_path / "x.csv")["disposition"].tolist() == ["uninitialised"]


def test_config_file_supplies_options(tmp_path, trace):
    path, _, _ = trace
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"in = {path}\nout = {tmp_path / 'c.csv'}\nfin-wait = 3\n")
    assert run(["--config", str(cfg), "extract"]) == 0
    assert diag(tmp_path / "c.diagnostics.json")["timeouts"]["fin_wait"] == 3.0


@pytest.mark.parametrize("argv", [
    [],
    ["extract", "--out", "x.csv"],
    ["extract", "--in", "a.pcap", "--out", "x.csv", "--fin-wait", "-1"],
    ["extract", "--in", "a.pcap", "--out", "x.csv", "--drop", "sometimes"],
    ["analyze", "--flows", "f.csv", "--ratio-threshold", "1.5"],
    ["teleport"],
])
def test_usage_errors(argv, capsys):
    assert run(argv) == 2


def test_data_errors_exit_one(tmp_path):
    assert run(["extract", "--in", str(tmp_path / "missing.pcap"), "--out", str(tmp_path / "o.csv")]) == 1
    assert "failed" in " ".join(diag(tmp_path / "o.diagnostics.json")["events"])
    (tmp_path / "junk.pcap").write_bytes(b"\x00" * 40)
    assert run(["extract", "--in", str(tmp_path / "junk.pcap"), "--out", str(tmp_path / "o.csv")]) == 1
    (tmp_path / "bad.cidr").write_text("10.0.0.0/99\n")
    write_pcap([], tmp_path / "e.pcap")
    assert run(["extract", "--in", str(tmp_path / "e.pcap"), "--out", str(tmp_path / "o.csv"),
                "--local-cidrs", str(tmp_path / "bad.cidr")]) == 1


def test_help_shows_defaults(capsys):
    assert run(["extract", "--help"]) == 0
    text = capsys.readouterr().out
    for frag in ("300.0", "120.0", "10.0", "86400.0", "keep-all", "start-time", "20,989"):
        assert frag in text


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "flowrecovery", "synth", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "--resolution" in proc.stdout


def test_config_unknown_key(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("colour = blue\n")
    assert run(["--config", str(cfg), "analyze", "--flows", "f.csv"]) == 2
