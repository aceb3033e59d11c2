import csv
import random
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from _support import handshake_session, pkt
from flowrecovery.features import write_flow_file
from flowrecovery.labels import (
    ColumnMap,
    FlowSignature,
    LabelError,
    MatchTolerance,
    MissingColumn,
    apply_default_labels,
    extract_signatures,
    match_score,
    parse_timestamp,
    read_legacy_csv,
    reapply_signatures,
    write_unmatched,
)
from flowrecovery.pipeline import extract_flows

SEC = 1_000_000


def base_row():
    return extract_flows(handshake_session()).rows[0]


def legacy(label, ts=1_000_000, dur=90_000, src="10.0.0.1", dst="192.168.1.1", sport="51000", dport="80", proto="6"):
    return {"start_ts": str(ts), "duration_us": str(dur), "proto": proto, "src_ip": src, "dst_ip": dst,
            "src_port": sport, "dst_port": dport, "label": label}


def test_apply_default_labels():
    rows = [replace(base_row(), label="x") for _ in range(100)]
    assert {r.label for r in apply_default_labels(rows, "normal")} == {"normal"}
    assert apply_default_labels([], "normal") == []


def test_signatures_only_from_non_default_rows():
    rows = [legacy("normal")] * 7 + [legacy("ddos")] * 3
    sigs, errors = extract_signatures(rows, "normal")
    assert len(sigs) == 3 and not errors
    assert extract_signatures([legacy("normal")] * 4, "normal")[0] == []


def test_pairs_are_unordered():
    (sig,), _ = extract_signatures([legacy("ddos", src="192.168.1.1", dst="10.0.0.1", sport="80", dport="51000")],
                                   "normal")
    assert sig.addr_pair == ("10.0.0.1", "192.168.1.1") and sig.port_pair == (80, 51000)


def test_hex_junk_collected():
    rows = [legacy("ddos"), legacy("ddos", dport="0x1F90"), legacy("ddos", dur="0xdead")]
    sigs, errors = extract_signatures(rows, "normal")
    assert len(sigs) == 1
    assert [(e.row, e.column) for e in errors] == [(2, "dst_port"), (3, "duration_us")]


def test_missing_column():
    rec = legacy("ddos")
    del rec["proto"]
    with pytest.raises(MissingColumn):
        extract_signatures([rec], "normal")


def test_exact_match_scores_one():
    row = base_row()
    (sig,), _ = extract_signatures([legacy("ddos", ts=row.start_ts, dur=row.duration_us)], "normal")
    assert match_score(sig, row, MatchTolerance())[0] == 1.0
    res = reapply_signatures([row], [sig])
    assert res.rows[0].label == "ddos" and res.relabelled == 1


def _oracle_score(dts_s, ddur_s, sig_dur_s, ts_tol=5.0, dur_tol=1.0, frac=0.1):
    d_tol = max(dur_tol, frac * sig_dur_s)
    return 0.6 * max(0.0, 1 - dts_s / ts_tol) + 0.4 * max(0.0, 1 - ddur_s / d_tol)


def test_closer_timestamp_wins():
    row = base_row()
    near = replace(row, flow_id=1, start_ts=row.start_ts + 1 * SEC)
    far = replace(row, flow_id=2, start_ts=row.start_ts + 30 * SEC)
    (sig,), _ = extract_signatures([legacy("ddos", ts=row.start_ts, dur=row.duration_us)], "normal")
    assert match_score(sig, near, MatchTolerance())[0] == pytest.approx(_oracle_score(1, 0, 0.09))
    assert match_score(sig, far, MatchTolerance())[0] == pytest.approx(_oracle_score(30, 0, 0.09))
    res = reapply_signatures([far, near], [sig])
    assert [r.label for r in res.rows] == ["", "ddos"]


@given(st.integers(0, 20 * SEC), st.integers(0, 5 * SEC), st.integers(0, 100 * SEC))
def test_score_matches_oracle(dts, ddur, sig_dur):
    row = replace(base_row(), start_ts=10**12 + dts, duration_us=sig_dur + ddur)
    sig = FlowSignature(10**12, sig_dur, 6, ("10.0.0.1", "192.168.1.1"), (80, 51000), "x", 1)
    got = match_score(sig, row, MatchTolerance())[0]
    # bounds are rounded to whole microseconds; 1 us on a bound >= 1 s moves the score by <= 0.4e-6
    assert got == pytest.approx(_oracle_score(dts / SEC, ddur / SEC, sig_dur / SEC), abs=4e-7)


def test_no_candidate_unmatched():
    (sig,), _ = extract_signatures([legacy("ddos", sport="1")], "normal")
    res = reapply_signatures([base_row()], [sig])
    assert res.unmatched[0].reason == "no-candidate" and res.relabelled == 0


def test_below_threshold_reports_nearest():
    row = base_row()
    (sig,), _ = extract_signatures([legacy("ddos", ts=row.start_ts + 60 * SEC, dur=row.duration_us + 50 * SEC)],
                                   "normal")
    res = reapply_signatures([row], [sig])
    (u,) = res.unmatched
    assert u.reason == "below-threshold" and u.nearest_flow_id == row.flow_id and u.nearest_score == 0.0


def test_tie_broken_by_flow_id():
    row = base_row()
    a, b = replace(row, flow_id=7), replace(row, flow_id=3)
    (sig,), _ = extract_signatures([legacy("ddos", ts=row.start_ts, dur=row.duration_us)], "normal")
    res = reapply_signatures([a, b], [sig])
    assert [r.label for r in res.rows] == ["", "ddos"]


def test_conflict_first_write_wins():
    row = base_row()
    sigs, _ = extract_signatures([legacy("ddos", ts=row.start_ts, dur=row.duration_us),
                                  legacy("scan", ts=row.start_ts, dur=row.duration_us)], "normal")
    res = reapply_signatures([row], sigs)
    assert res.rows[0].label == "ddos" and res.conflicts == 1
    assert res.relabelled + len(res.unmatched) + res.conflicts == len(sigs)


@st.composite
def labelled_corpus(draw):
    n = draw(st.integers(1, 30))
    rows = []
    for i in range(n):
        rows.append(replace(base_row(), flow_id=i + 1, src_port=1000 + i, start_ts=draw(st.integers(0, 10**9)),
                            duration_us=draw(st.integers(0, 10**8)), label="normal"))
    marked = draw(st.sets(st.integers(0, n - 1)))
    return rows, marked


@given(labelled_corpus(), st.randoms())
def test_round_trip_and_conservation(corpus, rnd):
    rows, marked = corpus
    legacy_rows = [r.as_dict() | {"label": "attack" if i in marked else "normal"} for i, r in enumerate(rows)]
    legacy_rows = [{k: str(v) for k, v in rec.items()} for rec in legacy_rows]
    sigs, errors = extract_signatures(legacy_rows, "normal")
    rnd.shuffle(sigs)
    shuffled = list(rows)
    rnd.shuffle(shuffled)
    res = reapply_signatures(shuffled, sigs, MatchTolerance.exact())
    assert not errors and not res.unmatched
    assert {r.flow_id for r in res.rows if r.label == "attack"} == {rows[i].flow_id for i in marked}
    assert res.relabelled + len(res.unmatched) + res.conflicts == len(sigs)


def test_column_map_and_calendar_timestamps(tmp_path):
    cfg = tmp_path / "map.cfg"
    cfg.write_text("# legacy tool\ntimestamp = Timestamp\nduration = Flow Duration\nproto = Protocol\n"
                   "src_ip = Src IP\ndst_ip = Dst IP\nsrc_port = Src Port\ndst_port = Dst Port\nlabel = Label\n"
                   "ts_format = %d/%m/%Y %H:%M:%S\nduration_unit = us\nutc_offset_hours = -3\n")
    cmap = ColumnMap.from_file(cfg)
    path = tmp_path / "legacy.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Src IP", "Src Port", "Dst IP", "Dst Port", "Protocol", "Timestamp", "Flow Duration", "Label"])
        w.writerow(["10.0.0.1", "51000", "192.168.1.1", "80", "6", "13/09/2020 09:26:40", "90000", "DoS"])
        w.writerow(["10.0.0.1", "51001", "192.168.1.1", "80", "6", "13/09/2020 09:26:40", "90000", "BENIGN"])
    (sig,), errors = extract_signatures(read_legacy_csv(path), "BENIGN", cmap)
    # 09:26:40 at UTC-3 is 12:26:40 UTC = epoch 1600000000
    assert sig.ts == 1_600_000_000 * SEC and not errors


def test_epoch_formats():
    assert parse_timestamp("1.5", ColumnMap(ts_format="epoch_s")) == 1_500_000
    assert parse_timestamp("1500", ColumnMap(ts_format="epoch_ms")) == 1_500_000
    with pytest.raises(LabelError):
        parse_timestamp("1", ColumnMap(ts_format="epoch_days"))


def test_unknown_map_key():
    with pytest.raises(LabelError):
        ColumnMap.from_mapping({"colour": "x"})


def test_write_unmatched(tmp_path):
    (sig,), _ = extract_signatures([legacy("ddos", sport="1")], "normal")
    res = reapply_signatures([base_row()], [sig])
    assert write_unmatched(res.unmatched, tmp_path / "u.csv") == 1
    lines = (tmp_path / "u.csv").read_text().splitlines()
    assert lines[0].startswith("legacy_row,label") and ",no-candidate," in lines[1]


def test_tolerance_validation():
    with pytest.raises(ValueError):
        MatchTolerance(ts_tolerance=-1)
    with pytest.raises(ValueError):
        MatchTolerance(score_threshold=0)


def test_labels_from_written_flow_file(tmp_path):
    rows = extract_flows(handshake_session() + [pkt(2_000_000, 2, src=("10.0.0.5", 4000))]).rows
    marked = [replace(rows[0], label="ddos")] + rows[1:]
    write_flow_file(marked, tmp_path / "old.csv")
    sigs, errors = extract_signatures(read_legacy_csv(tmp_path / "old.csv"), "normal")
    res = reapply_signatures(apply_default_labels(rows, "normal"), sigs, MatchTolerance.exact())
    assert [r.label for r in res.rows] == ["ddos", "normal"]
