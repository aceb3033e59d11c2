import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from _support import A, CLI, F, P, R, S, SRV, c2s, handshake_session, pkt, s2c, udp
from flowrecovery.flows import (
    Disposition,
    EndReason,
    FlowCache,
    FlowKey,
    FlowState,
    Timeouts,
    estimate_cache_bytes,
    lookup_bidirectional,
    make_key,
)
from flowrecovery.pcap import PacketRecord, TcpFlags

SEC = 1_000_000


def run(packets, **kw):
    cache = FlowCache(**kw)
    for p in packets:
        cache.admit(p)
    cache.finalize_all()
    return cache, cache.retired_sink


def test_make_key_orientation():
    k = make_key(pkt(0, S, src=("10.0.0.1", 5555), dst=("10.0.0.2", 80)))
    assert k == FlowKey("10.0.0.1", 5555, "10.0.0.2", 80, 6)
    assert make_key(pkt(0, A, src=("10.0.0.2", 80), dst=("10.0.0.1", 5555))) == k.reverse()


def test_make_key_other_protocol_has_zero_ports():
    icmp = PacketRecord(ts=0, src_ip="10.0.0.1", dst_ip="10.0.0.2", src_port=7, dst_port=9, proto=1,
                        tcp_flags=TcpFlags(0), ip_len=28, payload_len=0)
    assert make_key(icmp) == FlowKey("10.0.0.1", 0, "10.0.0.2", 0, 1)


@given(st.text(max_size=5), st.integers(0, 65535), st.text(max_size=5), st.integers(0, 65535), st.integers(0, 255))
def test_reverse_is_involution(a, pa, b, pb, proto):
    k = FlowKey(a, pa, b, pb, proto)
    assert k.reverse().reverse() == k


def test_lookup_bidirectional():
    k = FlowKey("a", 1, "b", 2, 6)
    table = {k: "rec"}
    assert lookup_bidirectional(table, k) == ("rec", True)
    assert lookup_bidirectional(table, k.reverse()) == ("rec", False)
    assert lookup_bidirectional({}, k) is None


def test_complete_session():
    cache, flows = run(handshake_session())
    (f,) = flows
    counts = f.flag_counts()
    assert counts["syn"] == (1, 1) and counts["fin"] == (1, 1)
    assert f.disposition == Disposition.COMPLETE and f.end_reason == EndReason.FIN_COMPLETE
    assert f.packets == 10


def test_syn_flood_aggregates():
    pkts = []
    for i in range(1000):
        pkts += [c2s(i * 1000, S), s2c(i * 1000 + 500, S | A)]
    _, flows = run(pkts)
    (f,) = flows
    assert f.flag_counts()["syn"] == (1000, 1000)


def test_mid_session_start_is_uninitialised():
    _, flows = run([c2s(0, P | A, b"x"), s2c(10, A)])
    (f,) = flows
    assert f.packets == 2
    assert f.disposition == Disposition.PARTIAL_BOTH
    _, flows = run([c2s(0, P | A, b"x"), s2c(10, F | A), c2s(20, F | A), s2c(30, A)])
    assert flows[0].disposition == Disposition.UNINITIALISED


def test_flow_not_retired_on_first_fin():
    cache = FlowCache()
    for p in handshake_session()[:8]:
        cache.admit(p)
    (rec,) = cache.table.values()
    assert rec.state == FlowState.FIN_WAIT
    assert cache.retired == 0


def test_fin_wait_expiry_retires_fin_complete():
    cache = FlowCache(timeouts=Timeouts(fin_wait=10.0))
    for p in handshake_session(t0=0):
        cache.admit(p)
    last_fin = handshake_session(t0=0)[-2].ts
    assert cache.check_timeouts(last_fin + 10 * SEC) == []
    (f,) = cache.check_timeouts(last_fin + 10 * SEC + 1)
    assert f.end_reason == EndReason.FIN_COMPLETE


def test_single_fin_times_out_after_fin_wait():
    cache = FlowCache(timeouts=Timeouts(fin_wait=10.0))
    for p in [c2s(0, S), s2c(10, S | A), c2s(20, A), c2s(30, F | A)]:
        cache.admit(p)
    (f,) = cache.check_timeouts(30 + 10 * SEC + 1)
    assert f.end_reason == EndReason.FIN_COMPLETE
    assert f.disposition == Disposition.COMPLETE


def test_rst_lingers_then_retires():
    cache = FlowCache()
    for p in [c2s(0, S), s2c(10, S | A), c2s(20, R | A), c2s(30, R | A)]:
        cache.admit(p)
    assert cache.retired == 0
    (f,) = cache.check_timeouts(30 + SEC + 1)
    assert f.end_reason == EndReason.RST and f.flag_counts()["rst"] == (2, 0)


def test_udp_idle_timeout():
    cache = FlowCache(timeouts=Timeouts(idle_udp=300.0))
    cache.admit(udp(0))
    (f,) = cache.check_timeouts(400 * SEC)
    assert f.end_reason == EndReason.IDLE_TIMEOUT
    assert f.disposition == Disposition.UNTERMINATED


def test_tcp_idle_within_timeout_untouched():
    cache = FlowCache()
    cache.admit(c2s(0, S))
    assert cache.check_timeouts(10 * SEC) == []


def test_active_timeout():
    cache = FlowCache(timeouts=Timeouts(active=24 * 3600.0))
    t = 0
    while t <= 25 * 3600 * SEC:
        cache.admit(c2s(t, A) if t else c2s(0, S))
        t += 60 * SEC
    reasons = [f.end_reason for f in cache.retired_sink]
    assert EndReason.ACTIVE_TIMEOUT in reasons


def test_idle_timeout_fires_from_packet_clock():
    _, flows = run([udp(0), udp(200 * SEC, src=("10.0.0.9", 1000))])
    first = next(f for f in flows if f.key.ip_a == CLI[0])
    assert first.end_reason == EndReason.IDLE_TIMEOUT


def test_finalize_all():
    cache = FlowCache()
    for i in range(3):
        cache.admit(pkt(i, S, src=("10.0.0.1", 1000 + i)))
    out = cache.finalize_all()
    assert len(out) == 3 and all(f.end_reason == EndReason.END_OF_TRACE for f in out)
    assert cache.table == {}
    assert FlowCache().finalize_all() == []


def test_finalize_keeps_fin_counts_of_half_closed_flow():
    cache = FlowCache()
    for p in [c2s(0, S), s2c(10, S | A), c2s(20, A), c2s(30, F | A)]:
        cache.admit(p)
    (f,) = cache.finalize_all()
    assert f.end_reason == EndReason.END_OF_TRACE
    assert f.flag_counts()["fin"] == (1, 0)


def test_new_syn_splits_progressed_flow():
    first = handshake_session(t0=0)
    second = handshake_session(t0=first[-1].ts + 2 * SEC)
    _, flows = run(first + second)
    assert len(flows) == 2
    assert flows[0].end_reason == EndReason.NEW_SYN
    assert all(f.disposition == Disposition.COMPLETE for f in flows)


def test_syn_retransmission_does_not_split():
    _, flows = run([c2s(0, S), c2s(SEC, S), c2s(3 * SEC, S), s2c(3 * SEC + 10, S | A)])
    assert len(flows) == 1 and flows[0].flag_counts()["syn"] == (3, 1)


def test_syn_after_data_anomaly():
    _, flows = run([c2s(0, P | A, b"x"), s2c(10, A), c2s(20, S)])
    assert len(flows) == 2
    assert "syn-after-data" in flows[0].anomaly_flags


def test_late_packet_after_retirement():
    pkts = handshake_session(t0=0)
    late = c2s(pkts[-1].ts + 11 * SEC, F | A)
    cache, flows = run(pkts + [late])
    assert len(flows) == 2
    assert cache.late_packets_total == 1
    assert flows[1].late_packets == 1
    assert "flag-after-fin" in flows[1].anomaly_flags


def test_direction_reverse_keeps_initiator_orientation():
    _, flows = run([s2c(0, P | A, b"resp"), c2s(10, A)])
    (f,) = flows
    assert f.reversed and (f.src_ip, f.src_port) == CLI
    assert f.fwd_packets == 1 and f.bwd_packets == 1


def test_late_ack_during_fin_wait_counted():
    pkts = handshake_session(t0=0)
    pkts[-1] = c2s(pkts[-2].ts + 3 * SEC, A)
    cache, flows = run(pkts)
    (f,) = flows
    assert f.packets == 10 and f.end_reason == EndReason.FIN_COMPLETE
    assert cache.late_packets_total == 0


def test_estimate_cache_bytes():
    assert estimate_cache_bytes(0, 64, 256) == 0
    assert estimate_cache_bytes(1, 64, 256) == 576
    assert estimate_cache_bytes(10000, 64, 256) == 5_760_000
    with pytest.raises(ValueError):
        estimate_cache_bytes(-1, 0, 0)


def test_timeouts_validated():
    with pytest.raises(ValueError):
        Timeouts(fin_wait=0)


# -- properties over random traffic ------------------------------------------

_flags = st.sampled_from([S, S | A, A, P | A, F | A, R, R | A, TcpFlags(0)])


@st.composite
def traffic(draw):
    hosts = [("10.0.0.1", 1000), ("10.0.0.2", 80), ("10.0.0.3", 50000), ("10.0.0.4", 443)]
    n = draw(st.integers(1, 80))
    t = 0
    out = []
    for _ in range(n):
        t += draw(st.integers(0, 400 * SEC))
        a, b = draw(st.sampled_from([(x, y) for x in hosts for y in hosts if x != y]))
        if draw(st.booleans()):
            out.append(udp(t, b"p", src=a, dst=b))
        else:
            out.append(pkt(t, draw(_flags), draw(st.binary(max_size=4)), src=a, dst=b))
    return out


@given(traffic())
def test_packet_conservation(packets):
    cache, flows = run(packets)
    assert sum(f.packets for f in flows) == len(packets)
    assert cache.created == cache.retired == len(flows)


@given(traffic())
def test_cache_counters_consistent(packets):
    cache = FlowCache()
    high = 0
    for p in packets:
        cache.admit(p)
        assert cache.created - cache.retired == len(cache.table)
        assert cache.high_watermark >= high
        high = cache.high_watermark
        assert high >= len(cache.table)
    cache.finalize_all()


@given(traffic())
def test_determinism(packets):
    def summary(flows):
        return [(f.flow_id, f.start_ts, f.end_ts, f.packets, f.end_reason, f.disposition, tuple(f.tokens or ())) for f in flows]

    assert summary(run(packets)[1]) == summary(run(packets)[1])


@given(traffic())
def test_start_is_first_packet_and_last_not_before_start(packets):
    _, flows = run(packets)
    for f in flows:
        assert f.last_ts >= f.start_ts
        assert f.packets >= 1


@given(traffic())
def test_no_fin_wait_flow_retired_early(packets):
    cache = FlowCache()
    t = Timeouts()
    for p in packets:
        for ev in cache.admit(p):
            f = ev.flow
            if ev.kind == "flow-retired" and ev.reason == EndReason.FIN_COMPLETE:
                both = f.fin_seen_fwd and f.fin_seen_bwd
                assert both or f.retired_ts - f.last_ts >= t.us("fin_wait") or f.retired_ts > f.fin_wait_deadline
