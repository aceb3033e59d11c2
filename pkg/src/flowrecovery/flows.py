"""Flow state cache: packet-to-flow assignment, TCP teardown and timeouts.

Time is the packet clock. ``now`` is the largest packet timestamp seen so
far (microseconds) and every timeout is evaluated lazily against it, so a
trace always produces the same flows no matter how fast it is read.
"""

from __future__ import annotations

import enum
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .composition import flag_token
from .direction import (
    DEFAULT_VERDICT,
    FTP_DATA_PORTS,
    DirectionMethod,
    infer_direction,
)
from .features import DirStats, update_stats
from .pcap import PROTO_TCP, PROTO_UDP, PacketRecord, TcpFlags

US = 1_000_000


class FlowState(str, enum.Enum):
    ACTIVE = "active"
    FIN_WAIT = "fin-wait"
    RETIRED = "retired"


class TcpPhase(str, enum.Enum):
    NO_SYN_SEEN = "no-syn-seen"
    HANDSHAKE = "handshake"
    ESTABLISHED = "established"
    FIN_WAIT = "fin-wait"
    RETIRED = "retired"


class Disposition(str, enum.Enum):
    COMPLETE = "complete"
    UNINITIALISED = "uninitialised"
    UNTERMINATED = "unterminated"
    PARTIAL_BOTH = "partial-both"


class EndReason(str, enum.Enum):
    FIN_COMPLETE = "fin-complete"
    RST = "rst"
    IDLE_TIMEOUT = "idle-timeout"
    ACTIVE_TIMEOUT = "active-timeout"
    NEW_SYN = "new-syn"
    END_OF_TRACE = "end-of-trace"
    NONE = "none"


class Anomaly(str, enum.Enum):
    SYN_AFTER_DATA = "syn-after-data"
    FLAG_AFTER_FIN = "flag-after-fin"
    BACKWARDS_TIMESTAMP = "backwards-timestamp"


class FlowKey(NamedTuple):
    """5-tuple in the orientation of the flow's first packet."""

    ip_a: str
    port_a: int
    ip_b: str
    port_b: int
    proto: int

    def reverse(self) -> "FlowKey":
        return FlowKey(self.ip_b, self.port_b, self.ip_a, self.port_a, self.proto)


def make_key(pkt: PacketRecord) -> FlowKey:
    if pkt.proto in (PROTO_TCP, PROTO_UDP):
        return FlowKey(pkt.src_ip, pkt.src_port, pkt.dst_ip, pkt.dst_port, pkt.proto)
    return FlowKey(pkt.src_ip, 0, pkt.dst_ip, 0, pkt.proto)


@dataclass(frozen=True)
class Timeouts:
    """Timer settings in seconds."""

    idle_tcp: float = 300.0
    idle_udp: float = 120.0
    fin_wait: float = 10.0
    rst_linger: float = 1.0
    active: float = 24 * 3600.0

    def __post_init__(self):
        for name in ("idle_tcp", "idle_udp", "fin_wait", "rst_linger", "active"):
            if not getattr(self, name) > 0:
                raise ValueError(f"timeout {name} must be positive, got {getattr(self, name)}")

    def us(self, name: str) -> int:
        return int(round(getattr(self, name) * US))


@dataclass(eq=False)
class FlowRecord:
    """Mutable state of one flow while it lives in the cache.

    Statistics are kept in initiator orientation: ``fwd`` holds packets sent
    by the initiator. ``key`` keeps the orientation of the first packet, and
    ``reversed`` says whether the initiator is ``key.ip_b``.
    """

    key: FlowKey
    flow_id: int
    start_ts: int
    last_ts: int
    reversed: bool = False
    direction_method: DirectionMethod = DirectionMethod.DEFAULT_FORWARD
    direction_fixed: bool = True
    state: FlowState = FlowState.ACTIVE
    tcp_phase: TcpPhase = TcpPhase.NO_SYN_SEEN
    disposition: Disposition = Disposition.UNINITIALISED
    end_reason: EndReason = EndReason.NONE
    fwd: DirStats = field(default_factory=DirStats)
    bwd: DirStats = field(default_factory=DirStats)
    fin_seen_fwd: bool = False
    fin_seen_bwd: bool = False
    rst_seen: bool = False
    fin_wait_deadline: int | None = None
    late_packets: int = 0
    anomaly_flags: set[Anomaly] = field(default_factory=set)
    tokens: list[str] | None = None
    initiated: bool = False
    payload_seen: bool = False
    truncated: bool = False
    retired_ts: int | None = None

    # initiator-oriented endpoints
    @property
    def src_ip(self) -> str:
        return self.key.ip_b if self.reversed else self.key.ip_a

    @property
    def dst_ip(self) -> str:
        return self.key.ip_a if self.reversed else self.key.ip_b

    @property
    def src_port(self) -> int:
        return self.key.port_b if self.reversed else self.key.port_a

    @property
    def dst_port(self) -> int:
        return self.key.port_a if self.reversed else self.key.port_b

    @property
    def proto(self) -> int:
        return self.key.proto

    @property
    def is_tcp(self) -> bool:
        return self.key.proto == PROTO_TCP

    @property
    def fwd_packets(self) -> int:
        return self.fwd.packets

    @property
    def bwd_packets(self) -> int:
        return self.bwd.packets

    @property
    def packets(self) -> int:
        return self.fwd.packets + self.bwd.packets

    @property
    def end_ts(self) -> int:
        return self.last_ts

    @property
    def terminated(self) -> bool:
        return self.is_tcp and (self.fin_seen_fwd or self.fin_seen_bwd or self.rst_seen)

    def current_disposition(self) -> Disposition:
        if self.initiated:
            return Disposition.COMPLETE if self.terminated else Disposition.UNTERMINATED
        return Disposition.UNINITIALISED if self.terminated else Disposition.PARTIAL_BOTH

    def flag_counts(self) -> dict[str, tuple[int, int]]:
        from .features import FLAG_NAMES

        return {name: (self.fwd.flags[i], self.bwd.flags[i]) for i, name in enumerate(FLAG_NAMES)}


class FlowEvent(NamedTuple):
    kind: str  # "flow-created" | "flow-updated" | "flow-retired"
    flow: FlowRecord
    reason: EndReason | None = None


class Hit(NamedTuple):
    flow: FlowRecord
    forward: bool  # packet orientation matches the stored key


def lookup_bidirectional(table: dict[FlowKey, FlowRecord], key: FlowKey) -> Hit | None:
    rec = table.get(key)
    if rec is not None:
        return Hit(rec, True)
    rec = table.get(key.reverse())
    if rec is not None:
        return Hit(rec, False)
    return None


_SYN_ACK = TcpFlags.SYN | TcpFlags.ACK
_TEARDOWN_REASONS = (EndReason.FIN_COMPLETE, EndReason.RST)


class FlowCache:
    """Hash table of live flows keyed by 5-tuple.

    Feed packets with :meth:`admit`; retired flows accumulate in
    ``retired_sink`` in retirement order. Call :meth:`finalize_all` once
    input is exhausted.
    """

    def __init__(
        self,
        timeouts: Timeouts | None = None,
        infer_direction: bool = True,
        reversed_service_ports: Iterable[int] = FTP_DATA_PORTS,
        track_symbols: bool = True,
        sweep_interval: float = 1.0,
        late_window: float | None = None,
    ):
        self.timeouts = timeouts or Timeouts()
        self.infer_direction = infer_direction
        self.reversed_service_ports = frozenset(reversed_service_ports)
        self.track_symbols = track_symbols
        self.table: dict[FlowKey, FlowRecord] = {}
        self.retired_sink: list[FlowRecord] = []

        self.created = 0
        self.retired = 0
        self.high_watermark = 0
        self.high_watermark_ts: int | None = None
        self.packets_admitted = 0
        self.late_packets_total = 0
        self.backwards_timestamps = 0
        self.by_end_reason: Counter[str] = Counter()
        self.by_disposition: Counter[str] = Counter()
        self.anomalies: Counter[str] = Counter()
        self.now: int | None = None

        self._idle_tcp = self.timeouts.us("idle_tcp")
        self._idle_udp = self.timeouts.us("idle_udp")
        self._fin_wait = self.timeouts.us("fin_wait")
        self._rst_linger = self.timeouts.us("rst_linger")
        self._active = self.timeouts.us("active")
        self._sweep = int(sweep_interval * US)
        self._late_window = self._fin_wait if late_window is None else int(late_window * US)
        self._next_sweep: int | None = None
        # keys of flows closed by FIN/RST, for spotting late packets
        self._torn_down: dict[FlowKey, tuple[int, int]] = {}
        self._torn_order: deque[tuple[int, FlowKey]] = deque()

    def __len__(self) -> int:
        return len(self.table)

    # -- retirement -----------------------------------------------------
    def _retire(self, rec: FlowRecord, reason: EndReason, now: int) -> FlowEvent:
        del self.table[rec.key]
        rec.state = FlowState.RETIRED
        rec.tcp_phase = TcpPhase.RETIRED
        rec.end_reason = reason
        rec.disposition = rec.current_disposition()
        rec.retired_ts = now
        rec.fin_wait_deadline = None if reason not in _TEARDOWN_REASONS else rec.fin_wait_deadline
        self.retired_sink.append(rec)
        self.retired += 1
        self.by_end_reason[reason.value] += 1
        self.by_disposition[rec.disposition.value] += 1
        for flag in rec.anomaly_flags:
            self.anomalies[flag.value] += 1
        if reason in _TEARDOWN_REASONS:
            self._torn_down[rec.key] = (now, rec.flow_id)
            self._torn_order.append((now, rec.key))
        return FlowEvent("flow-retired", rec, reason)

    def _expiry(self, rec: FlowRecord, now: int) -> EndReason | None:
        if rec.state is FlowState.FIN_WAIT and rec.fin_wait_deadline is not None and now > rec.fin_wait_deadline:
            return EndReason.RST if rec.rst_seen else EndReason.FIN_COMPLETE
        idle = self._idle_tcp if rec.is_tcp else self._idle_udp
        if now - rec.last_ts > idle:
            return EndReason.IDLE_TIMEOUT
        if now - rec.start_ts > self._active:
            return EndReason.ACTIVE_TIMEOUT
        return None

    def check_timeouts(self, now: int) -> list[FlowRecord]:
        """Retire every flow whose idle, active or teardown timer has run out."""
        out = []
        for rec in list(self.table.values()):
            reason = self._expiry(rec, now)
            if reason is not None:
                out.append(self._retire(rec, reason, now).flow)
        while self._torn_order and now - self._torn_order[0][0] > self._late_window:
            ts, key = self._torn_order.popleft()
            if self._torn_down.get(key, (None,))[0] == ts:
                del self._torn_down[key]
        return out

    def finalize_all(self) -> list[FlowRecord]:
        """Retire everything still cached at end of input."""
        now = self.now if self.now is not None else 0
        out = []
        for rec in list(self.table.values()):
            if rec.rst_seen:
                reason = EndReason.RST
            elif rec.fin_seen_fwd and rec.fin_seen_bwd:
                reason = EndReason.FIN_COMPLETE
            else:
                reason = EndReason.END_OF_TRACE
            out.append(self._retire(rec, reason, now).flow)
        return out

    # -- admission ------------------------------------------------------
    def _late_match(self, key: FlowKey, now: int) -> bool:
        for k in (key, key.reverse()):
            entry = self._torn_down.get(k)
            if entry is not None and now - entry[0] <= self._late_window:
                return True
        return False

    def _create(self, pkt: PacketRecord, key: FlowKey, now: int) -> FlowRecord:
        self.created += 1
        if self.infer_direction:
            verdict = infer_direction(pkt, self.reversed_service_ports)
        else:
            verdict = DEFAULT_VERDICT
        rec = FlowRecord(
            key=key,
            flow_id=self.created,
            start_ts=pkt.ts,
            last_ts=pkt.ts,
            reversed=verdict.reverse,
            direction_method=verdict.method,
            tokens=[] if self.track_symbols and pkt.proto == PROTO_TCP else None,
            initiated=pkt.proto != PROTO_TCP,
        )
        flags = pkt.tcp_flags
        opening = pkt.proto == PROTO_TCP and flags & TcpFlags.SYN and not flags & TcpFlags.ACK
        if not opening and self._late_match(key, now):
            rec.late_packets = 1
            self.late_packets_total += 1
            if flags:
                rec.anomaly_flags.add(Anomaly.FLAG_AFTER_FIN)
        self.table[key] = rec
        if len(self.table) > self.high_watermark:
            self.high_watermark = len(self.table)
            self.high_watermark_ts = pkt.ts
        return rec

    def admit(self, pkt: PacketRecord) -> list[FlowEvent]:
        """Assign one packet to a flow, creating or retiring flows as needed."""
        events: list[FlowEvent] = []
        self.packets_admitted += 1
        if self.now is None or pkt.ts > self.now:
            self.now = pkt.ts
        elif pkt.ts < self.now:
            self.backwards_timestamps += 1
        now = self.now

        if self._next_sweep is None:
            self._next_sweep = now + self._sweep
        elif now >= self._next_sweep:
            for rec in self.check_timeouts(now):
                events.append(FlowEvent("flow-retired", rec, rec.end_reason))
            self._next_sweep = now + self._sweep

        key = make_key(pkt)
        hit = lookup_bidirectional(self.table, key)
        is_tcp = pkt.proto == PROTO_TCP
        flags = pkt.tcp_flags

        if hit is not None:
            rec = hit.flow
            reason = self._expiry(rec, now)
            if reason is None and is_tcp and flags & TcpFlags.SYN and not flags & TcpFlags.ACK:
                if rec.payload_seen or rec.terminated:
                    reason = EndReason.NEW_SYN
                    if rec.payload_seen and not rec.terminated:
                        rec.anomaly_flags.add(Anomaly.SYN_AFTER_DATA)
            if reason is not None:
                events.append(self._retire(rec, reason, now))
                hit = None

        if hit is None:
            rec = self._create(pkt, key, now)
            packet_forward = True
            events.append(FlowEvent("flow-created", rec))
        else:
            rec = hit.flow
            packet_forward = hit.forward
            events.append(FlowEvent("flow-updated", rec))

        forward = packet_forward != rec.reversed
        self._update(rec, pkt, forward, now)
        return events

    def _update(self, rec: FlowRecord, pkt: PacketRecord, forward: bool, now: int) -> None:
        if pkt.ts < rec.last_ts:
            rec.anomaly_flags.add(Anomaly.BACKWARDS_TIMESTAMP)
        else:
            rec.last_ts = pkt.ts
        update_stats(rec, pkt, forward)
        if pkt.proto != PROTO_TCP:
            if pkt.payload_len:
                rec.payload_seen = True
            return

        flags = pkt.tcp_flags
        if rec.tokens is not None:
            rec.tokens.append(flag_token(flags, forward))
        fin_already = rec.fin_seen_fwd if forward else rec.fin_seen_bwd
        if fin_already and (pkt.payload_len or flags & (TcpFlags.SYN | TcpFlags.PSH)):
            rec.anomaly_flags.add(Anomaly.FLAG_AFTER_FIN)
        if flags & TcpFlags.SYN:
            if not rec.payload_seen:
                rec.initiated = True
                if rec.tcp_phase is TcpPhase.NO_SYN_SEEN:
                    rec.tcp_phase = TcpPhase.HANDSHAKE
            elif flags & TcpFlags.ACK:
                rec.anomaly_flags.add(Anomaly.SYN_AFTER_DATA)
        if pkt.payload_len:
            rec.payload_seen = True
            if rec.tcp_phase in (TcpPhase.NO_SYN_SEEN, TcpPhase.HANDSHAKE):
                rec.tcp_phase = TcpPhase.ESTABLISHED
        elif rec.tcp_phase is TcpPhase.HANDSHAKE and flags & _SYN_ACK == TcpFlags.ACK:
            rec.tcp_phase = TcpPhase.ESTABLISHED

        if flags & TcpFlags.RST:
            rec.rst_seen = True
            rec.state = FlowState.FIN_WAIT
            rec.tcp_phase = TcpPhase.FIN_WAIT
            rec.fin_wait_deadline = now + self._rst_linger
        if flags & TcpFlags.FIN:
            if forward:
                rec.fin_seen_fwd = True
            else:
                rec.fin_seen_bwd = True
            rec.state = FlowState.FIN_WAIT
            rec.tcp_phase = TcpPhase.FIN_WAIT
            if not rec.rst_seen:
                rec.fin_wait_deadline = now + self._fin_wait


def estimate_cache_bytes(f_smax: int, d_so: int, f_s: int) -> int:
    """Worst-case cache memory: ``f_smax * (d_so + 2 * f_s)``.

    ``f_smax`` is the peak number of concurrent flows, ``d_so`` the fixed
    per-flow structure overhead and ``f_s`` the per-direction feature state.
    """
    if f_smax < 0 or d_so < 0 or f_s < 0:
        raise ValueError("cache estimate inputs must be non-negative")
    return f_smax * (d_so + 2 * f_s)
