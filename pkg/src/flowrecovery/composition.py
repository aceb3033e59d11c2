"""Trace composition analytics: TCP flag symbols, steady state, diagnostics."""

from __future__ import annotations

import json
import os
import textwrap
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .pcap import TcpFlags

# letter order inside a token; every multi-flag token ends in A
_TOKEN_ORDER = (
    (TcpFlags.SYN, "S"),
    (TcpFlags.FIN, "F"),
    (TcpFlags.RST, "R"),
    (TcpFlags.PSH, "P"),
    (TcpFlags.URG, "U"),
    (TcpFlags.ACK, "A"),
)
_LETTER_FLAG = {letter: name for name, letter in (("syn", "S"), ("fin", "F"), ("rst", "R"), ("psh", "P"), ("urg", "U"), ("ack", "A"))}
EMPTY_TOKEN = "-"
FLOW_DELIMITER = "."

_INITIATED = frozenset({"complete", "unterminated"})


class DegenerateWindow(ValueError):
    pass


def flag_token(flags: TcpFlags | int, forward: bool) -> str:
    """Compact symbol for one TCP packet; upper case for the initiator side."""
    token = "".join(letter for bit, letter in _TOKEN_ORDER if flags & bit)
    if not token:
        return EMPTY_TOKEN
    return token if forward else token.lower()


def token_flags(token: str) -> tuple[bool, dict[str, int]]:
    """Inverse of :func:`flag_token`: (forward, flag name -> 0/1)."""
    if token == EMPTY_TOKEN:
        return True, {}
    forward = token.isupper()
    return forward, {_LETTER_FLAG[ch.upper()]: 1 for ch in token}


def _value(obj, name: str):
    v = getattr(obj, name)
    return getattr(v, "value", v)


def export_symbol_sequences(flows: Iterable, path: str | os.PathLike, width: int = 100) -> int:
    """Write the flag symbol file; returns the number of flows written.

    Flows are ordered by start time (then flow id), each preceded by the
    ``.`` delimiter. Non-TCP flows and flows without tokens are skipped.
    """
    tcp = [f for f in flows if getattr(f, "tokens", None)]
    tcp.sort(key=lambda f: (f.start_ts, f.flow_id))
    text = " ".join(f"{FLOW_DELIMITER} " + " ".join(f.tokens) for f in tcp)
    with open(path, "w", encoding="utf-8") as fh:
        if text:
            fh.write(textwrap.fill(text, width=width, break_long_words=False, break_on_hyphens=False))
            fh.write("\n")
    return len(tcp)


def parse_symbol_text(text: str) -> list[list[str]]:
    flows: list[list[str]] = []
    for tok in text.split():
        if tok == FLOW_DELIMITER:
            flows.append([])
        elif flows:
            flows[-1].append(tok)
        else:
            raise ValueError("symbol data does not start with a flow delimiter")
    return flows


def parse_symbol_file(path: str | os.PathLike) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return parse_symbol_text(fh.read())


def count_token_flags(tokens: Iterable[str]) -> dict[str, int]:
    """Per-direction flag totals keyed like the CSV columns (``syn_fwd``...)."""
    counts: dict[str, int] = {}
    for tok in tokens:
        forward, flags = token_flags(tok)
        suffix = "fwd" if forward else "bwd"
        for name in flags:
            counts[f"{name}_{suffix}"] = counts.get(f"{name}_{suffix}", 0) + 1
    return counts


# -- steady state -------------------------------------------------------

@dataclass
class PhaseReport:
    first_packet_ts: int | None
    last_packet_ts: int | None
    steady_start_ts: int | None
    steady_end_ts: int | None
    uninitialised_flow_fraction: float
    unterminated_flow_fraction: float
    max_concurrent_flows: int
    max_concurrent_ts: int | None
    window_us: int
    ratio_threshold: float
    flows: int
    curve: list[tuple[int, int, float | None]] = field(default_factory=list, repr=False)

    @property
    def has_steady_state(self) -> bool:
        return self.steady_start_ts is not None

    def to_dict(self, with_curve: bool = False) -> dict:
        d = asdict(self)
        if not with_curve:
            d.pop("curve")
        return d


def _arrays(flows: Sequence) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    starts = np.fromiter((f.start_ts for f in flows), dtype=np.int64, count=len(flows))
    ends = np.fromiter((f.end_ts for f in flows), dtype=np.int64, count=len(flows))
    disp = [str(_value(f, "disposition")) for f in flows]
    initiated = np.fromiter((d in _INITIATED for d in disp), dtype=bool, count=len(flows))
    terminated = np.fromiter((d in ("complete", "uninitialised") for d in disp), dtype=bool, count=len(flows))
    return starts, ends, initiated, terminated


def concurrency_peak(starts: np.ndarray, ends: np.ndarray) -> tuple[int, int | None]:
    """Maximum number of overlapping [start, end] intervals and when it occurs."""
    if starts.size == 0:
        return 0, None
    times = np.concatenate([starts, ends])
    # starts sort before ends at equal times so touching intervals overlap
    kinds = np.concatenate([np.zeros(starts.size, dtype=np.int8), np.ones(ends.size, dtype=np.int8)])
    order = np.lexsort((kinds, times))
    deltas = np.where(kinds[order] == 0, 1, -1)
    level = np.cumsum(deltas)
    i = int(np.argmax(level))
    return int(level[i]), int(times[order][i])


def detect_steady_state(
    flows: Sequence,
    window: float = 60.0,
    ratio_threshold: float = 0.9,
    step: float | None = None,
) -> PhaseReport:
    """Locate the span of the trace where most active flows were initiated.

    A window of ``window`` seconds slides over trace time in ``step``
    increments (default a tenth of the window). In each position the share
    of overlapping flows whose opening was observed is computed; the steady
    region is the longest run of positions at or above ``ratio_threshold``.
    Positions with no active flow do not break a run.
    """
    if window <= 0:
        raise DegenerateWindow(f"window must be positive, got {window}")
    if not 0 < ratio_threshold <= 1:
        raise ValueError(f"ratio_threshold must be in (0, 1], got {ratio_threshold}")
    flows = list(flows)
    if not flows:
        raise ValueError("steady-state detection needs at least one flow")
    w = int(round(window * 1e6))
    s = int(round((step if step is not None else window / 10) * 1e6))
    if s <= 0:
        raise DegenerateWindow(f"step must be positive, got {step}")

    starts, ends, initiated, terminated = _arrays(flows)
    t0, t1 = int(starts.min()), int(max(ends.max(), starts.max()))
    positions = np.arange(t0, max(t1 - w, t0) + 1, s, dtype=np.int64)
    if positions[-1] + w < t1:
        positions = np.append(positions, t1 - w)

    s_all, e_all = np.sort(starts), np.sort(ends)
    s_ini, e_ini = np.sort(starts[initiated]), np.sort(ends[initiated])
    # active in [p, p+w): start < p+w and end >= p
    act_all = np.searchsorted(s_all, positions + w, "left") - np.searchsorted(e_all, positions, "left")
    act_ini = np.searchsorted(s_ini, positions + w, "left") - np.searchsorted(e_ini, positions, "left")
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(act_all > 0, act_ini / np.maximum(act_all, 1), np.nan)

    ok = np.where(np.isnan(frac), True, frac >= ratio_threshold)
    best = (0, -1, -1)
    i = 0
    while i < len(ok):
        if not ok[i]:
            i += 1
            continue
        j = i
        while j + 1 < len(ok) and ok[j + 1]:
            j += 1
        # a run made only of empty windows is not a steady state
        if j - i + 1 > best[0] and not np.all(np.isnan(frac[i:j + 1])):
            best = (j - i + 1, i, j)
        i = j + 1

    if best[0]:
        steady_start = int(positions[best[1]])
        steady_end = int(min(positions[best[2]] + w, t1))
    else:
        steady_start = steady_end = None

    peak, peak_ts = concurrency_peak(starts, ends)
    n = len(flows)
    curve = [(int(p), int(a), None if np.isnan(f) else float(f)) for p, a, f in zip(positions, act_all, frac)]
    return PhaseReport(
        first_packet_ts=t0,
        last_packet_ts=t1,
        steady_start_ts=steady_start,
        steady_end_ts=steady_end,
        uninitialised_flow_fraction=float((~initiated).sum()) / n,
        unterminated_flow_fraction=float((~terminated).sum()) / n,
        max_concurrent_flows=peak,
        max_concurrent_ts=peak_ts,
        window_us=w,
        ratio_threshold=ratio_threshold,
        flows=n,
        curve=curve,
    )


# -- diagnostics --------------------------------------------------------

@dataclass
class DiagnosticsReport:
    packets_total: int = 0
    packets_skipped: int = 0
    malformed_records: int = 0
    backwards_timestamps: int = 0
    fragments_skipped: int = 0
    non_ip_frames: int = 0
    truncated_packets: int = 0
    nano_timestamps_truncated: int = 0
    late_packets_total: int = 0
    flows_created: int = 0
    flows_retired: int = 0
    flows_by_end_reason: dict[str, int] = field(default_factory=dict)
    flows_by_disposition: dict[str, int] = field(default_factory=dict)
    anomaly_flags: dict[str, int] = field(default_factory=dict)
    max_concurrent_flows: int = 0
    max_concurrent_ts: int | None = None
    packets_per_flow: float | None = None
    file_gaps: list[dict] = field(default_factory=list)
    timeouts: dict[str, float] = field(default_factory=dict)
    flows_exported: int | None = None
    flows_dropped: int | None = None
    labels: dict | None = None
    events: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, dict):
                if not value:
                    lines.append(f"{key}: {{}}")
                for sub, v in value.items():
                    lines.append(f"{key}.{sub}: {v}")
            elif isinstance(value, list):
                lines.append(f"{key}: {len(value)}")
                for i, item in enumerate(value):
                    lines.append(f"{key}[{i}]: {item}")
            else:
                lines.append(f"{key}: {'' if value is None else value}")
        return "\n".join(lines) + "\n"

    def write(self, json_path: str | os.PathLike, text_path: str | os.PathLike | None = None) -> None:
        with open(json_path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")
        if text_path is not None:
            with open(text_path, "w", encoding="utf-8") as fh:
                fh.write(self.to_text())


def build_diagnostics(reader=None, cache=None, label_errors: dict | None = None) -> DiagnosticsReport:
    """Collect reader, cache and label-recovery counters into one report."""
    rep = DiagnosticsReport()
    if reader is not None:
        d = reader.diagnostics
        rep.packets_total = reader.packets_read + reader.packets_skipped
        rep.packets_skipped = reader.packets_skipped
        rep.malformed_records = d.malformed_records
        rep.backwards_timestamps = d.backwards_timestamps
        rep.fragments_skipped = d.fragments_skipped
        rep.non_ip_frames = d.non_ip
        rep.truncated_packets = d.truncated_packets
        rep.nano_timestamps_truncated = d.nano_truncated
        rep.file_gaps = [
            {"file_index": g.file_index, "last_ts": g.last_ts, "first_ts": g.first_ts,
             "gap_seconds": g.gap_seconds, "flagged": g.flagged}
            for g in reader.boundaries
        ]
        rep.events = list(d.events)
    if cache is not None:
        if reader is None:
            rep.packets_total = cache.packets_admitted
            rep.backwards_timestamps = cache.backwards_timestamps
        rep.late_packets_total = cache.late_packets_total
        rep.flows_created = cache.created
        rep.flows_retired = cache.retired
        rep.flows_by_end_reason = dict(sorted(cache.by_end_reason.items()))
        rep.flows_by_disposition = dict(sorted(cache.by_disposition.items()))
        rep.anomaly_flags = dict(sorted(cache.anomalies.items()))
        rep.max_concurrent_flows = cache.high_watermark
        rep.max_concurrent_ts = cache.high_watermark_ts
        if cache.created:
            rep.packets_per_flow = cache.packets_admitted / cache.created
        t = cache.timeouts
        rep.timeouts = {
            "idle_tcp": t.idle_tcp, "idle_udp": t.idle_udp, "fin_wait": t.fin_wait,
            "rst_linger": t.rst_linger, "active": t.active,
        }
    if label_errors is not None:
        rep.labels = label_errors
    return rep
