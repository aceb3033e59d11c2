"""End-to-end flow extraction from pcap files."""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .composition import DiagnosticsReport, build_diagnostics
from .features import FeatureRow, finalize_row, sort_rows
from .flows import Disposition, FlowCache, FlowRecord, Timeouts
from .pcap import PacketRecord, TraceReader, open_trace


class DropPolicy(str, enum.Enum):
    KEEP_ALL = "keep-all"
    DROP_UNINITIALISED = "drop-uninitialised"
    DROP_UNTERMINATED = "drop-unterminated"
    DROP_BOTH = "drop-both"

    @classmethod
    def parse(cls, text: str | "DropPolicy") -> "DropPolicy":
        if isinstance(text, cls):
            return text
        aliases = {"none": "keep-all", "all": "keep-all", "uninitialised": "drop-uninitialised",
                   "unterminated": "drop-unterminated", "both": "drop-both"}
        return cls(aliases.get(text, text))

    def keeps(self, disposition: str) -> bool:
        if self is DropPolicy.KEEP_ALL:
            return True
        if self is DropPolicy.DROP_UNINITIALISED:
            return disposition not in (Disposition.UNINITIALISED.value, Disposition.PARTIAL_BOTH.value)
        if self is DropPolicy.DROP_UNTERMINATED:
            return disposition not in (Disposition.UNTERMINATED.value, Disposition.PARTIAL_BOTH.value)
        return disposition == Disposition.COMPLETE.value


@dataclass
class Extraction:
    rows: list[FeatureRow]
    flows: list[FlowRecord]
    cache: FlowCache
    reader: TraceReader | None
    diagnostics: DiagnosticsReport
    dropped: int = 0
    skipped_before_start: int = 0


def _drive(cache: FlowCache, packets: Iterable[PacketRecord], start_ts: int | None) -> int:
    skipped = 0
    for pkt in packets:
        if start_ts is not None and pkt.ts < start_ts:
            skipped += 1
            continue
        cache.admit(pkt)
    cache.finalize_all()
    return skipped


def extract_flows(
    source: Sequence[str | os.PathLike] | str | os.PathLike | Iterable[PacketRecord],
    timeouts: Timeouts | None = None,
    infer_direction: bool = True,
    reversed_service_ports: Iterable[int] | None = None,
    local_networks: Sequence = (),
    drop: DropPolicy | str = DropPolicy.KEEP_ALL,
    sort: str = "start-time",
    default_label: str = "",
    start_ts: int | None = None,
    keep_flows: bool = True,
    track_symbols: bool = True,
) -> Extraction:
    """Run flow recovery over pcap paths (or already decoded packets).

    The drop policy only filters the exported rows; flow counters and
    diagnostics always cover the whole trace. ``start_ts`` (microseconds)
    skips packets before that time, e.g. to start at a detected steady
    state.
    """
    kwargs = {"timeouts": timeouts, "infer_direction": infer_direction, "track_symbols": track_symbols}
    if reversed_service_ports is not None:
        kwargs["reversed_service_ports"] = reversed_service_ports
    cache = FlowCache(**kwargs)
    policy = DropPolicy.parse(drop)

    reader = None
    if isinstance(source, (str, os.PathLike)) or (
        isinstance(source, (list, tuple)) and source and isinstance(source[0], (str, os.PathLike))
    ):
        reader = open_trace(source)
        with reader:
            skipped = _drive(cache, reader, start_ts)
    else:
        skipped = _drive(cache, source, start_ts)

    flows = cache.retired_sink
    rows = []
    dropped = 0
    for rec in flows:
        row = finalize_row(rec, local_networks)
        if not policy.keeps(row.disposition):
            dropped += 1
            continue
        if default_label:
            row = replace(row, label=default_label)
        rows.append(row)
    rows = sort_rows(rows, sort)

    diag = build_diagnostics(reader, cache)
    diag.flows_exported = len(rows)
    diag.flows_dropped = dropped
    if skipped:
        diag.events.append(f"{skipped} packets before start timestamp {start_ts} ignored")
    if not keep_flows:
        cache.retired_sink = []
        flows = []
    return Extraction(rows, list(flows), cache, reader, diag, dropped, skipped)

