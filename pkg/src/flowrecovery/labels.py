"""Carry labels from a legacy flow dataset over to recovered flows.

Legacy rows with a non-default label become signatures (start time,
duration, protocol, unordered address pair, unordered port pair, label).
Each signature is looked up among the new rows by protocol and pairs, and
the best candidate by a weighted time/duration score receives the label.
"""

from __future__ import annotations

import csv
import dataclasses
import os
import re
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Iterable, Mapping, Sequence

from .config import read_key_values
from .features import FeatureRow

PROTO_NAMES = {"tcp": 6, "udp": 17, "icmp": 1, "icmpv6": 58, "sctp": 132, "gre": 47, "esp": 50}


class LabelError(ValueError):
    pass


class MissingColumn(LabelError):
    pass


@dataclass
class UnparseableRow:
    row: int
    column: str
    value: str
    reason: str


@dataclass(frozen=True)
class ColumnMap:
    """Where the signature fields live in a legacy CSV and how to read them.

    ``ts_format`` is ``epoch_s``, ``epoch_ms``, ``epoch_us`` or a
    ``strptime`` pattern. Naive calendar timestamps are shifted by
    ``utc_offset_hours`` (local time minus UTC) to get UTC.
    """

    timestamp: str = "start_ts"
    duration: str = "duration_us"
    proto: str = "proto"
    src_ip: str = "src_ip"
    dst_ip: str = "dst_ip"
    src_port: str = "src_port"
    dst_port: str = "dst_port"
    label: str = "label"
    ts_format: str = "epoch_us"
    duration_unit: str = "us"
    utc_offset_hours: float = 0.0

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ColumnMap":
        return cls.from_mapping(read_key_values(path))

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "ColumnMap":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for k, v in values.items():
            if k not in known:
                raise LabelError(f"unknown column-map key {k!r}")
            kwargs[k] = float(v) if k == "utc_offset_hours" else v
        return cls(**kwargs)

    def required(self) -> tuple[str, ...]:
        return (self.timestamp, self.duration, self.proto, self.src_ip, self.dst_ip,
                self.src_port, self.dst_port, self.label)


@dataclass(frozen=True)
class FlowSignature:
    ts: int
    duration: int
    proto: int
    addr_pair: tuple[str, str]
    port_pair: tuple[int, int]
    label: str
    row: int = -1

    @property
    def match_key(self) -> tuple:
        return (self.proto, self.addr_pair, self.port_pair)


@dataclass(frozen=True)
class MatchTolerance:
    """Relaxed matching bounds; times in seconds.

    The duration bound is ``max(duration_tolerance, duration_fraction *
    signature duration)``.
    """

    ts_tolerance: float = 5.0
    duration_tolerance: float = 1.0
    duration_fraction: float = 0.1
    score_threshold: float = 0.5
    ts_weight: float = 0.6
    duration_weight: float = 0.4

    def __post_init__(self):
        for name in ("ts_tolerance", "duration_tolerance", "duration_fraction", "ts_weight", "duration_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.score_threshold <= 1:
            raise ValueError("score_threshold must be in (0, 1]")

    @classmethod
    def exact(cls) -> "MatchTolerance":
        return cls(ts_tolerance=0.0, duration_tolerance=0.0, duration_fraction=0.0)


@dataclass
class UnmatchedSignature:
    signature: FlowSignature
    reason: str  # "no-candidate" | "below-threshold"
    nearest_flow_id: int | None = None
    nearest_score: float | None = None
    nearest_dts_us: int | None = None
    nearest_dduration_us: int | None = None


@dataclass
class LabelResult:
    rows: list[FeatureRow]
    relabelled: int
    unmatched: list[UnmatchedSignature] = field(default_factory=list)
    conflicts: int = 0
    parse_errors: list[UnparseableRow] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "signatures": self.relabelled + len(self.unmatched) + self.conflicts,
            "relabelled": self.relabelled,
            "unmatched": len(self.unmatched),
            "conflicts": self.conflicts,
            "parse_errors": len(self.parse_errors),
        }


def apply_default_labels(rows: Iterable[FeatureRow], default_label: str) -> list[FeatureRow]:
    return [dataclasses.replace(r, label=default_label) for r in rows]


# -- parsing ------------------------------------------------------------

_INT_RE = re.compile(r"^[+-]?\d+$")
_NUM_RE = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")


def _number(text: str) -> float:
    text = text.strip()
    if not _NUM_RE.match(text):
        raise ValueError(f"not a decimal number: {text!r}")
    return float(text)


def _port(text: str) -> int:
    text = text.strip()
    if not _INT_RE.match(text):
        raise ValueError(f"not an integer port: {text!r}")
    port = int(text)
    if not 0 <= port <= 65535:
        raise ValueError(f"port out of range: {port}")
    return port


def parse_proto(text: str) -> int:
    t = text.strip().lower()
    if t in PROTO_NAMES:
        return PROTO_NAMES[t]
    if _INT_RE.match(t) and 0 <= int(t) <= 255:
        return int(t)
    raise ValueError(f"unknown protocol {text!r}")


_UNIT_US = {"s": 1_000_000, "ms": 1_000, "us": 1}


def parse_timestamp(text: str, colmap: ColumnMap) -> int:
    fmt = colmap.ts_format
    if fmt.startswith("epoch_"):
        unit = fmt[len("epoch_"):]
        if unit not in _UNIT_US:
            raise LabelError(f"unknown epoch unit in ts_format {fmt!r}")
        return int(round(_number(text) * _UNIT_US[unit]))
    dt = datetime.strptime(text.strip(), fmt)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc) - timedelta(hours=colmap.utc_offset_hours)
    epoch = datetime(1970, 1, 1, tzinfo=timezone.utc)
    delta = dt - epoch
    return (delta.days * 86400 + delta.seconds) * 1_000_000 + delta.microseconds


def parse_duration(text: str, colmap: ColumnMap) -> int:
    if colmap.duration_unit not in _UNIT_US:
        raise LabelError(f"unknown duration unit {colmap.duration_unit!r}")
    value = _number(text)
    if value < 0:
        raise ValueError(f"negative duration {value}")
    return int(round(value * _UNIT_US[colmap.duration_unit]))


def read_legacy_csv(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh, skipinitialspace=True)
        if reader.fieldnames:
            reader.fieldnames = [name.strip() for name in reader.fieldnames]
        return list(reader)


def extract_signatures(
    legacy_rows: Sequence[Mapping[str, str]],
    default_label: str,
    colmap: ColumnMap | None = None,
) -> tuple[list[FlowSignature], list[UnparseableRow]]:
    """Build one signature per legacy row whose label is not the default.

    Missing columns raise :class:`MissingColumn`. Rows that fail to parse
    are returned as :class:`UnparseableRow` entries and skipped.
    """
    colmap = colmap or ColumnMap()
    if legacy_rows:
        present = set(legacy_rows[0].keys())
        missing = [c for c in colmap.required() if c not in present]
        if missing:
            raise MissingColumn(f"legacy data lacks columns: {', '.join(missing)}")
    sigs: list[FlowSignature] = []
    errors: list[UnparseableRow] = []
    default = default_label.strip()
    for i, rec in enumerate(legacy_rows, start=1):
        label = (rec.get(colmap.label) or "").strip()
        if not label or label == default:
            continue
        column = ""
        try:
            column = colmap.timestamp
            ts = parse_timestamp(rec[column], colmap)
            column = colmap.duration
            duration = parse_duration(rec[column], colmap)
            column = colmap.proto
            proto = parse_proto(rec[column])
            column = colmap.src_ip
            src_ip = rec[column].strip()
            column = colmap.dst_ip
            dst_ip = rec[column].strip()
            if not src_ip or not dst_ip:
                raise ValueError("empty address")
            column = colmap.src_port
            sport = _port(rec[column])
            column = colmap.dst_port
            dport = _port(rec[column])
        except (ValueError, TypeError, AttributeError) as exc:
            errors.append(UnparseableRow(i, column, str(rec.get(column)), str(exc)))
            continue
        sigs.append(FlowSignature(
            ts=ts,
            duration=duration,
            proto=proto,
            addr_pair=tuple(sorted((src_ip, dst_ip))),
            port_pair=tuple(sorted((sport, dport))),
            label=label,
            row=i,
        ))
    return sigs, errors


def row_match_key(row: FeatureRow) -> tuple:
    return (
        int(row.proto),
        tuple(sorted((row.src_ip, row.dst_ip))),
        tuple(sorted((int(row.src_port), int(row.dst_port)))),
    )


def _closeness(delta: int, tolerance: int) -> float:
    if tolerance <= 0:
        return 1.0 if delta == 0 else 0.0
    return max(0.0, 1.0 - delta / tolerance)


def match_score(sig: FlowSignature, row: FeatureRow, tol: MatchTolerance) -> tuple[float, int, int]:
    """(score, |dts|, |dduration|) for one signature/row pair."""
    dts = abs(row.start_ts - sig.ts)
    ddur = abs(row.duration_us - sig.duration)
    ts_tol = int(round(tol.ts_tolerance * 1e6))
    dur_tol = max(int(round(tol.duration_tolerance * 1e6)), int(round(tol.duration_fraction * sig.duration)))
    score = tol.ts_weight * _closeness(dts, ts_tol) + tol.duration_weight * _closeness(ddur, dur_tol)
    return score, dts, ddur


def reapply_signatures(
    rows: Sequence[FeatureRow],
    sigs: Sequence[FlowSignature],
    tol: MatchTolerance | None = None,
) -> LabelResult:
    """Relabel rows from signatures.

    Each signature labels at most its best candidate, and only when the
    score reaches ``tol.score_threshold``. A row claimed by an earlier
    signature keeps its label and the later one counts as a conflict.
    """
    tol = tol or MatchTolerance()
    index: dict[tuple, list[int]] = defaultdict(list)
    for i, row in enumerate(rows):
        index[row_match_key(row)].append(i)

    labels: dict[int, str] = {}
    unmatched: list[UnmatchedSignature] = []
    conflicts = 0
    for sig in sigs:
        candidates = index.get(sig.match_key)
        if not candidates:
            unmatched.append(UnmatchedSignature(sig, "no-candidate"))
            continue
        scored = []
        for i in candidates:
            score, dts, ddur = match_score(sig, rows[i], tol)
            scored.append((-score, dts, rows[i].flow_id, i, ddur))
        scored.sort()
        neg_score, dts, flow_id, best, ddur = scored[0]
        score = -neg_score
        if score < tol.score_threshold:
            unmatched.append(UnmatchedSignature(sig, "below-threshold", flow_id, score, dts, ddur))
            continue
        if best in labels:
            conflicts += 1
            continue
        labels[best] = sig.label

    out = [dataclasses.replace(r, label=labels[i]) if i in labels else r for i, r in enumerate(rows)]
    return LabelResult(out, relabelled=len(labels), unmatched=unmatched, conflicts=conflicts)


def write_unmatched(unmatched: Iterable[UnmatchedSignature], path: str | os.PathLike) -> int:
    cols = ["legacy_row", "label", "ts", "duration_us", "proto", "addr_a", "addr_b", "port_a", "port_b",
            "reason", "nearest_flow_id", "nearest_score", "nearest_dts_us", "nearest_dduration_us"]
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for u in unmatched:
            s = u.signature
            w.writerow([
                s.row, s.label, s.ts, s.duration, s.proto, *s.addr_pair, *s.port_pair, u.reason,
                "" if u.nearest_flow_id is None else u.nearest_flow_id,
                "" if u.nearest_score is None else repr(round(u.nearest_score, 6)),
                "" if u.nearest_dts_us is None else u.nearest_dts_us,
                "" if u.nearest_dduration_us is None else u.nearest_dduration_us,
            ])
            n += 1
    return n
