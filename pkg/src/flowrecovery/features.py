"""Per-direction flow statistics, feature rows and the flow CSV file."""

from __future__ import annotations

import csv
import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .direction import orient
from .pcap import PacketRecord, TcpFlags

if TYPE_CHECKING:
    from .flows import FlowRecord

FLAG_NAMES = ("syn", "ack", "fin", "rst", "psh", "urg")
_FLAG_BITS = tuple(TcpFlags[name.upper()] for name in FLAG_NAMES)


class InsufficientRows(ValueError):
    pass


@dataclass
class RunningStats:
    """Single-pass min/max/mean/variance (Welford)."""

    n: int = 0
    min: float | None = None
    max: float | None = None
    mean: float = 0.0
    m2: float = 0.0

    def add(self, x: float) -> None:
        self.n += 1
        if self.n == 1:
            self.min = self.max = x
        else:
            if x < self.min:
                self.min = x
            if x > self.max:
                self.max = x
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    @property
    def variance(self) -> float | None:
        """Population variance; ``None`` before the first sample."""
        if self.n == 0:
            return None
        return max(self.m2 / self.n, 0.0)

    @property
    def std(self) -> float | None:
        var = self.variance
        return None if var is None else math.sqrt(var)


@dataclass
class DirStats:
    """Accumulated statistics for one direction of a flow."""

    packets: int = 0
    bytes: int = 0
    payload_bytes: int = 0
    pkt_len: RunningStats = field(default_factory=RunningStats)
    iat: RunningStats = field(default_factory=RunningStats)
    last_ts: int | None = None
    flags: list[int] = field(default_factory=lambda: [0] * len(FLAG_NAMES))
    byte_histogram: np.ndarray | None = None

    def update(self, pkt: PacketRecord) -> None:
        self.packets += 1
        self.bytes += pkt.ip_len
        self.payload_bytes += pkt.payload_len
        self.pkt_len.add(pkt.ip_len)
        if self.last_ts is not None:
            self.iat.add(max(pkt.ts - self.last_ts, 0))
        self.last_ts = pkt.ts if self.last_ts is None else max(self.last_ts, pkt.ts)
        fl = pkt.tcp_flags
        if fl:
            for i, bit in enumerate(_FLAG_BITS):
                if fl & bit:
                    self.flags[i] += 1
        if pkt.payload:
            counts = np.bincount(np.frombuffer(pkt.payload, dtype=np.uint8), minlength=256)
            if self.byte_histogram is None:
                self.byte_histogram = counts.astype(np.int64)
            else:
                self.byte_histogram += counts

    def flag_count(self, name: str) -> int:
        return self.flags[FLAG_NAMES.index(name)]

    @property
    def entropy(self) -> float:
        if self.byte_histogram is None:
            return 0.0
        return payload_entropy(self.byte_histogram)


def update_stats(flow: "FlowRecord", pkt: PacketRecord, forward: bool) -> "FlowRecord":
    """Fold ``pkt`` into the forward or backward statistics of ``flow``."""
    (flow.fwd if forward else flow.bwd).update(pkt)
    if pkt.truncated:
        flow.truncated = True
    return flow


def payload_entropy(histogram: Sequence[int] | np.ndarray) -> float:
    """Shannon entropy in bits per byte of a 256-bin byte histogram."""
    counts = np.asarray(histogram, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts[counts > 0] / total
    h = float(-(p * np.log2(p)).sum())
    return min(max(0.0, h), 8.0)


@dataclass(frozen=True)
class FeatureRow:
    """One exported flow. Field order is the CSV column order."""

    flow_id: int
    start_ts: int
    end_ts: int
    duration_us: int
    proto: int
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    direction_method: str
    orientation: str
    fwd_pkts: int
    bwd_pkts: int
    fwd_bytes: int
    bwd_bytes: int
    fwd_payload_bytes: int
    bwd_payload_bytes: int
    fwd_len_min: int | None
    fwd_len_max: int | None
    fwd_len_mean: float | None
    fwd_len_std: float | None
    bwd_len_min: int | None
    bwd_len_max: int | None
    bwd_len_mean: float | None
    bwd_len_std: float | None
    fwd_iat_min: int | None
    fwd_iat_max: int | None
    fwd_iat_mean: float | None
    fwd_iat_std: float | None
    bwd_iat_min: int | None
    bwd_iat_max: int | None
    bwd_iat_mean: float | None
    bwd_iat_std: float | None
    syn_fwd: int
    syn_bwd: int
    ack_fwd: int
    ack_bwd: int
    fin_fwd: int
    fin_bwd: int
    rst_fwd: int
    rst_bwd: int
    psh_fwd: int
    psh_bwd: int
    urg_fwd: int
    urg_bwd: int
    entropy_fwd: float
    entropy_bwd: float
    truncated: int
    disposition: str
    end_reason: str
    late_packets: int
    label: str = ""

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in COLUMNS}


COLUMNS: tuple[str, ...] = tuple(f.name for f in dataclasses.fields(FeatureRow))

_INT_COLUMNS = frozenset(
    f.name for f in dataclasses.fields(FeatureRow) if f.type in ("int", "int | None")
)
_FLOAT_COLUMNS = frozenset(
    f.name for f in dataclasses.fields(FeatureRow) if f.type in ("float", "float | None")
)
NUMERIC_COLUMNS = tuple(c for c in COLUMNS if c in _INT_COLUMNS or c in _FLOAT_COLUMNS)

# statistical columns used for correlation filtering; identifiers and
# timestamps are excluded
FEATURE_COLUMNS: tuple[str, ...] = ("duration_us",) + COLUMNS[COLUMNS.index("fwd_pkts"):COLUMNS.index("truncated")]


def _dir_projection(prefix: str, stats: DirStats) -> dict:
    ln, iat = stats.pkt_len, stats.iat
    has_iat = iat.n >= 1
    return {
        f"{prefix}_pkts": stats.packets,
        f"{prefix}_bytes": stats.bytes,
        f"{prefix}_payload_bytes": stats.payload_bytes,
        f"{prefix}_len_min": ln.min,
        f"{prefix}_len_max": ln.max,
        f"{prefix}_len_mean": ln.mean if ln.n else None,
        f"{prefix}_len_std": ln.std,
        f"{prefix}_iat_min": iat.min if has_iat else None,
        f"{prefix}_iat_max": iat.max if has_iat else None,
        f"{prefix}_iat_mean": iat.mean if has_iat else None,
        f"{prefix}_iat_std": iat.std if has_iat else None,
    }


def finalize_row(flow: "FlowRecord", local_networks: Sequence = ()) -> FeatureRow:
    """Freeze a retired flow into an exportable row.

    Endpoints are rendered initiator first, so a flow whose direction was
    decided as reverse has its stored key flipped here.
    """
    values = {
        "flow_id": flow.flow_id,
        "start_ts": flow.start_ts,
        "end_ts": flow.last_ts,
        "duration_us": flow.last_ts - flow.start_ts,
        "proto": flow.key.proto,
        "src_ip": flow.src_ip,
        "src_port": flow.src_port,
        "dst_ip": flow.dst_ip,
        "dst_port": flow.dst_port,
        "direction_method": flow.direction_method.value,
        "orientation": orient(flow, local_networks).value,
    }
    values.update(_dir_projection("fwd", flow.fwd))
    values.update(_dir_projection("bwd", flow.bwd))
    for i, name in enumerate(FLAG_NAMES):
        values[f"{name}_fwd"] = flow.fwd.flags[i]
        values[f"{name}_bwd"] = flow.bwd.flags[i]
    values["entropy_fwd"] = flow.fwd.entropy
    values["entropy_bwd"] = flow.bwd.entropy
    values["truncated"] = int(flow.truncated)
    values["disposition"] = flow.disposition.value
    values["end_reason"] = flow.end_reason.value
    values["late_packets"] = flow.late_packets
    values["label"] = ""
    return FeatureRow(**values)


# -- CSV ----------------------------------------------------------------

def _render(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(round(value, 6))
    return str(value)


def _parse(name: str, text: str):
    if name in _INT_COLUMNS:
        if text == "":
            return None
        return int(text)
    if name in _FLOAT_COLUMNS:
        if text == "":
            return None
        return float(text)
    return text


def sort_rows(rows: Iterable[FeatureRow], sort: str = "start-time") -> list[FeatureRow]:
    rows = list(rows)
    if sort in ("start-time", "by-start-time"):
        return sorted(rows, key=lambda r: (r.start_ts, r.flow_id))
    if sort in ("retirement", "by-retirement"):
        return rows
    raise ValueError(f"unknown sort mode {sort!r}")


def write_flow_file(
    rows: Iterable[FeatureRow],
    path: str | os.PathLike,
    sort: str = "start-time",
    columns: Sequence[str] | None = None,
) -> int:
    """Write rows as CSV and return how many were written.

    ``sort="start-time"`` orders by first packet time (ties by flow id);
    ``"retirement"`` keeps the order given. ``columns`` selects a subset
    (kept in canonical order) for a reduced export.
    """
    cols = COLUMNS if columns is None else select_columns(columns)
    ordered = sort_rows(rows, sort)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for row in ordered:
            writer.writerow([_render(getattr(row, c)) for c in cols])
    return len(ordered)


def select_columns(names: Iterable[str]) -> tuple[str, ...]:
    wanted = set(names)
    unknown = wanted - set(COLUMNS)
    if unknown:
        raise ValueError(f"unknown feature columns: {', '.join(sorted(unknown))}")
    return tuple(c for c in COLUMNS if c in wanted)


def load_feature_subset(path: str | os.PathLike) -> tuple[str, ...]:
    """Column names, one per line (``#`` comments allowed)."""
    with open(path, encoding="utf-8") as fh:
        names = [line.split("#", 1)[0].strip() for line in fh]
    return select_columns(n for n in names if n)


def read_flow_file(path: str | os.PathLike) -> list[FeatureRow]:
    """Parse a full-schema flow CSV back into rows."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise ValueError(f"{path}: missing flow columns: {', '.join(missing)}")
        return [FeatureRow(**{c: _parse(c, rec[c]) for c in COLUMNS}) for rec in reader]


def rows_to_frame(rows: Iterable[FeatureRow]):
    import pandas as pd

    records = [r.as_dict() for r in rows]
    return pd.DataFrame.from_records(records, columns=list(COLUMNS))


def frame_to_rows(frame) -> list[FeatureRow]:
    out = []
    for rec in frame[list(COLUMNS)].to_dict("records"):
        values = {}
        for c in COLUMNS:
            v = rec[c]
            if isinstance(v, float) and math.isnan(v):
                v = None
            elif c in _INT_COLUMNS and v is not None:
                v = int(v)
            elif c in _FLOAT_COLUMNS and v is not None:
                v = float(v)
            elif v is None:
                v = ""
            values[c] = v
        out.append(FeatureRow(**values))
    return out


# -- correlation filtering ----------------------------------------------

@dataclass
class CorrelationReport:
    retained: list[str]
    dropped_constant: list[str]
    dropped_pairs: list[tuple[str, str, float]]

    @property
    def dropped(self) -> list[str]:
        return self.dropped_constant + [p[0] for p in self.dropped_pairs]


def _column_matrix(rows, columns: Sequence[str]) -> np.ndarray:
    if hasattr(rows, "columns"):
        return rows[list(columns)].to_numpy(dtype=np.float64, na_value=np.nan)
    data = [[np.nan if getattr(r, c) is None else getattr(r, c) for c in columns] for r in rows]
    return np.asarray(data, dtype=np.float64).reshape(len(data), len(columns))


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson r over rows where both values are present; 0 when undefined."""
    mask = ~(np.isnan(x) | np.isnan(y))
    if mask.sum() < 2:
        return 0.0
    xs, ys = x[mask], y[mask]
    xs = xs - xs.mean()
    ys = ys - ys.mean()
    denom = math.sqrt(float((xs * xs).sum()) * float((ys * ys).sum()))
    if denom == 0.0:
        return 0.0
    return float((xs * ys).sum()) / denom


def filter_correlated(
    rows,
    threshold: float = 0.95,
    columns: Sequence[str] | None = None,
) -> CorrelationReport:
    """Greedy removal of constant and highly correlated numeric columns.

    Columns are visited in header order. Constant columns go first; then a
    column is dropped when its absolute Pearson correlation with any column
    already retained reaches ``threshold``. ``rows`` may be a list of
    :class:`FeatureRow` or a DataFrame.
    """
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    n = len(rows)
    if n < 2:
        raise InsufficientRows(f"correlation filtering needs at least 2 rows, got {n}")
    if columns is None:
        columns = FEATURE_COLUMNS
    columns = list(columns)
    matrix = _column_matrix(rows, columns)

    constant = []
    candidates = []
    for j, name in enumerate(columns):
        col = matrix[:, j]
        present = col[~np.isnan(col)]
        if present.size < 2 or np.all(present == present[0]):
            constant.append(name)
        else:
            candidates.append(j)

    retained: list[int] = []
    pairs = []
    for j in candidates:
        hit = None
        for k in retained:
            r = pearson(matrix[:, j], matrix[:, k])
            if abs(r) >= threshold:
                hit = (columns[j], columns[k], r)
                break
        if hit is None:
            retained.append(j)
        else:
            pairs.append(hit)
    return CorrelationReport([columns[j] for j in retained], constant, pairs)
