"""Recover bidirectional flow records from packet traces."""

from .composition import (
    DiagnosticsReport,
    PhaseReport,
    build_diagnostics,
    detect_steady_state,
    export_symbol_sequences,
    flag_token,
)
from .direction import classify_port, infer_direction, orient
from .features import (
    COLUMNS,
    FeatureRow,
    filter_correlated,
    finalize_row,
    payload_entropy,
    read_flow_file,
    write_flow_file,
)
from .flows import FlowCache, FlowKey, FlowRecord, Timeouts, estimate_cache_bytes, make_key
from .labels import (
    ColumnMap,
    MatchTolerance,
    apply_default_labels,
    extract_signatures,
    reapply_signatures,
)
from .pcap import PacketRecord, TcpFlags, chain_continuity, open_trace
from .pipeline import DropPolicy, extract_flows
from .synth import Scenario, synth, write_pcap

__version__ = "0.1.0"
