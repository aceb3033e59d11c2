"""scikit-learn style wrappers so recovery steps drop into a Pipeline.

Each estimator takes its settings as constructor parameters (so
``get_params``/``set_params``/``clone`` work) and exchanges pandas
DataFrames with the flow CSV schema.
"""

from __future__ import annotations

import os

import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import _validation as v
from .composition import detect_steady_state
from .direction import FTP_DATA_PORTS, parse_cidrs
from .features import COLUMNS, FEATURE_COLUMNS, filter_correlated, frame_to_rows, rows_to_frame
from .flows import Timeouts
from .labels import (
    ColumnMap,
    MatchTolerance,
    apply_default_labels,
    extract_signatures,
    read_legacy_csv,
    reapply_signatures,
)
from .pipeline import DropPolicy, extract_flows


class FlowExtractor(TransformerMixin, BaseEstimator):
    """Turn pcap files into a flow DataFrame.

    ``fit`` only validates the settings; ``transform`` reads the traces in
    ``X`` (a path, a list of paths read as one continuous trace, or an
    iterable of decoded packets). The last run's diagnostics are kept in
    ``diagnostics_``.
    """

    def __init__(
        self,
        idle_timeout_tcp=300.0,
        idle_timeout_udp=120.0,
        fin_wait=10.0,
        rst_linger=1.0,
        active_timeout=86400.0,
        infer_direction=True,
        reversed_service_ports=tuple(sorted(FTP_DATA_PORTS)),
        local_networks=(),
        drop="keep-all",
        sort="start-time",
        default_label="",
    ):
        self.idle_timeout_tcp = idle_timeout_tcp
        self.idle_timeout_udp = idle_timeout_udp
        self.fin_wait = fin_wait
        self.rst_linger = rst_linger
        self.active_timeout = active_timeout
        self.infer_direction = infer_direction
        self.reversed_service_ports = reversed_service_ports
        self.local_networks = local_networks
        self.drop = drop
        self.sort = sort
        self.default_label = default_label

    def fit(self, X=None, y=None):
        self.timeouts_ = Timeouts(
            idle_tcp=v.check_positive("idle_timeout_tcp", self.idle_timeout_tcp),
            idle_udp=v.check_positive("idle_timeout_udp", self.idle_timeout_udp),
            fin_wait=v.check_positive("fin_wait", self.fin_wait),
            rst_linger=v.check_positive("rst_linger", self.rst_linger),
            active=v.check_positive("active_timeout", self.active_timeout),
        )
        self.drop_policy_ = DropPolicy.parse(self.drop)
        if self.sort not in ("start-time", "retirement"):
            raise ValueError(f"sort must be 'start-time' or 'retirement', got {self.sort!r}")
        self.networks_ = parse_cidrs(self.local_networks)
        return self

    def transform(self, X):
        check_is_fitted(self, "timeouts_")
        result = extract_flows(
            v.check_trace_source(X),
            timeouts=self.timeouts_,
            infer_direction=self.infer_direction,
            reversed_service_ports=self.reversed_service_ports,
            local_networks=self.networks_,
            drop=self.drop_policy_,
            sort=self.sort,
            default_label=self.default_label,
            keep_flows=False,
            track_symbols=False,
        )
        self.diagnostics_ = result.diagnostics
        return rows_to_frame(result.rows)

    def get_feature_names_out(self, input_features=None):
        return list(COLUMNS)


class CorrelationFilter(TransformerMixin, BaseEstimator):
    """Drop constant and highly correlated flow features.

    Columns are checked in order; one is dropped when |r| with an earlier
    kept column reaches ``threshold``. Non-feature columns pass through.
    """

    def __init__(self, threshold=0.95, columns=None):
        self.threshold = threshold
        self.columns = columns

    def fit(self, X, y=None):
        v.check_fraction("threshold", self.threshold)
        cols = list(self.columns) if self.columns is not None else [c for c in FEATURE_COLUMNS if c in X.columns]
        X = v.check_flow_frame(X, required=cols)
        self.report_ = filter_correlated(X, self.threshold, cols)
        self.retained_ = list(self.report_.retained)
        self.dropped_ = list(self.report_.dropped)
        return self

    def transform(self, X):
        check_is_fitted(self, "dropped_")
        return X.drop(columns=[c for c in self.dropped_ if c in X.columns])

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "dropped_")
        return list(self.retained_)


class SignatureLabeler(TransformerMixin, BaseEstimator):
    """Learn label signatures from a legacy dataset and apply them to new flows.

    ``fit`` takes the legacy rows (DataFrame, CSV path or list of dicts).
    ``transform`` takes recovered flows, sets every label to
    ``default_label`` and then relabels signature matches. Details of the
    last run are in ``result_``.
    """

    def __init__(
        self,
        default_label="normal",
        ts_tolerance=5.0,
        duration_tolerance=1.0,
        duration_fraction=0.1,
        score_threshold=0.5,
        ts_weight=0.6,
        duration_weight=0.4,
        column_map=None,
    ):
        self.default_label = default_label
        self.ts_tolerance = ts_tolerance
        self.duration_tolerance = duration_tolerance
        self.duration_fraction = duration_fraction
        self.score_threshold = score_threshold
        self.ts_weight = ts_weight
        self.duration_weight = duration_weight
        self.column_map = column_map

    def _colmap(self) -> ColumnMap:
        if self.column_map is None:
            return ColumnMap()
        if isinstance(self.column_map, ColumnMap):
            return self.column_map
        return ColumnMap.from_mapping(self.column_map)

    def fit(self, X, y=None):
        if isinstance(X, pd.DataFrame):
            records = X.astype(str).replace({"nan": "", "<NA>": "", "None": ""}).to_dict("records")
        elif isinstance(X, (str, os.PathLike)):
            records = read_legacy_csv(X)
        else:
            records = list(X)
        self.tolerance_ = MatchTolerance(
            ts_tolerance=self.ts_tolerance,
            duration_tolerance=self.duration_tolerance,
            duration_fraction=self.duration_fraction,
            score_threshold=self.score_threshold,
            ts_weight=self.ts_weight,
            duration_weight=self.duration_weight,
        )
        self.signatures_, self.parse_errors_ = extract_signatures(records, self.default_label, self._colmap())
        return self

    def transform(self, X):
        check_is_fitted(self, "signatures_")
        X = v.check_full_schema(X)
        rows = apply_default_labels(frame_to_rows(X), self.default_label)
        self.result_ = reapply_signatures(rows, self.signatures_, self.tolerance_)
        self.result_.parse_errors = list(self.parse_errors_)
        return rows_to_frame(self.result_.rows)


class SteadyStateDetector(TransformerMixin, BaseEstimator):
    """Find the steady phase of a trace and keep the flows that start in it."""

    def __init__(self, window=60.0, ratio_threshold=0.9, step=None):
        self.window = window
        self.ratio_threshold = ratio_threshold
        self.step = step

    def fit(self, X, y=None):
        X = v.check_flow_frame(X)
        rows = X[["start_ts", "end_ts", "disposition"]].itertuples(index=False)
        self.report_ = detect_steady_state(list(rows), self.window, self.ratio_threshold, self.step)
        self.steady_start_ts_ = self.report_.steady_start_ts
        self.steady_end_ts_ = self.report_.steady_end_ts
        return self

    def transform(self, X):
        check_is_fitted(self, "report_")
        X = v.check_flow_frame(X)
        if self.steady_start_ts_ is None:
            return X.iloc[0:0]
        mask = (X["start_ts"] >= self.steady_start_ts_) & (X["start_ts"] <= self.steady_end_ts_)
        return X[mask]
