"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numbers
import os

import pandas as pd

from .features import COLUMNS, FeatureRow, rows_to_frame


def check_positive(name: str, value) -> float:
    if not isinstance(value, numbers.Real) or isinstance(value, bool) or not value > 0:
        raise ValueError(f"{name} must be a positive number, got {value!r}")
    return float(value)


def check_fraction(name: str, value, allow_zero: bool = False) -> float:
    if not isinstance(value, numbers.Real) or isinstance(value, bool):
        raise ValueError(f"{name} must be a number, got {value!r}")
    low_ok = value >= 0 if allow_zero else value > 0
    if not (low_ok and value <= 1):
        bounds = "[0, 1]" if allow_zero else "(0, 1]"
        raise ValueError(f"{name} must be in {bounds}, got {value!r}")
    return float(value)


def check_flow_frame(X, required=("start_ts", "end_ts", "disposition")) -> pd.DataFrame:
    """Accept a DataFrame, a flow CSV path or a list of FeatureRow."""
    if isinstance(X, (str, os.PathLike)):
        X = pd.read_csv(X, keep_default_na=True)
    elif isinstance(X, (list, tuple)) and (not X or isinstance(X[0], FeatureRow)):
        X = rows_to_frame(X)
    if not isinstance(X, pd.DataFrame):
        raise TypeError(f"expected a DataFrame of flows, got {type(X).__name__}")
    missing = [c for c in required if c not in X.columns]
    if missing:
        raise ValueError(f"flow frame lacks columns: {', '.join(missing)}")
    return X


def check_full_schema(X) -> pd.DataFrame:
    return check_flow_frame(X, required=COLUMNS)


def check_trace_source(X):
    """Normalise a path, a list of paths or an iterable of packets."""
    if isinstance(X, (str, os.PathLike)):
        return [X]
    if isinstance(X, (list, tuple)):
        if not X:
            raise ValueError("no trace files given")
        return list(X)
    if hasattr(X, "__iter__"):
        return X
    raise TypeError(f"cannot read packets from {type(X).__name__}")
