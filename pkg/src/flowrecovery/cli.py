"""Command-line front end.

Subcommands: extract, labels, analyze, symbols, synth. Exit status is 0 on
success, 1 on data errors (a diagnostics report is still written where
possible) and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Sequence

from .composition import build_diagnostics, detect_steady_state, export_symbol_sequences
from .config import ConfigError, read_key_values
from .direction import FTP_DATA_PORTS, MalformedCidr, load_cidr_file, parse_cidrs
from .features import (
    COLUMNS,
    FEATURE_COLUMNS,
    InsufficientRows,
    filter_correlated,
    load_feature_subset,
    read_flow_file,
    write_flow_file,
)
from .flows import Timeouts
from .labels import (
    ColumnMap,
    LabelError,
    MatchTolerance,
    apply_default_labels,
    extract_signatures,
    read_legacy_csv,
    reapply_signatures,
    write_unmatched,
)
from .pcap import PcapError
from .pipeline import DropPolicy, extract_flows
from .synth import InvalidScenario, Scenario, synth_packets, write_pcap

EXIT_OK = 0
EXIT_DATA = 1
EXIT_USAGE = 2

_DATA_ERRORS = (PcapError, LabelError, ConfigError, InvalidScenario, InsufficientRows, OSError, ValueError)


class UsageError(Exception):
    pass


def _positive(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return value


def _non_negative(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def _fraction(text: str) -> float:
    value = float(text)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError(f"must be in (0, 1], got {text}")
    return value


def _ports(text: str) -> list[int]:
    try:
        ports = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad port list {text!r}") from None
    if any(not 0 <= p <= 65535 for p in ports):
        raise argparse.ArgumentTypeError(f"port out of range in {text!r}")
    return ports


def _drop(text: str) -> DropPolicy:
    try:
        return DropPolicy.parse(text)
    except ValueError:
        choices = ", ".join(p.value for p in DropPolicy)
        raise argparse.ArgumentTypeError(f"unknown drop policy {text!r} (choose from {choices})") from None


def _add_timeouts(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("timeouts (seconds)")
    g.add_argument("--idle-timeout-tcp", type=_positive, default=300.0, help="TCP idle timeout")
    g.add_argument("--idle-timeout-udp", type=_positive, default=120.0,
                   help="also used for other IP protocols")
    g.add_argument("--fin-wait", type=_positive, default=10.0, help="hold after the last FIN")
    g.add_argument("--rst-linger", type=_positive, default=1.0, help="hold after a RST")
    g.add_argument("--active-timeout", type=_positive, default=86400.0, help="maximum flow lifetime")


def _add_direction(p: argparse.ArgumentParser) -> None:
    p.add_argument("--no-infer", dest="infer_direction", action="store_false",
                   help="keep the first packet's orientation instead of inferring the initiator")
    p.add_argument("--ftp-ports", type=_ports, default=",".join(map(str, sorted(FTP_DATA_PORTS))),
                   help="comma-separated ports whose holder opens the connection")


def _timeouts(args) -> Timeouts:
    return Timeouts(idle_tcp=args.idle_timeout_tcp, idle_udp=args.idle_timeout_udp, fin_wait=args.fin_wait,
                    rst_linger=args.rst_linger, active=args.active_timeout)


def _diag_paths(args, default_stem: str) -> tuple[str, str]:
    stem = args.diagnostics or default_stem
    return stem + ".json", stem + ".txt"


class _DefaultsFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show the default of every option, including ones without help text."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "%(default)" in text or "(default" in text or action.default is argparse.SUPPRESS:
            return text
        if action.option_strings and action.nargs != 0:
            text += " (default: %(default)s)"
        return text


def build_parser() -> argparse.ArgumentParser:
    fmt = _DefaultsFormatter
    parser = argparse.ArgumentParser(
        prog="flowrecovery",
        description="Recover bidirectional flows from pcap traces and carry labels across datasets.",
        formatter_class=fmt,
    )
    parser.add_argument("--config", help="key = value file; keys are long option names of the subcommand")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("extract", help="pcap files to flow CSV", formatter_class=fmt)
    p.add_argument("--in", dest="inputs", action="append", required=True, metavar="PCAP",
                   help="input trace; repeat to read several files as one continuous trace")
    p.add_argument("--out", required=True, help="flow CSV to write")
    p.add_argument("--sort", choices=["start-time", "retirement"], default="start-time", help="row order")
    p.add_argument("--drop", type=_drop, default="keep-all",
                   help="keep-all, drop-uninitialised, drop-unterminated or drop-both")
    _add_timeouts(p)
    _add_direction(p)
    p.add_argument("--local-cidrs", help="file of local networks, one CIDR per line")
    p.add_argument("--features", help="file listing the columns to export, one per line")
    p.add_argument("--corr-threshold", type=_fraction, default=None,
                   help="drop features whose |r| with an earlier kept feature reaches this value")
    p.add_argument("--start-ts", type=float, default=None, help="ignore packets before this epoch time (s)")
    p.add_argument("--default-label", default="", help="label written on every row")
    p.add_argument("--symbols", help="also write the flag symbol file here")
    p.add_argument("--diagnostics", help="diagnostics path stem (default: output path without extension)")

    p = sub.add_parser("labels", help="carry labels from a legacy CSV onto recovered flows", formatter_class=fmt)
    p.add_argument("--flows", required=True, help="flow CSV produced by extract")
    p.add_argument("--legacy", required=True, help="labelled legacy CSV")
    p.add_argument("--map", help="column map file (key = value)")
    p.add_argument("--default", dest="default_label", default="normal",
                   help="label given to every flow before signatures are applied")
    p.add_argument("--ts-tolerance", type=_non_negative, default=5.0, help="start time bound (s)")
    p.add_argument("--duration-tolerance", type=_non_negative, default=1.0, help="duration bound floor (s)")
    p.add_argument("--duration-fraction", type=_non_negative, default=0.1,
                   help="duration bound as a fraction of the signature duration")
    p.add_argument("--score-threshold", type=_fraction, default=0.5, help="minimum match score")
    p.add_argument("--exact", action="store_true", help="zero tolerances")
    p.add_argument("--out", required=True, help="labelled flow CSV")
    p.add_argument("--unmatched", help="unmatched signature report (default: <out>.unmatched.csv)")
    p.add_argument("--diagnostics", help="diagnostics path stem")

    p = sub.add_parser("analyze", help="phase and composition report for a flow CSV", formatter_class=fmt)
    p.add_argument("--flows", required=True)
    p.add_argument("--window", type=_positive, default=60.0, help="sliding window (s)")
    p.add_argument("--ratio-threshold", type=_fraction, default=0.9, help="initiated fraction that counts as steady")
    p.add_argument("--out", help="phase report JSON (default: stdout)")
    p.add_argument("--diagnostics", help="diagnostics path stem")

    p = sub.add_parser("symbols", help="pcap files to flag symbol sequences", formatter_class=fmt)
    p.add_argument("--in", dest="inputs", action="append", required=True, metavar="PCAP")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=100, help="wrap column")
    _add_timeouts(p)
    _add_direction(p)
    p.add_argument("--diagnostics", help="diagnostics path stem")

    p = sub.add_parser("synth", help="render a scenario file to pcap plus ground truth", formatter_class=fmt)
    p.add_argument("--scenario", required=True, help="JSON or YAML scenario")
    p.add_argument("--out", required=True, help="pcap to write")
    p.add_argument("--truth", help="ground truth JSON (default: <out>.truth.json)")
    p.add_argument("--resolution", choices=["micro", "nano"], default="micro", help="timestamp resolution")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    """Feed a --config file into the chosen subparser's defaults."""
    choices = parser._subparsers._group_actions[0].choices
    config = command = None
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif tok.startswith("--config="):
            config = tok.split("=", 1)[1]
        elif tok in choices and command is None:
            command = tok
            break
    if not config or not command:
        return
    values = read_key_values(config)
    subparser = choices[command]
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in values.items():
        key = key.replace("-", "_")
        dest = {"in": "inputs", "default": "default_label"}.get(key, key)
        action = actions.get(dest)
        if action is None:
            raise UsageError(f"{config}: unknown option {key!r} for {command}")
        if isinstance(action, argparse._StoreFalseAction):
            defaults[dest] = raw.lower() not in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._StoreTrueAction):
            defaults[dest] = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._AppendAction):
            defaults[dest] = [v.strip() for v in raw.split(",") if v.strip()]
        else:
            try:
                defaults[dest] = action.type(raw) if action.type else raw
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"{config}: {key}: {exc}") from None
        if action.required:
            action.required = False
    subparser.set_defaults(**defaults)


def _extract(args) -> int:
    json_path, text_path = _diag_paths(args, os.path.splitext(args.out)[0] + ".diagnostics")
    networks = load_cidr_file(args.local_cidrs) if args.local_cidrs else ()
    columns = load_feature_subset(args.features) if args.features else None
    start = None if args.start_ts is None else int(round(args.start_ts * 1_000_000))
    result = extract_flows(
        args.inputs,
        timeouts=_timeouts(args),
        infer_direction=args.infer_direction,
        reversed_service_ports=args.ftp_ports,
        local_networks=networks,
        drop=args.drop,
        sort=args.sort,
        default_label=args.default_label,
        start_ts=start,
        keep_flows=bool(args.symbols),
        track_symbols=bool(args.symbols),
    )
    diag = result.diagnostics
    if args.corr_threshold is not None:
        universe = columns if columns is not None else COLUMNS
        candidates = [c for c in FEATURE_COLUMNS if c in universe]
        report = filter_correlated(result.rows, args.corr_threshold, candidates)
        dropped = set(report.dropped)
        columns = tuple(c for c in universe if c not in dropped)
        diag.events.append(f"correlation filter dropped {len(dropped)} columns: {', '.join(report.dropped)}")
    write_flow_file(result.rows, args.out, sort=args.sort, columns=columns)
    if args.symbols:
        export_symbol_sequences(result.flows, args.symbols)
    diag.write(json_path, text_path)
    return EXIT_OK


def _labels(args) -> int:
    out_stem = os.path.splitext(args.out)[0]
    json_path, text_path = _diag_paths(args, out_stem + ".diagnostics")
    unmatched_path = args.unmatched or out_stem + ".unmatched.csv"
    colmap = ColumnMap.from_file(args.map) if args.map else ColumnMap()
    if args.exact:
        tol = MatchTolerance.exact()
    else:
        tol = MatchTolerance(ts_tolerance=args.ts_tolerance, duration_tolerance=args.duration_tolerance,
                             duration_fraction=args.duration_fraction, score_threshold=args.score_threshold)
    rows = apply_default_labels(read_flow_file(args.flows), args.default_label)
    sigs, errors = extract_signatures(read_legacy_csv(args.legacy), args.default_label, colmap)
    result = reapply_signatures(rows, sigs, tol)
    result.parse_errors = errors
    write_flow_file(result.rows, args.out, sort="retirement")
    write_unmatched(result.unmatched, unmatched_path)
    summary = result.summary()
    summary["unparseable_rows"] = [vars(e) for e in errors[:100]]
    diag = build_diagnostics(label_errors=summary)
    diag.flows_exported = len(result.rows)
    diag.write(json_path, text_path)
    return EXIT_OK


def _analyze(args) -> int:
    json_path, text_path = _diag_paths(args, os.path.splitext(args.out or args.flows)[0] + ".diagnostics")
    rows = read_flow_file(args.flows)
    report = detect_steady_state(rows, args.window, args.ratio_threshold)
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    diag = build_diagnostics()
    diag.flows_exported = len(rows)
    counts: dict[str, int] = {}
    for r in rows:
        counts[r.disposition] = counts.get(r.disposition, 0) + 1
    diag.flows_by_disposition = dict(sorted(counts.items()))
    diag.max_concurrent_flows = report.max_concurrent_flows
    diag.max_concurrent_ts = report.max_concurrent_ts
    if not report.has_steady_state:
        diag.events.append("no steady state found")
    diag.write(json_path, text_path)
    return EXIT_OK


def _symbols(args) -> int:
    json_path, text_path = _diag_paths(args, os.path.splitext(args.out)[0] + ".diagnostics")
    result = extract_flows(args.inputs, timeouts=_timeouts(args), infer_direction=args.infer_direction,
                           reversed_service_ports=args.ftp_ports)
    export_symbol_sequences(result.flows, args.out)
    result.diagnostics.write(json_path, text_path)
    return EXIT_OK


def _synth(args) -> int:
    scenario = Scenario.from_file(args.scenario)
    if args.seed is not None:
        scenario.seed = args.seed
    packets, truth = synth_packets(scenario)
    write_pcap(packets, args.out, resolution=args.resolution)
    truth_path = args.truth or os.path.splitext(args.out)[0] + ".truth.json"
    with open(truth_path, "w", encoding="utf-8") as fh:
        json.dump(truth.to_dict(), fh, indent=2)
        fh.write("\n")
    return EXIT_OK


_COMMANDS = {"extract": _extract, "labels": _labels, "analyze": _analyze, "symbols": _symbols, "synth": _synth}


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (UsageError, ConfigError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"flowrecovery: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except MalformedCidr as exc:
        print(f"flowrecovery {args.command}: bad CIDR: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _DATA_ERRORS as exc:
        print(f"flowrecovery {args.command}: {exc}", file=sys.stderr)
        _failure_report(args, exc)
        return EXIT_DATA


def _failure_report(args, exc: Exception) -> None:
    """Leave a diagnostics document behind even when a run fails."""
    out = getattr(args, "out", None)
    if out is None or not hasattr(args, "diagnostics"):
        return
    json_path, text_path = _diag_paths(args, os.path.splitext(out)[0] + ".diagnostics")
    diag = build_diagnostics()
    diag.events.append(f"failed: {type(exc).__name__}: {exc}")
    try:
        diag.write(json_path, text_path)
    except OSError:
        pass


def main() -> None:
    sys.exit(run())
