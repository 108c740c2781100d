"""Command-line entry point: simulate, sync-scan, audit, report, validate."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .audit import (
    advertiser_prevalence,
    advertiser_verdicts,
    assess,
    build_bid_table,
    build_consent_table,
    build_sync_table,
    unknown_advertiser_bids,
)
from .ingest import LogParseError, ParseReport, parse_bid_log, parse_http_log, partition_sessions, serialize_bids, serialize_events
from .model import Regime
from .render import FORMATS, RENDERERS, from_jsonl, to_jsonl
from .sim import (
    ConfigError,
    aggregate,
    bundled_scenario,
    evaluate_audit,
    leaked_from_json,
    leaked_to_json,
    load_scenario,
    simulate,
)
from .sync import scan_sessions, sync_stats

log = logging.getLogger("consent_audit")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_FLOOR = 0, 1, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class OutputDir:
    """Single writer for one output directory; records every file for the manifest."""

    def __init__(self, path, command: str):
        self.path = Path(path)
        self.command = command
        self.inputs: list[dict] = []
        self.outputs: list[dict] = []
        self.params: dict = {}
        self.path.mkdir(parents=True, exist_ok=True)

    def read_input(self, path) -> str:
        data = Path(path).read_bytes()
        self.inputs.append({"path": str(path), "sha256": _sha256(data)})
        return data.decode("utf-8")

    def write(self, name: str, text: str) -> Path:
        data = text.encode("utf-8")
        target = self.path / name
        target.write_bytes(data)
        self.outputs.append({"path": name, "sha256": _sha256(data)})
        return target

    def finish(self) -> Path:
        body = {
            "tool": "consent-audit",
            "version": __version__,
            "subcommand": self.command,
            "parameters": self.params,
            "inputs": self.inputs,
            "outputs": sorted(self.outputs, key=lambda o: o["path"]),
        }
        blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
        body["digest"] = _sha256(blob.encode())
        body["created"] = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        target = self.path / MANIFEST
        target.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return target


def _scenario(ref: str, seed: Optional[int], out: Optional[OutputDir] = None):
    path = Path(ref)
    if not path.exists() and ref in ("reference", "all_compliant"):
        return bundled_scenario(ref, seed)
    text = out.read_input(path) if out is not None else path.read_text("utf-8")
    return load_scenario(text, seed)


def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in records)


def _write_tables(out: OutputDir, tables, fmt: str) -> None:
    for table in tables:
        out.write(f"{table.name}{FORMATS[fmt]}", RENDERERS[fmt](table))
        if fmt != "jsonl":
            out.write(f"{table.name}.jsonl", to_jsonl(table))


# --- subcommands -------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    out = OutputDir(args.out, "simulate")
    cfg = _scenario(args.config, args.seed, out)
    out.params = {"seed": cfg.seed, "run_id": cfg.run_id}
    result = simulate(cfg)
    out.write("bids.log", serialize_bids(result.bids))
    out.write("http.log", serialize_events(result.events))
    out.write("truth.json", json.dumps(result.truth.to_dict(), indent=1, sort_keys=True) + "\n")
    out.write("leaked.json", leaked_to_json(result.leaked, cfg.run_id))
    out.finish()
    print(f"simulated run {cfg.run_id}: {len(result.bids)} bids, {len(result.events)} HTTP events -> {out.path}")
    return EXIT_OK


def _read_http(out: OutputDir, path):
    report = ParseReport()
    events = parse_http_log(out.read_input(path), report)
    if report.rejected:
        print(f"{path}: skipped {len(report.rejected)} record(s)", file=sys.stderr)
    return events


def _read_bids(out: OutputDir, path):
    report = ParseReport()
    bids = parse_bid_log(out.read_input(path), report)
    if report.rejected:
        print(f"{path}: skipped {len(report.rejected)} line(s)", file=sys.stderr)
    return bids


def cmd_sync_scan(args) -> int:
    out = OutputDir(args.out, "sync-scan")
    events = _read_http(out, args.http)
    sessions = partition_sessions((), events)
    syncs = scan_sessions(sessions)
    stats = sync_stats(syncs, sessions)
    out.write("syncs.jsonl", _jsonl(s.as_dict() for s in syncs))
    _write_tables(out, [build_sync_table(stats, r) for r in Regime], "csv")
    out.finish()
    print(f"{len(syncs)} sync event(s) in {len(events)} HTTP event(s) -> {out.path}")
    return EXIT_OK


def cmd_audit(args) -> int:
    out = OutputDir(args.out, "audit")
    out.params = {"alpha": args.alpha, "bonferroni": args.bonferroni, "format": args.format,
                  "quorum": args.quorum, "control_restriction": args.control_restriction,
                  "exclude_absent": args.exclude_absent}
    bids = _read_bids(out, args.bids)
    leaked, run_id = leaked_from_json(out.read_input(args.leaked))
    if run_id is not None:
        out.params["run_id"] = run_id
    syncs = []
    tables = [build_bid_table(bids, r) for r in Regime]
    if args.http is not None:
        events = _read_http(out, args.http)
        sessions = partition_sessions(bids, events)
        syncs = scan_sessions(sessions)
        stats = sync_stats(syncs, sessions)
    tables.append(build_consent_table(bids, alpha=args.alpha, bonferroni=args.bonferroni))
    tables.append(unknown_advertiser_bids(bids, leaked, control_restriction=args.control_restriction))
    tables.append(advertiser_prevalence(bids, exclude_absent=args.exclude_absent))
    if args.http is not None:
        tables += [build_sync_table(stats, r) for r in Regime]
    _write_tables(out, tables, args.format)
    verdicts = assess(bids, alpha=args.alpha, bonferroni=args.bonferroni)
    out.write("verdicts.jsonl", _jsonl(v.as_dict() for v in verdicts))
    adv = advertiser_verdicts(bids, leaked, syncs, alpha=args.alpha, quorum=args.quorum)
    out.write("advertiser_verdicts.jsonl", _jsonl(v.as_dict() for v in adv))
    if syncs:
        out.write("syncs.jsonl", _jsonl(s.as_dict() for s in syncs))
    out.finish()
    flagged = sum(v.non_compliant for v in verdicts)
    print(f"{flagged}/{len(verdicts)} persona cell(s) flagged, "
          f"{sum(v.flagged for v in adv)}/{len(adv)} advertiser(s) flagged -> {out.path}")
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.input)
    if not src.is_dir():
        raise FileNotFoundError(f"not a directory: {src}")
    out = OutputDir(args.out, "report")
    out.params = {"format": args.format}
    tables = []
    for path in sorted(src.glob("*.jsonl")):
        text = out.read_input(path)
        first = text.split("\n", 1)[0]
        try:
            head = json.loads(first) if first.strip() else None
        except json.JSONDecodeError:
            head = None
        if isinstance(head, dict) and "table" in head:
            tables.append(from_jsonl(text))
        else:
            out.inputs.pop()
    if not tables:
        raise ValueError(f"no report tables found in {src}")
    for table in tables:
        out.write(f"{table.name}{FORMATS[args.format]}", RENDERERS[args.format](table))
    out.finish()
    print(f"rendered {len(tables)} table(s) as {args.format} -> {out.path}")
    return EXIT_OK


def cmd_validate(args) -> int:
    out = OutputDir(args.out, "validate") if args.out else None
    base = _scenario(args.scenario, None, out)
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    evals, records = [], []
    for seed in range(args.seed_start, args.seed_start + args.seeds):
        result = simulate(base.with_seed(seed))
        sessions = partition_sessions(result.bids, result.events)
        syncs = scan_sessions(sessions)
        verdicts = advertiser_verdicts(result.bids, result.leaked, syncs, alpha=args.alpha, quorum=args.quorum)
        ev = evaluate_audit(verdicts, result.truth, run_id=result.truth.run_id)
        evals.append(ev)
        records.append({"seed": seed, "run_id": result.truth.run_id, "precision": ev.precision,
                        "recall": ev.recall, "tp": ev.tp, "fp": ev.fp, "fn": ev.fn, "tn": ev.tn})
    total = aggregate(evals)
    shown = "--" if total.precision is None else f"{total.precision:.3f}"
    print(f"{args.seeds} seed(s): precision {shown}, recall {total.recall:.3f} "
          f"(tp={total.tp} fp={total.fp} fn={total.fn} tn={total.tn})")
    # Undefined precision (nothing flagged) cannot fall below a floor.
    ok = (total.precision is None or total.precision >= args.min_precision) and total.recall >= args.min_recall
    if out is not None:
        out.params = {"seeds": args.seeds, "seed_start": args.seed_start, "alpha": args.alpha,
                      "quorum": args.quorum, "min_precision": args.min_precision, "min_recall": args.min_recall}
        records.append({"aggregate": True, "precision": total.precision, "recall": total.recall,
                        "tp": total.tp, "fp": total.fp, "fn": total.fn, "tn": total.tn, "passed": ok})
        out.write("validation.jsonl", _jsonl(records))
        out.finish()
    if not ok:
        print(f"below floor (precision >= {args.min_precision}, recall >= {args.min_recall})", file=sys.stderr)
        return EXIT_FLOOR
    return EXIT_OK


# --- wiring ----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="consent-audit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate logs and ground truth from a scenario")
    p.add_argument("--config", required=True, help="scenario file (or 'reference' / 'all_compliant')")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sync-scan", help="detect cookie syncing in an HTTP log")
    p.add_argument("--http", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sync_scan)

    p = sub.add_parser("audit", help="build report tables and verdicts")
    p.add_argument("--bids", required=True)
    p.add_argument("--http")
    p.add_argument("--leaked", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=sorted(FORMATS), default="csv")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--bonferroni", action="store_true", help="correct alpha for the number of U tests")
    p.add_argument("--quorum", type=float, default=0.5, help="flagged share of leaked cells that flags an advertiser")
    p.add_argument("--control-restriction", choices=("union", "none"), default="union")
    p.add_argument("--exclude-absent", action="store_true",
                   help="average prevalence only over CMPs where the advertiser appears")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("report", help="re-render stored tables")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=sorted(FORMATS), default="markdown")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("validate", help="score the audit against simulated ground truth")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seeds", type=int, default=30)
    p.add_argument("--seed-start", type=int, default=0)
    p.add_argument("--min-precision", type=float, default=0.9)
    p.add_argument("--min-recall", type=float, default=0.9)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--quorum", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError:
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return args.func(args)
    except LogParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
