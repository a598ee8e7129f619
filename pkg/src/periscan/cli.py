"""Command-line front end tying the pipelines together.

    periscan [--backend sim|live] [--topology FILE] [--seed N] [--rate PPS]
             [--timeout DUR] [--retries N] [--out PATH] COMMAND ...

Commands: ingest (canonicalize a prefix pool), select (response-guided
prefix selection), scan (device discovery over selected prefixes), loops
(routing-loop verdicts), services (eight-service exposure), hlev
(LLM-tool exposure funnel), report (aggregate NDJSON results).

Exit codes: 0 success, 1 partial (some probes errored, partial results
were flushed), 2 configuration error.
"""

from __future__ import annotations

import argparse
import ipaddress
import itertools
import re
import sys

from . import hlev as hlev_mod
from . import report as report_mod
from .engine import BackendError, Icmp6Echo, RateLimit, Scanner
from .loopdetect import LoopProbePlan, detect_loops
from .prefixes import (
    Address,
    Prefix,
    PrefixError,
    load_pool,
    parse_prefix,
    render_pool_line,
)
from .rgps import RgpsConfig, RgpsScanError, select_good_prefixes
from .services import (
    ALL_SERVICES,
    CveDb,
    default_vendor_rules,
    fixture_cve_db,
    load_vendor_rules,
    scan_services,
)
from .simnet import SimBackend, build_topology, load_topology
from .targetgen import TargetSpace, derive_seed, iter_targets

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2

_DURATION_RE = re.compile(r"^(\d+(?:\.\d+)?)(ms|s|m|h)?$")
_DURATION_UNITS = {"ms": 0.001, "s": 1.0, "m": 60.0, "h": 3600.0, None: 1.0}


class ConfigError(Exception):
    pass


def parse_duration(text: str) -> float:
    match = _DURATION_RE.match(text.strip())
    if not match:
        raise argparse.ArgumentTypeError(f"bad duration {text!r} (try 120s or 2m)")
    return float(match.group(1)) * _DURATION_UNITS[match.group(2)]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="periscan",
        description="IPv6 periphery measurement toolkit",
    )
    parser.add_argument("--backend", choices=("sim", "live"), default="sim")
    parser.add_argument("--topology", help="simnet topology JSON (sim backend only)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--rate", type=int, default=1000, help="max packets/second")
    parser.add_argument("--timeout", type=parse_duration, default=5.0)
    parser.add_argument("--retries", type=int, default=1)
    parser.add_argument("--out", help="output path (default stdout for report)")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="canonicalize and dedupe a prefix pool")
    p.add_argument("--pool", required=True)

    p = sub.add_parser("select", help="response-guided prefix selection")
    p.add_argument("--pool", required=True)
    p.add_argument("--tau", type=parse_duration, default=120.0)
    p.add_argument("--child-len", type=int, default=28)
    p.add_argument("--exploratory-budget", type=int, default=1 << 16)
    p.add_argument("--scan-budget", type=int, default=None)
    p.add_argument("--devices-out", help="NDJSON sink for responsive sources")

    p = sub.add_parser("scan", help="device discovery over selected prefixes")
    p.add_argument("--prefixes", required=True)
    p.add_argument("--budget", type=int, default=None, help="probes per prefix")
    p.add_argument("--shards", type=int, default=1)
    p.add_argument("--shard", type=int, default=0)

    p = sub.add_parser("loops", help="routing-loop detection over devices")
    p.add_argument("--devices", required=True)
    p.add_argument("--hop", type=int, default=32)
    p.add_argument("--inc", type=int, default=2)
    p.add_argument("--trials", type=int, default=2)

    p = sub.add_parser("services", help="eight-service exposure scan")
    p.add_argument("--devices", required=True)
    p.add_argument("--cve-db", help="CSV product,version_pattern,cve_id,severity")
    p.add_argument("--vendor-rules", help="CSV field,regex,vendor (ordered)")

    p = sub.add_parser("hlev", help="LLM-tool exposure verification")
    p.add_argument("--targets", required=True,
                   help="device file for v6 mode, or the literal 'v4-sweep'")
    p.add_argument("--v4-range", help="IPv4 CIDR for v4-sweep mode")
    p.add_argument("--signatures", help="signature table CSV")
    p.add_argument("--models", help="known-model list")

    p = sub.add_parser("report", help="aggregate NDJSON results")
    p.add_argument("--input", required=True, nargs="+")
    p.add_argument("--group-by", required=True)
    p.add_argument("--percent", choices=("group", "global"), default="global")
    p.add_argument("--hit", help="field that marks a record as counted")
    p.add_argument("--format", choices=("table", "csv", "ndjson"), default="table")
    return parser


def make_scanner(args) -> Scanner:
    if args.backend == "sim":
        if not args.topology:
            raise ConfigError("--backend sim requires --topology")
        try:
            spec = load_topology(args.topology)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"bad topology: {exc}") from exc
        backend = SimBackend(build_topology(spec))
    else:
        from .backends import LiveBackend, LiveBackendDisabled

        try:
            backend = LiveBackend()
        except LiveBackendDisabled as exc:
            raise ConfigError(str(exc)) from exc
    backend.open()
    try:
        rate = RateLimit(args.rate)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return Scanner(
        backend, rate, timeout=args.timeout, retries=args.retries, seed=args.seed
    )


def _read_lines(path) -> list[str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _load_devices(path) -> list[Address]:
    """Device NDJSON (from scan) or one plain address per line."""
    addresses: list[Address] = []
    for line in _read_lines(path):
        body = line.strip()
        if not body or body.startswith("#"):
            continue
        if body.startswith("{"):
            import json

            addresses.append(Address.parse(json.loads(body)["address"]))
        else:
            addresses.append(Address.parse(body))
    return addresses


def _load_scan_prefixes(path) -> list[Prefix]:
    """Pool-format rows; a sixth column, when present, must say 'good'."""
    prefixes = []
    for line in _read_lines(path):
        body = line.strip()
        if not body or body.startswith("#"):
            continue
        fields = body.split(",")
        if len(fields) >= 6 and fields[5].strip() not in ("", "good"):
            continue
        prefixes.append(load_pool([",".join(fields[:5])])[0])
    return prefixes


def _write_text(path, text: str) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_ingest(args) -> int:
    pool = load_pool(_read_lines(args.pool))
    _write_text(args.out, "".join(render_pool_line(p) + "\n" for p in pool))
    print(f"ingested {len(pool)} prefixes", file=sys.stderr)
    return EXIT_OK


def cmd_select(args) -> int:
    pool = load_pool(_read_lines(args.pool))
    if not pool:
        raise ConfigError("prefix pool is empty")
    scanner = make_scanner(args)
    cfg = RgpsConfig(
        tau=args.tau,
        exploratory_budget=args.exploratory_budget,
        child_len=args.child_len,
        scan_budget=args.scan_budget,
    )
    responses = []
    sink = responses.append if args.devices_out else None
    status = EXIT_OK
    try:
        outcome = select_good_prefixes(pool, cfg, scanner, sink=sink)
    except RgpsScanError as exc:
        outcome = exc.partial
        status = EXIT_PARTIAL
        print(f"partial selection: {exc}", file=sys.stderr)
    lines = []
    for prefix in sorted(outcome.good, key=lambda p: (p.bits, p.length)):
        lines.append(render_pool_line(prefix, "good"))
    for prefix, reason in outcome.rejected:
        lines.append(render_pool_line(prefix, reason.value))
    _write_text(args.out, "".join(line + "\n" for line in lines))
    if args.devices_out:
        devices = report_mod.dedupe_devices(responses)
        report_mod.write_ndjson(
            args.devices_out,
            (report_mod.device_record(d) for d in devices),
            report_mod.SCHEMA_DEVICE,
        )
    print(
        f"good={len(outcome.good)} rejected={len(outcome.rejected)}",
        file=sys.stderr,
    )
    return status


def cmd_scan(args) -> int:
    prefixes = _load_scan_prefixes(args.prefixes)
    if not prefixes:
        raise ConfigError("no prefixes to scan")
    scanner = make_scanner(args)
    status = EXIT_OK
    seen: dict[int, report_mod.PeripheryDevice] = {}
    for prefix in prefixes:
        space = TargetSpace.of([prefix])
        targets = iter_targets(
            space, derive_seed(args.seed, str(prefix)), args.shard, args.shards
        )
        if args.budget is not None:
            targets = itertools.islice(targets, args.budget)
        try:
            run = scanner.scan(targets, scanner.spec(Icmp6Echo()))
            responses = (r for r in run if not r.is_timeout)
            for device in report_mod.dedupe_devices(responses, prefix.meta):
                seen.setdefault(device.address.value, device)
        except BackendError as exc:
            status = EXIT_PARTIAL
            print(f"scan aborted on {prefix}: {exc}", file=sys.stderr)
            break
    devices = sorted(seen.values(), key=lambda d: d.first_seen)
    count = report_mod.write_ndjson(
        args.out or "devices.ndjson",
        (report_mod.device_record(d) for d in devices),
        report_mod.SCHEMA_DEVICE,
    )
    print(f"devices={count}", file=sys.stderr)
    return status


def cmd_loops(args) -> int:
    devices = _load_devices(args.devices)
    scanner = make_scanner(args)
    try:
        plan = LoopProbePlan(
            initial_hop_limit=args.hop, increment=args.inc, trials=args.trials
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    evidence = detect_loops(devices, plan, scanner)
    report_mod.write_ndjson(
        args.out or "loops.ndjson",
        (report_mod.loop_record(e) for e in evidence),
        report_mod.SCHEMA_LOOP,
    )
    confirmed = sum(1 for e in evidence if e.verdict.value == "Confirmed")
    print(f"devices={len(evidence)} confirmed={confirmed}", file=sys.stderr)
    return EXIT_PARTIAL if any(e.error for e in evidence) else EXIT_OK


def cmd_services(args) -> int:
    devices = _load_devices(args.devices)
    scanner = make_scanner(args)
    cve_db = CveDb.load(args.cve_db) if args.cve_db else fixture_cve_db()
    if args.vendor_rules:
        rules = load_vendor_rules(_read_text(args.vendor_rules))
    else:
        rules = default_vendor_rules()
    records = []
    status = EXIT_OK
    try:
        for device in devices:
            records.extend(
                scan_services(device, ALL_SERVICES, scanner, cve_db, rules)
            )
    except BackendError as exc:
        status = EXIT_PARTIAL
        print(f"service scan aborted: {exc}", file=sys.stderr)
    report_mod.write_ndjson(
        args.out or "services.ndjson",
        (report_mod.exposure_record(r) for r in records),
        report_mod.SCHEMA_EXPOSURE,
    )
    exposed = sum(1 for r in records if r.responsive)
    print(f"records={len(records)} exposed={exposed}", file=sys.stderr)
    return status


def _read_text(path) -> str:
    return "".join(_read_lines(path))


def _v4_sweep_targets(v4_range: str):
    try:
        network = ipaddress.IPv4Network(v4_range, strict=False)
    except ValueError as exc:
        raise ConfigError(f"bad --v4-range: {exc}") from exc
    bits = report_mod.V4_MAPPED_BASE | int(network.network_address)
    prefix = Prefix(bits, 96 + network.prefixlen)
    return (a for a in iter_targets(TargetSpace.of([prefix]), seed=0))


def cmd_hlev(args) -> int:
    if args.signatures:
        profiles = hlev_mod.load_signature_table(_read_text(args.signatures))
    else:
        profiles = hlev_mod.default_signature_table()
    if args.models:
        known = hlev_mod.load_known_models(_read_text(args.models))
    else:
        known = hlev_mod.default_known_models()
    if args.targets == "v4-sweep":
        if not args.v4_range:
            raise ConfigError("v4-sweep mode requires --v4-range")
        addresses = list(_v4_sweep_targets(args.v4_range))
    else:
        # v6 mode runs only over previously discovered periphery devices.
        addresses = _load_devices(args.targets)
    scanner = make_scanner(args)
    verified, stats = hlev_mod.run_hlev(addresses, profiles, scanner, known)
    out = args.out or "hlev.ndjson"
    report_mod.write_ndjson(
        out,
        (report_mod.hlev_record(c) for c in verified),
        report_mod.SCHEMA_HLEV,
    )
    stat_rows = [
        {
            "tool": tool,
            "probed": s.probed,
            "r0": s.r0,
            "r1": s.r1,
            "r2": s.r2,
        }
        for tool, s in sorted(stats.items())
    ]
    report_mod.write_ndjson(out, stat_rows, "hlev_stats@1")
    print(f"verified={len(verified)}", file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    records = []
    for path in args.input:
        records.extend(report_mod.read_ndjson(path))
    percent_def = (
        report_mod.PercentDef.OF_GROUP_TOTAL
        if args.percent == "group"
        else report_mod.PercentDef.OF_GLOBAL_TOTAL
    )
    try:
        rows = report_mod.aggregate(records, args.group_by, percent_def, args.hit)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    fmt = report_mod.ReportFormat(args.format)
    rendered = report_mod.render_report(rows, fmt, group_name=args.group_by)
    if args.out:
        with open(args.out, "wb") as fh:
            fh.write(rendered)
    else:
        sys.stdout.buffer.write(rendered)
    return EXIT_OK


_COMMANDS = {
    "ingest": cmd_ingest,
    "select": cmd_select,
    "scan": cmd_scan,
    "loops": cmd_loops,
    "services": cmd_services,
    "hlev": cmd_hlev,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PrefixError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
