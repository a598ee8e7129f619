"""Eight-service exposure measurement with version/CVE/vendor analysis.

Each device is probed on the fixed service set (DNS, NTP, FTP, SSH,
TELNET, HTTP/80, TLS, HTTP/8080). A service counts as exposed only on a
protocol-valid response: a DNS answer to our recursive query, an NTP
mode-4 reply, banner bytes, an HTTP status line, or a TLS ServerHello.
Version strings pulled from banners and headers are matched against a
user-supplied CVE database; vendor inference walks an ordered rule table
over HTTP metadata and banners.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

from . import appproto, wire
from .engine import AppPayload, AppRequest, ProbeResponse, Scanner
from .prefixes import Address

#: Banner capture bound per service.
BANNER_LIMIT = 4096


@dataclass(frozen=True)
class ServiceId:
    name: str
    transport: int
    port: int


DNS = ServiceId("DNS", wire.TRANSPORT_UDP, 53)
NTP = ServiceId("NTP", wire.TRANSPORT_UDP, 123)
FTP = ServiceId("FTP", wire.TRANSPORT_TCP, 21)
SSH = ServiceId("SSH", wire.TRANSPORT_TCP, 22)
TELNET = ServiceId("TELNET", wire.TRANSPORT_TCP, 23)
HTTP80 = ServiceId("HTTP80", wire.TRANSPORT_TCP, 80)
TLS = ServiceId("TLS", wire.TRANSPORT_TCP, 443)
HTTP8080 = ServiceId("HTTP8080", wire.TRANSPORT_TCP, 8080)

ALL_SERVICES: tuple[ServiceId, ...] = (DNS, NTP, FTP, SSH, TELNET, HTTP80, TLS, HTTP8080)
SERVICE_BY_NAME = {s.name: s for s in ALL_SERVICES}


@dataclass(frozen=True)
class SoftwareVersion:
    product: str
    version_pattern: str = "unknown"

    def __post_init__(self):
        if not self.product:
            raise ValueError("product must be non-empty")


@dataclass
class ExposureRecord:
    device: Address
    service: ServiceId
    responsive: bool
    banner: bytes = b""
    extracted: SoftwareVersion | None = None
    vendor: str | None = None
    cves: list[str] = field(default_factory=list)


CVE_ID_RE = re.compile(r"^CVE-\d{4}-\d{4,}$")


@dataclass(frozen=True)
class CveEntry:
    product: str
    version_pattern: str
    cve_id: str
    severity: str | None = None

    def __post_init__(self):
        if not CVE_ID_RE.match(self.cve_id):
            raise ValueError(f"bad CVE identifier {self.cve_id!r}")


@dataclass
class CveDb:
    entries: list[CveEntry] = field(default_factory=list)

    @classmethod
    def from_csv(cls, text: str) -> "CveDb":
        entries = []
        for row in csv.reader(io.StringIO(text)):
            if not row or row[0].lstrip().startswith("#"):
                continue
            product, pattern, cve_id = row[0], row[1], row[2]
            severity = row[3] if len(row) > 3 and row[3] else None
            entries.append(CveEntry(product.strip(), pattern.strip(), cve_id.strip(), severity))
        return cls(entries)

    @classmethod
    def load(cls, path) -> "CveDb":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_csv(fh.read())


def fixture_cve_db() -> CveDb:
    """The small illustrative database shipped with the package."""
    text = resources.files("periscan.data").joinpath("cve_fixture.csv").read_text("utf-8")
    return CveDb.from_csv(text)


def _segment_matches(pattern_seg: str, version_seg: str) -> bool:
    if "x" in pattern_seg:
        literal = pattern_seg[: pattern_seg.index("x")]
        return version_seg.lower().startswith(literal.lower()) and len(
            version_seg
        ) >= len(literal)
    return pattern_seg.lower() == version_seg.lower()


def version_matches(pattern: str, version: str) -> bool:
    """Dotted-segment comparison; 'x' wildcards one segment's tail."""
    pattern_segs = pattern.split(".")
    version_segs = version.split(".")
    if len(pattern_segs) != len(version_segs):
        return False
    return all(
        _segment_matches(p, v) for p, v in zip(pattern_segs, version_segs)
    )


def map_cves(version: SoftwareVersion, db: CveDb) -> list[str]:
    """All database CVEs matching product and version bucket, in db order."""
    out = []
    for entry in db.entries:
        if entry.product.lower() != version.product.lower():
            continue
        if version_matches(entry.version_pattern, version.version_pattern):
            out.append(entry.cve_id)
    return out


def bucket_version(version: SoftwareVersion, db: CveDb) -> SoftwareVersion:
    """Coarsen an extracted version to the db's pattern granularity."""
    for entry in db.entries:
        if entry.product.lower() != version.product.lower():
            continue
        if version_matches(entry.version_pattern, version.version_pattern):
            return SoftwareVersion(version.product, entry.version_pattern)
    return version


# Version extraction.

_SSH_RE = re.compile(r"^SSH-[\d.]+-([A-Za-z][\w.!-]*?)[_ /]?v?(\d[\w.]*)?\s*$")
_SERVER_RE = re.compile(r"^\s*([A-Za-z][\w!. +()-]*?)\s*(?:/\s*v?(\d[\w.]*))?\s*$")
_TITLE_RE = re.compile(rb"<title>(.*?)</title>", re.IGNORECASE | re.DOTALL)
_BANNER_VERSION_RE = re.compile(r"\b(\d+(?:\.[\w]+)+)\b")


def _http_parts(data: bytes) -> tuple[list[tuple[str, str]], bytes]:
    if data.startswith(b"HTTP/"):
        from .engine import _parse_app_payload

        payload = _parse_app_payload(data, BANNER_LIMIT)
        return list(payload.headers), payload.body_prefix
    return [], data


def _header_value(headers: Sequence[tuple[str, str]], name: str) -> str | None:
    low = name.lower()
    for key, value in headers:
        if key.lower() == low:
            return value
    return None


def extract_version(service: ServiceId, data) -> SoftwareVersion | None:
    """Pull product/version out of a banner or HTTP header list.

    Accepts raw bytes (banner or full HTTP response) or a header list.
    Returns None when nothing recognizable is present.
    """
    if data is None:
        return None
    headers: list[tuple[str, str]] = []
    body = b""
    if isinstance(data, (bytes, bytearray)):
        if not data:
            return None
        if service in (HTTP80, HTTP8080, TLS):
            headers, body = _http_parts(bytes(data))
        else:
            body = bytes(data)
    else:
        headers = list(data)

    if service in (HTTP80, HTTP8080, TLS):
        server = _header_value(headers, "Server")
        if server:
            match = _SERVER_RE.match(server)
            if match:
                product, version = match.group(1), match.group(2)
                return SoftwareVersion(product.strip(), version or "unknown")
        title = _TITLE_RE.search(body)
        if title:
            text = title.group(1).decode("latin-1", "replace").strip()
            if text:
                return SoftwareVersion(text)
        return None

    if service is SSH:
        line = body.split(b"\n", 1)[0].decode("latin-1", "replace").strip()
        match = _SSH_RE.match(line)
        if match:
            return SoftwareVersion(match.group(1), match.group(2) or "unknown")
        return None

    if service in (FTP, TELNET):
        line = body.split(b"\n", 1)[0].decode("latin-1", "replace").strip()
        line = re.sub(r"^\d{3}[- ]", "", line)  # FTP reply code
        if not line:
            return None
        tokens = line.split()
        product = tokens[0]
        version = None
        for token in tokens[1:]:
            found = _BANNER_VERSION_RE.match(token)
            if found:
                version = found.group(1)
                break
        return SoftwareVersion(product, version or "unknown")

    if service is DNS:
        text = body.decode("latin-1", "replace").strip()
        if not text:
            return None
        match = re.match(r"^([A-Za-z][\w!.-]*?)[-_/ ]v?(\d[\w.]*)$", text)
        if match:
            return SoftwareVersion(match.group(1), match.group(2))
        return SoftwareVersion(text)

    return None


# Vendor inference.

VENDOR_FIELDS = ("server", "www-authenticate", "x-powered-by", "title", "banner")


@dataclass(frozen=True)
class VendorRule:
    field: str
    regex: str
    vendor: str

    def __post_init__(self):
        if self.field not in VENDOR_FIELDS:
            raise ValueError(f"unknown vendor rule field {self.field!r}")


def load_vendor_rules(text: str) -> list[VendorRule]:
    rules = []
    for row in csv.reader(io.StringIO(text)):
        if not row or row[0].lstrip().startswith("#"):
            continue
        rules.append(VendorRule(row[0].strip(), row[1], row[2].strip()))
    return rules


def default_vendor_rules() -> list[VendorRule]:
    text = resources.files("periscan.data").joinpath("vendor_rules.csv").read_text("utf-8")
    return load_vendor_rules(text)


def _record_fields(record: ExposureRecord) -> dict[str, list[str]]:
    """Metadata values per rule field for one exposure record."""
    out: dict[str, list[str]] = {name: [] for name in VENDOR_FIELDS}
    if not record.responsive or not record.banner:
        return out
    if record.service in (HTTP80, HTTP8080):
        headers, body = _http_parts(record.banner)
        for header_name in ("server", "www-authenticate", "x-powered-by"):
            value = _header_value(headers, header_name)
            if value:
                out[header_name].append(value)
        title = _TITLE_RE.search(body)
        if title:
            out["title"].append(title.group(1).decode("latin-1", "replace"))
    elif record.service in (FTP, TELNET, SSH):
        out["banner"].append(record.banner.decode("latin-1", "replace"))
    return out


def infer_vendor(
    records: Sequence[ExposureRecord], rules: Sequence[VendorRule] | None = None
) -> str | None:
    """First vendor whose rule matches any record metadata, in rule order.

    Rules are keyed by field, so the answer does not depend on the order
    the records were gathered in.
    """
    if rules is None:
        rules = default_vendor_rules()
    gathered: dict[str, list[str]] = {name: [] for name in VENDOR_FIELDS}
    for record in sorted(records, key=lambda r: r.service.port):
        for field_name, values in _record_fields(record).items():
            gathered[field_name].extend(values)
    for rule in rules:
        pattern = re.compile(rule.regex)
        for value in gathered[rule.field]:
            if pattern.search(value):
                return rule.vendor
    return None


# Probing.


def _probe_request(service: ServiceId, ordinal: int) -> AppRequest:
    if service is DNS:
        return AppRequest(
            port=service.port,
            request=appproto.build_dns_query(txid=ordinal & 0xFFFF),
            read_limit=BANNER_LIMIT,
            transport=service.transport,
        )
    if service is NTP:
        return AppRequest(
            port=service.port,
            request=appproto.build_ntp_client(),
            read_limit=BANNER_LIMIT,
            transport=service.transport,
        )
    if service in (HTTP80, HTTP8080):
        return AppRequest(
            port=service.port,
            request=appproto.build_http_request(),
            read_limit=BANNER_LIMIT,
        )
    if service is TLS:
        return AppRequest(
            port=service.port,
            request=appproto.build_tls_client_hello(),
            read_limit=BANNER_LIMIT,
        )
    # FTP/SSH/TELNET: connect and read whatever the server volunteers.
    return AppRequest(port=service.port, request=b"", read_limit=BANNER_LIMIT)


def _service_responsive(
    service: ServiceId, response: ProbeResponse, txid: int
) -> tuple[bool, bytes]:
    """(responsive, banner bytes) per the service's validity rule."""
    payload = response.payload
    if not isinstance(payload, AppPayload):
        return False, b""
    if service is DNS:
        return appproto.dns_is_answer(payload.body_prefix, txid), b""
    if service is NTP:
        return appproto.ntp_is_server_reply(payload.body_prefix), b""
    if service in (HTTP80, HTTP8080):
        if payload.status_line.startswith("HTTP/"):
            return True, _raw_http(payload)
        return False, b""
    if service is TLS:
        return appproto.tls_is_server_hello(payload.body_prefix), b""
    banner = payload.body_prefix
    return bool(banner), banner[:BANNER_LIMIT]


def _raw_http(payload: AppPayload) -> bytes:
    head = payload.status_line + "\r\n" + "".join(
        f"{k}: {v}\r\n" for k, v in payload.headers
    )
    return (head.encode("latin-1", "replace") + b"\r\n" + payload.body_prefix)[
        : BANNER_LIMIT
    ]


def scan_services(
    device: Address,
    services: Iterable[ServiceId],
    scanner: Scanner,
    cve_db: CveDb | None = None,
    vendor_rules: Sequence[VendorRule] | None = None,
) -> list[ExposureRecord]:
    """One ExposureRecord per requested service, in canonical table order.

    Per-service failures simply yield responsive=False; only a scanner
    breakdown raises.
    """
    requested = [s for s in ALL_SERVICES if s in set(services)]
    records: list[ExposureRecord] = []
    for service in requested:
        ordinal = scanner.next_ordinal()
        request = _probe_request(service, ordinal)
        txid = ordinal & 0xFFFF
        response = None
        for item in scanner.scan([device], scanner.spec(request)):
            response = item
        record = ExposureRecord(device=device, service=service, responsive=False)
        if response is not None and not response.is_timeout:
            responsive, banner = _service_responsive(service, response, txid)
            record.responsive = responsive
            record.banner = banner
        if record.responsive and service is DNS:
            record.banner = _dns_version_banner(device, scanner)
        if record.responsive:
            extracted = extract_version(service, record.banner)
            if extracted and cve_db is not None:
                record.cves = map_cves(extracted, cve_db)
                extracted = bucket_version(extracted, cve_db)
            record.extracted = extracted
        records.append(record)
    vendor = infer_vendor(records, vendor_rules) if vendor_rules is not None else None
    if vendor:
        for record in records:
            if record.responsive:
                record.vendor = vendor
    return records


def _dns_version_banner(device: Address, scanner: Scanner) -> bytes:
    """Ask for version.bind TXT; empty when the resolver hides it."""
    ordinal = scanner.next_ordinal()
    request = AppRequest(
        port=DNS.port,
        request=appproto.build_dns_query(
            name=appproto.VERSION_BIND_NAME,
            txid=ordinal & 0xFFFF,
            qtype=appproto.DNS_TYPE_TXT,
            qclass=appproto.DNS_CLASS_CHAOS,
        ),
        read_limit=BANNER_LIMIT,
        transport=DNS.transport,
    )
    for response in scanner.scan([device], scanner.spec(request)):
        if not response.is_timeout and isinstance(response.payload, AppPayload):
            text = appproto.dns_extract_txt(response.payload.body_prefix)
            if text:
                return text.encode("latin-1", "replace")
    return b""
