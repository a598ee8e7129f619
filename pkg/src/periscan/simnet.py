"""Deterministic simulated network backend.

Hosts carry service inventories (banners, canned HTTP, DNS/NTP/TLS
responders, LLM-tool emulators), routers apply hop-limit semantics with
configurable forwarding loops or unreachable replies, and a virtual
clock plus seeded randomness make every run reproducible. The network
speaks the same frame bytes as the live transport, so it slots straight
under the probe engine as a backend.

Hop accounting: a destination served by a router at distance d sits
behind d forwarding decrements (d-1 anonymous transit hops plus the
router itself). A probe whose budget expires at a forwarder triggers one
ICMPv6 Time Exceeded quoting the original frame; packets entering a
configured loop always expire inside it, bouncing between the pair until
the budget runs out.

Topology files are JSON:

    {
      "seed": 7,
      "link": {"latency": 0.01, "jitter": 0.0, "drop_prob": 0.0},
      "hosts": [
        {"address": "2001:db8::1",
         "echo": true,
         "services": [
           {"transport": "tcp", "port": 21, "banner": "220 vsFTPd 3.0.3"},
           {"transport": "tcp", "port": 80,
            "http": {"status": 200, "headers": {"Server": "micro_httpd"},
                     "body": "<html>...</html>"}},
           {"transport": "udp", "port": 53, "dns": {"version": "dnsmasq-2.73"}},
           {"transport": "udp", "port": 123, "ntp": true},
           {"transport": "tcp", "port": 443, "tls": true},
           {"transport": "tcp", "port": 9999, "listener": true},
           {"transport": "tcp", "port": 7777, "binary_text": "\\u0000\\u0001"}
         ],
         "llm_tool": {"tool": "Ollama", "models": ["llama3"],
                      "auth_required": false}}
      ],
      "populations": [
        "2001:db8:100::/48",
        {"prefix": "2001:db8:200::/40",
         "exclude_iids": ["0xfeedfacecafebeef"],
         "services": [{"transport": "tcp", "port": 21, "banner": "220 ftp"}],
         "llm_tool": {"tool": "Ollama", "models": ["llama3"]}}
      ],
      "routers": [
        {"id": "r1", "address": "2001:db8::fe", "prefix": "2001:db8:dead::/48",
         "distance": 3, "behavior": "loop", "loop_with": "r2"},
        {"id": "r2", "address": "2001:db8::fd", "prefix": "2001:db8:dead::/48",
         "distance": 4, "behavior": "loop", "loop_with": "r1"}
      ],
      "unassigned": ["2001:db8:beef::/48"]
    }

Population prefixes answer echo at every member address, which is how a
densely responsive block is modelled without listing hosts one by one.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Callable

from . import appproto, wire
from .prefixes import Address, Prefix, parse_prefix

Responder = Callable[[bytes], "bytes | None"]


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class LinkSpec:
    latency: float = 0.01
    jitter: float = 0.0
    drop_prob: float = 0.0

    def __post_init__(self):
        if self.latency < 0 or self.jitter < 0:
            raise TopologyError("latency/jitter must be non-negative")
        if not 0.0 <= self.drop_prob < 1.0:
            raise TopologyError("drop_prob must be in [0, 1)")


@dataclass
class SimHost:
    address: Address
    services: dict[tuple[int, int], Responder] = field(default_factory=dict)
    echo: bool = True
    descriptors: list[dict] = field(default_factory=list)
    llm_tool: dict | None = None


_IID_MASK = (1 << 64) - 1


@dataclass
class Population:
    """A prefix whose every member behaves like one homogeneous host.

    Models dense CPE deployments without per-address entries. Members
    share the service inventory; interface identifiers listed in
    exclude_iids stay unassigned (they fall through to the serving
    router's behavior instead of answering).
    """

    prefix: Prefix
    services: dict[tuple[int, int], Responder] = field(default_factory=dict)
    echo: bool = True
    exclude_iids: frozenset = frozenset()
    llm_tool: dict | None = None

    def member(self, addr: Address) -> bool:
        if not self.prefix.contains(addr):
            return False
        return (addr.value & _IID_MASK) not in self.exclude_iids


@dataclass(frozen=True)
class SimRouter:
    router_id: str
    address: Address
    prefix: Prefix
    distance: int
    behavior: str = "forward"  # forward | loop | unreachable
    loop_with: str | None = None
    unreachable_code: int = 0

    def __post_init__(self):
        if self.distance < 1:
            raise TopologyError(f"router {self.router_id}: distance must be >= 1")
        if self.behavior not in ("forward", "loop", "unreachable"):
            raise TopologyError(f"router {self.router_id}: bad behavior {self.behavior}")
        if self.behavior == "loop" and not self.loop_with:
            raise TopologyError(f"router {self.router_id}: loop needs loop_with")


@dataclass
class TopologySpec:
    hosts: list[SimHost] = field(default_factory=list)
    populations: list[Population] = field(default_factory=list)
    routers: list[SimRouter] = field(default_factory=list)
    unassigned: list[Prefix] = field(default_factory=list)
    link: LinkSpec = field(default_factory=LinkSpec)
    seed: int = 0

    def __post_init__(self):
        self.populations = [
            p if isinstance(p, Population) else Population(prefix=p)
            for p in self.populations
        ]

    def validate(self) -> None:
        seen: set[int] = set()
        for host in self.hosts:
            if host.address.value in seen:
                raise TopologyError(f"duplicate host address {host.address}")
            seen.add(host.address.value)
        by_id = {r.router_id: r for r in self.routers}
        if len(by_id) != len(self.routers):
            raise TopologyError("duplicate router ids")
        for router in self.routers:
            if router.behavior == "loop":
                partner = by_id.get(router.loop_with)
                if partner is None or partner.loop_with != router.router_id:
                    raise TopologyError(
                        f"router {router.router_id}: loop partner must reference back"
                    )


class VirtualClock:
    """Monotone simulated time; timeouts and RGPS silence run on it."""

    def __init__(self, start: float = 0.0):
        self._now = start

    @property
    def now(self) -> float:
        return self._now

    def advance_to(self, t: float) -> None:
        if t > self._now:
            self._now = t

    def advance(self, dt: float) -> None:
        if dt > 0:
            self._now += dt


# Service responder factories.


def banner_service(text: str) -> Responder:
    raw = text.encode("latin-1")

    def script(_request: bytes) -> bytes:
        return raw

    return script


def binary_service(payload: bytes) -> Responder:
    def script(_request: bytes) -> bytes:
        return payload

    return script


def listener_only() -> Responder:
    def script(_request: bytes) -> bytes:
        return b""

    return script


def http_service(
    status: int = 200,
    headers: dict[str, str] | None = None,
    body: str | bytes = b"",
    reason: str = "OK",
) -> Responder:
    raw_body = body.encode("latin-1") if isinstance(body, str) else body
    canned = appproto.build_http_response(status, reason, headers or {}, raw_body)

    def script(_request: bytes) -> bytes:
        return canned

    return script


def dns_service(version: str | None = None, recursive: bool = True) -> Responder:
    def script(request: bytes):
        parsed = appproto.parse_dns_query(request)
        if parsed is None:
            return None
        _, name, qtype, qclass = parsed
        if qtype == appproto.DNS_TYPE_TXT and qclass == appproto.DNS_CLASS_CHAOS:
            if version and name.lower() == appproto.VERSION_BIND_NAME:
                return appproto.build_dns_txt_answer(request, version)
            return None
        if recursive and qtype == appproto.DNS_TYPE_A:
            return appproto.build_dns_a_answer(request)
        return None

    return script


def ntp_service() -> Responder:
    def script(request: bytes):
        if len(request) >= 48 and (request[0] & 0x07) == appproto.NTP_MODE_CLIENT:
            return appproto.build_ntp_server_reply()
        return None

    return script


def tls_service() -> Responder:
    def script(request: bytes):
        if request[:1] == b"\x16":
            return appproto.build_tls_server_hello()
        return None

    return script


_MODEL_LIST_PATH = "/v1/models"


def llm_emulator(tool: str, models: list[str], auth_required: bool = False) -> Responder:
    """Path-aware HTTP responder imitating one LLM deployment tool."""
    names = list(models)

    def json_models(shape: str) -> bytes:
        if shape == "ollama":
            doc = {"models": [{"name": m, "model": m} for m in names]}
        else:
            doc = {"object": "list", "data": [{"id": m} for m in names]}
        return json.dumps(doc).encode("ascii")

    def model_reply(shape: str) -> bytes:
        if auth_required:
            return appproto.build_http_response(
                403, "Forbidden", {"Content-Type": "application/json"}, b"{}"
            )
        return appproto.build_http_response(
            200, "OK", {"Content-Type": "application/json"}, json_models(shape)
        )

    def script(request: bytes) -> bytes:
        _, path = appproto.parse_http_request(request)
        if tool == "Ollama":
            if path == "/api/tags":
                return model_reply("ollama")
            if path == "/":
                return appproto.build_http_response(
                    200, "OK", {"Content-Type": "text/plain"}, b"Ollama is running"
                )
        elif tool == "LMStudio":
            if path == _MODEL_LIST_PATH:
                return model_reply("openai")
            if path == "/":
                return appproto.build_http_response(
                    200, "OK", {"Content-Type": "text/plain"},
                    b"Unexpected endpoint (GET /). Returning 200 anyway",
                )
        elif tool == "GPT4All":
            if path == _MODEL_LIST_PATH:
                return model_reply("openai")
            if path == "/":
                return appproto.build_http_response(
                    200, "OK",
                    {"Content-Type": "application/x-empty", "Server": "GPT4All API"},
                    b"",
                )
        elif tool == "JanAi":
            if path == _MODEL_LIST_PATH:
                return model_reply("openai")
            if path == "/":
                return appproto.build_http_response(
                    301, "Moved Permanently", {"Location": "./static/index.html"}, b""
                )
        elif tool == "VLLM":
            if path == _MODEL_LIST_PATH:
                return model_reply("openai")
            if path == "/":
                return appproto.build_http_response(
                    404, "Not Found",
                    {"Content-Type": "application/json", "Server": "vLLM"},
                    b"{detail: Not Found}",
                )
        elif tool == "Xinference":
            if path == _MODEL_LIST_PATH:
                return model_reply("openai")
            if path == "/":
                return appproto.build_http_response(
                    307, "Temporary Redirect", {"Location": "/ui/"}, b""
                )
        elif tool == "LobeChat":
            if path == "/":
                body = (
                    b"<!DOCTYPE html><html><head><title>LobeChat</title>"
                    b'<script src="/_next/static/lobechat.js"></script></head>'
                    b"<body><div id=\"lobechat\"></div></body></html>"
                )
                return appproto.build_http_response(
                    200, "OK", {"Content-Type": "text/html"}, body
                )
        return appproto.build_http_response(404, "Not Found", {}, b"not found")

    return script


_TOOL_PORTS = {
    "Ollama": 11434,
    "LMStudio": 1234,
    "GPT4All": 4891,
    "JanAi": 1337,
    "VLLM": 8000,
    "Xinference": 9997,
    "LobeChat": 3210,
}


def install_llm_tool(host, tool: str, models: list[str],
                     auth_required: bool = False) -> None:
    """Attach a tool emulator to a host or population on its fixed port."""
    port = _TOOL_PORTS[tool]
    host.services[(wire.TRANSPORT_TCP, port)] = llm_emulator(tool, models, auth_required)
    host.llm_tool = {"tool": tool, "models": list(models), "auth_required": auth_required}


_TRANSPORTS = {"tcp": wire.TRANSPORT_TCP, "udp": wire.TRANSPORT_UDP}


def build_service(desc: dict) -> Responder:
    if "banner" in desc:
        return banner_service(desc["banner"])
    if "http" in desc:
        h = desc["http"]
        return http_service(
            h.get("status", 200), h.get("headers", {}), h.get("body", ""),
            h.get("reason", "OK"),
        )
    if "dns" in desc:
        d = desc["dns"] if isinstance(desc["dns"], dict) else {}
        return dns_service(d.get("version"), d.get("recursive", True))
    if "ntp" in desc:
        return ntp_service()
    if "tls" in desc:
        return tls_service()
    if "listener" in desc:
        return listener_only()
    if "binary_text" in desc:
        return binary_service(desc["binary_text"].encode("latin-1"))
    raise TopologyError(f"unknown service descriptor: {sorted(desc)}")


def host_from_dict(doc: dict) -> SimHost:
    host = SimHost(address=Address.parse(doc["address"]), echo=doc.get("echo", True))
    for desc in doc.get("services", []):
        transport = _TRANSPORTS[desc.get("transport", "tcp")]
        host.services[(transport, desc["port"])] = build_service(desc)
        host.descriptors.append(desc)
    tool = doc.get("llm_tool")
    if tool:
        install_llm_tool(
            host, tool["tool"], tool.get("models", []), tool.get("auth_required", False)
        )
    return host


def population_from_dict(doc) -> Population:
    """Accepts a bare prefix string or the full population object form."""
    if isinstance(doc, str):
        return Population(prefix=parse_prefix(doc))
    population = Population(
        prefix=parse_prefix(doc["prefix"]),
        echo=doc.get("echo", True),
        exclude_iids=frozenset(
            x if isinstance(x, int) else int(x, 0)
            for x in doc.get("exclude_iids", [])
        ),
    )
    for desc in doc.get("services", []):
        transport = _TRANSPORTS[desc.get("transport", "tcp")]
        population.services[(transport, desc["port"])] = build_service(desc)
    tool = doc.get("llm_tool")
    if tool:
        install_llm_tool(
            population, tool["tool"], tool.get("models", []),
            tool.get("auth_required", False),
        )
    return population


def topology_from_dict(doc: dict) -> TopologySpec:
    link_doc = doc.get("link", {})
    spec = TopologySpec(
        hosts=[host_from_dict(h) for h in doc.get("hosts", [])],
        populations=[population_from_dict(p) for p in doc.get("populations", [])],
        routers=[
            SimRouter(
                router_id=r["id"],
                address=Address.parse(r["address"]),
                prefix=parse_prefix(r["prefix"]),
                distance=r["distance"],
                behavior=r.get("behavior", "forward"),
                loop_with=r.get("loop_with"),
                unreachable_code=r.get("unreachable_code", 0),
            )
            for r in doc.get("routers", [])
        ],
        unassigned=[parse_prefix(p) for p in doc.get("unassigned", [])],
        link=LinkSpec(
            latency=link_doc.get("latency", 0.01),
            jitter=link_doc.get("jitter", 0.0),
            drop_prob=link_doc.get("drop_prob", 0.0),
        ),
        seed=doc.get("seed", 0),
    )
    spec.validate()
    return spec


def load_topology(path) -> TopologySpec:
    with open(path, "r", encoding="utf-8") as fh:
        return topology_from_dict(json.load(fh))


class SimNetwork:
    """The simulated network: turns probe frames into timed responses."""

    def __init__(self, spec: TopologySpec):
        spec.validate()
        self.spec = spec
        self._hosts = {h.address.value: h for h in spec.hosts}
        self._routers_by_id = {r.router_id: r for r in spec.routers}
        self._rng = random.Random(spec.seed)
        self.diagnostics: dict[str, int] = {"unparseable": 0}

    # Membership (the simulated ground truth).

    def has_host(self, addr: Address) -> bool:
        if addr.value in self._hosts:
            return True
        if any(r.address == addr for r in self.spec.routers):
            return True
        return any(p.member(addr) for p in self.spec.populations)

    def _serving_router(self, dst: Address) -> SimRouter | None:
        best = None
        for router in self.spec.routers:
            if router.prefix.contains(dst):
                if best is None or router.prefix.length > best.prefix.length:
                    best = router
        return best

    @staticmethod
    def _transit_reporter(router: SimRouter, hop: int) -> Address:
        # Anonymous transit hop k on the path toward this router's prefix.
        return Address(router.address.value ^ (hop << 16))

    def _emit(self, responses, raw: bytes, now: float) -> None:
        if self._rng.random() < self.spec.link.drop_prob:
            return
        latency = self.spec.link.latency
        if self.spec.link.jitter:
            latency += self.spec.link.jitter * self._rng.random()
        responses.append((raw, now + latency))

    def deliver(self, packet: bytes, now: float) -> list[tuple[bytes, float]]:
        """Route one probe frame; returns (response bytes, arrival time) pairs."""
        responses: list[tuple[bytes, float]] = []
        try:
            frame = wire.parse_frame(packet)
        except wire.FrameError:
            self.diagnostics["unparseable"] += 1
            return responses

        dst = frame.dst
        hop = frame.hop_limit
        router = self._serving_router(dst)
        target_router = next(
            (r for r in self.spec.routers if r.address == dst), None
        )

        if target_router is not None:
            # The device itself is the destination: d-1 transit decrements.
            transit = target_router.distance - 1
            if hop <= transit:
                reporter = self._transit_reporter(target_router, hop)
                self._emit(
                    responses,
                    wire.build_icmp_error(reporter, packet, wire.ICMP_TIME_EXCEEDED, 0),
                    now,
                )
                return responses
            self._answer_as_host(responses, None, frame, now)
            return responses

        if router is None:
            self._deliver_direct(responses, frame, packet, now)
            return responses

        distance = router.distance
        if hop <= distance - 1:
            reporter = self._transit_reporter(router, hop)
            self._emit(
                responses,
                wire.build_icmp_error(reporter, packet, wire.ICMP_TIME_EXCEEDED, 0),
                now,
            )
            return responses

        host = self._final_entity(dst)
        remaining = hop - distance  # after the serving router's decrement

        if host is not None:
            if remaining == 0:
                self._emit(
                    responses,
                    wire.build_icmp_error(
                        router.address, packet, wire.ICMP_TIME_EXCEEDED, 0
                    ),
                    now,
                )
                return responses
            self._answer_as_host(responses, host, frame, now)
            return responses

        if router.behavior == "unreachable":
            self._emit(
                responses,
                wire.build_icmp_error(
                    router.address, packet, wire.ICMP_DEST_UNREACH,
                    router.unreachable_code,
                ),
                now,
            )
            return responses

        if router.behavior == "loop":
            partner = self._routers_by_id[router.loop_with]
            if remaining == 0:
                reporter = router.address
            else:
                # Bounces alternate partner, entry, partner, ...
                reporter = partner.address if remaining % 2 == 1 else router.address
            self._emit(
                responses,
                wire.build_icmp_error(reporter, packet, wire.ICMP_TIME_EXCEEDED, 0),
                now,
            )
            return responses

        # Forward toward empty space.
        if remaining == 0:
            self._emit(
                responses,
                wire.build_icmp_error(router.address, packet, wire.ICMP_TIME_EXCEEDED, 0),
                now,
            )
        return responses

    def _final_entity(self, dst: Address):
        host = self._hosts.get(dst.value)
        if host is not None:
            return host
        for population in self.spec.populations:
            if population.member(dst):
                return population
        return None

    def _deliver_direct(self, responses, frame, packet, now) -> None:
        host = self._final_entity(frame.dst)
        if host is None:
            return
        self._answer_as_host(responses, host, frame, now)

    def _answer_as_host(self, responses, host, frame, now) -> None:
        """Answer a frame that actually reached its destination entity."""
        dst, src = frame.dst, frame.src

        if frame.icmp is not None:
            if frame.icmp.icmp_type != wire.ICMP_ECHO_REQUEST:
                return
            if host is not None and not host.echo:
                return
            self._emit(responses, wire.build_echo_reply(frame), now)
            return

        if frame.tcp is not None:
            tcp = frame.tcp
            if not tcp.flags & wire.TCP_SYN:
                return
            listening = (
                host is not None
                and (wire.TRANSPORT_TCP, tcp.dport) in host.services
            )
            flags = wire.TCP_SYN | wire.TCP_ACK if listening else wire.TCP_RST | wire.TCP_ACK
            self._emit(
                responses,
                wire.build_tcp(
                    dst, src, tcp.dport, tcp.sport, 0, (tcp.seq + 1) & 0xFFFFFFFF, flags
                ),
                now,
            )
            return

        if frame.app is not None:
            app = frame.app
            responder = None
            if host is not None:
                responder = host.services.get((app.transport, app.port))
            if responder is None:
                if app.transport == wire.TRANSPORT_TCP:
                    # Connection refused: an empty app reply.
                    self._emit(
                        responses,
                        wire.build_app(dst, src, app.transport, app.port, app.conn_id, b""),
                        now,
                    )
                return  # closed UDP port: silence
            reply = responder(app.payload)
            if reply is None:
                if app.transport == wire.TRANSPORT_TCP:
                    reply = b""
                else:
                    return
            self._emit(
                responses,
                wire.build_app(dst, src, app.transport, app.port, app.conn_id, reply),
                now,
            )


def build_topology(spec: TopologySpec) -> SimNetwork:
    """Construct the simulated network; raises TopologyError on bad specs."""
    return SimNetwork(spec)


class SimBackend:
    """Transport handle over a SimNetwork; advances a virtual clock."""

    def __init__(self, network: SimNetwork, clock: VirtualClock | None = None):
        self.network = network
        self.clock = clock or VirtualClock()
        self._pending: list[tuple[float, int, bytes, Address]] = []
        self._seq = 0

    def open(self) -> None:
        pass

    def close(self) -> None:
        self._pending.clear()

    def now(self) -> float:
        return self.clock.now

    def send(self, data: bytes, destination: Address) -> None:
        for raw, arrival in self.network.deliver(data, self.clock.now):
            source = wire.parse_frame(raw).src
            heapq.heappush(self._pending, (arrival, self._seq, raw, source))
            self._seq += 1

    def receive(self, max_wait: float) -> tuple[bytes, Address] | None:
        deadline = self.clock.now + max(max_wait, 0.0)
        if self._pending and self._pending[0][0] <= deadline:
            arrival, _, raw, source = heapq.heappop(self._pending)
            self.clock.advance_to(arrival)
            return raw, source
        self.clock.advance_to(deadline)
        return None
