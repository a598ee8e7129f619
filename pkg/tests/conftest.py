from __future__ import annotations

import pytest

from periscan import wire
from periscan.engine import RateLimit, Scanner
from periscan.prefixes import Address, parse_prefix
from periscan.simnet import (
    LinkSpec,
    SimBackend,
    SimHost,
    SimRouter,
    TopologySpec,
    build_topology,
)


def make_scanner(
    spec: TopologySpec,
    rate: int = 2000,
    timeout: float = 1.0,
    retries: int = 0,
    seed: int = 0,
) -> Scanner:
    backend = SimBackend(build_topology(spec))
    return Scanner(backend, RateLimit(rate), timeout=timeout, retries=retries, seed=seed)


def host(address: str, **kwargs) -> SimHost:
    return SimHost(address=Address.parse(address), **kwargs)


def router(
    router_id: str,
    address: str,
    prefix: str,
    distance: int,
    behavior: str = "forward",
    loop_with: str | None = None,
    unreachable_code: int = 0,
) -> SimRouter:
    return SimRouter(
        router_id=router_id,
        address=Address.parse(address),
        prefix=parse_prefix(prefix),
        distance=distance,
        behavior=behavior,
        loop_with=loop_with,
        unreachable_code=unreachable_code,
    )


def loop_pair(prefix: str, distance: int, base: str = "2001:db8::aa") -> list[SimRouter]:
    a = Address.parse(base)
    b = Address(a.value + 1)
    return [
        SimRouter("loop-a", a, parse_prefix(prefix), distance, "loop", "loop-b"),
        SimRouter("loop-b", b, parse_prefix(prefix), distance + 1, "loop", "loop-a"),
    ]


@pytest.fixture
def quiet_link() -> LinkSpec:
    return LinkSpec(latency=0.001, jitter=0.0, drop_prob=0.0)


def tcp_service(port: int):
    return (wire.TRANSPORT_TCP, port)


def udp_service(port: int):
    return (wire.TRANSPORT_UDP, port)
