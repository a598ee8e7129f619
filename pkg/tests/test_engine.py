from __future__ import annotations

import pytest

from conftest import host, make_scanner
from periscan import wire
from periscan.backends import StubBackend, echo_responder
from periscan.engine import (
    AppPayload,
    AppRequest,
    BackendError,
    Icmp,
    Icmp6Echo,
    ProbeSpec,
    RateLimit,
    Rst,
    Scanner,
    SynAck,
    TcpSyn,
    Timeout,
    Unsolicited,
    _Outstanding,
    match_response,
    run_scan,
)
from periscan.prefixes import Address, parse_prefix
from periscan.simnet import SimBackend, TopologySpec, banner_service, build_topology


def fake_clock():
    state = {"now": 0.0}

    def advance(dt):
        state["now"] += dt

    def now():
        return state["now"]

    return now, advance


class TestSpecs:
    def test_hop_limit_bounds(self):
        with pytest.raises(ValueError):
            Icmp6Echo(hop_limit=0)
        with pytest.raises(ValueError):
            Icmp6Echo(hop_limit=256)

    def test_read_limit_positive(self):
        with pytest.raises(ValueError):
            AppRequest(port=80, read_limit=0)

    def test_rate_limit_positive(self):
        with pytest.raises(ValueError):
            RateLimit(0)
        assert RateLimit().max_pps <= 100_000

    def test_timeout_positive(self):
        with pytest.raises(ValueError):
            ProbeSpec(Icmp6Echo(), timeout=0)


def _population_spec(prefix="2001:db8:100::/121", seed=0):
    return TopologySpec(populations=[parse_prefix(prefix)], seed=seed)


class TestRunScan:
    def test_all_responsive(self):
        prefix = parse_prefix("2001:db8:100::/121")
        scanner = make_scanner(_population_spec())
        targets = [prefix.address_at(i) for i in range(100)]
        responses = list(scanner.scan(targets, scanner.spec(Icmp6Echo())))
        assert len(responses) == 100
        assert all(not r.is_timeout for r in responses)
        assert {r.source.value for r in responses} == {t.value for t in targets}
        assert scanner.last_stats.conservation_holds()

    def test_empty_targets(self):
        scanner = make_scanner(_population_spec())
        before = scanner.now()
        responses = list(scanner.scan([], scanner.spec(Icmp6Echo())))
        assert responses == []
        assert scanner.last_stats.targets_probed == 0
        assert scanner.now() == before

    def test_timeouts_for_silent_targets(self):
        scanner = make_scanner(TopologySpec())
        targets = [Address.parse("2001:db8::1"), Address.parse("2001:db8::2")]
        responses = list(scanner.scan(targets, scanner.spec(Icmp6Echo())))
        assert len(responses) == 2
        assert all(isinstance(r.payload, Timeout) for r in responses)
        assert all(r.source == r.target for r in responses)
        stats = scanner.last_stats
        assert stats.timeouts == 2
        assert stats.conservation_holds()

    def test_retries_count_sends(self):
        scanner = make_scanner(TopologySpec(), retries=2)
        target = Address.parse("2001:db8::1")
        responses = list(scanner.scan([target], scanner.spec(Icmp6Echo())))
        assert len(responses) == 1
        assert scanner.last_stats.sent_packets == 3  # initial + 2 retries
        assert scanner.last_stats.targets_probed == 1

    def test_virtual_clock_advances_with_rate(self):
        # 50 targets at 10 pps: the send schedule alone spans 5 virtual seconds.
        scanner = make_scanner(_population_spec(), rate=10)
        prefix = parse_prefix("2001:db8:100::/121")
        targets = [prefix.address_at(i) for i in range(50)]
        t0 = scanner.now()
        list(scanner.scan(targets, scanner.spec(Icmp6Echo())))
        assert scanner.now() - t0 >= 5.0

    def test_rate_bound_invariant(self):
        scanner = make_scanner(_population_spec(), rate=100)
        prefix = parse_prefix("2001:db8:100::/121")
        targets = [prefix.address_at(i) for i in range(120)]
        list(scanner.scan(targets, scanner.spec(Icmp6Echo())))
        stats = scanner.last_stats
        assert stats.sent_packets / stats.elapsed <= 100 * 1.05

    def test_responses_stream_in_arrival_order(self):
        scanner = make_scanner(_population_spec(seed=3))
        prefix = parse_prefix("2001:db8:100::/121")
        targets = [prefix.address_at(i) for i in range(32)]
        arrivals = [r.arrived for r in scanner.scan(targets, scanner.spec(Icmp6Echo()))]
        assert arrivals == sorted(arrivals)

    def test_backend_failure_aborts_cleanly(self):
        class FailingBackend:
            def __init__(self):
                self.sends = 0
                self.clock = 0.0

            def now(self):
                return self.clock

            def send(self, data, destination):
                self.sends += 1
                if self.sends > 3:
                    raise OSError("socket gone")

            def receive(self, max_wait):
                self.clock += max(max_wait, 0.0)
                return None

        backend = FailingBackend()
        scanner = Scanner(backend, RateLimit(1000), timeout=0.5, retries=0)
        targets = [Address(i + 1) for i in range(10)]
        run = scanner.scan(targets, scanner.spec(Icmp6Echo()))
        with pytest.raises(BackendError):
            list(run)
        assert scanner.last_stats.aborted

    def test_cancel_stops_sending(self):
        scanner = make_scanner(_population_spec())
        prefix = parse_prefix("2001:db8:100::/121")
        targets = (prefix.address_at(i) for i in range(100))
        run = scanner.scan(targets, scanner.spec(Icmp6Echo()))
        got = [next(run) for _ in range(5)]
        run.cancel()
        assert len(got) == 5
        assert scanner.last_stats.aborted
        assert scanner.last_stats.sent_packets < 100


class TestMatchResponse:
    def _entry(self, key, target):
        return {key: _Outstanding(key=key, target=target, send_time=0.0,
                                  deadline=5.0, attempts_left=0)}

    def test_time_exceeded_matched_via_quote(self):
        target = Address.parse("2001:db8::5")
        probe = wire.build_echo_request(Address.parse("fd00::1"), target, 32, 7, 9)
        key = ("icmp", 7, 9)
        reporter = Address.parse("2001:db8::fe")
        raw = wire.build_icmp_error(reporter, probe, wire.ICMP_TIME_EXCEEDED, 0)
        result = match_response(raw, reporter, self._entry(key, target), now=1.0)
        assert isinstance(result.payload, Icmp)
        assert result.payload.icmp_type == 3
        assert result.payload.echoed_hop_limit == 32
        assert result.probe_id == key

    def test_unknown_tag_unsolicited(self):
        target = Address.parse("2001:db8::5")
        probe = wire.build_echo_request(Address.parse("fd00::1"), target, 32, 7, 9)
        raw = wire.build_icmp_error(
            Address.parse("2001:db8::fe"), probe, wire.ICMP_TIME_EXCEEDED, 0
        )
        result = match_response(raw, target, {}, now=1.0)
        assert isinstance(result, Unsolicited)

    def test_synack_wrong_ack_unsolicited(self):
        target = Address.parse("2001:db8::5")
        key = ("tcp", 0xC001, 80, 1000)
        raw = wire.build_tcp(
            target, Address.parse("fd00::1"), 80, 0xC001, 0, 999,  # ack != seq+1
            wire.TCP_SYN | wire.TCP_ACK,
        )
        result = match_response(raw, target, self._entry(key, target), now=0.5)
        assert isinstance(result, Unsolicited)

    def test_synack_matched(self):
        target = Address.parse("2001:db8::5")
        key = ("tcp", 0xC001, 80, 1000)
        raw = wire.build_tcp(
            target, Address.parse("fd00::1"), 80, 0xC001, 0, 1001,
            wire.TCP_SYN | wire.TCP_ACK,
        )
        result = match_response(raw, target, self._entry(key, target), now=0.5)
        assert isinstance(result.payload, SynAck)

    def test_truncated_datagram_unsolicited_with_reason(self):
        result = match_response(b"\x06\x3a", Address(1), {}, now=0.0)
        assert isinstance(result, Unsolicited)
        assert "unparseable" in result.reason

    def test_app_refusal_classifies_rst(self):
        target = Address.parse("2001:db8::5")
        key = ("app", 77)
        raw = wire.build_app(
            target, Address.parse("fd00::1"), wire.TRANSPORT_TCP, 80, 77, b""
        )
        result = match_response(raw, target, self._entry(key, target), now=0.5)
        assert isinstance(result.payload, Rst)

    def test_backend_equivalence_byte_identical_datagram(self):
        # the same bytes classify identically regardless of delivery path
        target = Address.parse("2001:db8::1")
        spec = TopologySpec(hosts=[host("2001:db8::1")])
        sim = SimBackend(build_topology(spec))
        probe = wire.build_echo_request(Address.parse("fd00::1"), target, 64, 3, 4)
        sim.send(probe, target)
        sim_raw, _ = sim.receive(1.0)

        stub = StubBackend(responder=echo_responder)
        stub.send(probe, target)
        stub_raw, _ = stub.receive(0.0)

        assert sim_raw == stub_raw
        key = ("icmp", 3, 4)
        a = match_response(sim_raw, target, self._entry(key, target), now=1.0)
        b = match_response(stub_raw, target, self._entry(key, target), now=1.0)
        assert a.payload == b.payload


class TestAppParsing:
    def test_http_parsed(self):
        spec = TopologySpec(hosts=[host("2001:db8::1")])
        spec.hosts[0].services[(wire.TRANSPORT_TCP, 80)] = banner_service(
            "HTTP/1.1 200 OK\r\nServer: micro_httpd\r\n\r\n<html></html>"
        )
        scanner = make_scanner(spec)
        request = AppRequest(port=80, request=b"GET / HTTP/1.1\r\n\r\n")
        responses = list(scanner.scan([spec.hosts[0].address], scanner.spec(request)))
        payload = responses[0].payload
        assert isinstance(payload, AppPayload)
        assert payload.status_line == "HTTP/1.1 200 OK"
        assert payload.header("server") == "micro_httpd"
        assert payload.body_prefix == b"<html></html>"

    def test_read_limit_bounds_body(self):
        spec = TopologySpec(hosts=[host("2001:db8::1")])
        spec.hosts[0].services[(wire.TRANSPORT_TCP, 21)] = banner_service("A" * 9000)
        scanner = make_scanner(spec)
        request = AppRequest(port=21, read_limit=128)
        responses = list(scanner.scan([spec.hosts[0].address], scanner.spec(request)))
        assert len(responses[0].payload.body_prefix) == 128


class TestTcpScan:
    def test_syn_to_listener_and_closed(self):
        spec = TopologySpec(hosts=[host("2001:db8::1")])
        spec.hosts[0].services[(wire.TRANSPORT_TCP, 22)] = banner_service("SSH-2.0-x")
        scanner = make_scanner(spec)
        target = spec.hosts[0].address
        open_resp = list(scanner.scan([target], scanner.spec(TcpSyn(port=22))))
        closed_resp = list(scanner.scan([target], scanner.spec(TcpSyn(port=23))))
        assert isinstance(open_resp[0].payload, SynAck)
        assert isinstance(closed_resp[0].payload, Rst)


def test_run_scan_function_signature():
    spec = TopologySpec(populations=[parse_prefix("2001:db8:100::/126")])
    backend = SimBackend(build_topology(spec))
    prefix = parse_prefix("2001:db8:100::/126")
    targets = [prefix.address_at(i) for i in range(4)]
    run = run_scan(targets, ProbeSpec(Icmp6Echo(), timeout=1.0, retries=0),
                   RateLimit(1000), backend)
    assert len(list(run)) == 4
    assert run.stats.conservation_holds()
