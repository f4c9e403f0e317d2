from __future__ import annotations

from functools import partial

import pytest

from ubfsim.directory import Directory
from ubfsim.engine import (
    Action,
    ConnectionEvent,
    Decision,
    EngineConfig,
    EventKind,
    FlowTable,
    Reason,
    UbfEngine,
    Verdict,
    decide,
    expire_flows,
    handle_packet,
)
from ubfsim.host import Endpoint, Host, Proto
from ubfsim.ident import SimTransport, query_remote


class Net:
    def __init__(self):
        self.d = Directory()
        self.alice = self.d.create_user("alice")
        self.bob = self.d.create_user("bob")
        self.proj = self.d.create_group("proj1")
        self.d.add_member(self.proj.gid, self.bob.uid)
        self.d.add_member(self.proj.gid, self.alice.uid)
        self.ha = Host("hA", self.d)
        self.hb = Host("hB", self.d)
        self.tr = SimTransport()
        self.tr.register(self.ha)
        self.tr.register(self.hb)
        self.ident = partial(query_remote, self.tr)
        self.listener = self.hb.spawn_process(self.alice.uid)
        self.hb.bind_socket(self.listener, "TCP", 8888, "LISTENER")
        self.hb.bind_socket(self.listener, "UDP", 8888, "LISTENER")
        self.next_port = 40000

    def syn(self, uid, port=8888, proto=Proto.TCP, t=0, src_host=None):
        src_host = src_host or self.ha
        pid = src_host.spawn_process(uid)
        sport = self.next_port
        self.next_port += 1
        src_host.bind_socket(pid, proto, sport, "OUTBOUND", (self.hb.address, port))
        kind = EventKind.NEW_SYN if proto is Proto.TCP else EventKind.PACKET
        return ConnectionEvent(proto, Endpoint(src_host.address, sport),
                               Endpoint(self.hb.address, port), kind, t)

    def decide(self, event, config=EngineConfig()):
        return decide(event, self.hb, self.ident, self.d, config)


@pytest.fixture
def net():
    return Net()


def test_same_user_allowed(net):
    assert net.decide(net.syn(net.alice.uid)) == Verdict(Decision.ALLOW, Reason.SAME_USER)


def test_group_member_allowed_after_newgrp(net):
    ev = net.syn(net.bob.uid)
    assert net.decide(ev) == Verdict(Decision.DENY, Reason.NOT_MEMBER)
    net.hb.set_primary_group(net.listener, net.proj.gid)
    assert net.decide(ev) == Verdict(Decision.ALLOW, Reason.GROUP_MEMBER)


def test_below_threshold_passes(net):
    ev = net.syn(net.bob.uid, port=80)
    assert net.decide(ev) == Verdict(Decision.PASS, Reason.BELOW_THRESHOLD)


def test_static_pass_port(net):
    ev = net.syn(net.bob.uid, port=10113)
    assert net.decide(ev) == Verdict(Decision.PASS, Reason.STATIC_PASS)


def test_no_listener(net):
    ev = net.syn(net.alice.uid, port=9999)
    assert net.decide(ev) == Verdict(Decision.DENY, Reason.NO_LISTENER)


def test_ident_unreachable_fails_closed(net):
    ev = net.syn(net.alice.uid)
    net.tr.down.add(net.ha.address)
    assert net.decide(ev) == Verdict(Decision.DENY, Reason.IDENT_FAIL)


def test_ident_slow_times_out(net):
    ev = net.syn(net.alice.uid)
    net.tr.latency_ms[net.ha.address] = 500
    assert net.decide(ev) == Verdict(Decision.DENY, Reason.IDENT_TIMEOUT)
    assert net.decide(ev, EngineConfig(ident_timeout_ms=600)).decision is Decision.ALLOW


def test_ident_no_socket(net):
    ev = ConnectionEvent(Proto.TCP, Endpoint("hA", 41234), Endpoint("hB", 8888), EventKind.NEW_SYN)
    assert net.decide(ev) == Verdict(Decision.DENY, Reason.IDENT_FAIL)


def test_loopback_skips_the_wire(net):
    ev = net.syn(net.alice.uid, src_host=net.hb)
    before = net.tr.exchanges
    assert net.decide(ev) == Verdict(Decision.ALLOW, Reason.SAME_USER)
    assert net.tr.exchanges == before


def test_verdict_pairing_enforced():
    with pytest.raises(ValueError):
        Verdict(Decision.ALLOW, Reason.NOT_MEMBER)
    with pytest.raises(ValueError):
        Verdict(Decision.PASS, Reason.SAME_USER)
    with pytest.raises(ValueError):
        Verdict(Decision.DENY, Reason.STATIC_PASS)


def _counting(verdict):
    calls = []

    def fake(event):
        calls.append(event)
        return verdict
    return fake, calls


def _ev(proto=Proto.TCP, kind=EventKind.NEW_SYN, t=0, sport=40000):
    return ConnectionEvent(proto, Endpoint("hA", sport), Endpoint("hB", 8888), kind, t)


def test_conntrack_decides_once():
    table = FlowTable()
    fake, calls = _counting(Verdict(Decision.ALLOW, Reason.SAME_USER))
    assert handle_packet(table, _ev(), fake).action is Action.DELIVER
    for i in range(10):
        out = handle_packet(table, _ev(kind=EventKind.PACKET, t=i + 1), fake)
        assert out == (Action.DELIVER, None)
    assert len(calls) == 1


def test_denied_syn_is_never_cached():
    table = FlowTable()
    fake, calls = _counting(Verdict(Decision.DENY, Reason.NOT_MEMBER))
    for i in range(3):
        assert handle_packet(table, _ev(t=i), fake).action is Action.DROP
    assert len(calls) == 3
    assert len(table) == 0


def test_data_without_flow_dropped_without_decide():
    table = FlowTable()
    fake, calls = _counting(Verdict(Decision.ALLOW, Reason.SAME_USER))
    assert handle_packet(table, _ev(kind=EventKind.PACKET), fake) == (Action.DROP, None)
    assert calls == []


def test_udp_first_packet_decides_then_table():
    table = FlowTable(udp_idle_ms=30_000)
    fake, calls = _counting(Verdict(Decision.ALLOW, Reason.GROUP_MEMBER))
    assert handle_packet(table, _ev(Proto.UDP, EventKind.PACKET, t=0), fake).action is Action.DELIVER
    assert handle_packet(table, _ev(Proto.UDP, EventKind.PACKET, t=29_999), fake) == \
        (Action.DELIVER, None)
    assert len(calls) == 1


def test_pass_flows_defer_to_static():
    table = FlowTable()
    fake, calls = _counting(Verdict(Decision.PASS, Reason.BELOW_THRESHOLD))
    assert handle_packet(table, _ev(), fake).action is Action.DEFER_TO_STATIC
    assert handle_packet(table, _ev(kind=EventKind.PACKET), fake) == (Action.DEFER_TO_STATIC, None)
    assert len(calls) == 1


def test_expire_flows_boundaries():
    table = FlowTable(tcp_idle_ms=1000)
    assert expire_flows(table, 0) == 0
    allow = Verdict(Decision.ALLOW, Reason.SAME_USER)
    table.insert(_ev().flow_key, allow, 0)
    table.insert(_ev(sport=40001).flow_key, allow, 500)
    assert expire_flows(table, 999) == 0
    assert expire_flows(table, 1000) == 1  # expires_at == now is gone
    assert list(table.entries) == [_ev(sport=40001).flow_key]


def test_traffic_refreshes_idle_timer():
    table = FlowTable(tcp_idle_ms=1000)
    fake, calls = _counting(Verdict(Decision.ALLOW, Reason.SAME_USER))
    handle_packet(table, _ev(t=0), fake)
    for t in (900, 1800, 2700):
        assert handle_packet(table, _ev(kind=EventKind.PACKET, t=t), fake).action is Action.DELIVER
    assert expire_flows(table, 3699) == 0
    assert expire_flows(table, 3700) == 1
    # the lapsed flow needs a fresh SYN
    assert handle_packet(table, _ev(kind=EventKind.PACKET, t=3800), fake).action is Action.DROP
    assert len(calls) == 1


def test_lookup_drops_stale_entries():
    table = FlowTable(tcp_idle_ms=10)
    table.insert(_ev().flow_key, Verdict(Decision.ALLOW, Reason.SAME_USER), 0)
    assert table.lookup(_ev().flow_key, 10) is None
    assert len(table) == 0


def test_deny_cannot_be_inserted():
    with pytest.raises(ValueError):
        FlowTable().insert(_ev().flow_key, Verdict(Decision.DENY, Reason.NOT_MEMBER), 0)


def test_engine_wrapper(net):
    engine = UbfEngine(net.hb, net.d, net.ident)
    ev = net.syn(net.alice.uid)
    assert engine.handle_packet(ev).action is Action.DELIVER
    data = ConnectionEvent(ev.proto, ev.src, ev.dst, EventKind.PACKET, 5)
    assert engine.handle_packet(data).action is Action.DELIVER
    assert engine.decide_calls == 1
    assert engine.expire(600_005) == 1


def test_engine_config_from_dict():
    cfg = EngineConfig.from_dict({"threshold": 1024, "pass_ports": [10113], "tcp_idle_s": 600,
                                  "udp_idle_s": 30, "ident_timeout_ms": 200})
    assert cfg == EngineConfig()
    assert cfg.idle_ms(Proto.UDP) == 30_000
