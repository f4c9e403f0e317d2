"""User-based firewall: new-connection decisions and the flow table.

Only new flows (a TCP SYN, or the first UDP packet of an unseen 5-tuple) reach
:func:`decide`; anything matching a live flow-table entry is handled from the
table.  Denials are never cached.
"""

from __future__ import annotations

import enum
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, NamedTuple

from .directory import Directory
from .host import Endpoint, Host, Proto, Role
from .ident import (
    DEFAULT_TIMEOUT_MS,
    IDENT_PORT,
    IdentOk,
    IdentQuery,
    QueryFailure,
    QueryResult,
    respond,
)


class Decision(str, enum.Enum):
    ALLOW = "ALLOW"
    DENY = "DENY"
    PASS = "PASS"


class Reason(str, enum.Enum):
    SAME_USER = "SAME_USER"
    GROUP_MEMBER = "GROUP_MEMBER"
    BELOW_THRESHOLD = "BELOW_THRESHOLD"
    STATIC_PASS = "STATIC_PASS"
    NO_LISTENER = "NO_LISTENER"
    NOT_MEMBER = "NOT_MEMBER"
    IDENT_FAIL = "IDENT_FAIL"
    IDENT_TIMEOUT = "IDENT_TIMEOUT"


_ALLOWED_REASONS = {
    Decision.ALLOW: {Reason.SAME_USER, Reason.GROUP_MEMBER},
    Decision.PASS: {Reason.BELOW_THRESHOLD, Reason.STATIC_PASS},
    Decision.DENY: {Reason.NO_LISTENER, Reason.NOT_MEMBER, Reason.IDENT_FAIL,
                    Reason.IDENT_TIMEOUT},
}


@dataclass(frozen=True)
class Verdict:
    decision: Decision
    reason: Reason

    def __post_init__(self) -> None:
        if self.reason not in _ALLOWED_REASONS[self.decision]:
            raise ValueError(f"{self.decision.value} cannot carry reason {self.reason.value}")


class EventKind(str, enum.Enum):
    NEW_SYN = "NEW_SYN"
    PACKET = "PACKET"


@dataclass(frozen=True)
class ConnectionEvent:
    proto: Proto
    src: Endpoint
    dst: Endpoint
    kind: EventKind
    t: int = 0

    @property
    def flow_key(self) -> tuple[Proto, Endpoint, Endpoint]:
        return (self.proto, self.src, self.dst)

    def to_dict(self) -> dict[str, Any]:
        return {
            "proto": self.proto.value,
            "src": [self.src.addr, self.src.port],
            "dst": [self.dst.addr, self.dst.port],
            "kind": self.kind.value,
        }


@dataclass(frozen=True)
class EngineConfig:
    threshold: int = 1024
    pass_ports: frozenset[int] = frozenset({IDENT_PORT})
    tcp_idle_s: int = 600
    udp_idle_s: int = 30
    ident_timeout_ms: int = DEFAULT_TIMEOUT_MS

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EngineConfig:
        kwargs = dict(data)
        if "pass_ports" in kwargs:
            kwargs["pass_ports"] = frozenset(kwargs["pass_ports"])
        return cls(**kwargs)

    def idle_ms(self, proto: Proto) -> int:
        return 1000 * (self.tcp_idle_s if proto is Proto.TCP else self.udp_idle_s)


IdentClient = Callable[[str, IdentQuery, int], QueryResult]


class DecisionDetail(NamedTuple):
    verdict: Verdict
    listener: Any = None  # Owner of the local listener, when found
    connector: Any = None  # IdentOk for the initiator, when resolved


def decide_detail(event: ConnectionEvent, local_host: Host, ident_client: IdentClient,
                  directory: Directory, config: EngineConfig = EngineConfig()) -> DecisionDetail:
    """Run the decision pipeline and return the verdict with the identities used."""
    port = event.dst.port
    if port < config.threshold:
        return DecisionDetail(Verdict(Decision.PASS, Reason.BELOW_THRESHOLD))
    if port in config.pass_ports:
        return DecisionDetail(Verdict(Decision.PASS, Reason.STATIC_PASS))

    listener = local_host.lookup_socket_owner(event.proto, port, Role.LISTENER)
    if listener is None:
        return DecisionDetail(Verdict(Decision.DENY, Reason.NO_LISTENER))

    q = IdentQuery(event.proto.value, event.src.addr, event.src.port,
                   event.dst.addr, event.dst.port)
    if event.src.addr == local_host.address:
        answer: QueryResult = respond(local_host, q)
    else:
        answer = ident_client(event.src.addr, q, config.ident_timeout_ms)
    if answer is QueryFailure.TIMEOUT:
        return DecisionDetail(Verdict(Decision.DENY, Reason.IDENT_TIMEOUT), listener)
    if not isinstance(answer, IdentOk):
        return DecisionDetail(Verdict(Decision.DENY, Reason.IDENT_FAIL), listener)

    if answer.uid == listener.uid:
        return DecisionDetail(Verdict(Decision.ALLOW, Reason.SAME_USER), listener, answer)
    # membership of the connecting user, resolved against the directory
    if directory.has_user(answer.uid) and directory.is_member(answer.uid, listener.egid):
        return DecisionDetail(Verdict(Decision.ALLOW, Reason.GROUP_MEMBER), listener, answer)
    return DecisionDetail(Verdict(Decision.DENY, Reason.NOT_MEMBER), listener, answer)


def decide(event: ConnectionEvent, local_host: Host, ident_client: IdentClient,
           directory: Directory, config: EngineConfig = EngineConfig()) -> Verdict:
    return decide_detail(event, local_host, ident_client, directory, config).verdict


# -- flow table --------------------------------------------------------------------


class Action(str, enum.Enum):
    DELIVER = "DELIVER"
    DROP = "DROP"
    DEFER_TO_STATIC = "DEFER_TO_STATIC"


@dataclass
class FlowEntry:
    verdict: Verdict
    expires_at: int


FlowKey = tuple  # (proto, src Endpoint, dst Endpoint)


@dataclass
class FlowTable:
    """conntrack stand-in: accepted flows with idle expiry in milliseconds."""

    tcp_idle_ms: int = 600_000
    udp_idle_ms: int = 30_000
    entries: dict[FlowKey, FlowEntry] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._lock = threading.Lock()
        self._flow_locks: dict[FlowKey, threading.Lock] = {}

    @classmethod
    def for_config(cls, config: EngineConfig) -> FlowTable:
        return cls(config.idle_ms(Proto.TCP), config.idle_ms(Proto.UDP))

    def idle_ms(self, proto: Proto) -> int:
        return self.tcp_idle_ms if proto is Proto.TCP else self.udp_idle_ms

    @contextmanager
    def flow_lock(self, key: FlowKey) -> Iterator[None]:
        """Serialize work on one flow while letting distinct flows proceed."""
        with self._lock:
            lock = self._flow_locks.setdefault(key, threading.Lock())
        with lock:
            yield

    def lookup(self, key: FlowKey, now: int) -> FlowEntry | None:
        with self._lock:
            entry = self.entries.get(key)
            if entry is not None and entry.expires_at <= now:
                del self.entries[key]
                return None
            return entry

    def insert(self, key: FlowKey, verdict: Verdict, now: int) -> FlowEntry:
        if verdict.decision is Decision.DENY:
            raise ValueError("denied flows are never tracked")
        entry = FlowEntry(verdict, now + self.idle_ms(key[0]))
        with self._lock:
            self.entries[key] = entry
        return entry

    def refresh(self, key: FlowKey, now: int) -> None:
        with self._lock:
            self.entries[key].expires_at = now + self.idle_ms(key[0])

    def __len__(self) -> int:
        return len(self.entries)


def expire_flows(table: FlowTable, now: int) -> int:
    with table._lock:
        dead = [k for k, e in table.entries.items() if e.expires_at <= now]
        for k in dead:
            del table.entries[k]
            table._flow_locks.pop(k, None)
    return len(dead)


class PacketOutcome(NamedTuple):
    action: Action
    verdict: Verdict | None  # None when served from the flow table


def handle_packet(table: FlowTable, event: ConnectionEvent,
                  decide: Callable[[ConnectionEvent], Verdict]) -> PacketOutcome:
    key = event.flow_key
    with table.flow_lock(key):
        entry = table.lookup(key, event.t)
        if entry is not None:
            table.refresh(key, event.t)
            if entry.verdict.decision is Decision.ALLOW:
                return PacketOutcome(Action.DELIVER, None)
            return PacketOutcome(Action.DEFER_TO_STATIC, None)
        if event.proto is Proto.TCP and event.kind is not EventKind.NEW_SYN:
            return PacketOutcome(Action.DROP, None)
        verdict = decide(event)
        if verdict.decision is Decision.DENY:
            return PacketOutcome(Action.DROP, verdict)
        table.insert(key, verdict, event.t)
        if verdict.decision is Decision.ALLOW:
            return PacketOutcome(Action.DELIVER, verdict)
        return PacketOutcome(Action.DEFER_TO_STATIC, verdict)


class UbfEngine:
    """One receiving host's firewall: decision pipeline plus its flow table."""

    def __init__(self, host: Host, directory: Directory, ident_client: IdentClient,
                 config: EngineConfig = EngineConfig()):
        self.host = host
        self.directory = directory
        self.ident_client = ident_client
        self.config = config
        self.flows = FlowTable.for_config(config)
        self.decide_calls = 0
        self.last_detail: DecisionDetail | None = None

    def decide(self, event: ConnectionEvent) -> Verdict:
        self.decide_calls += 1
        self.last_detail = decide_detail(event, self.host, self.ident_client,
                                         self.directory, self.config)
        return self.last_detail.verdict

    def handle_packet(self, event: ConnectionEvent) -> PacketOutcome:
        self.last_detail = None
        return handle_packet(self.flows, event, self.decide)

    def expire(self, now: int) -> int:
        return expire_flows(self.flows, now)
