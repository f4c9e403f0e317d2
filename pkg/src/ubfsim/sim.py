"""Discrete-event cluster simulator.

Time is integer milliseconds.  Scenario events are processed in time order;
the seed only permutes events that share a timestamp.  Job completions due at
time ``t`` run before scenario events at ``t``.  Every state change, verdict
and access decision is appended to an :class:`EventTrace`.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Any

from .directory import Directory
from .engine import Action, ConnectionEvent, EngineConfig, EventKind, UbfEngine
from .errors import UbfsimError
from .host import Endpoint, Host, Proto, Role
from .ident import SimTransport, query_remote
from .perms import FileSystem, NodeKind, parse_mode, perm_bits
from .scenario import Scenario
from .sched import GpuDevice, Job, Node, Scheduler

EPHEMERAL_BASE = 40000
TRACE_VERSION = 1


@dataclass
class EventTrace:
    records: list[dict[str, Any]] = field(default_factory=list)

    def emit(self, t: int, type_: str, **fields: Any) -> dict[str, Any]:
        record = {"id": len(self.records), "t": t, "type": type_, **fields}
        self.records.append(record)
        return record

    def of_type(self, *types: str) -> list[dict[str, Any]]:
        return [r for r in self.records if r["type"] in types]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in self.records)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_jsonl(cls, text: str) -> EventTrace:
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])

    def __len__(self) -> int:
        return len(self.records)


class Cluster:
    """All model state for one run of a scenario."""

    def __init__(self, scenario: Scenario, trace: EventTrace):
        raw = scenario.raw
        toggles = scenario.toggles
        self.scenario = scenario
        self.trace = trace
        self.toggles = toggles
        self.directory = Directory.from_dict(raw)
        self.config = EngineConfig.from_dict(raw.get("engine", {}))
        self.transport = SimTransport()
        self.hosts: dict[str, Host] = {}
        self.engines: dict[str, UbfEngine] = {}
        self.next_port: dict[str, int] = {}
        ident_client = partial(query_remote, self.transport)
        nodes = []
        for h in raw.get("hosts", []):
            host = Host.from_dict(h, self.directory, hidepid=toggles["hidepid"])
            self.hosts[host.host_id] = host
            ident = h.get("ident", {})
            self.transport.register(host, ident.get("latency_ms", 0), ident.get("down", False))
            self.engines[host.host_id] = UbfEngine(host, self.directory, ident_client, self.config)
            self.next_port[host.host_id] = EPHEMERAL_BASE
            if h.get("cores", 0) > 0:
                gpus = [GpuDevice(f"{host.host_id}:gpu{i}") for i in range(h.get("gpus", 0))]
                nodes.append(Node(host.host_id, h["cores"], gpus))
        self.fs = FileSystem(self.directory, smask_enforced=toggles["smask"])
        for user in self.directory.users:
            if not user.is_root:
                self.fs.init_home(user)
        for f in raw.get("files", []):
            acl = {self.directory.group_by_name(a["group"]).gid: perm_bits(a["perms"])
                   for a in f.get("acl", [])}
            self.fs.add_node(f["path"], f.get("kind", "file").upper(),
                             self.directory.user_by_name(f["owner"]).uid,
                             self.directory.group_by_name(f["group"]).gid,
                             parse_mode(f["mode"]), acl)
        self.sched = Scheduler(self.directory, nodes, whole_node=toggles["whole_node"],
                               gpu_epilog=toggles["gpu_epilog"],
                               private_data=toggles["private_data"], emit=self._sched_record)

    def _sched_record(self, record: dict[str, Any]) -> None:
        record = dict(record)
        t = record.pop("t")
        type_ = record.pop("type")
        self.trace.emit(t, type_, **record)

    def emit_setup(self) -> None:
        tr = self.trace
        tr.emit(0, "setup", what="scenario", name=self.scenario.name,
                digest=self.scenario.digest(), version=TRACE_VERSION,
                toggles=self.toggles)
        for u in self.directory.users:
            tr.emit(0, "setup", what="user", uid=u.uid, name=u.username, upg=u.upg)
        for g in self.directory.groups:
            tr.emit(0, "setup", what="group", gid=g.gid, name=g.name, kind=g.kind.value,
                    members=sorted(g.members))
        for host in self.hosts.values():
            tr.emit(0, "setup", what="host", host=host.host_id, address=host.address)
            for p in host.processes.values():
                tr.emit(0, "setup", what="process", host=host.host_id, pid=p.pid, uid=p.uid,
                        egid=p.egid)
            for s in host.sockets:
                tr.emit(0, "setup", what="socket", host=host.host_id, pid=s.owner_pid,
                        proto=s.proto.value, port=s.local_port, role=s.role.value)
        for node in self.fs.nodes.values():
            tr.emit(0, "setup", what="file", node=node.snapshot())
        for n in self.sched.nodes.values():
            tr.emit(0, "setup", what="node", node=n.node_id, cores=n.cores_total,
                    gpus=[g.dev_id for g in n.gpus])

    # -- helpers --------------------------------------------------------------

    def uid(self, name: str) -> int:
        return self.directory.user_by_name(name).uid

    def gid(self, name: str) -> int:
        return self.directory.group_by_name(name).gid

    def ephemeral_port(self, host_id: str) -> int:
        port = self.next_port[host_id]
        self.next_port[host_id] = port + 1 if port < 65535 else EPHEMERAL_BASE
        return port

    # -- network --------------------------------------------------------------

    def _packet(self, t: int, proto: Proto, src_host: Host, src: Endpoint, dst_host: Host,
                dst: Endpoint, kind: EventKind, src_uid: int) -> Action:
        event = ConnectionEvent(proto, src, dst, kind, t)
        engine = self.engines[dst_host.host_id]
        if self.toggles["ubf"]:
            outcome = engine.handle_packet(event)
            action, verdict = outcome.action, outcome.verdict
        else:
            action, verdict = Action.DEFER_TO_STATIC, None
        listener = dst_host.lookup_socket_owner(proto, dst.port, Role.LISTENER)
        dst_uid = listener.uid if listener else None
        dst_egid = listener.egid if listener else None
        if verdict is not None:
            detail = engine.last_detail
            connector = detail.connector if detail else None
            self.trace.emit(t, "verdict", host=dst_host.host_id, event=event.to_dict(),
                            verdict=verdict.decision.value, reason=verdict.reason.value,
                            src_uid=src_uid, dst_uid=dst_uid, dst_egid=dst_egid,
                            ident_uid=connector.uid if connector else None)
        self.trace.emit(t, "packet", host=dst_host.host_id, event=event.to_dict(),
                        action=action.value, src_uid=src_uid, dst_uid=dst_uid, dst_egid=dst_egid)
        return action

    def _send(self, t: int, args: dict[str, Any], proto: Proto) -> None:
        src_host = self.hosts[args["host"]]
        proc = src_host.process(args["pid"])
        dst_host = self.hosts[args["to"]["host"]]
        dst = Endpoint(dst_host.address, args["to"]["port"])
        sport = args.get("sport")
        if sport is None:
            sport = self.ephemeral_port(src_host.host_id)
        src = Endpoint(src_host.address, sport)
        existing = [s for s in src_host.sockets if s.role is Role.OUTBOUND and s.proto is proto
                    and s.local_port == sport and s.remote == dst]
        if existing:
            if existing[0].owner_pid != proc.pid:
                raise UbfsimError(f"{proto.value} {sport}->{dst} belongs to another process")
        else:
            src_host.bind_socket(proc.pid, proto, sport, Role.OUTBOUND, dst)
            self.trace.emit(t, "bind", host=src_host.host_id, pid=proc.pid, proto=proto.value,
                            port=sport, role=Role.OUTBOUND.value, remote=[dst.addr, dst.port])
        if proto is Proto.TCP:
            action = self._packet(t, proto, src_host, src, dst_host, dst, EventKind.NEW_SYN,
                                  proc.uid)
            if action is Action.DROP:
                return
            for _ in range(args.get("packets", 1)):
                self._packet(t, proto, src_host, src, dst_host, dst, EventKind.PACKET, proc.uid)
        else:
            for _ in range(args.get("packets", 1)):
                self._packet(t, proto, src_host, src, dst_host, dst, EventKind.PACKET, proc.uid)

    # -- event dispatch -------------------------------------------------------

    def apply(self, t: int, kind: str, args: dict[str, Any]) -> None:
        getattr(self, f"_ev_{kind}")(t, args)

    def _ev_spawn(self, t: int, a: dict[str, Any]) -> None:
        host = self.hosts[a["host"]]
        uid = self.uid(a["user"])
        egid = self.gid(a["group"]) if "group" in a else None
        pid = host.spawn_process(uid, egid, a.get("cmdline", ""), pid=a["pid"])
        self.trace.emit(t, "spawn", host=host.host_id, pid=pid, uid=uid,
                        egid=host.process(pid).egid)

    def _ev_bind(self, t: int, a: dict[str, Any]) -> None:
        host = self.hosts[a["host"]]
        remote = None
        if "remote" in a:
            rhost = self.hosts[a["remote"]["host"]]
            remote = Endpoint(rhost.address, a["remote"]["port"])
        proto, role = Proto(a["proto"].upper()), Role(a["role"].upper())
        host.bind_socket(a["pid"], proto, a["port"], role, remote)
        self.trace.emit(t, "bind", host=host.host_id, pid=a["pid"], proto=proto.value,
                        port=a["port"], role=role.value,
                        remote=[remote.addr, remote.port] if remote else None)

    def _ev_newgrp(self, t: int, a: dict[str, Any]) -> None:
        host = self.hosts[a["host"]]
        host.set_primary_group(a["pid"], self.gid(a["group"]))
        self.trace.emit(t, "newgrp", host=host.host_id, pid=a["pid"],
                        uid=host.process(a["pid"]).uid, egid=self.gid(a["group"]))

    def _ev_exit(self, t: int, a: dict[str, Any]) -> None:
        host = self.hosts[a["host"]]
        host.exit_process(a["pid"])
        self.trace.emit(t, "exit", host=host.host_id, pid=a["pid"])

    def _ev_connect(self, t: int, a: dict[str, Any]) -> None:
        self._send(t, a, Proto.TCP)

    def _ev_send_udp(self, t: int, a: dict[str, Any]) -> None:
        self._send(t, a, Proto.UDP)

    def _session(self, a: dict[str, Any]):
        uid = self.uid(a["user"])
        gid = self.gid(a["group"]) if a.get("group") else None
        umask = parse_mode(a["umask"]) if "umask" in a else 0o022
        session = self.fs.session(uid, umask=umask, gid=gid)
        if a.get("relax"):
            session = self.fs.smask_relax(session)
        return session

    def _ev_create(self, t: int, a: dict[str, Any]) -> None:
        session = self._session(a)
        node = self.fs.create_node(session, a["parent"], a["name"],
                                   NodeKind(a.get("kind", "file").upper()), parse_mode(a["mode"]))
        self.trace.emit(t, "create", uid=session.uid, smask=f"{session.smask:03o}",
                        node=node.snapshot())

    def _ev_chmod(self, t: int, a: dict[str, Any]) -> None:
        session = self._session(a)
        self.fs.chmod(session, a["path"], parse_mode(a["mode"]))
        self.trace.emit(t, "chmod", uid=session.uid, smask=f"{session.smask:03o}",
                        node=self.fs.node(a["path"]).snapshot())

    def _ev_setacl(self, t: int, a: dict[str, Any]) -> None:
        session = self._session({"user": a["user"]})
        self.fs.set_acl(session, a["path"], self.gid(a["group"]), a["perms"])
        self.trace.emit(t, "setacl", uid=session.uid, node=self.fs.node(a["path"]).snapshot())

    def _ev_access(self, t: int, a: dict[str, Any]) -> None:
        uid = self.uid(a["user"])
        groups = self.directory.effective_groups(uid)
        path = a["path"]
        granted = self.fs.access(uid, groups, path, a["want"])
        node = self.fs.nodes.get(path)
        self.trace.emit(t, "access", uid=uid, groups=sorted(groups), path=path, want=a["want"],
                        granted=granted, node=node.snapshot() if node else None)

    def _ev_ps(self, t: int, a: dict[str, Any]) -> None:
        host = self.hosts[a["host"]]
        viewer = host.process(a["pid"])
        visible = sorted(host.list_visible_processes(viewer.pid))
        self.trace.emit(t, "ps", host=host.host_id, viewer_pid=viewer.pid, viewer_uid=viewer.uid,
                        viewer_groups=sorted(viewer.group_set()),
                        visible=[[pid, host.process(pid).uid] for pid in visible])

    def _ev_squeue(self, t: int, a: dict[str, Any]) -> None:
        uid = self.uid(a["user"])
        visible = sorted(self.sched.visible_jobs(uid))
        self.trace.emit(t, "squeue", uid=uid,
                        visible=[[j, self.sched.jobs[j].uid] for j in visible])

    def _ev_ssh(self, t: int, a: dict[str, Any]) -> None:
        uid = self.uid(a["user"])
        allowed = a["host"] in self.sched.nodes and self.sched.can_ssh(uid, a["host"])
        self.trace.emit(t, "ssh", uid=uid, host=a["host"], allowed=allowed)

    def _ev_submit_job(self, t: int, a: dict[str, Any]) -> None:
        job = Job(a["id"], self.uid(a["user"]), a["cores"], a["duration_s"] * 1000,
                  a.get("gpus", 0), submit_t=t)
        self.sched.submit(job)
        self.trace.emit(t, "submit", job=job.job_id, uid=job.uid, cores=job.cores_requested,
                        gpus=job.gpus_requested)
        self.sched.schedule_step(t)

    def _ev_tick(self, t: int, a: dict[str, Any]) -> None:
        self.trace.emit(t, "tick")


def run(scenario: Scenario, seed: int = 0) -> EventTrace:
    trace = EventTrace()
    cluster = Cluster(scenario, trace)
    cluster.emit_setup()
    rng = random.Random(seed)

    pending: list[tuple[int, float, int, str, dict[str, Any]]] = []
    for i, job in enumerate(scenario.raw.get("jobs", [])):
        args = {k: job[k] for k in ("id", "user", "cores", "duration_s")}
        args["gpus"] = job.get("gpus", 0)
        pending.append((job.get("submit_t", 0), rng.random(), -1 - i, "submit_job", args))
    for ev in scenario.events:
        pending.append((ev.t, rng.random(), ev.index, ev.kind, ev.args))
    heapq.heapify(pending)

    def advance(now: int) -> None:
        while True:
            nxt = cluster.sched.next_completion()
            if nxt is None or nxt > now:
                break
            for job_id in cluster.sched.due_completions(nxt):
                cluster.sched.complete_job(job_id, nxt)
            cluster.sched.schedule_step(nxt)
        for host_id, engine in cluster.engines.items():
            removed = engine.expire(now)
            if removed:
                trace.emit(now, "expire", host=host_id, removed=removed)

    while pending:
        t, _, index, kind, args = heapq.heappop(pending)
        advance(t)
        try:
            cluster.apply(t, kind, args)
        except UbfsimError as exc:
            trace.emit(t, "error", event_index=index, kind=kind, error=str(exc))
    # drain remaining work so completions and GPU releases land in the trace
    while (nxt := cluster.sched.next_completion()) is not None:
        advance(nxt)
    return trace
