"""Isolation oracle over a simulator trace.

:func:`check_isolation` walks the trace and classifies every cross-user
channel instance as a violation or as mediated (a shared project group, or the
seepid / smask_relax support staff).  Residual channels are copied from the
scenario's declarations and never counted as violations.

:func:`brute_force_channels` is a second, independent enumeration used to
cross-check the oracle on small scenarios; the ``check_*`` helpers re-verify
individual safety clauses straight from trace records.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any

from .directory import EXEMPT_GID, ROOT_UID, Directory
from .errors import ScenarioError
from .perms import FsNode, NodeKind, parse_mode, perm_bits
from .scenario import Scenario
from .sim import EventTrace

NETWORK = "NETWORK"
FILE = "FILE"
PROCESS_LISTING = "PROCESS_LISTING"
JOB_LISTING = "JOB_LISTING"
CO_RESIDENCY = "CO_RESIDENCY"
GPU_RESIDUE = "GPU_RESIDUE"
CHANNEL_KINDS = (NETWORK, FILE, PROCESS_LISTING, JOB_LISTING, CO_RESIDENCY, GPU_RESIDUE)


@dataclass
class ChannelInstance:
    kind: str
    from_uid: int
    to_uid: int
    subject: str
    evidence: list[int] = field(default_factory=list)
    mediated_by: str | None = None

    @property
    def key(self) -> tuple[str, int, int, str]:
        return (self.kind, self.from_uid, self.to_uid, self.subject)

    def to_dict(self) -> dict[str, Any]:
        out = {"kind": self.kind, "from_uid": self.from_uid, "to_uid": self.to_uid,
               "subject": self.subject, "evidence": self.evidence}
        if self.mediated_by is not None:
            out["mediated_by"] = self.mediated_by
        return out


@dataclass
class IsolationReport:
    scenario: str
    violations: list[ChannelInstance]
    mediated: list[ChannelInstance]
    residual_channels: list[dict[str, str]]

    @property
    def clean(self) -> bool:
        return not self.violations

    @property
    def summary(self) -> dict[str, Any]:
        by_kind = {k: 0 for k in CHANNEL_KINDS}
        for v in self.violations:
            by_kind[v.kind] += 1
        return {"violations": len(self.violations), "mediated": len(self.mediated),
                "residual_channels": len(self.residual_channels), "by_kind": by_kind}

    def violation_keys(self) -> set[tuple[str, int, int, str]]:
        return {v.key for v in self.violations}

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "summary": self.summary,
            "violations": [v.to_dict() for v in self.violations],
            "mediated": [m.to_dict() for m in self.mediated],
            "residual_channels": self.residual_channels,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        s = self.summary
        lines = [f"scenario: {self.scenario}",
                 f"violations: {s['violations']}  mediated: {s['mediated']}  "
                 f"residual channels: {s['residual_channels']}"]
        for v in self.violations:
            lines.append(f"  VIOLATION {v.kind} uid {v.from_uid} -> uid {v.to_uid} "
                         f"[{v.subject}] records {v.evidence}")
        for m in self.mediated:
            lines.append(f"  mediated  {m.kind} uid {m.from_uid} -> uid {m.to_uid} "
                         f"[{m.subject}] via {m.mediated_by}")
        for r in self.residual_channels:
            lines.append(f"  residual  {r['kind']}: {r['note']}")
        lines.append("result: " + ("CLEAN" if self.clean else "VIOLATIONS FOUND"))
        return "\n".join(lines) + "\n"


def _user_pair(a: int | None, b: int | None) -> bool:
    return a is not None and b is not None and a != b and ROOT_UID not in (a, b)


def _node_from_snapshot(snap: dict[str, Any]) -> FsNode:
    return FsNode(snap["path"], NodeKind(snap["kind"]), snap["owner"], snap["group"],
                  parse_mode(snap["mode"]), {gid: perm_bits(p) for gid, p in snap["acl"]})


def _group_class_bits(node: FsNode, groups: frozenset[int]) -> int:
    bits = (node.mode >> 3) & 7 if node.group_gid in groups else 0
    for gid, perms in node.acl.items():
        if gid in groups:
            bits |= perms
    return bits


def _check_header(scenario: Scenario, trace: EventTrace) -> None:
    head = trace.records[0] if trace.records else None
    if (not head or head.get("type") != "setup" or head.get("what") != "scenario"
            or head.get("digest") != scenario.digest()):
        raise ScenarioError("trace was not produced from this scenario")


def check_isolation(scenario: Scenario, trace: EventTrace) -> IsolationReport:
    _check_header(scenario, trace)
    directory = Directory.from_dict(scenario.raw)
    support = directory.exempt_members()
    instances: dict[tuple, ChannelInstance] = {}

    def hit(kind: str, src: int, dst: int, subject: str, rid: int, mediator: str | None) -> None:
        key = (kind, src, dst, subject)
        inst = instances.get(key)
        if inst is None:
            inst = instances[key] = ChannelInstance(kind, src, dst, subject, mediated_by=mediator)
        elif inst.mediated_by is not None and mediator is None:
            inst.mediated_by = None  # one unmediated instance taints the channel
        inst.evidence.append(rid)

    for r in trace.records:
        kind = r["type"]
        if kind == "packet" and r["action"] in ("DELIVER", "DEFER_TO_STATIC"):
            src, dst = r["src_uid"], r["dst_uid"]
            if not _user_pair(src, dst):
                continue
            ev = r["event"]
            subject = f"{ev['proto']} {ev['src'][0]}:{ev['src'][1]}->{ev['dst'][0]}:{ev['dst'][1]}"
            egid = r["dst_egid"]
            mediator = None
            if egid in directory.shared_project_groups(src, dst):
                mediator = f"group:{directory.group(egid).name}"
            hit(NETWORK, src, dst, subject, r["id"], mediator)
        elif kind == "access" and r["granted"] and r["node"] is not None:
            node = _node_from_snapshot(r["node"])
            owner, viewer = node.owner_uid, r["uid"]
            if not _user_pair(owner, viewer):
                continue
            want = perm_bits(r["want"])
            shared = directory.shared_project_groups(owner, viewer)
            mediator = None
            if shared and _group_class_bits(node, shared) & want == want:
                mediator = "group:" + ",".join(sorted(directory.group(g).name for g in shared))
            elif owner in support and node.mode & 7 & want == want:
                mediator = "support-published"
            hit(FILE, owner, viewer, node.path, r["id"], mediator)
        elif kind == "ps":
            viewer = r["viewer_uid"]
            for pid, owner in r["visible"]:
                if not _user_pair(owner, viewer):
                    continue
                mediator = "seepid" if EXEMPT_GID in r["viewer_groups"] else None
                hit(PROCESS_LISTING, owner, viewer, r["host"], r["id"], mediator)
        elif kind == "squeue":
            viewer = r["uid"]
            for job_id, owner in r["visible"]:
                if _user_pair(owner, viewer):
                    hit(JOB_LISTING, owner, viewer, job_id, r["id"], None)
        elif kind == "place":
            others = sorted(u for u in r["node_uids"] if u != r["uid"] and u != ROOT_UID)
            for other in others:
                if r["uid"] != ROOT_UID:
                    a, b = sorted((other, r["uid"]))
                    hit(CO_RESIDENCY, a, b, r["node"], r["id"], None)
        elif kind == "gpu_assign":
            if _user_pair(r["dirty_by"], r["uid"]):
                hit(GPU_RESIDUE, r["dirty_by"], r["uid"], r["device"], r["id"], None)

    ordered = sorted(instances.values(), key=lambda i: (i.evidence[0], i.key))
    return IsolationReport(
        scenario=scenario.name,
        violations=[i for i in ordered if i.mediated_by is None],
        mediated=[i for i in ordered if i.mediated_by is not None],
        residual_channels=[{"kind": d["kind"], "note": d["note"]}
                           for d in scenario.residual_declarations],
    )


# -- independent cross-check ------------------------------------------------------


def _ref_group_grant(mode: int, group: int, acl: list, gid: int) -> int:
    """What the single group ``gid`` is granted on a node, from the group class only."""
    grants = [(mode >> 3) & 7] if group == gid else []
    grants += [p for g, p in acl if g == gid]
    out = 0
    for g in grants:
        out |= g
    return out


def brute_force_channels(scenario: Scenario, trace: EventTrace) -> set[tuple[str, int, int, str]]:
    """Violation keys found by enumerating every ordered user pair per record."""
    _check_header(scenario, trace)
    raw_groups = scenario.raw.get("groups", [])
    directory = Directory.from_dict(scenario.raw)
    uid_of = {u.username: u.uid for u in directory.users}
    projects = [
        (directory.group_by_name(g["name"]).gid, {uid_of[m] for m in g.get("members", [])})
        for g in raw_groups if g.get("kind", "project") == "project"
    ]
    exempt = {uid_of[m] for g in raw_groups if g.get("kind") == "exempt"
              for m in g.get("members", [])}
    people = sorted(u for u in uid_of.values() if u != ROOT_UID)
    found: dict[tuple, bool] = defaultdict(bool)  # key -> any unmediated

    def shared(a: int, b: int) -> list[int]:
        return [gid for gid, members in projects if a in members and b in members]

    for r in trace.records:
        for a in people:
            for b in people:
                if a == b:
                    continue
                t = r["type"]
                if t == "packet" and r["src_uid"] == a and r["dst_uid"] == b \
                        and r["action"] != "DROP":
                    e = r["event"]
                    key = (NETWORK, a, b,
                           f"{e['proto']} {e['src'][0]}:{e['src'][1]}->{e['dst'][0]}:{e['dst'][1]}")
                    found[key] |= r["dst_egid"] not in shared(a, b)
                elif t == "access" and r["granted"] and r["uid"] == b and r["node"] \
                        and r["node"]["owner"] == a:
                    snap = r["node"]
                    want = perm_bits(r["want"])
                    acl = [(g, perm_bits(p)) for g, p in snap["acl"]]
                    mode = int(snap["mode"], 8)
                    via_groups = 0
                    for g in shared(a, b):
                        via_groups |= _ref_group_grant(mode, snap["group"], acl, g)
                    ok = via_groups & want == want or (a in exempt and mode & 7 & want == want)
                    found[(FILE, a, b, snap["path"])] |= not ok
                elif t == "ps" and r["viewer_uid"] == b:
                    if any(owner == a for _, owner in r["visible"]):
                        found[(PROCESS_LISTING, a, b, r["host"])] |= \
                            EXEMPT_GID not in r["viewer_groups"]
                elif t == "squeue" and r["uid"] == b:
                    for job_id, owner in r["visible"]:
                        if owner == a:
                            found[(JOB_LISTING, a, b, job_id)] = True
                elif t == "place" and a < b and {a, b} <= set(r["node_uids"]) \
                        and r["uid"] in (a, b):
                    found[(CO_RESIDENCY, a, b, r["node"])] = True
                elif t == "gpu_assign" and r["dirty_by"] == a and r["uid"] == b:
                    found[(GPU_RESIDUE, a, b, r["device"])] = True
    return {k for k, bad in found.items() if bad}


# -- per-clause re-checks -----------------------------------------------------------


def check_decision_rule(scenario: Scenario, trace: EventTrace) -> list[int]:
    """ALLOW verdicts whose participants fail ``same uid or member of listener egid``."""
    directory = Directory.from_dict(scenario.raw)
    bad = []
    for r in trace.of_type("verdict"):
        if r["verdict"] != "ALLOW":
            continue
        src, dst, egid = r["src_uid"], r["dst_uid"], r["dst_egid"]
        if src == dst:
            continue
        if not (directory.has_group(egid) and directory.is_member(src, egid)):
            bad.append(r["id"])
    return bad


def check_flow_soundness(trace: EventTrace, tcp_idle_ms: int = 600_000,
                         udp_idle_ms: int = 30_000) -> list[int]:
    """Delivered packets not backed by a live ALLOW/PASS for their exact 5-tuple.

    Replays flow lifetimes independently of the engine's table.
    """
    live: dict[tuple, tuple[str, int]] = {}
    pending_verdict: dict[tuple, str] = {}
    bad = []
    for r in trace.records:
        if r["type"] not in ("verdict", "packet"):
            continue
        e = r["event"]
        key = (r["host"], e["proto"], tuple(e["src"]), tuple(e["dst"]))
        idle = tcp_idle_ms if e["proto"] == "TCP" else udp_idle_ms
        if r["type"] == "verdict":
            pending_verdict[key] = r["verdict"]
            continue
        verdict = pending_verdict.pop(key, None)
        action = r["action"]
        if verdict in ("ALLOW", "PASS"):
            live[key] = (verdict, r["t"] + idle)
        entry = live.get(key)
        if entry is not None and entry[1] <= r["t"] and verdict is None:
            del live[key]
            entry = None
        if action == "DELIVER":
            if entry is None or entry[0] != "ALLOW":
                bad.append(r["id"])
                continue
        elif action == "DEFER_TO_STATIC":
            if entry is None or entry[0] != "PASS":
                bad.append(r["id"])
                continue
        if entry is not None and action != "DROP":
            live[key] = (entry[0], r["t"] + idle)
    return bad


def check_node_exclusivity(trace: EventTrace) -> list[int]:
    return [r["id"] for r in trace.of_type("place", "complete")
            if len(set(r["node_uids"])) > 1]


def check_gpu_hygiene(trace: EventTrace) -> list[int]:
    return [r["id"] for r in trace.of_type("gpu_assign")
            if r["dirty_by"] is not None and r["dirty_by"] != r["uid"]]
