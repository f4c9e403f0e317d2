"""Scenario files: JSON schema, loading, and cross-reference validation.

A scenario is a JSON object with the top-level keys ``users``, ``groups``,
``hosts``, ``files``, ``jobs``, ``engine``, ``toggles``,
``residual_declarations`` and ``events``.  See ``docs/scenario-format.md``
for a field-by-field description.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema

from .errors import ScenarioError

EVENT_KINDS = (
    "spawn", "bind", "newgrp", "exit", "connect", "send_udp",
    "create", "chmod", "setacl", "access", "ps", "squeue", "ssh",
    "submit_job", "tick",
)
TOGGLES = ("smask", "hidepid", "whole_node", "gpu_epilog", "private_data", "ubf")
RESIDUAL_KINDS = ("WORLD_WRITABLE_DIR_NAMES", "ABSTRACT_UDS", "RAW_IB_VERBS")

_name = {"type": "string", "pattern": r"^[a-z_][a-z0-9_-]{0,31}$"}
_port = {"type": "integer", "minimum": 0, "maximum": 65535}
_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}
_mode = {"type": "string", "pattern": "^[0-7]{3}$"}
_perms = {"type": "string", "pattern": "^[r-][w-][x-]$"}
_proto = {"enum": ["TCP", "UDP", "tcp", "udp"]}
_target = {
    "type": "object",
    "required": ["host", "port"],
    "properties": {"host": {"type": "string"}, "port": _port},
    "additionalProperties": False,
}


def _obj(required: list[str], **props: Any) -> dict[str, Any]:
    return {"type": "object", "required": required, "properties": props,
            "additionalProperties": False}


EVENT_ARGS = {
    "spawn": _obj(["host", "user", "pid"], host={"type": "string"}, user=_name, pid=_pos_int,
                  group=_name, cmdline={"type": "string"}),
    "bind": _obj(["host", "pid", "proto", "port", "role"], host={"type": "string"},
                 pid=_pos_int, proto=_proto, port=_port,
                 role={"enum": ["listener", "outbound"]}, remote=_target),
    "newgrp": _obj(["host", "pid", "group"], host={"type": "string"}, pid=_pos_int, group=_name),
    "exit": _obj(["host", "pid"], host={"type": "string"}, pid=_pos_int),
    "connect": _obj(["host", "pid", "to"], host={"type": "string"}, pid=_pos_int, to=_target,
                    sport=_port, packets=_nonneg_int),
    "send_udp": _obj(["host", "pid", "to"], host={"type": "string"}, pid=_pos_int, to=_target,
                     sport=_port, packets=_pos_int),
    "create": _obj(["user", "parent", "name", "mode"], user=_name, parent={"type": "string"},
                   name={"type": "string"}, kind={"enum": ["file", "dir"]}, mode=_mode,
                   group=_name, umask=_mode, relax={"type": "boolean"}),
    "chmod": _obj(["user", "path", "mode"], user=_name, path={"type": "string"}, mode=_mode,
                  relax={"type": "boolean"}),
    "setacl": _obj(["user", "path", "group", "perms"], user=_name, path={"type": "string"},
                   group=_name, perms=_perms),
    "access": _obj(["user", "path", "want"], user=_name, path={"type": "string"},
                   want={"type": "string", "pattern": "^[rwx]{1,3}$"}),
    "ps": _obj(["host", "pid"], host={"type": "string"}, pid=_pos_int),
    "squeue": _obj(["user"], user=_name),
    "ssh": _obj(["user", "host"], user=_name, host={"type": "string"}),
    "submit_job": _obj(["id", "user", "cores", "duration_s"], id={"type": "string"}, user=_name,
                       cores=_pos_int, gpus=_nonneg_int, duration_s=_pos_int),
    "tick": _obj([]),
}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "users": {"type": "array", "items": _obj(["name"], name=_name, uid=_nonneg_int)},
        "groups": {"type": "array", "items": _obj(
            ["name"], name=_name, kind={"enum": ["project", "exempt"]}, gid=_nonneg_int,
            members={"type": "array", "items": _name})},
        "hosts": {"type": "array", "items": _obj(
            ["id"], id={"type": "string", "pattern": r"^[A-Za-z0-9][A-Za-z0-9._:-]{0,62}$"},
            address={"type": "string", "pattern": r"^[A-Za-z0-9][A-Za-z0-9._:-]{0,62}$"},
            cores=_nonneg_int, gpus=_nonneg_int,
            ident=_obj([], latency_ms=_nonneg_int, down={"type": "boolean"}),
            processes={"type": "array", "items": _obj(
                ["pid", "user"], pid=_pos_int, user=_name, group=_name,
                cmdline={"type": "string"})},
            sockets={"type": "array", "items": _obj(
                ["pid", "proto", "port", "role"], pid=_pos_int, proto=_proto, port=_port,
                role={"enum": ["listener", "outbound"]},
                remote=_obj(["addr", "port"], addr={"type": "string"}, port=_port))},
        )},
        "files": {"type": "array", "items": _obj(
            ["path", "owner", "group", "mode"], path={"type": "string", "pattern": "^/"},
            kind={"enum": ["file", "dir"]}, owner=_name, group=_name, mode=_mode,
            acl={"type": "array", "items": _obj(["group", "perms"], group=_name, perms=_perms)})},
        "jobs": {"type": "array", "items": _obj(
            ["id", "user", "cores", "duration_s"], id={"type": "string"}, user=_name,
            cores=_pos_int, gpus=_nonneg_int, submit_t=_nonneg_int, duration_s=_pos_int)},
        "engine": _obj([], threshold=_port, pass_ports={"type": "array", "items": _port},
                       tcp_idle_s=_pos_int, udp_idle_s=_pos_int, ident_timeout_ms=_pos_int),
        "toggles": _obj([], **{t: {"type": "boolean"} for t in TOGGLES}),
        "residual_declarations": {"type": "array", "items": _obj(
            ["kind", "note"], kind={"enum": list(RESIDUAL_KINDS)}, note={"type": "string"})},
        "events": {"type": "array", "items": {
            "type": "object", "required": ["t", "kind"], "additionalProperties": False,
            "properties": {"t": _nonneg_int, "kind": {"enum": list(EVENT_KINDS)},
                           "args": {"type": "object"}},
        }},
    },
}


@dataclass(frozen=True)
class Event:
    index: int
    t: int
    kind: str
    args: dict[str, Any]


@dataclass
class Scenario:
    raw: dict[str, Any]
    events: list[Event] = field(default_factory=list)
    source: str | None = None

    @property
    def name(self) -> str:
        return self.raw.get("name", self.source or "scenario")

    @property
    def toggles(self) -> dict[str, bool]:
        return {t: self.raw.get("toggles", {}).get(t, True) for t in TOGGLES}

    @property
    def residual_declarations(self) -> list[dict[str, str]]:
        return list(self.raw.get("residual_declarations", []))

    def digest(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def with_toggles(self, **overrides: bool) -> Scenario:
        raw = copy.deepcopy(self.raw)
        raw.setdefault("toggles", {}).update(overrides)
        return from_dict(raw, source=self.source)


def _path(parts: Any) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "$"


def _validate_structure(data: Any) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        raise ScenarioError(err.message, _path(err.absolute_path))
    for i, ev in enumerate(data.get("events", [])):
        args = ev.get("args", {})
        for err in jsonschema.Draft202012Validator(EVENT_ARGS[ev["kind"]]).iter_errors(args):
            raise ScenarioError(err.message, _path(["events", i, "args", *err.absolute_path]))


def _validate_references(data: dict[str, Any]) -> None:
    users = {"root"} | {u["name"] for u in data.get("users", [])}
    groups = set(users) | {g["name"] for g in data.get("groups", [])}
    hosts = {h["id"] for h in data.get("hosts", [])}
    pids: dict[str, set[int]] = {h: set() for h in hosts}

    def need(kind: str, value: str, pool: set[str], where: str) -> None:
        if value not in pool:
            raise ScenarioError(f"unknown {kind} {value!r}", where)

    for i, g in enumerate(data.get("groups", [])):
        for j, m in enumerate(g.get("members", [])):
            need("user", m, users, f"groups[{i}].members[{j}]")
    for i, h in enumerate(data.get("hosts", [])):
        for j, p in enumerate(h.get("processes", [])):
            need("user", p["user"], users, f"hosts[{i}].processes[{j}].user")
            if "group" in p:
                need("group", p["group"], groups, f"hosts[{i}].processes[{j}].group")
            pids[h["id"]].add(p["pid"])
        for j, s in enumerate(h.get("sockets", [])):
            if s["pid"] not in pids[h["id"]]:
                raise ScenarioError(f"unknown pid {s['pid']}", f"hosts[{i}].sockets[{j}].pid")
    for i, f in enumerate(data.get("files", [])):
        need("user", f["owner"], users, f"files[{i}].owner")
        need("group", f["group"], groups, f"files[{i}].group")
        for j, a in enumerate(f.get("acl", [])):
            need("group", a["group"], groups, f"files[{i}].acl[{j}].group")
    job_ids = set()
    for i, j in enumerate(data.get("jobs", [])):
        need("user", j["user"], users, f"jobs[{i}].user")
        if j["id"] in job_ids:
            raise ScenarioError(f"duplicate job id {j['id']!r}", f"jobs[{i}].id")
        job_ids.add(j["id"])

    last_t = 0
    for i, ev in enumerate(data.get("events", [])):
        where = f"events[{i}]"
        if ev["t"] < last_t:
            raise ScenarioError(f"event time {ev['t']} precedes {last_t}", f"{where}.t")
        last_t = ev["t"]
        args = ev.get("args", {})
        if "host" in args:
            need("host", args["host"], hosts, f"{where}.args.host")
        for key in ("to", "remote"):
            if key in args:
                need("host", args[key]["host"], hosts, f"{where}.args.{key}.host")
        if "user" in args:
            need("user", args["user"], users, f"{where}.args.user")
        if "group" in args:
            need("group", args["group"], groups, f"{where}.args.group")
        if ev["kind"] == "spawn":
            pids[args["host"]].add(args["pid"])
        elif "pid" in args and args["pid"] not in pids[args["host"]]:
            raise ScenarioError(f"unknown pid {args['pid']} on {args['host']}", f"{where}.args.pid")
        if ev["kind"] == "submit_job":
            if args["id"] in job_ids:
                raise ScenarioError(f"duplicate job id {args['id']!r}", f"{where}.args.id")
            job_ids.add(args["id"])


def from_dict(data: Any, source: str | None = None) -> Scenario:
    _validate_structure(data)
    _validate_references(data)
    events = [Event(i, ev["t"], ev["kind"], dict(ev.get("args", {})))
              for i, ev in enumerate(data.get("events", []))]
    return Scenario(raw=data, events=events, source=source)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc.strerror}", str(path)) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(exc.msg, f"{path}:{exc.lineno}:{exc.colno}") from None
    return from_dict(data, source=str(path))
