"""Per-host process table, sockets, and /proc visibility (hidepid=2)."""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field
from typing import Any, NamedTuple

from .directory import EXEMPT_GID, ROOT_UID, Directory
from .errors import HostError

PRIVILEGED_PORT_LIMIT = 1024


class Proto(str, enum.Enum):
    TCP = "TCP"
    UDP = "UDP"


class Role(str, enum.Enum):
    LISTENER = "LISTENER"
    OUTBOUND = "OUTBOUND"


class Endpoint(NamedTuple):
    addr: str
    port: int


class Owner(NamedTuple):
    uid: int
    egid: int
    username: str


@dataclass
class Process:
    pid: int
    uid: int
    egid: int
    supplemental: frozenset[int]
    cmdline: str = ""

    def group_set(self) -> frozenset[int]:
        return self.supplemental | {self.egid}


@dataclass(frozen=True)
class Socket:
    proto: Proto
    local_port: int
    role: Role
    owner_pid: int
    remote: Endpoint | None = None


def _check_port(port: int) -> int:
    if not isinstance(port, int) or isinstance(port, bool) or not 0 <= port <= 65535:
        raise HostError(f"port {port!r} out of range")
    return port


@dataclass
class Host:
    host_id: str
    directory: Directory
    address: str | None = None
    exempt_gid: int = EXEMPT_GID
    hidepid: bool = True
    processes: dict[int, Process] = field(default_factory=dict)
    sockets: list[Socket] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.address is None:
            self.address = self.host_id
        self._lock = threading.RLock()
        self._next_pid = 100

    # -- processes ----------------------------------------------------------

    def spawn_process(self, uid: int, egid: int | None = None, cmdline: str = "",
                      pid: int | None = None) -> int:
        with self._lock:
            user = self.directory.user(uid)
            groups = self.directory.effective_groups(uid)
            if egid is None:
                egid = user.upg
            if egid not in groups:
                raise HostError(f"gid {egid} is not one of {user.username}'s groups")
            if pid is None:
                while self._next_pid in self.processes:
                    self._next_pid += 1
                pid = self._next_pid
            if pid <= 0:
                raise HostError(f"pid must be positive, got {pid}")
            if pid in self.processes:
                raise HostError(f"pid {pid} already exists on {self.host_id}")
            self.processes[pid] = Process(pid, uid, egid, groups - {egid}, cmdline)
            return pid

    def process(self, pid: int) -> Process:
        try:
            return self.processes[pid]
        except KeyError:
            raise HostError(f"no process {pid} on {self.host_id}") from None

    def set_primary_group(self, pid: int, gid: int) -> None:
        """newgrp/sg: switch the egid to another group the user belongs to."""
        with self._lock:
            proc = self.process(pid)
            if gid not in self.directory.effective_groups(proc.uid):
                raise HostError(f"uid {proc.uid} is not a member of gid {gid}")
            proc.supplemental = (proc.supplemental | {proc.egid}) - {gid}
            proc.egid = gid

    def exit_process(self, pid: int) -> None:
        with self._lock:
            self.process(pid)
            self.sockets = [s for s in self.sockets if s.owner_pid != pid]
            del self.processes[pid]

    # -- sockets ------------------------------------------------------------

    def bind_socket(self, pid: int, proto: Proto | str, port: int, role: Role | str,
                    remote: Endpoint | tuple[str, int] | None = None) -> Socket:
        proto, role = Proto(proto), Role(role)
        _check_port(port)
        with self._lock:
            proc = self.process(pid)
            if role is Role.LISTENER:
                if remote is not None:
                    raise HostError("listeners have no remote endpoint")
                if port < PRIVILEGED_PORT_LIMIT and proc.uid != ROOT_UID:
                    raise HostError(f"port {port} is privileged")
                if any(s.role is Role.LISTENER and s.proto is proto and s.local_port == port
                       for s in self.sockets):
                    raise HostError(f"{proto.value} port {port} already has a listener")
            else:
                if remote is None:
                    raise HostError("outbound sockets need a remote endpoint")
                remote = Endpoint(str(remote[0]), _check_port(remote[1]))
                if any(s.role is Role.OUTBOUND and s.proto is proto and s.local_port == port
                       and s.remote == remote for s in self.sockets):
                    raise HostError(f"outbound {proto.value} {port}->{remote} already bound")
            sock = Socket(proto, port, role, pid, remote)
            self.sockets.append(sock)
            return sock

    def close_socket(self, sock: Socket) -> None:
        with self._lock:
            self.sockets.remove(sock)

    def lookup_socket_owner(self, proto: Proto | str, local_port: int, role: Role | str,
                            remote: Endpoint | tuple[str, int] | None = None) -> Owner | None:
        """Who owns the matching socket right now, or ``None``.

        The egid is read from the live process, so a ``newgrp`` after bind is
        reflected in later lookups.
        """
        try:
            proto, role = Proto(proto), Role(role)
        except ValueError:
            return None
        if remote is not None:
            remote = Endpoint(*remote)
        with self._lock:
            for sock in self.sockets:
                if sock.proto is not proto or sock.role is not role or sock.local_port != local_port:
                    continue
                if role is Role.OUTBOUND and sock.remote != remote:
                    continue
                proc = self.processes[sock.owner_pid]
                return Owner(proc.uid, proc.egid, self.directory.user(proc.uid).username)
        return None

    # -- visibility -----------------------------------------------------------

    def can_see(self, viewer: Process, target: Process) -> bool:
        if not self.hidepid:
            return True
        return (viewer.uid == target.uid or viewer.uid == ROOT_UID
                or self.exempt_gid in viewer.group_set())

    def list_visible_processes(self, viewer_pid: int) -> set[int]:
        with self._lock:
            viewer = self.process(viewer_pid)
            return {pid for pid, p in self.processes.items() if self.can_see(viewer, p)}

    def read_cmdline(self, viewer_pid: int, pid: int) -> str:
        with self._lock:
            viewer, target = self.process(viewer_pid), self.process(pid)
            if not self.can_see(viewer, target):
                raise HostError(f"no process {pid} on {self.host_id}")
            return target.cmdline

    # -- registry files -------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict[str, Any], directory: Directory, hidepid: bool = True) -> Host:
        """Build from one entry of the scenario/registry ``hosts`` array."""
        host = cls(data["id"], directory, address=data.get("address"), hidepid=hidepid)
        for p in data.get("processes", []):
            uid = directory.user_by_name(p["user"]).uid
            egid = directory.group_by_name(p["group"]).gid if "group" in p else None
            host.spawn_process(uid, egid, p.get("cmdline", ""), pid=p.get("pid"))
        for s in data.get("sockets", []):
            remote = s.get("remote")
            if remote is not None:
                remote = Endpoint(remote["addr"], remote["port"])
            host.bind_socket(s["pid"], s["proto"].upper(), s["port"], s["role"].upper(), remote)
        return host
