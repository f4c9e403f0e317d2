"""Filesystem permission model with an enforced security mask.

Unprivileged sessions carry an smask (0o007 normally, 0o002 after
``smask_relax``) that is stripped from every mode they create or chmod.  ACL
entries name groups only and may be granted only to groups the owner belongs
to.  Modes are plain 9-bit ``rwxrwxrwx`` values.
"""

from __future__ import annotations

import enum
import posixpath
from dataclasses import dataclass, field, replace
from typing import Any, Iterable

from .directory import ROOT_UID, Directory, User
from .errors import PermError, PermissionDenied

SMASK_DEFAULT = 0o007
SMASK_RELAXED = 0o002
HOME_MODE = 0o770
MODE_BITS = 0o777

R, W, X = 4, 2, 1


class NodeKind(str, enum.Enum):
    FILE = "FILE"
    DIR = "DIR"


def perm_bits(want: str | int) -> int:
    """``"rw"`` -> 6.  Integers pass through."""
    if isinstance(want, int):
        if not 0 <= want <= 7:
            raise PermError(f"permission bits {want!r} out of range")
        return want
    bits = 0
    for ch in want:
        try:
            bits |= {"r": R, "w": W, "x": X, "-": 0}[ch]
        except KeyError:
            raise PermError(f"bad permission letter {ch!r}") from None
    return bits


def perm_letters(bits: int) -> str:
    return "".join(c if bits & b else "-" for c, b in (("r", R), ("w", W), ("x", X)))


def parse_mode(text: str | int) -> int:
    if isinstance(text, int):
        mode = text
    else:
        if len(text) != 3 or any(c not in "01234567" for c in text):
            raise PermError(f"mode must be a 3-digit octal string, got {text!r}")
        mode = int(text, 8)
    if not 0 <= mode <= MODE_BITS:
        raise PermError(f"mode {mode:o} out of range")
    return mode


def format_mode(mode: int) -> str:
    return f"{mode:03o}"


@dataclass
class FsNode:
    path: str
    kind: NodeKind
    owner_uid: int
    group_gid: int
    mode: int
    acl: dict[int, int] = field(default_factory=dict)  # gid -> rwx bits

    def snapshot(self) -> dict[str, Any]:
        return {
            "path": self.path,
            "kind": self.kind.value,
            "owner": self.owner_uid,
            "group": self.group_gid,
            "mode": format_mode(self.mode),
            "acl": [[gid, perm_letters(bits)] for gid, bits in sorted(self.acl.items())],
        }


@dataclass(frozen=True)
class Session:
    uid: int
    gid: int
    umask: int = 0o022
    smask: int = SMASK_DEFAULT

    @property
    def privileged(self) -> bool:
        return self.uid == ROOT_UID


def granted_bits(node: FsNode, uid: int, group_set: Iterable[int]) -> int:
    """Bits the DAC class resolution grants ``uid`` on ``node`` (root excluded)."""
    if uid == node.owner_uid:
        return (node.mode >> 6) & 7
    groups = set(group_set)
    bits = 0
    matched = False
    if node.group_gid in groups:
        bits |= (node.mode >> 3) & 7
        matched = True
    for gid, perms in node.acl.items():
        if gid in groups:
            bits |= perms
            matched = True
    return bits if matched else node.mode & 7


class FileSystem:
    """One shared namespace of nodes, rooted at ``/`` with ``/home`` present."""

    def __init__(self, directory: Directory, smask_enforced: bool = True,
                 support_whitelist: Iterable[int] | None = None):
        self.directory = directory
        self.smask_enforced = smask_enforced
        self._whitelist = None if support_whitelist is None else frozenset(support_whitelist)
        self.nodes: dict[str, FsNode] = {}
        for path in ("/", "/home"):
            self.nodes[path] = FsNode(path, NodeKind.DIR, ROOT_UID, 0, 0o755)

    @property
    def support_whitelist(self) -> frozenset[int]:
        # defaults to the seepid group: the same staff get both tools
        if self._whitelist is not None:
            return self._whitelist
        return self.directory.exempt_members()

    # -- sessions -------------------------------------------------------------

    def session(self, uid: int, umask: int = 0o022, gid: int | None = None) -> Session:
        user = self.directory.user(uid)
        gid = user.upg if gid is None else gid
        if gid not in self.directory.effective_groups(uid):
            raise PermError(f"{user.username} is not a member of gid {gid}")
        if user.is_root or not self.smask_enforced:
            smask = 0
        else:
            smask = SMASK_DEFAULT
        return Session(uid, gid, umask & MODE_BITS, smask)

    def smask_relax(self, session: Session) -> Session:
        if session.uid not in self.support_whitelist:
            raise PermissionDenied(f"uid {session.uid} may not relax the smask")
        return replace(session, smask=SMASK_RELAXED)

    # -- lookups ----------------------------------------------------------------

    def node(self, path: str) -> FsNode:
        try:
            return self.nodes[path]
        except KeyError:
            raise PermError(f"no such path {path!r}") from None

    def ancestors(self, path: str) -> list[str]:
        out = []
        while path != "/":
            path = posixpath.dirname(path)
            out.append(path)
        return out[::-1]

    def access(self, uid: int, group_set: Iterable[int], path: str, want: str | int) -> bool:
        """DAC check including search permission on every ancestor.

        Unknown paths yield ``False``.
        """
        if path not in self.nodes:
            return False
        if uid == ROOT_UID:
            return True
        groups = frozenset(group_set)
        for anc in self.ancestors(path):
            if not granted_bits(self.nodes[anc], uid, groups) & X:
                return False
        bits = perm_bits(want)
        return granted_bits(self.nodes[path], uid, groups) & bits == bits

    def _session_access(self, session: Session, path: str, want: str) -> bool:
        return self.access(session.uid, self.directory.effective_groups(session.uid), path, want)

    # -- mutations ----------------------------------------------------------------

    def create_node(self, session: Session, parent_path: str, name: str,
                    kind: NodeKind | str, requested_mode: int) -> FsNode:
        kind = NodeKind(kind)
        parent = self.node(parent_path)
        if parent.kind is not NodeKind.DIR:
            raise PermError(f"{parent_path} is not a directory")
        if not name or "/" in name or name in (".", ".."):
            raise PermError(f"bad name {name!r}")
        path = posixpath.join(parent_path, name)
        if path in self.nodes:
            raise PermError(f"{path} exists")
        if not session.privileged and not self._session_access(session, parent_path, "wx"):
            raise PermissionDenied(f"uid {session.uid} cannot create in {parent_path}")
        mode = requested_mode & MODE_BITS & ~session.umask
        if not session.privileged:
            mode &= ~session.smask
        node = FsNode(path, kind, session.uid, session.gid, mode)
        self.nodes[path] = node
        return node

    def chmod(self, session: Session, path: str, mode: int) -> None:
        node = self.node(path)
        if not session.privileged and session.uid != node.owner_uid:
            raise PermissionDenied(f"uid {session.uid} does not own {path}")
        mode &= MODE_BITS
        node.mode = mode if session.privileged else mode & ~session.smask

    def set_acl(self, session: Session, path: str, gid: int, perms: str | int) -> None:
        node = self.node(path)
        bits = perm_bits(perms)
        if not self.directory.has_group(gid):
            raise PermError(f"unknown gid {gid}")
        if not session.privileged:
            if session.uid != node.owner_uid:
                raise PermissionDenied(f"uid {session.uid} does not own {path}")
            if not self.directory.is_member(session.uid, gid):
                raise PermissionDenied(f"uid {session.uid} is not a member of gid {gid}")
        node.acl[gid] = bits

    def init_home(self, user: User) -> FsNode:
        path = f"/home/{user.username}"
        if path in self.nodes:
            raise PermError(f"{path} exists")
        node = FsNode(path, NodeKind.DIR, ROOT_UID, user.upg, HOME_MODE)
        self.nodes[path] = node
        return node

    def add_node(self, path: str, kind: NodeKind | str, owner_uid: int, group_gid: int,
                 mode: int, acl: dict[int, int] | None = None) -> FsNode:
        """Administrative placement used when loading scenarios; no checks but the parent."""
        if path in self.nodes:
            raise PermError(f"{path} exists")
        if posixpath.dirname(path) not in self.nodes:
            raise PermError(f"parent of {path} does not exist")
        node = FsNode(path, NodeKind(kind), owner_uid, group_gid, mode & MODE_BITS, dict(acl or {}))
        self.nodes[path] = node
        return node

    def state_key(self) -> tuple:
        """Hashable canonical snapshot, used by the bounded model checker."""
        return tuple(
            (n.path, n.kind.value, n.owner_uid, n.group_gid, n.mode, tuple(sorted(n.acl.items())))
            for n in sorted(self.nodes.values(), key=lambda n: n.path)
        )
