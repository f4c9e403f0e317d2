"""Registry of users, groups and user private groups.

Every user gets a user private group (UPG) whose gid equals the uid and whose
only member is that user.  Project groups are allocated from 20000 upwards and
the single exempt (seepid) group lives at gid 999.  Membership only ever
changes through :meth:`Directory.add_member` / :meth:`Directory.remove_member`.
"""

from __future__ import annotations

import enum
import re
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable

from .errors import DirectoryError

USERNAME_RE = re.compile(r"[a-z_][a-z0-9_-]{0,31}\Z")

ROOT_UID = 0
FIRST_USER_UID = 1000
FIRST_PROJECT_GID = 20000
EXEMPT_GID = 999


class GroupKind(enum.Enum):
    UPG = "upg"
    PROJECT = "project"
    EXEMPT = "exempt"


@dataclass
class Group:
    gid: int
    name: str
    kind: GroupKind
    members: set[int] = field(default_factory=set)


@dataclass
class User:
    uid: int
    username: str
    upg: int
    supplemental: set[int] = field(default_factory=set)

    @property
    def is_root(self) -> bool:
        return self.uid == ROOT_UID


class Directory:
    """Users and groups for one scenario.

    Reads may happen from several threads (the ident responder); mutations
    take a lock so a reader never sees half an update.
    """

    def __init__(self, with_root: bool = True):
        self._users: dict[int, User] = {}
        self._groups: dict[int, Group] = {}
        self._by_username: dict[str, int] = {}
        self._by_groupname: dict[str, int] = {}
        self._next_uid = FIRST_USER_UID
        self._next_project_gid = FIRST_PROJECT_GID
        self._lock = threading.RLock()
        if with_root:
            self.create_user("root", uid=ROOT_UID)

    # -- creation ---------------------------------------------------------

    def create_user(self, username: str, uid: int | None = None) -> User:
        with self._lock:
            if not isinstance(username, str) or not USERNAME_RE.match(username):
                raise DirectoryError(f"invalid username {username!r}")
            if username in self._by_username:
                raise DirectoryError(f"duplicate username {username!r}")
            if uid is None:
                while self._next_uid in self._users or self._next_uid in self._groups:
                    self._next_uid += 1
                uid = self._next_uid
            if uid < 0 or (uid != ROOT_UID and uid < FIRST_USER_UID):
                raise DirectoryError(f"uid {uid} outside the allowed range")
            if uid in self._users:
                raise DirectoryError(f"duplicate uid {uid}")
            # UPG gid mirrors the uid
            if uid in self._groups:
                raise DirectoryError(f"gid {uid} already taken; cannot create UPG for {username!r}")
            if username in self._by_groupname:
                raise DirectoryError(f"group name {username!r} already taken")
            upg = Group(gid=uid, name=username, kind=GroupKind.UPG, members={uid})
            user = User(uid=uid, username=username, upg=uid)
            self._groups[uid] = upg
            self._by_groupname[username] = uid
            self._users[uid] = user
            self._by_username[username] = uid
            return user

    def create_group(self, name: str, kind: GroupKind | str = GroupKind.PROJECT,
                     gid: int | None = None) -> Group:
        kind = GroupKind(kind)
        with self._lock:
            if kind is GroupKind.UPG:
                raise DirectoryError("user private groups are created with their user")
            if not isinstance(name, str) or not USERNAME_RE.match(name):
                raise DirectoryError(f"invalid group name {name!r}")
            if name in self._by_groupname:
                raise DirectoryError(f"duplicate group name {name!r}")
            if kind is GroupKind.EXEMPT:
                if gid not in (None, EXEMPT_GID):
                    raise DirectoryError(f"exempt group must use gid {EXEMPT_GID}")
                gid = EXEMPT_GID
            elif gid is None:
                while self._next_project_gid in self._groups:
                    self._next_project_gid += 1
                gid = self._next_project_gid
            elif gid < FIRST_PROJECT_GID:
                raise DirectoryError(f"project gid {gid} below {FIRST_PROJECT_GID}")
            if gid in self._groups:
                raise DirectoryError(f"duplicate gid {gid}")
            group = Group(gid=gid, name=name, kind=kind)
            self._groups[gid] = group
            self._by_groupname[name] = gid
            return group

    # -- membership -------------------------------------------------------

    def add_member(self, gid: int, uid: int) -> None:
        with self._lock:
            group = self._mutable_group(gid)
            user = self.user(uid)
            group.members.add(uid)
            user.supplemental.add(gid)

    def remove_member(self, gid: int, uid: int) -> None:
        with self._lock:
            group = self._mutable_group(gid)
            user = self.user(uid)
            group.members.discard(uid)
            user.supplemental.discard(gid)

    def _mutable_group(self, gid: int) -> Group:
        group = self.group(gid)
        if group.kind is GroupKind.UPG:
            raise DirectoryError(f"group {group.name!r} is a user private group")
        return group

    def is_member(self, uid: int, gid: int) -> bool:
        with self._lock:
            self.user(uid)
            return uid in self.group(gid).members

    def effective_groups(self, uid: int) -> frozenset[int]:
        with self._lock:
            user = self.user(uid)
            return frozenset({user.upg} | user.supplemental)

    # -- lookups ----------------------------------------------------------

    def user(self, uid: int) -> User:
        try:
            return self._users[uid]
        except KeyError:
            raise DirectoryError(f"unknown uid {uid}") from None

    def group(self, gid: int) -> Group:
        try:
            return self._groups[gid]
        except KeyError:
            raise DirectoryError(f"unknown gid {gid}") from None

    def user_by_name(self, username: str) -> User:
        try:
            return self._users[self._by_username[username]]
        except KeyError:
            raise DirectoryError(f"unknown user {username!r}") from None

    def group_by_name(self, name: str) -> Group:
        try:
            return self._groups[self._by_groupname[name]]
        except KeyError:
            raise DirectoryError(f"unknown group {name!r}") from None

    def has_user(self, uid: int) -> bool:
        return uid in self._users

    def has_group(self, gid: int) -> bool:
        return gid in self._groups

    @property
    def users(self) -> list[User]:
        return sorted(self._users.values(), key=lambda u: u.uid)

    @property
    def groups(self) -> list[Group]:
        return sorted(self._groups.values(), key=lambda g: g.gid)

    def exempt_members(self) -> frozenset[int]:
        group = self._groups.get(EXEMPT_GID)
        return frozenset(group.members) if group else frozenset()

    def shared_project_groups(self, uid_a: int, uid_b: int) -> frozenset[int]:
        """Project groups that list both users as members."""
        return frozenset(
            g.gid for g in self._groups.values()
            if g.kind is GroupKind.PROJECT and uid_a in g.members and uid_b in g.members
        )

    # -- serialization ----------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Directory:
        """Build from the ``users``/``groups`` JSON sub-schema.

        ``users``: ``[{"name": "alice", "uid": 1001}]`` (uid optional).
        ``groups``: ``[{"name": "proj1", "kind": "project", "gid": 20000,
        "members": ["alice"]}]`` (kind and gid optional).
        """
        directory = cls()
        for entry in data.get("users", []):
            if entry["name"] == "root":
                continue
            directory.create_user(entry["name"], uid=entry.get("uid"))
        for entry in data.get("groups", []):
            group = directory.create_group(entry["name"], entry.get("kind", "project"),
                                           gid=entry.get("gid"))
            for member in entry.get("members", []):
                directory.add_member(group.gid, directory.user_by_name(member).uid)
        return directory

    def to_dict(self) -> dict[str, Any]:
        return {
            "users": [{"name": u.username, "uid": u.uid} for u in self.users if not u.is_root],
            "groups": [
                {
                    "name": g.name,
                    "kind": g.kind.value,
                    "gid": g.gid,
                    "members": sorted(self._users[m].username for m in g.members),
                }
                for g in self.groups if g.kind is not GroupKind.UPG
            ],
        }

    def names(self, uids: Iterable[int]) -> list[str]:
        return [self.user(u).username for u in uids]
