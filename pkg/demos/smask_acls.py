"""
World bits that cannot be set
=============================

Creation and chmod both pass through the security mask, ACL grants go only to
groups the owner is in, and only support staff may loosen the mask.
"""

from ubfsim import Directory, FileSystem, GroupKind
from ubfsim.errors import PermissionDenied
from ubfsim.perms import format_mode

d = Directory()
alice, bob, sam = (d.create_user(n) for n in ("alice", "bob", "sam"))
proj = d.create_group("proj1")
d.add_member(proj.gid, alice.uid)
d.add_member(proj.gid, bob.uid)
d.add_member(d.create_group("seepid", GroupKind.EXEMPT).gid, sam.uid)

fs = FileSystem(d)
for u in (alice, bob, sam):
    fs.init_home(u)
fs.add_node("/proj", "DIR", 0, proj.gid, 0o770)

s = fs.session(alice.uid, umask=0o022)
f = fs.create_node(s, "/proj", "results.csv", "FILE", 0o666)
print("created with 666 ->", format_mode(f.mode))
fs.chmod(s, f.path, 0o666)
print("chmod 666        ->", format_mode(f.mode))

bob_groups = d.effective_groups(bob.uid)
print("bob reads before grant:", fs.access(bob.uid, bob_groups, f.path, "r"))
fs.set_acl(s, f.path, proj.gid, "r")
print("bob reads after grant: ", fs.access(bob.uid, bob_groups, f.path, "r"))

try:
    fs.chmod(s, "/home/alice", 0o777)
except PermissionDenied as exc:
    print("home chmod refused:", exc)

relaxed = fs.smask_relax(fs.session(sam.uid, umask=0o022))
pub = fs.create_node(relaxed, "/home/sam", "howto.txt", "FILE", 0o644)
print("support file       ->", format_mode(pub.mode))
