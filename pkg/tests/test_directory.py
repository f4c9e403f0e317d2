from __future__ import annotations

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ubfsim.directory import EXEMPT_GID, FIRST_PROJECT_GID, Directory, GroupKind
from ubfsim.errors import DirectoryError


@pytest.fixture
def d():
    directory = Directory()
    directory.create_user("alice")
    directory.create_user("bob")
    directory.create_group("proj1")
    return directory


def test_create_user_gets_private_group(d):
    alice = d.user_by_name("alice")
    upg = d.group(alice.upg)
    assert upg.kind is GroupKind.UPG
    assert upg.members == {alice.uid}
    assert alice.upg == alice.uid


def test_users_are_distinct(d):
    alice, bob = d.user_by_name("alice"), d.user_by_name("bob")
    assert alice.uid != bob.uid
    assert alice.upg != bob.upg
    assert alice.uid >= 1000 and bob.uid >= 1000


def test_duplicate_username_rejected(d):
    with pytest.raises(DirectoryError):
        d.create_user("alice")


@pytest.mark.parametrize("bad", ["Alice", "1abc", "", "a" * 33, "al ice"])
def test_username_grammar(bad):
    with pytest.raises(DirectoryError):
        Directory().create_user(bad)


def test_membership_add_remove(d):
    bob, proj = d.user_by_name("bob"), d.group_by_name("proj1")
    d.add_member(proj.gid, bob.uid)
    assert bob.uid in proj.members
    assert d.is_member(bob.uid, proj.gid)
    d.remove_member(proj.gid, bob.uid)
    assert bob.uid not in d.group(proj.gid).members
    assert not d.is_member(bob.uid, proj.gid)


def test_upg_membership_is_immutable(d):
    alice, bob = d.user_by_name("alice"), d.user_by_name("bob")
    with pytest.raises(DirectoryError):
        d.add_member(alice.upg, bob.uid)
    with pytest.raises(DirectoryError):
        d.remove_member(alice.upg, alice.uid)
    assert d.group(alice.upg).members == {alice.uid}


def test_member_ops_unknown_ids(d):
    with pytest.raises(DirectoryError):
        d.add_member(12345, d.user_by_name("bob").uid)
    with pytest.raises(DirectoryError):
        d.add_member(d.group_by_name("proj1").gid, 4242)
    with pytest.raises(DirectoryError):
        d.is_member(4242, d.group_by_name("proj1").gid)


def test_is_member_self_upg(d):
    alice, bob = d.user_by_name("alice"), d.user_by_name("bob")
    assert d.is_member(alice.uid, alice.upg)
    assert not d.is_member(bob.uid, alice.upg)


def test_effective_groups(d):
    alice, proj = d.user_by_name("alice"), d.group_by_name("proj1")
    assert d.effective_groups(alice.uid) == {alice.upg}
    d.add_member(proj.gid, alice.uid)
    assert d.effective_groups(alice.uid) == {alice.upg, proj.gid}


def test_root_has_no_universal_membership(d):
    proj = d.group_by_name("proj1")
    assert d.effective_groups(0) == {0}
    assert not d.is_member(0, proj.gid)
    assert not d.is_member(0, d.user_by_name("alice").upg)


def test_gid_ranges():
    d = Directory()
    assert d.create_group("proj1").gid == FIRST_PROJECT_GID
    assert d.create_group("proj2").gid == FIRST_PROJECT_GID + 1
    assert d.create_group("seepid", GroupKind.EXEMPT).gid == EXEMPT_GID
    with pytest.raises(DirectoryError):
        d.create_group("bogus", GroupKind.UPG)


def test_roundtrip_dict(d):
    d.add_member(d.group_by_name("proj1").gid, d.user_by_name("bob").uid)
    again = Directory.from_dict(d.to_dict())
    assert again.to_dict() == d.to_dict()


@settings(max_examples=60, deadline=None)
@given(
    n_users=st.integers(1, 8),
    n_groups=st.integers(0, 8),
    ops=st.lists(st.tuples(st.booleans(), st.integers(0, 7), st.integers(0, 7)), max_size=40),
)
def test_is_member_matches_effective_groups(n_users, n_groups, ops):
    d = Directory()
    users = [d.create_user(f"u{i}").uid for i in range(n_users)]
    groups = [d.create_group(f"g{i}").gid for i in range(n_groups)]
    for add, ui, gi in ops:
        if not groups:
            break
        uid, gid = users[ui % n_users], groups[gi % n_groups]
        (d.add_member if add else d.remove_member)(gid, uid)
    all_gids = [g.gid for g in d.groups]
    for uid, gid in itertools.product([0, *users], all_gids):
        assert d.is_member(uid, gid) == (gid in d.effective_groups(uid))
    for uid in users:
        assert d.group(d.user(uid).upg).members == {uid}
