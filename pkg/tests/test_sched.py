from __future__ import annotations

import pytest

from ubfsim.directory import Directory
from ubfsim.errors import SchedulerError
from ubfsim.sched import GpuDevice, Job, JobState, Node, Scheduler


def make(n_nodes=2, cores=16, gpus=0, **kw):
    d = Directory()
    alice, bob = d.create_user("alice"), d.create_user("bob")
    nodes = [Node(f"n{i + 1}", cores, [GpuDevice(f"n{i + 1}:gpu{g}") for g in range(gpus)])
             for i in range(n_nodes)]
    records = []
    s = Scheduler(d, nodes, emit=records.append, **kw)
    return s, alice, bob, records


def job(jid, user, cores=4, ms=1000, gpus=0):
    return Job(jid, user.uid, cores, ms, gpus)


def test_same_user_packs_onto_partial_node():
    s, alice, bob, _ = make()
    s.submit(job("a1", alice))
    assert s.schedule_step(0) == [("a1", "n1")]
    s.submit(job("a2", alice))
    assert s.schedule_step(1) == [("a2", "n1")]
    assert s.node("n1").allocated == 8


def test_other_user_waits_for_empty_node():
    s, alice, bob, _ = make(n_nodes=1)
    s.submit(job("a1", alice))
    s.schedule_step(0)
    s.submit(job("b1", bob))
    assert s.schedule_step(1) == []
    assert s.job("b1").state is JobState.QUEUED
    s.complete_job("a1", 1000)
    assert s.schedule_step(1000) == [("b1", "n1")]


def test_empty_cluster_single_job():
    s, alice, *_ = make()
    s.submit(job("a1", alice))
    assert s.schedule_step(0) == [("a1", "n1")]
    assert s.job("a1").placement == [("n1", 4)]


def test_best_fit_among_same_user_nodes():
    s, alice, *_ = make(n_nodes=3)
    for jid, cores in (("a1", 12), ("a2", 8), ("a3", 4)):
        s.submit(job(jid, alice, cores))
    # a1 -> n1 (4 left); a2 does not fit n1 -> n2 (8 left); a3 best fit is n1
    assert s.schedule_step(0) == [("a1", "n1"), ("a2", "n2"), ("a3", "n1")]


def test_strict_fifo_head_of_line():
    s, alice, bob, _ = make(n_nodes=1)
    s.submit(job("a1", alice, 16))
    s.submit(job("a2", alice, 1))
    s.schedule_step(0)
    s.submit(job("b1", bob, 1))
    s.submit(job("a3", alice, 1))
    # b1 blocks a3 even though a3 could share n1 once cores free up
    assert s.schedule_step(1) == []
    assert s.queue == ["a2", "b1", "a3"]


def test_whole_node_off_allows_mixing():
    s, alice, bob, _ = make(n_nodes=1, whole_node=False)
    s.submit(job("a1", alice))
    s.submit(job("b1", bob))
    assert len(s.schedule_step(0)) == 2
    assert s.node_uids(s.node("n1")) == {alice.uid, bob.uid}


def test_node_stays_bound_while_any_job_runs():
    s, alice, bob, _ = make(n_nodes=1)
    s.submit(job("a1", alice, ms=100))
    s.submit(job("a2", alice, ms=500))
    s.schedule_step(0)
    s.complete_job("a1", 100)
    s.submit(job("b1", bob))
    assert s.schedule_step(100) == []
    assert s.can_ssh(alice.uid, "n1")


def test_job_validation():
    s, alice, *_ = make()
    with pytest.raises(SchedulerError):
        Job("x", alice.uid, 0, 10)
    with pytest.raises(SchedulerError):
        Job("x", alice.uid, 1, 0)
    s.submit(job("a1", alice))
    with pytest.raises(SchedulerError):
        s.submit(job("a1", alice))
    with pytest.raises(SchedulerError):
        s.complete_job("a1", 0)


def test_gpu_lifecycle_with_epilog():
    s, alice, bob, records = make(n_nodes=1, gpus=1)
    s.submit(job("a1", alice, gpus=1))
    s.schedule_step(0)
    dev = s.node("n1").gpus[0]
    assert dev.assigned_group == alice.upg
    assert s.gpu_visible(alice.uid, dev) and not s.gpu_visible(bob.uid, dev)
    s.complete_job("a1", 1000)
    assert (dev.assigned_group, dev.memory_dirty_by) == (None, None)
    assert not s.gpu_visible(alice.uid, dev) and s.gpu_visible(0, dev)
    s.submit(job("b1", bob, gpus=1))
    s.schedule_step(1000)
    assigns = [r for r in records if r["type"] == "gpu_assign"]
    assert [r["dirty_by"] for r in assigns] == [None, None]


def test_gpu_epilog_fault_leaves_residue():
    s, alice, bob, records = make(n_nodes=1, gpus=1, gpu_epilog=False)
    s.submit(job("a1", alice, gpus=1))
    s.schedule_step(0)
    s.complete_job("a1", 1000)
    dev = s.node("n1").gpus[0]
    assert dev.memory_dirty_by == alice.uid
    s.submit(job("b1", bob, gpus=1))
    s.schedule_step(1000)
    assert records[-1]["type"] == "gpu_assign" and records[-1]["dirty_by"] == alice.uid


def test_assign_gpu_errors():
    s, alice, *_ = make(n_nodes=1, gpus=1)
    s.submit(job("a1", alice, gpus=1))
    s.submit(job("a2", alice, cores=1))
    s.schedule_step(0)
    with pytest.raises(SchedulerError):
        s.assign_gpu("n1", "a2")
    s.node("n1").gpus.append(GpuDevice("n1:gpu1", memory_dirty_by=alice.uid))
    with pytest.raises(SchedulerError):
        s.assign_gpu("n1", "a2")


def test_gpu_request_waits_for_clean_device():
    s, alice, *_ = make(n_nodes=1, gpus=1)
    s.submit(job("a1", alice, gpus=1))
    s.submit(job("a2", alice, gpus=1))
    assert s.schedule_step(0) == [("a1", "n1")]


def test_can_ssh():
    s, alice, bob, _ = make()
    s.submit(job("a1", alice))
    s.schedule_step(0)
    assert s.can_ssh(alice.uid, "n1")
    assert not s.can_ssh(bob.uid, "n1")
    assert not s.can_ssh(alice.uid, "n2")
    assert s.can_ssh(0, "n2")
    s.complete_job("a1", 1000)
    assert not s.can_ssh(alice.uid, "n1")


def test_visible_jobs():
    s, alice, bob, _ = make()
    assert s.visible_jobs(alice.uid) == set()
    s.submit(job("a1", alice))
    s.submit(job("b1", bob))
    assert s.visible_jobs(alice.uid) == {"a1"}
    assert s.visible_jobs(0) == {"a1", "b1"}
    s.private_data = False
    assert s.visible_jobs(alice.uid) == {"a1", "b1"}


def test_completion_queries():
    s, alice, *_ = make()
    s.submit(job("a1", alice, ms=300))
    s.submit(job("a2", alice, ms=100))
    s.schedule_step(50)
    assert s.next_completion() == 150
    assert s.due_completions(149) == []
    assert s.due_completions(400) == ["a2", "a1"]
