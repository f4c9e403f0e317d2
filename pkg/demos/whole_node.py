"""
One user per node
=================

A small FIFO queue on two nodes. Jobs from a second user wait for an empty
node, and ssh access follows the running jobs.
"""

from ubfsim import Directory, Scheduler
from ubfsim.sched import GpuDevice, Job, Node

d = Directory()
alice, bob = d.create_user("alice"), d.create_user("bob")
nodes = [Node("n1", 16, [GpuDevice("n1:gpu0")]), Node("n2", 16, [GpuDevice("n2:gpu0")])]
log = []
sched = Scheduler(d, nodes, emit=log.append)

for job in (Job("a1", alice.uid, 8, 60_000, 1), Job("a2", alice.uid, 4, 30_000),
            Job("b1", bob.uid, 8, 30_000, 1), Job("b2", bob.uid, 12, 30_000)):
    sched.submit(job)
print("placed at t=0:", sched.schedule_step(0))
print("queued:       ", sched.queue)
print("bob ssh n1/n2:", sched.can_ssh(bob.uid, "n1"), sched.can_ssh(bob.uid, "n2"))
print("alice sees jobs:", sorted(sched.visible_jobs(alice.uid)))

sched.complete_job("b1", 30_000)
print("after b1 ends: ", sched.schedule_step(30_000))

for r in log:
    if r["type"].startswith("gpu"):
        print(" ", r["type"], r["device"], "uid", r["uid"], "dirty_by", r["dirty_by"])
