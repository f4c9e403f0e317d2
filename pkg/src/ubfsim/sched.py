"""Whole-node-per-user scheduler with GPU assignment and epilog clearing."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Callable

from .directory import ROOT_UID, Directory
from .errors import SchedulerError


class JobState(str, enum.Enum):
    QUEUED = "QUEUED"
    RUNNING = "RUNNING"
    DONE = "DONE"


@dataclass
class GpuDevice:
    dev_id: str
    assigned_group: int | None = None
    memory_dirty_by: int | None = None


@dataclass
class Job:
    job_id: str
    uid: int
    cores_requested: int
    duration_ms: int
    gpus_requested: int = 0
    submit_t: int = 0
    state: JobState = JobState.QUEUED
    placement: list[tuple[str, int]] = field(default_factory=list)
    gpu_devices: list[str] = field(default_factory=list)
    start_t: int | None = None

    def __post_init__(self) -> None:
        if self.cores_requested < 1:
            raise SchedulerError(f"job {self.job_id} must request at least one core")
        if self.duration_ms < 1:
            raise SchedulerError(f"job {self.job_id} needs a positive duration")

    @property
    def end_t(self) -> int | None:
        return None if self.start_t is None else self.start_t + self.duration_ms


@dataclass
class Node:
    node_id: str
    cores_total: int
    gpus: list[GpuDevice] = field(default_factory=list)
    running: set[str] = field(default_factory=set)
    allocated: int = 0

    @property
    def free_cores(self) -> int:
        return self.cores_total - self.allocated


class Scheduler:
    """FIFO scheduler; a node runs jobs of at most one user at a time.

    ``whole_node=False`` drops the single-user rule and ``gpu_epilog=False``
    skips the memory clear at job end; both exist for fault injection.
    ``emit`` receives one dict per placement, completion and GPU transition.
    """

    def __init__(self, directory: Directory, nodes: list[Node], *,
                 whole_node: bool = True, gpu_epilog: bool = True, private_data: bool = True,
                 emit: Callable[[dict[str, Any]], None] | None = None):
        self.directory = directory
        self.nodes = {n.node_id: n for n in nodes}
        self.jobs: dict[str, Job] = {}
        self.queue: list[str] = []
        self.whole_node = whole_node
        self.gpu_epilog = gpu_epilog
        self.private_data = private_data
        self.emit = emit or (lambda record: None)

    # -- queries --------------------------------------------------------------

    def node_uids(self, node: Node) -> set[int]:
        return {self.jobs[j].uid for j in node.running}

    def node(self, node_id: str) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise SchedulerError(f"unknown node {node_id!r}") from None

    def job(self, job_id: str) -> Job:
        try:
            return self.jobs[job_id]
        except KeyError:
            raise SchedulerError(f"unknown job {job_id!r}") from None

    def can_ssh(self, uid: int, node_id: str) -> bool:
        if uid == ROOT_UID:
            return True
        return uid in self.node_uids(self.node(node_id))

    def visible_jobs(self, viewer_uid: int) -> set[str]:
        if viewer_uid == ROOT_UID or not self.private_data:
            return set(self.jobs)
        return {j.job_id for j in self.jobs.values() if j.uid == viewer_uid}

    def gpu_visible(self, viewer_uid: int, device: GpuDevice) -> bool:
        if viewer_uid == ROOT_UID:
            return True
        return (device.assigned_group is not None
                and device.assigned_group == self.directory.user(viewer_uid).upg)

    # -- lifecycle ------------------------------------------------------------

    def submit(self, job: Job) -> None:
        if job.job_id in self.jobs:
            raise SchedulerError(f"duplicate job id {job.job_id!r}")
        self.directory.user(job.uid)
        self.jobs[job.job_id] = job
        self.queue.append(job.job_id)

    def _clean_free_gpus(self, node: Node) -> list[GpuDevice]:
        return [g for g in node.gpus if g.assigned_group is None
                and (g.memory_dirty_by is None or not self.gpu_epilog)]

    def _fits(self, node: Node, job: Job) -> bool:
        if node.free_cores < job.cores_requested:
            return False
        if len(self._clean_free_gpus(node)) < job.gpus_requested:
            return False
        if self.whole_node:
            return self.node_uids(node) <= {job.uid}
        return True

    def _pick_node(self, job: Job) -> Node | None:
        candidates = [n for n in self.nodes.values() if self._fits(n, job)]
        shared = [n for n in candidates if n.running]
        if shared:
            # best fit: least free cores left after placement, then node order
            return min(shared, key=lambda n: n.free_cores)
        return candidates[0] if candidates else None

    def schedule_step(self, now: int) -> list[tuple[str, str]]:
        """Place queued jobs in submission order, stopping at the first that does not fit."""
        placed = []
        while self.queue:
            job = self.jobs[self.queue[0]]
            node = self._pick_node(job)
            if node is None:
                break
            self.queue.pop(0)
            self._start(job, node, now)
            placed.append((job.job_id, node.node_id))
        return placed

    def _start(self, job: Job, node: Node, now: int) -> None:
        node.allocated += job.cores_requested
        node.running.add(job.job_id)
        job.state = JobState.RUNNING
        job.start_t = now
        job.placement = [(node.node_id, job.cores_requested)]
        self.emit({
            "type": "place", "t": now, "job": job.job_id, "uid": job.uid,
            "node": node.node_id, "cores": job.cores_requested,
            "node_uids": sorted(self.node_uids(node)), "allocated": node.allocated,
            "cores_total": node.cores_total,
        })
        for _ in range(job.gpus_requested):
            self.assign_gpu(node.node_id, job.job_id, now)

    def assign_gpu(self, node_id: str, job_id: str, now: int = 0) -> GpuDevice:
        node, job = self.node(node_id), self.job(job_id)
        if job.state is not JobState.RUNNING or job.job_id not in node.running:
            raise SchedulerError(f"job {job_id} is not running on {node_id}")
        free = self._clean_free_gpus(node)
        if not free:
            raise SchedulerError(f"no clean free GPU on {node_id}")
        dev = free[0]
        previous = dev.memory_dirty_by
        dev.assigned_group = self.directory.user(job.uid).upg
        job.gpu_devices.append(dev.dev_id)
        self.emit({
            "type": "gpu_assign", "t": now, "job": job.job_id, "uid": job.uid,
            "device": dev.dev_id, "group": dev.assigned_group, "dirty_by": previous,
        })
        return dev

    def complete_job(self, job_id: str, now: int) -> None:
        job = self.job(job_id)
        if job.state is not JobState.RUNNING:
            raise SchedulerError(f"job {job_id} is not running")
        node = self.node(job.placement[0][0])
        node.running.discard(job_id)
        node.allocated -= job.cores_requested
        job.state = JobState.DONE
        self.emit({
            "type": "complete", "t": now, "job": job.job_id, "uid": job.uid,
            "node": node.node_id, "node_uids": sorted(self.node_uids(node)),
            "allocated": node.allocated,
        })
        devices = {g.dev_id: g for g in node.gpus}
        for dev_id in job.gpu_devices:
            dev = devices[dev_id]
            dev.memory_dirty_by = job.uid
            if self.gpu_epilog:
                dev.memory_dirty_by = None
            dev.assigned_group = None
            self.emit({
                "type": "gpu_release", "t": now, "job": job.job_id, "uid": job.uid,
                "device": dev_id, "cleared": self.gpu_epilog,
                "dirty_by": dev.memory_dirty_by,
            })

    def due_completions(self, now: int) -> list[str]:
        due = [j for j in self.jobs.values()
               if j.state is JobState.RUNNING and j.end_t is not None and j.end_t <= now]
        return [j.job_id for j in sorted(due, key=lambda j: (j.end_t, j.job_id))]

    def next_completion(self) -> int | None:
        ends = [j.end_t for j in self.jobs.values() if j.state is JobState.RUNNING]
        return min(ends) if ends else None
