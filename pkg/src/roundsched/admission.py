"""Admission policies: decide which arrived jobs become schedulable."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from roundsched.state import Phase

ACCEPT_ALL = "accept_all"
THRESHOLD_FIFO = "threshold_fifo"
ADMISSION_KINDS = (ACCEPT_ALL, THRESHOLD_FIFO)


@dataclass(frozen=True)
class AdmissionConfig:
    kind: str = ACCEPT_ALL
    factor: float = 1.0

    def __post_init__(self):
        if self.kind not in ADMISSION_KINDS:
            raise ValueError(f"unknown admission kind {self.kind!r}")
        if self.kind == THRESHOLD_FIFO and not self.factor > 0:
            raise ValueError("admission factor must be > 0")

    @property
    def label(self):
        return "accept_all" if self.kind == ACCEPT_ALL else f"accept_{self.factor:g}x"


_COUNTED = (Phase.ADMITTED, Phase.RUNNING, Phase.SUSPENDED)


def admitted_demand(jobs):
    return sum(j.gpu_demand for j in jobs.active.values() if j.phase in _COUNTED)


def admit(new_jobs, jobs, cluster, cfg, hold_queue):
    """Return the jobs released for scheduling this round.

    ``hold_queue`` is the caller-owned FIFO of jobs held back in earlier
    rounds; it is updated in place. Threshold admission releases jobs in
    arrival order while the admitted GPU demand stays within
    ``factor * total GPUs`` and stops at the first job that does not fit.
    """
    hold_queue.extend(new_jobs)
    if cfg.kind == ACCEPT_ALL:
        accepted = list(hold_queue)
        hold_queue.clear()
        return accepted
    cap = cfg.factor * cluster.total_gpus
    demand = admitted_demand(jobs)
    accepted = []
    while hold_queue and demand + hold_queue[0].gpu_demand <= cap:
        job = hold_queue.popleft()
        demand += job.gpu_demand
        accepted.append(job)
    return accepted


class AdmissionPolicy:
    """Stateful wrapper owning the hold queue across rounds."""

    def __init__(self, cfg, held=()):
        self.cfg = cfg
        self.hold_queue = deque(sorted(held, key=lambda j: (j.arrival_time, j.job_id)))

    def admit(self, new_jobs, jobs, cluster):
        return admit(new_jobs, jobs, cluster, self.cfg, self.hold_queue)

    @property
    def held(self):
        return list(self.hold_queue)
