"""Scheduling policies: per-round priority order over schedulable jobs."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

from roundsched.errors import MissingProfileError
from roundsched.state import CONSOLIDATED, Phase

FIFO = "fifo"
SRTF = "srtf"
LAS = "las"
DISCRETE_LAS = "dlas"
OPTIMUS_LIKE = "optimus"
SCHED_KINDS = (FIFO, SRTF, LAS, DISCRETE_LAS, OPTIMUS_LIKE)

DEFAULT_DLAS_THRESHOLDS = (3600.0, 36000.0)


@dataclass(frozen=True)
class SchedulerConfig:
    kind: str = FIFO
    dlas_thresholds: tuple = DEFAULT_DLAS_THRESHOLDS
    loss_termination: bool = False
    loss_threshold: float = 0.002

    def __post_init__(self):
        if self.kind not in SCHED_KINDS:
            raise ValueError(f"unknown scheduling kind {self.kind!r}")
        th = tuple(float(t) for t in self.dlas_thresholds)
        if not th or any(t <= 0 for t in th) or any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError("dlas_thresholds must be positive and strictly ascending")
        object.__setattr__(self, "dlas_thresholds", th)


@dataclass
class PrioritizedJobs:
    ordered: list = field(default_factory=list)

    def ids(self):
        return [job_id for job_id, _ in self.ordered]

    def __len__(self):
        return len(self.ordered)


def _full(jobs, key):
    return PrioritizedJobs([(j.job_id, j.gpu_demand) for j in sorted(jobs, key=key)])


def rank_fifo(jobs):
    return _full(jobs, lambda j: (j.arrival_time, j.job_id))


def remaining_time(job):
    return job.remaining_iterations * job.iter_time(job.gpu_demand, CONSOLIDATED)


def rank_srtf(jobs):
    return _full(jobs, lambda j: (remaining_time(j), j.arrival_time, j.job_id))


def rank_las(jobs):
    return _full(jobs, lambda j: (j.attained_service, j.arrival_time, j.job_id))


def las_queue(service, thresholds):
    for q, bound in enumerate(thresholds):
        if service < bound:
            return q
    return len(thresholds)


def rank_discrete_las(jobs, thresholds=DEFAULT_DLAS_THRESHOLDS):
    """Bucket by attained service, then FIFO inside each bucket."""
    return _full(jobs, lambda j: (las_queue(j.attained_service, thresholds), j.arrival_time, j.job_id))


def _gain(job, g):
    if g >= job.gpu_demand:
        return 0.0
    try:
        return job.remaining_iterations * (job.iter_time(g) - job.iter_time(g + 1))
    except MissingProfileError:
        return 0.0


def rank_optimus_like(jobs, free_gpu_count):
    """One GPU per job in expected-convergence order, then greedy extra GPUs.

    Extra GPUs go one at a time to the job with the largest reduction in
    remaining run time, never beyond its requested demand.
    """
    by_eta = sorted(jobs, key=lambda j: (j.remaining_iterations * j.iter_time(1), j.job_id))
    granted = {j.job_id: 1 for j in by_eta[:free_gpu_count]}
    spare = free_gpu_count - len(granted)
    heap = [(-_gain(j, 1), j.job_id, j) for j in by_eta[: len(granted)]]
    heapq.heapify(heap)
    while spare > 0 and heap:
        neg, job_id, job = heapq.heappop(heap)
        if -neg <= 0:
            break
        granted[job_id] += 1
        spare -= 1
        heapq.heappush(heap, (-_gain(job, granted[job_id]), job_id, job))
    return PrioritizedJobs([(j.job_id, granted.get(j.job_id, 1)) for j in by_eta])


def check_loss_termination(jobs, cfg):
    """Flag jobs whose training has converged; returns the flagged ids.

    A job with ``converge_at_fraction`` stops once it has completed that
    share of its iterations. A job with ``target_loss`` stops once its
    latest reported ``loss`` metric is at or below the target.
    """
    if not cfg.loss_termination:
        return []
    out = []
    for job in sorted(jobs, key=lambda j: j.job_id):
        if job.phase not in (Phase.RUNNING, Phase.SUSPENDED):
            continue
        hit = False
        if job.converge_at_fraction is not None:
            hit = job.completed_iterations >= math.ceil(job.converge_at_fraction * job.total_iterations)
        if not hit and job.target_loss is not None:
            losses = job.metrics.get("loss")
            hit = bool(losses) and losses[-1] <= job.target_loss
        if hit:
            job.set_phase(Phase.TERMINATED)
            out.append(job.job_id)
    return out


_SCHEDULABLE = (Phase.ADMITTED, Phase.RUNNING, Phase.SUSPENDED)


class SchedulingPolicy:
    def __init__(self, cfg):
        self.cfg = cfg

    def schedulable(self, jobs):
        return [j for j in jobs.active.values() if j.phase in _SCHEDULABLE]

    def rank(self, jobs, cluster):
        pool = self.schedulable(jobs)
        kind = self.cfg.kind
        if kind == FIFO:
            return rank_fifo(pool)
        if kind == SRTF:
            return rank_srtf(pool)
        if kind == LAS:
            return rank_las(pool)
        if kind == DISCRETE_LAS:
            return rank_discrete_las(pool, self.cfg.dlas_thresholds)
        return rank_optimus_like(pool, cluster.total_gpus)

    def terminations(self, jobs):
        return check_loss_termination(list(jobs.active.values()), self.cfg)
