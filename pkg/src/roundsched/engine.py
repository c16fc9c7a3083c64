"""Round-based simulation engine and job metrics."""

from __future__ import annotations

import copy
import functools
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Optional

from roundsched.admission import AdmissionConfig, AdmissionPolicy
from roundsched.errors import IncompleteWindowError, StallError
from roundsched.placement import PlacementConfig, PlacementPolicy
from roundsched.scheduling import SchedulerConfig, SchedulingPolicy
from roundsched.state import (
    ClusterState,
    JobState,
    Phase,
    apply_decision,
    default_cluster,
    prune_finished,
)

DEFAULT_WINDOW = (3000, 4000)


@dataclass
class SimConfig:
    round_len: float = 300.0
    cluster: list = field(default_factory=default_cluster)
    metrics_window: Optional[tuple] = DEFAULT_WINDOW
    seed: int = 0
    horizon: Optional[float] = None
    stall_rounds: int = 10**6

    def __post_init__(self):
        if not self.round_len > 0:
            raise ValueError("round_len must be > 0")
        if self.metrics_window is not None:
            lo, hi = self.metrics_window
            if hi < lo:
                raise ValueError("metrics_window upper bound is below its lower bound")


@dataclass(frozen=True)
class Policies:
    admission: AdmissionConfig = AdmissionConfig()
    scheduling: SchedulerConfig = SchedulerConfig()
    placement: PlacementConfig = PlacementConfig()


@dataclass
class JobMetrics:
    job_id: int
    arrival: float
    first_sched: float
    finish: float
    jct: float
    responsiveness: float
    preemption_count: int
    gpu_seconds: float


@dataclass
class MetricsReport:
    per_job: list = field(default_factory=list)
    avg_jct: float = 0.0
    avg_responsiveness: float = 0.0
    jct_cdf: list = field(default_factory=list)
    avg_observed_bandwidth: float = 0.0
    rounds_executed: int = 0
    bandwidth_events: int = 0

    def to_dict(self):
        return asdict(self)


@functools.lru_cache(maxsize=4096)
def _exact_float(x):
    return Fraction(repr(x))


def _exact(x):
    return x if isinstance(x, Fraction) else _exact_float(float(x))


def credit_progress(job, seconds_run, placement_kind, gpus):
    """Advance ``job`` by ``seconds_run`` seconds on ``gpus`` GPUs.

    The restart overhead is deducted once after a launch or a move.
    Partial iterations carry over exactly to the next credit.
    """
    effective = _exact(seconds_run)
    if job.pay_overhead:
        effective = max(Fraction(0), effective - _exact(job.restart_overhead))
        job.pay_overhead = False
    per_iter = job.exact_iter_time(gpus, placement_kind)
    done, job.iter_carry = divmod(effective + job.iter_carry, per_iter)
    job.completed_iterations = min(job.total_iterations, job.completed_iterations + int(done))
    job.attained_service += gpus * float(seconds_run)
    if job.loss_curve:
        job.metrics.setdefault("loss", []).append(loss_at(job.loss_curve, job.completed_iterations))
    return job


def loss_at(curve, iteration):
    """Piecewise-linear loss at ``iteration`` from ``(iteration, loss)`` points."""
    pts = sorted(curve)
    if iteration <= pts[0][0]:
        return pts[0][1]
    for (i0, l0), (i1, l1) in zip(pts, pts[1:]):
        if iteration <= i1:
            return l0 + (l1 - l0) * (iteration - i0) / (i1 - i0)
    return pts[-1][1]


def measured_ids(all_ids, window):
    if window is None:
        return sorted(all_ids)
    lo, hi = window
    inside = sorted(i for i in all_ids if lo <= i < hi)
    return inside or sorted(all_ids)


def compute_metrics(jobs, window, all_ids=None, intra_events=(), cluster=None, rounds=0):
    """Average JCT and responsiveness over the measured jobs.

    ``all_ids`` is every job id of the trace (default: the ids ``jobs``
    knows about). Jobs whose id falls in ``window`` are measured; when none
    do, every job is. Raises ``IncompleteWindowError`` if a measured job has
    not finished.
    """
    finished = {e.job_id: e for e in jobs.finished_log}
    if all_ids is None:
        all_ids = set(finished) | set(jobs.active)
    ids = measured_ids(all_ids, window)
    missing = [i for i in ids if i not in finished]
    if missing:
        raise IncompleteWindowError(f"{len(missing)} measured jobs unfinished (first: {missing[:5]})")
    per_job = []
    for i in ids:
        e = finished[i]
        first = e.first_scheduled_time if e.first_scheduled_time is not None else e.finish_time
        per_job.append(
            JobMetrics(
                i,
                e.arrival_time,
                first,
                e.finish_time,
                e.finish_time - e.arrival_time,
                first - e.arrival_time,
                e.preemptions,
                e.gpu_seconds,
            )
        )
    report = MetricsReport(per_job=per_job, rounds_executed=rounds)
    if per_job:
        report.avg_jct = sum(p.jct for p in per_job) / len(per_job)
        report.avg_responsiveness = sum(p.responsiveness for p in per_job) / len(per_job)
        report.jct_cdf = sorted(p.jct for p in per_job)
    wanted = set(ids)
    bws = [
        cluster.nodes[ev.node_id].pair_bandwidth(ev.chosen_local)
        for ev in intra_events
        if ev.job_id in wanted
    ] if cluster is not None else []
    if bws:
        report.avg_observed_bandwidth = sum(bws) / len(bws)
        report.bandwidth_events = len(bws)
    return report


class Simulation:
    """One engine instance: owns all mutable state of a single run."""

    def __init__(self, sim, jobs, policies):
        self.sim = sim
        self.policies = policies
        self.cluster = ClusterState.build(sim.cluster)
        self.state = JobState()
        records = sorted(copy.deepcopy(list(jobs)), key=lambda j: (j.arrival_time, j.job_id))
        self.all_ids = {j.job_id for j in records}
        self.pending = deque(records)
        self.admission = AdmissionPolicy(policies.admission)
        self.scheduler = SchedulingPolicy(policies.scheduling)
        self.placer = PlacementPolicy(policies.placement, sim.seed)
        self.round = 0
        self.now = 0.0
        self.measured = set(measured_ids(self.all_ids, sim.metrics_window))
        self.finished_ids = set()
        self._idle_rounds = 0

    # -- loop ---------------------------------------------------------------

    def done(self):
        if self.sim.horizon is not None and self.now >= self.sim.horizon:
            return True
        if self.measured <= self.finished_ids:
            return True
        return not (self.pending or self.state.active or self.admission.hold_queue)

    def advance(self):
        """Close the previous round: credit progress, terminate, prune."""
        L = self.sim.round_len
        if self.round > 0:
            self.now = self.round * L
            for job in self.state.running():
                credit_progress(job, L, self.cluster.placement_kind(job.allocation), len(job.allocation))
        self.scheduler.terminations(self.state)
        for job_id in prune_finished(self.state, self.now, self.cluster):
            self.finished_ids.add(job_id)
        if not (self.state.active or self.admission.hold_queue) and self.pending:
            nxt = self.pending[0].arrival_time
            if nxt > self.now:
                skip = math.ceil((nxt - self.now) / L)
                self.round += skip
                self.now = self.round * L

    def pop_arrivals(self):
        out = []
        while self.pending and self.pending[0].arrival_time <= self.now:
            out.append(self.pending.popleft())
        return out

    def decide(self, new_jobs):
        for job in self.admission.admit(new_jobs, self.state, self.cluster):
            job.set_phase(Phase.ADMITTED)
            self.state.add(job)
        ranked = self.scheduler.rank(self.state, self.cluster)
        decision = self.placer.place(ranked, self.cluster, self.state)
        apply_decision(self.cluster, self.state, decision, now=self.now)
        return decision

    def step(self):
        self.advance()
        decision = self.decide(self.pop_arrivals())
        self._check_stall()
        self.round += 1
        return decision

    def _check_stall(self):
        waiting = self.state.active or self.admission.hold_queue
        if waiting and not self.pending and not self.state.running():
            self._idle_rounds += 1
            if self._idle_rounds >= self.sim.stall_rounds:
                raise StallError(f"no job could run for {self._idle_rounds} rounds (t={self.now})")
        else:
            self._idle_rounds = 0

    def run(self):
        while not self.done():
            self.step()
        return self.report()

    def report(self):
        return compute_metrics(
            self.state,
            self.sim.metrics_window,
            self.all_ids,
            self.placer.events,
            self.cluster,
            self.round,
        )

    # -- policy swap (synthesizer) -------------------------------------------

    def swap_policies(self, admission_cfg, scheduler_cfg):
        held = list(self.admission.hold_queue)
        self.admission = AdmissionPolicy(admission_cfg, held)
        self.scheduler = SchedulingPolicy(scheduler_cfg)
        self.policies = Policies(admission_cfg, scheduler_cfg, self.policies.placement)


def run(sim, trace, policies):
    """Simulate ``trace`` (job records) under ``policies`` and return the report."""
    return Simulation(sim, trace, policies).run()
