"""Shared job and cluster state, and the per-round decision record.

Every policy reads these structures; only the engine mutates them inside a
round. ``JobState`` tracks submitted-but-unfinished jobs and an append-only
log of finished ones. ``ClusterState`` keeps one row per GPU.
"""

from __future__ import annotations

import bisect
import copy
import enum
import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from roundsched.errors import ConflictError, MissingProfileError, UnknownJobError

CONSOLIDATED = "consolidated"
SPREAD = "spread"
PLACEMENT_KINDS = (CONSOLIDATED, SPREAD)

DEFAULT_RESTART_OVERHEAD = 30.0


class Phase(enum.Enum):
    WAITING = "waiting"
    ADMITTED = "admitted"
    RUNNING = "running"
    SUSPENDED = "suspended"
    FINISHED = "finished"
    TERMINATED = "terminated"


_ALLOWED = {
    Phase.WAITING: {Phase.ADMITTED},
    Phase.ADMITTED: {Phase.RUNNING, Phase.TERMINATED},
    Phase.RUNNING: {Phase.SUSPENDED, Phase.RUNNING, Phase.FINISHED, Phase.TERMINATED},
    Phase.SUSPENDED: {Phase.RUNNING, Phase.FINISHED, Phase.TERMINATED},
    Phase.FINISHED: set(),
    Phase.TERMINATED: set(),
}


def lookup_iter_time(profile, gpus, placement=CONSOLIDATED):
    """Seconds per iteration for ``gpus`` GPUs under ``placement``.

    Unlisted GPU counts are linearly interpolated on ``1/gpus`` between the
    nearest listed neighbours; counts outside the listed range raise
    ``MissingProfileError``. Single-GPU jobs and profiles without any
    spread rows fall back to the consolidated entries.
    """
    if gpus == 1 or placement != CONSOLIDATED and not any(k[1] == placement for k in profile):
        placement = CONSOLIDATED
    hit = profile.get((gpus, placement))
    if hit is not None:
        return hit
    counts = sorted(g for g, p in profile if p == placement)
    i = bisect.bisect_left(counts, gpus)
    if i == 0 or i == len(counts):
        raise MissingProfileError(
            f"no {placement} profile rows bracket {gpus} GPUs (have {counts})"
        )
    lo, hi = counts[i - 1], counts[i]
    t_lo, t_hi = profile[(lo, placement)], profile[(hi, placement)]
    x, x_lo, x_hi = 1.0 / gpus, 1.0 / lo, 1.0 / hi
    return t_lo + (t_hi - t_lo) * (x - x_lo) / (x_hi - x_lo)


@dataclass
class JobRecord:
    job_id: int
    arrival_time: float
    gpu_demand: int
    total_iterations: int
    iter_time_profile: dict = field(default_factory=dict)
    completed_iterations: int = 0
    attained_service: float = 0.0
    phase: Phase = Phase.WAITING
    first_scheduled_time: Optional[float] = None
    finish_time: Optional[float] = None
    restart_overhead: float = DEFAULT_RESTART_OVERHEAD
    placement_sensitive: bool = False
    metrics: dict = field(default_factory=dict)
    converge_at_fraction: Optional[float] = None
    target_loss: Optional[float] = None
    model_name: str = ""
    loss_curve: Optional[list] = None
    # engine bookkeeping
    allocation: list = field(default_factory=list)
    last_allocation: list = field(default_factory=list)
    pay_overhead: bool = False
    iter_carry: Fraction = Fraction(0)
    preemption_count: int = 0
    _iter_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def iter_time(self, gpus, placement=CONSOLIDATED):
        key = (gpus, placement)
        t = self._iter_cache.get(key)
        if t is None:
            t = lookup_iter_time(self.iter_time_profile, gpus, placement)
            self._iter_cache[key] = t
        return t

    def exact_iter_time(self, gpus, placement=CONSOLIDATED):
        key = ("exact", gpus, placement)
        t = self._iter_cache.get(key)
        if t is None:
            t = Fraction(repr(self.iter_time(gpus, placement)))
            self._iter_cache[key] = t
        return t

    @property
    def remaining_iterations(self):
        return self.total_iterations - self.completed_iterations

    def __deepcopy__(self, memo):
        # profile, loss curve and the lookup cache are never mutated in place
        dup = copy.copy(self)
        dup.metrics = {k: list(v) for k, v in self.metrics.items()}
        dup.allocation = list(self.allocation)
        dup.last_allocation = list(self.last_allocation)
        memo[id(self)] = dup
        return dup

    def set_phase(self, phase):
        if phase not in _ALLOWED[self.phase]:
            raise ValueError(f"job {self.job_id}: illegal transition {self.phase.name} -> {phase.name}")
        self.phase = phase


@dataclass
class NodeSpec:
    node_id: int
    gpu_count: int
    gpu_type: str = "V100"
    intra_node_bw: tuple = ()
    inter_node_bw: float = 10.0

    def __post_init__(self):
        if not self.intra_node_bw:
            self.intra_node_bw = uniform_bw(self.gpu_count, 1.0)
        bw = tuple(tuple(float(x) for x in row) for row in self.intra_node_bw)
        if len(bw) != self.gpu_count or any(len(row) != self.gpu_count for row in bw):
            raise ValueError(f"node {self.node_id}: bandwidth matrix must be {self.gpu_count}x{self.gpu_count}")
        for a in range(self.gpu_count):
            if bw[a][a] != 0:
                raise ValueError(f"node {self.node_id}: bandwidth diagonal must be zero")
            for b in range(a + 1, self.gpu_count):
                if bw[a][b] != bw[b][a]:
                    raise ValueError(f"node {self.node_id}: bandwidth matrix is not symmetric")
                if bw[a][b] <= 0:
                    raise ValueError(f"node {self.node_id}: off-diagonal bandwidth must be positive")
        self.intra_node_bw = bw

    def __deepcopy__(self, memo):
        return self  # read-only after construction

    def pair_bandwidth(self, local_ids):
        """Mean pairwise bandwidth over a set of local GPUs."""
        pairs = list(itertools.combinations(sorted(local_ids), 2))
        if not pairs:
            return 0.0
        return sum(self.intra_node_bw[a][b] for a, b in pairs) / len(pairs)


def uniform_bw(n, value):
    return tuple(tuple(0.0 if a == b else value for b in range(n)) for a in range(n))


# 2x of base gives ~86 Gbps for the high-bandwidth pairs, base on the rest.
P3_BASE_GBPS = 43.25


def p3_8xlarge_bw(base=P3_BASE_GBPS):
    """4-GPU matrix where (0,3) and (1,2) are linked at twice the base rate."""
    m = [[0.0 if a == b else base for b in range(4)] for a in range(4)]
    for a, b in ((0, 3), (1, 2)):
        m[a][b] = m[b][a] = 2 * base
    return tuple(tuple(r) for r in m)


def default_cluster(nodes=32, gpus_per_node=4, gpu_type="V100", inter_node_bw=10.0):
    bw = p3_8xlarge_bw() if gpus_per_node == 4 else uniform_bw(gpus_per_node, P3_BASE_GBPS)
    return [NodeSpec(n, gpus_per_node, gpu_type, bw, inter_node_bw) for n in range(nodes)]


@dataclass
class GpuRow:
    node_id: int
    global_gpu_id: int
    local_gpu_id: int
    gpu_type: str
    occupancy: Optional[int] = None
    # carried for schema completeness; unused by the shipped policies
    free_memory: Optional[float] = None
    shared_jobs: tuple = ()


@dataclass
class ClusterState:
    rows: list
    nodes: dict

    @classmethod
    def build(cls, nodes):
        rows = []
        for spec in sorted(nodes, key=lambda n: n.node_id):
            for local in range(spec.gpu_count):
                rows.append(GpuRow(spec.node_id, len(rows), local, spec.gpu_type))
        return cls(rows, {n.node_id: n for n in nodes})

    def __deepcopy__(self, memo):
        dup = ClusterState([copy.copy(r) for r in self.rows], self.nodes)
        memo[id(self)] = dup
        return dup

    @property
    def total_gpus(self):
        return len(self.rows)

    def free_by_node(self):
        """Map node id to its free global GPU ids, ascending."""
        view = {n: [] for n in sorted(self.nodes)}
        for r in self.rows:
            if r.occupancy is None:
                view[r.node_id].append(r.global_gpu_id)
        return view

    def occupied_by(self, job_id):
        return [r.global_gpu_id for r in self.rows if r.occupancy == job_id]

    def nodes_of(self, gpu_ids):
        return sorted({self.rows[g].node_id for g in gpu_ids})

    def placement_kind(self, gpu_ids):
        return CONSOLIDATED if len(self.nodes_of(gpu_ids)) <= 1 else SPREAD

    def release(self, gpu_ids):
        for g in gpu_ids:
            self.rows[g].occupancy = None


def free_gpus(cluster):
    return [r.global_gpu_id for r in cluster.rows if r.occupancy is None]


@dataclass(frozen=True)
class FinishedEntry:
    job_id: int
    arrival_time: float
    first_scheduled_time: Optional[float]
    finish_time: float
    gpu_demand: int
    preemptions: int = 0
    gpu_seconds: float = 0.0
    terminated: bool = False


@dataclass
class JobState:
    active: dict = field(default_factory=dict)
    finished_log: list = field(default_factory=list)

    def add(self, job):
        if job.job_id in self.active:
            raise ValueError(f"job {job.job_id} already tracked")
        self.active[job.job_id] = job

    def running(self):
        return [j for j in self.active.values() if j.phase is Phase.RUNNING]


@dataclass
class RoundDecision:
    to_launch: dict = field(default_factory=dict)
    to_suspend: list = field(default_factory=list)
    renewals: list = field(default_factory=list)

    def validate(self, jobs=None):
        overlap = set(self.to_launch) & set(self.to_suspend)
        if overlap:
            raise ValueError(f"jobs both launched and suspended: {sorted(overlap)}")
        seen = set()
        for job_id, gpus in self.to_launch.items():
            if len(set(gpus)) != len(gpus) or seen & set(gpus):
                raise ValueError(f"GPU assigned twice in launch of job {job_id}")
            seen.update(gpus)
            if jobs is not None and job_id in jobs.active and not gpus:
                raise ValueError(f"empty launch list for job {job_id}")

    def is_empty(self):
        return not (self.to_launch or self.to_suspend or self.renewals)


def apply_decision(cluster, jobs, d, now=None):
    """Apply one round's suspensions, then launches, to the shared state.

    Mutates ``cluster`` and the affected job records in place and returns
    ``cluster``. A launched job whose GPU set differs from the one it held
    in the previous round is marked to pay its restart overhead. ``now``,
    when given, stamps ``first_scheduled_time`` on first launch.
    """
    d.validate(jobs)
    for job_id in itertools.chain(d.to_suspend, d.to_launch, d.renewals):
        if job_id not in jobs.active:
            raise UnknownJobError(f"job {job_id} is not active")
    for job_id in d.to_suspend:
        job = jobs.active[job_id]
        if job.phase is not Phase.RUNNING:
            raise ValueError(f"job {job_id} is not running and cannot be suspended")
    for job_id, gpus in d.to_launch.items():
        job = jobs.active[job_id]
        for g in gpus:
            if not 0 <= g < cluster.total_gpus:
                raise ConflictError(f"job {job_id}: GPU {g} does not exist")
            occ = cluster.rows[g].occupancy
            if occ is not None and occ != job_id and occ not in d.to_suspend and occ not in d.to_launch:
                raise ConflictError(f"job {job_id}: GPU {g} still occupied by job {occ}")

    for job_id in d.to_suspend:
        job = jobs.active[job_id]
        cluster.release(job.allocation)
        job.last_allocation = job.allocation
        job.allocation = []
        job.preemption_count += 1
        job.set_phase(Phase.SUSPENDED)

    moving = [j for j in d.to_launch if jobs.active[j].phase is Phase.RUNNING]
    for job_id in moving:
        cluster.release(jobs.active[job_id].allocation)

    for job_id, gpus in d.to_launch.items():
        job = jobs.active[job_id]
        for g in gpus:
            occ = cluster.rows[g].occupancy
            if occ is not None:
                raise ConflictError(f"job {job_id}: GPU {g} still occupied by job {occ}")
            cluster.rows[g].occupancy = job_id
        was_running = job.phase is Phase.RUNNING
        previous = job.allocation if was_running else []
        job.pay_overhead = sorted(gpus) != sorted(previous)
        job.last_allocation = previous
        job.allocation = sorted(gpus)
        job.set_phase(Phase.RUNNING)
        if now is not None and job.first_scheduled_time is None:
            job.first_scheduled_time = now

    for job_id in d.renewals:
        job = jobs.active[job_id]
        if job.phase is Phase.RUNNING:
            job.pay_overhead = False
    return cluster


def prune_finished(jobs, now, cluster=None):
    """Move completed or terminated jobs to the finished log.

    Their GPUs are released when ``cluster`` is given. Returns moved ids.
    """
    done = [
        j
        for j in jobs.active.values()
        if j.completed_iterations >= j.total_iterations or j.phase is Phase.TERMINATED
    ]
    moved = []
    for job in sorted(done, key=lambda j: j.job_id):
        if cluster is not None and job.allocation:
            cluster.release(job.allocation)
        terminated = job.phase is Phase.TERMINATED
        if not terminated:
            job.set_phase(Phase.FINISHED)
        job.last_allocation = job.allocation
        job.allocation = []
        job.finish_time = now
        jobs.finished_log.append(
            FinishedEntry(
                job.job_id,
                job.arrival_time,
                job.first_scheduled_time,
                now,
                job.gpu_demand,
                job.preemption_count,
                job.attained_service,
                terminated,
            )
        )
        del jobs.active[job.job_id]
        moved.append(job.job_id)
    return moved
