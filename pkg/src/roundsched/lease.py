"""Lease renewal and two-phase lease expiration on a simulated worker group.

Workers of one job advance in lockstep: each iteration ends with a
collective that needs every worker. Under optimistic renewal a lease stays
valid until the central scheduler revokes it; the revocation goes to one
worker, which picks the exit iteration and tells its peers before it lets
the next collective complete. The harness is a discrete-event simulation
on a logical clock with seeded message delays.
"""

from __future__ import annotations

import enum
import heapq
import itertools
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from roundsched.errors import DeadlockError, UnknownJobError

OPTIMISTIC = "optimistic"
CENTRAL = "central"
TWO_PHASE = "two_phase"
NAIVE = "naive"

REVOKE = "revoke"
PROPAGATE_EXIT = "propagate_exit"
ACK = "ack"
CENTRAL_CHECK = "central_check"
CENTRAL_REPLY = "central_reply"

SCHEDULER = -1  # src/dst id of the central scheduler


class WorkerState(enum.Enum):
    RUNNING = "running"
    EXIT_SCHEDULED = "exit_scheduled"
    EXITED = "exited"


@dataclass
class LeaseEvent:
    send_time: float
    kind: str
    src: int
    dst: int
    value: Optional[int] = None
    deliver_time: Optional[float] = None


@dataclass
class WorkerSim:
    worker_id: int
    job_id: int
    iteration: int = 0
    iter_time: float = 1.0
    peers: list = field(default_factory=list)
    state: WorkerState = WorkerState.RUNNING
    exit_iteration: Optional[int] = None


class LeaseTable:
    """Per-node lease status; a lease is revoked at most once per cycle."""

    def __init__(self):
        self.nodes = {}

    def grant(self, node, job_id):
        self.nodes.setdefault(node, {})[job_id] = ("active", None)

    def revoke(self, node, job_id, exit_iteration):
        status, _ = self.nodes.get(node, {}).get(job_id, ("active", None))
        if status != "active":
            raise ValueError(f"lease of job {job_id} on node {node} already revoked")
        self.nodes.setdefault(node, {})[job_id] = ("revoked", exit_iteration)

    def status(self, node, job_id):
        return self.nodes.get(node, {}).get(job_id, ("active", None))


def make_workers(count, job_id=0, iter_time=1.0, start_iteration=0):
    ids = list(range(count))
    return [
        WorkerSim(i, job_id, start_iteration, iter_time, [p for p in ids if p != i])
        for i in ids
    ]


def revoke(job_id, workers_by_job, now=0.0):
    """The single revocation message the scheduler sends for ``job_id``."""
    workers = workers_by_job.get(job_id)
    if not workers:
        raise UnknownJobError(f"job {job_id} has no workers")
    target = min(w.worker_id for w in workers)
    return LeaseEvent(now, REVOKE, SCHEDULER, target)


def on_revoke(w, now=0.0):
    """Handle a revocation at worker ``w``: schedule exit after the next iteration.

    Returns the exit iteration and the propagation messages for the peers.
    """
    if w.state is not WorkerState.RUNNING:
        return w.exit_iteration, []
    w.exit_iteration = w.iteration + 1
    w.state = WorkerState.EXIT_SCHEDULED
    return w.exit_iteration, [LeaseEvent(now, PROPAGATE_EXIT, w.worker_id, p, w.exit_iteration) for p in w.peers]


@dataclass
class HarnessResult:
    exits: dict
    delivery_iteration: Optional[int]
    messages: Counter
    log: list
    end_time: float

    @property
    def exit_skew(self):
        vals = list(self.exits.values())
        return max(vals) - min(vals) if vals else 0


def step_harness(
    workers,
    events,
    seed=0,
    total_iterations=100,
    delay=(0.05, 2.0),
    jitter=0.25,
    protocol=TWO_PHASE,
    table=None,
):
    """Run the worker group until every worker exits.

    ``events`` are scheduler messages (normally one revocation); each gets a
    delivery time from the seeded delay distribution unless it already has
    one. Per-iteration compute times are jittered per worker so that
    messages land at every phase of an iteration. ``protocol="naive"``
    revokes every worker independently, for contrast. Raises
    ``DeadlockError`` if nothing is deliverable while workers remain.
    """
    rng = np.random.default_rng([int(seed), 11])
    by_id = {w.worker_id: w for w in workers}
    table = table or LeaseTable()
    for w in workers:
        table.grant(w.worker_id, w.job_id)
    heap, seq = [], itertools.count()
    log = []
    phase = {}  # worker -> "compute" | "collective"
    holding = set()
    awaiting = {}
    delivery_iteration = [None]
    clock = [0.0]

    def push(t, kind, obj):
        heapq.heappush(heap, (t, next(seq), kind, obj))

    def send(ev):
        if ev.deliver_time is None:
            ev.deliver_time = ev.send_time + float(rng.uniform(*delay))
        log.append(ev)
        push(ev.deliver_time, "deliver", ev)

    def start_compute(w, t):
        phase[w.worker_id] = "compute"
        push(t + w.iter_time * float(rng.uniform(1 - jitter, 1 + jitter)), "compute", w)

    def try_collective(t):
        live = [w for w in workers if w.state is not WorkerState.EXITED]
        if len(live) != len(workers):
            return  # a peer left: the collective can never complete
        if holding or any(phase[w.worker_id] != "collective" for w in workers):
            return
        for w in workers:
            w.iteration += 1
        for w in workers:
            if w.exit_iteration == w.iteration or w.iteration >= total_iterations:
                w.state = WorkerState.EXITED
                if w.exit_iteration is None:
                    w.exit_iteration = w.iteration
            else:
                start_compute(w, t)

    for ev in events:
        send(ev)
    for w in workers:
        if w.iteration >= total_iterations:
            w.state = WorkerState.EXITED
            w.exit_iteration = w.iteration
        else:
            start_compute(w, 0.0)

    while heap:
        t, _, kind, obj = heapq.heappop(heap)
        clock[0] = t
        if kind == "compute":
            phase[obj.worker_id] = "collective"
            try_collective(t)
            continue
        ev = obj
        w = by_id[ev.dst]
        if ev.kind == REVOKE:
            if w.state is not WorkerState.RUNNING:
                continue
            if protocol == NAIVE:
                w.exit_iteration = w.iteration + 1
                w.state = WorkerState.EXIT_SCHEDULED
                table.revoke(w.worker_id, w.job_id, w.exit_iteration)
                continue
            delivery_iteration[0] = w.iteration
            exit_it, props = on_revoke(w, t)
            table.revoke(w.worker_id, w.job_id, exit_it)
            if props:
                holding.add(w.worker_id)
                awaiting[w.worker_id] = {p.dst for p in props}
                for p in props:
                    send(p)
        elif ev.kind == PROPAGATE_EXIT:
            if w.iteration >= ev.value:
                raise AssertionError(f"worker {w.worker_id} already past exit iteration {ev.value}")
            w.exit_iteration = ev.value
            w.state = WorkerState.EXIT_SCHEDULED
            table.revoke(w.worker_id, w.job_id, ev.value)
            send(LeaseEvent(t, ACK, w.worker_id, ev.src, ev.value))
        elif ev.kind == ACK:
            pending = awaiting[w.worker_id]
            pending.discard(ev.src)
            if not pending:
                holding.discard(w.worker_id)
                try_collective(t)

    if any(w.state is not WorkerState.EXITED for w in workers):
        stuck = sorted(w.worker_id for w in workers if w.state is not WorkerState.EXITED)
        raise DeadlockError(f"workers {stuck} can never finish their collective")
    return HarnessResult(
        {w.worker_id: w.exit_iteration for w in workers},
        delivery_iteration[0],
        Counter(ev.kind for ev in log),
        log,
        clock[0],
    )


@dataclass(frozen=True)
class MessageCount:
    central_messages: int
    total_messages: int


def count_messages(mode, workers, rounds, revocations):
    """Lease-control messages for one job over ``rounds`` rounds.

    Central renewal sends one check per worker per round to the scheduler
    and receives one reply. Optimistic renewal sends nothing while leases
    stay valid; each revocation costs one message to the lead worker plus
    one propagation to each peer (acknowledgements are not counted).
    ``central_messages`` counts checks sent to the scheduler.
    """
    if mode == CENTRAL:
        checks = workers * rounds
        return MessageCount(checks, 2 * checks)
    if mode == OPTIMISTIC:
        return MessageCount(0, revocations * workers)
    raise ValueError(f"unknown lease mode {mode!r}")


def _revocation_rounds(rounds, revocations, rng):
    if revocations > rounds:
        raise ValueError("more revocations than rounds")
    return sorted(int(r) for r in rng.choice(np.arange(rounds), size=revocations, replace=False))


@dataclass
class JobLeaseRun:
    mode: str
    workers: int
    rounds: int
    revocations: int
    messages: Counter
    cycles: list  # per scheduling cycle: (delivery iteration or None, exits)

    @property
    def central_messages(self):
        return self.messages[CENTRAL_CHECK]

    @property
    def total_messages(self):
        return sum(n for kind, n in self.messages.items() if kind != ACK)

    @property
    def max_exit_skew(self):
        skews = [max(ex.values()) - min(ex.values()) for _, ex in self.cycles if ex]
        return max(skews, default=0)


def simulate_optimistic(workers, rounds, revocations, seed=0, iters_per_round=10, delay=(0.05, 2.0)):
    """One job over ``rounds`` rounds with ``revocations`` preemptions, optimistic leases.

    Each revocation ends a scheduling cycle; the job resumes from its exit
    checkpoint in the next cycle.
    """
    rng = np.random.default_rng([int(seed), 13])
    total = rounds * iters_per_round
    targets = _revocation_rounds(rounds, revocations, rng)
    messages, cycles = Counter(), []
    start = 0
    for k, r in enumerate(targets):
        group = make_workers(workers, start_iteration=start)
        # scheduler sends the revocation somewhere inside round r
        offset = max(0, r * iters_per_round - start) + float(rng.uniform(0, iters_per_round))
        ev = LeaseEvent(offset, REVOKE, SCHEDULER, revoke(0, {0: group}).dst)
        res = step_harness(group, [ev], seed=int(rng.integers(2**31)), total_iterations=total, delay=delay)
        messages.update(res.messages)
        cycles.append((res.delivery_iteration, res.exits))
        start = min(res.exits.values())
        if start >= total:
            break
    if start < total:
        group = make_workers(workers, start_iteration=start)
        res = step_harness(group, [], seed=int(rng.integers(2**31)), total_iterations=total, delay=delay)
        messages.update(res.messages)
        cycles.append((None, res.exits))
    return JobLeaseRun(OPTIMISTIC, workers, rounds, revocations, messages, cycles)


def simulate_central(workers, rounds, revocations, seed=0, iters_per_round=10):
    """Central renewal: every worker asks the scheduler at each round boundary.

    The scheduler answers all workers of a round identically, so a
    revocation lands on one iteration for everyone.
    """
    rng = np.random.default_rng([int(seed), 17])
    targets = set(_revocation_rounds(rounds, revocations, rng))
    messages, cycles = Counter(), []
    exits = {}
    for r in range(rounds):
        boundary = (r + 1) * iters_per_round
        for w in range(workers):
            messages[CENTRAL_CHECK] += 1
            messages[CENTRAL_REPLY] += 1
            if r in targets or r == rounds - 1:
                exits[w] = boundary
        if exits:
            cycles.append((boundary - 1 if r in targets else None, dict(exits)))
            exits = {}
    return JobLeaseRun(CENTRAL, workers, rounds, revocations, messages, cycles)


def lease_bench(worker_counts, rounds, revocations, seeds):
    """Rows of ``mode,workers,rounds,revocations,central_messages,total_messages,max_exit_skew_iterations``."""
    rows = []
    for w in worker_counts:
        for mode in (OPTIMISTIC, CENTRAL):
            central, total, skew = set(), set(), 0
            for s in seeds:
                if mode == OPTIMISTIC:
                    res = simulate_optimistic(w, rounds, revocations, seed=s)
                else:
                    res = simulate_central(w, rounds, revocations, seed=s)
                central.add(res.central_messages)
                total.add(res.total_messages)
                skew = max(skew, res.max_exit_skew)
            expected = count_messages(mode, w, rounds, revocations)
            if central != {expected.central_messages} or total != {expected.total_messages}:
                raise AssertionError(f"{mode} W={w}: harness counts {central}/{total} != model {expected}")
            rows.append(
                {
                    "mode": mode,
                    "workers": w,
                    "rounds": rounds,
                    "revocations": revocations,
                    "central_messages": expected.central_messages,
                    "total_messages": expected.total_messages,
                    "max_exit_skew_iterations": skew,
                }
            )
    return rows
