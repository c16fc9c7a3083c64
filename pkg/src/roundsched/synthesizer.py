"""Runtime policy synthesis: periodically pick the best (admission, scheduling) pair.

Every ``period_rounds`` rounds the live simulation is forked, each
candidate combination is replayed on its own copy, and the live engine
switches to the winner.
"""

from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from roundsched.admission import ACCEPT_ALL, THRESHOLD_FIFO, AdmissionConfig
from roundsched.engine import Policies, Simulation
from roundsched.scheduling import FIFO, LAS, SRTF, SchedulerConfig

AVG_JCT = "avg_jct"
AVG_RESPONSIVENESS = "avg_responsiveness"
BOTH = "both"
OBJECTIVES = (AVG_JCT, AVG_RESPONSIVENESS, BOTH)


@dataclass(frozen=True)
class PolicyCombo:
    admission: AdmissionConfig
    scheduling: SchedulerConfig

    @property
    def label(self):
        return f"{self.scheduling.kind}+{self.admission.label}"


def default_candidates(sched_kinds=(FIFO, SRTF, LAS), factors=(None, 1.2, 1.4)):
    out = []
    for kind in sched_kinds:
        for f in factors:
            adm = AdmissionConfig() if f is None else AdmissionConfig(THRESHOLD_FIFO, f)
            out.append(PolicyCombo(adm, SchedulerConfig(kind)))
    return tuple(out)


@dataclass
class SynthConfig:
    period_rounds: int = 10
    objective: str = AVG_JCT
    # None runs each inner simulation until every known job finishes;
    # an integer stops it after that many rounds
    inner_horizon: Optional[int] = None
    candidates: tuple = field(default_factory=default_candidates)
    # let FixedRounds inner runs see arrivals that have not happened yet
    arrival_oracle: bool = False

    def __post_init__(self):
        if self.period_rounds < 1:
            raise ValueError("period_rounds must be >= 1")
        if not self.candidates:
            raise ValueError("candidates must be non-empty")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.inner_horizon is not None and self.inner_horizon < 1:
            raise ValueError("inner_horizon must be >= 1 rounds")
        if self.arrival_oracle and self.inner_horizon is None:
            raise ValueError("arrival_oracle needs a fixed inner_horizon")


@dataclass(frozen=True)
class Snapshot:
    """Forked engine plus the arrivals popped this round but not yet admitted."""

    sim: Simulation
    new_jobs: tuple
    future: tuple = ()

    def unfinished_ids(self):
        ids = set(self.sim.state.active) | {j.job_id for j in self.sim.admission.hold_queue}
        return ids | {j.job_id for j in self.new_jobs}


def fork(sim, new_jobs=(), future=()):
    """Deep copy of the live state needed by an inner run.

    The finished log, bandwidth events, not-yet-arrived jobs and any
    synthesizer history are left out: inner runs only measure jobs
    unfinished at fork time.
    """
    memo = {id(sim.state.finished_log): [], id(sim.placer.events): [], id(sim.pending): deque()}
    for name in ("evaluations", "switch_log"):
        if hasattr(sim, name):
            memo[id(getattr(sim, name))] = []
    copied = copy.deepcopy(sim, memo)
    # the copy must step as a plain engine, never re-select policies itself
    copied.__class__ = Simulation
    return Snapshot(copied, tuple(copy.deepcopy(list(new_jobs))), tuple(copy.deepcopy(list(future))))


def _censored_metrics(inner, targets):
    finished = {e.job_id: e for e in inner.state.finished_log}
    now = inner.now
    jcts, resps = [], []
    records = {j.job_id: j for j in inner.admission.hold_queue}
    records.update(inner.state.active)
    records.update({j.job_id: j for j in inner.pending})
    for i in sorted(targets):
        if i in finished:
            e = finished[i]
            first = e.first_scheduled_time if e.first_scheduled_time is not None else e.finish_time
            jcts.append(e.finish_time - e.arrival_time)
            resps.append(first - e.arrival_time)
        else:
            job = records[i]
            first = job.first_scheduled_time if job.first_scheduled_time is not None else now
            jcts.append(now - job.arrival_time)
            resps.append(first - job.arrival_time)
    return sum(jcts) / len(jcts), sum(resps) / len(resps)


def evaluate_combo(snapshot, combo, horizon=None):
    """Replay ``snapshot`` under ``combo``; return (avg_jct, avg_responsiveness).

    Only jobs unfinished at snapshot time are measured. With ``horizon``
    set, the run stops after that many rounds and jobs still open are
    counted up to the stopping time.
    """
    targets = snapshot.unfinished_ids()
    if not targets:
        return 0.0, 0.0
    inner = copy.deepcopy(snapshot.sim)
    arrivals = copy.deepcopy(list(snapshot.new_jobs))
    inner.pending = deque(sorted(copy.deepcopy(list(snapshot.future)), key=lambda j: (j.arrival_time, j.job_id)))
    inner.swap_policies(combo.admission, combo.scheduling)
    inner.measured = set(targets)
    inner.finished_ids = set()

    inner.decide(arrivals)
    inner.round += 1
    rounds = 1
    while not inner.done() and (horizon is None or rounds < horizon):
        inner.step()
        rounds += 1
    if horizon is not None:
        # close the last round so its progress counts
        inner.advance()
    return _censored_metrics(inner, targets)


def _dominated(a, b):
    return b[0] <= a[0] and b[1] <= a[1] and (b[0] < a[0] or b[1] < a[1])


def select(results, objective):
    """Pick the winner from ``results``: a list of (combo, (jct, resp)) in candidate order."""
    if not results:
        raise ValueError("no results to select from")
    if objective == AVG_JCT:
        return min(enumerate(results), key=lambda t: (t[1][1][0], t[0]))[1][0]
    if objective == AVG_RESPONSIVENESS:
        return min(enumerate(results), key=lambda t: (t[1][1][1], t[0]))[1][0]
    front = [(i, c, m) for i, (c, m) in enumerate(results) if not any(_dominated(m, o) for _, o in results)]
    lo_j = min(m[0] for _, m in results) or 1.0
    lo_r = min(m[1] for _, m in results) or 1.0
    return min(front, key=lambda t: (t[2][0] / lo_j + t[2][1] / lo_r, t[0]))[1]


@dataclass(frozen=True)
class SwitchEntry:
    round: int
    combo: PolicyCombo

    def row(self):
        adm = self.combo.admission
        factor = "" if adm.kind == ACCEPT_ALL else f"{adm.factor:g}"
        return [self.round, adm.kind, factor, self.combo.scheduling.kind]


SWITCH_LOG_HEADER = ["round", "admission_kind", "admission_factor", "sched_kind"]


class SynthesizedSimulation(Simulation):
    """Engine whose admission and scheduling pair is re-chosen periodically."""

    def __init__(self, sim, jobs, placement, synth):
        first = synth.candidates[0]
        super().__init__(sim, jobs, Policies(first.admission, first.scheduling, placement))
        self.synth = synth
        self.current = first
        self.next_eval = 0
        self.switch_log = [SwitchEntry(0, first)]
        self.evaluations = []

    def step(self):
        self.advance()
        new = self.pop_arrivals()
        if self.round >= self.next_eval:
            self._reselect(new)
            p = self.synth.period_rounds
            self.next_eval = (self.round // p + 1) * p
        decision = self.decide(new)
        self._check_stall()
        self.round += 1
        return decision

    def _reselect(self, new):
        future = tuple(self.pending) if self.synth.arrival_oracle else ()
        snap = fork(self, new, future)
        if not snap.unfinished_ids():
            return  # nothing to decide on; keep the running pair
        results = [(c, evaluate_combo(snap, c, self.synth.inner_horizon)) for c in self.synth.candidates]
        self.evaluations.append((self.round, results))
        best = select(results, self.synth.objective)
        if best != self.current:
            self.current = best
            self.swap_policies(best.admission, best.scheduling)
            self.switch_log.append(SwitchEntry(self.round, best))


def run_synthesized(sim, trace, placement, synth):
    """Run ``trace`` with periodic policy re-selection; return (report, switch_log)."""
    engine = SynthesizedSimulation(sim, trace, placement, synth)
    report = engine.run()
    return report, engine.switch_log
