"""Placement policies: map the priority list onto concrete GPUs."""

from __future__ import annotations

import bisect
import itertools
from dataclasses import dataclass, field

import numpy as np

from roundsched.state import Phase, RoundDecision

FIRST_FREE = "first_free"
CONSOLIDATED_KIND = "consolidated"
TIRESIAS_SKEW = "tiresias"
PROFILE_GUIDED = "profile_guided"
PLACEMENT_POLICY_KINDS = (FIRST_FREE, CONSOLIDATED_KIND, TIRESIAS_SKEW, PROFILE_GUIDED)


@dataclass(frozen=True)
class PlacementConfig:
    kind: str = CONSOLIDATED_KIND
    intra_node_bandwidth_aware: bool = False
    # when not bandwidth-aware: pick local GPUs at random instead of lowest-id
    intra_node_random: bool = False
    skew_flags: dict = field(default_factory=dict)
    consolidation_benefit: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PLACEMENT_POLICY_KINDS:
            raise ValueError(f"unknown placement kind {self.kind!r}")
        if self.kind == TIRESIAS_SKEW and not self.skew_flags:
            raise ValueError("tiresias placement requires skew_flags")
        if self.kind == PROFILE_GUIDED and not self.consolidation_benefit:
            raise ValueError("profile_guided placement requires consolidation_benefit")

    def __hash__(self):
        return hash((self.kind, self.intra_node_bandwidth_aware, self.intra_node_random))


@dataclass(frozen=True)
class IntraNodeEvent:
    job_id: int
    node_id: int
    free_local: tuple
    chosen_local: tuple


def _take(free_by_node, plan):
    """Lowest free ids from each (node, count) in ``plan``."""
    out = []
    for node, count in plan:
        out.extend(free_by_node[node][:count])
    return sorted(out)


def choose_gpus_first_free(demand, free_by_node):
    pool = sorted(g for ids in free_by_node.values() for g in ids)
    return pool[:demand] if len(pool) >= demand else None


def choose_gpus_consolidated(demand, free_by_node):
    """Span as few nodes as possible, then leave the fewest free GPUs behind.

    Among node sets with equal span and leftover, the lexicographically
    smallest sorted node-id tuple wins. Returns ``None`` when fewer than
    ``demand`` GPUs are free.
    """
    counts = {n: len(ids) for n, ids in free_by_node.items() if ids}
    if sum(counts.values()) < demand:
        return None
    desc = sorted(counts.values(), reverse=True)
    span = next(k for k in range(1, len(desc) + 1) if sum(desc[:k]) >= demand)

    by_value = {}
    for n in sorted(counts):
        by_value.setdefault(counts[n], []).append(n)
    values = sorted(by_value, reverse=True)

    best = [None, None]  # (sum, node tuple)

    def consider(picks):
        nodes = tuple(sorted(n for v, m in picks for n in by_value[v][:m]))
        total = sum(v * m for v, m in picks)
        if best[0] is None or (total, nodes) < (best[0], best[1]):
            best[0], best[1] = total, nodes

    def search(i, slots, acc, picks):
        if slots == 0:
            if acc >= demand:
                consider(picks)
            return
        if i == len(values):
            return
        v = values[i]
        if acc + slots * v < demand:
            return
        if best[0] is not None and acc + slots * min(values[i:]) > best[0]:
            return
        for m in range(min(slots, len(by_value[v])), -1, -1):
            search(i + 1, slots - m, acc + m * v, picks + [(v, m)] if m else picks)

    search(0, span, 0, [])
    nodes = best[1]
    order = sorted(nodes, key=lambda n: (-counts[n], n))
    plan, need = [], demand
    for n in order:
        take = min(need, counts[n])
        plan.append((n, take))
        need -= take
    return _take(free_by_node, plan)


def choose_gpus_fragment_fill(demand, free_by_node):
    """Fill the smallest free fragments first, keeping large holes intact."""
    counts = [(len(ids), n) for n, ids in free_by_node.items() if ids]
    if sum(c for c, _ in counts) < demand:
        return None
    plan, need = [], demand
    for c, n in sorted(counts):
        take = min(need, c)
        plan.append((n, take))
        need -= take
        if need == 0:
            break
    return _take(free_by_node, plan)


def choose_gpus_tiresias(job, free_by_node, skew_flags):
    """Consolidate only models flagged as skewed; fragment-fill the rest."""
    if skew_flags.get(job.model_name, False):
        return choose_gpus_consolidated(job.gpu_demand, free_by_node)
    return choose_gpus_fragment_fill(job.gpu_demand, free_by_node)


def choose_gpus_profile_guided(job, free_by_node, consolidation_benefit):
    return choose_gpus_tiresias(job, free_by_node, consolidation_benefit)


def subset_bandwidth(local_ids, node_spec):
    return sum(node_spec.intra_node_bw[a][b] for a, b in itertools.combinations(local_ids, 2))


def refine_intra_node(free_local, demand, node_spec):
    """Local GPU subset of size ``demand`` with the largest summed pairwise bandwidth.

    Exhaustive over ``free_local``; ties go to the lexicographically
    smallest id set.
    """
    free_local = sorted(free_local)
    if demand > len(free_local):
        raise ValueError(f"need {demand} GPUs but only {len(free_local)} are free")
    best, best_bw = None, -1.0
    for combo in itertools.combinations(free_local, demand):
        bw = subset_bandwidth(combo, node_spec)
        if bw > best_bw:
            best, best_bw = combo, bw
    return list(best)


def _choose(kind, cfg, job, granted, free_by_node):
    if kind == FIRST_FREE:
        return choose_gpus_first_free(granted, free_by_node)
    if kind == CONSOLIDATED_KIND or granted != job.gpu_demand:
        return choose_gpus_consolidated(granted, free_by_node)
    if kind == TIRESIAS_SKEW:
        return choose_gpus_tiresias(job, free_by_node, cfg.skew_flags)
    return choose_gpus_profile_guided(job, free_by_node, cfg.consolidation_benefit)


def place(ranked, cluster, jobs, cfg, rng=None, events=None):
    """Turn a priority list into this round's launches, suspensions and renewals.

    Jobs are admitted to the round in priority order while their granted
    GPUs still fit in the cluster; a job that does not fit is skipped and
    smaller jobs behind it may still run. Running jobs outside that set are
    suspended (lowest priority first). Running jobs inside it keep their
    GPUs; the rest are placed in priority order on the freed pool.
    """
    total = cluster.total_gpus
    selected, used = [], 0
    for job_id, granted in ranked.ordered:
        if used + granted <= total:
            selected.append((job_id, granted))
            used += granted
    chosen = {job_id for job_id, _ in selected}
    position = {job_id: i for i, (job_id, _) in enumerate(ranked.ordered)}

    free = cluster.free_by_node()
    node_of = [r.node_id for r in cluster.rows]

    def give_back(gpus):
        for g in gpus:
            bisect.insort(free[node_of[g]], g)

    running = [j for j in jobs.active.values() if j.phase is Phase.RUNNING]
    victims = sorted(
        (j for j in running if j.job_id not in chosen),
        key=lambda j: -position.get(j.job_id, len(position)),
    )
    decision = RoundDecision()
    for job in victims:
        give_back(job.allocation)
        decision.to_suspend.append(job.job_id)

    pending = []
    for job_id, granted in selected:
        job = jobs.active[job_id]
        if job.phase is Phase.RUNNING and len(job.allocation) == granted:
            decision.renewals.append(job_id)
            continue
        if job.phase is Phase.RUNNING:
            give_back(job.allocation)
        pending.append((job, granted))

    for job, granted in pending:
        gpus = _choose(cfg.kind, cfg, job, granted, free)
        if gpus is None:
            if job.phase is Phase.RUNNING:
                decision.to_suspend.append(job.job_id)
            continue
        nodes = {node_of[g] for g in gpus}
        if len(nodes) == 1 and granted > 1 and (cfg.intra_node_bandwidth_aware or cfg.intra_node_random):
            node = nodes.pop()
            spec = cluster.nodes[node]
            base = free[node][0] - cluster.rows[free[node][0]].local_gpu_id
            free_local = [cluster.rows[g].local_gpu_id for g in free[node]]
            if cfg.intra_node_bandwidth_aware:
                local = refine_intra_node(free_local, granted, spec)
            else:
                rng = rng if rng is not None else np.random.default_rng(0)
                local = sorted(int(x) for x in rng.choice(free_local, size=granted, replace=False))
            gpus = [base + l for l in local]
            if events is not None:
                events.append(IntraNodeEvent(job.job_id, node, tuple(free_local), tuple(local)))
        elif len(nodes) == 1 and granted > 1 and events is not None:
            node = nodes.pop()
            free_local = [cluster.rows[g].local_gpu_id for g in free[node]]
            events.append(
                IntraNodeEvent(job.job_id, node, tuple(free_local), tuple(cluster.rows[g].local_gpu_id for g in gpus))
            )
        for g in gpus:
            free[node_of[g]].remove(g)
        decision.to_launch[job.job_id] = sorted(gpus)
    return decision


class PlacementPolicy:
    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.rng = np.random.default_rng([int(seed), 7])
        self.events = []

    def place(self, ranked, cluster, jobs):
        return place(ranked, cluster, jobs, self.cfg, self.rng, self.events)
