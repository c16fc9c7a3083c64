"""End-to-end acceptance criteria, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line (collected in
the terminal summary) and then asserts the criterion at its tolerance.
Run just this file with ``pytest tests/test_acceptance.py -s``.
"""

import itertools
import random
import time

import pytest

from conftest import ACCEPTANCE_LINES, make_cluster, make_job, nodes, state_with
from roundsched.admission import THRESHOLD_FIFO, AdmissionConfig, AdmissionPolicy, admitted_demand
from roundsched.cli import main
from roundsched.engine import Policies, SimConfig, Simulation, run
from roundsched.errors import DeadlockError
from roundsched.lease import (
    CENTRAL,
    OPTIMISTIC,
    REVOKE,
    SCHEDULER,
    LeaseEvent,
    count_messages,
    make_workers,
    simulate_central,
    simulate_optimistic,
    step_harness,
)
from roundsched.placement import PlacementConfig, choose_gpus_consolidated, refine_intra_node
from roundsched.scheduling import (
    SchedulerConfig,
    rank_discrete_las,
    rank_fifo,
    rank_las,
    rank_optimus_like,
    rank_srtf,
)
from roundsched.state import ClusterState, Phase, default_cluster
from roundsched.synthesizer import SynthConfig, default_candidates, run_synthesized
from roundsched.workload import (
    ArrivalConfig,
    BurstyConfig,
    JobShape,
    SpikeConfig,
    assign_convergence,
    assign_models,
    default_profiles,
    synthetic_trace,
)

pytestmark = pytest.mark.acceptance

H = 3600.0
# measured window: jobs 1000..1499 of a 2500-job trace, so the cluster is
# warmed up before the window and still loaded while it drains
TRACE_COUNT = 2500
WINDOW = (1000, 1500)


def record(n, ok, detail, started):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  ({time.time() - started:.1f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def jobs_for(lam, count=TRACE_COUNT, seed=1, shape=None, spike=None, bursty=None):
    cfg = ArrivalConfig(lam, seed=seed, count=count, spike=spike, bursty=bursty)
    return assign_models(synthetic_trace(cfg, shape), default_profiles(), seed)


def window_sim(**kw):
    return SimConfig(metrics_window=WINDOW, **kw)


# -- 1 ----------------------------------------------------------------------------


def test_criterion_1_oracle_fixture():
    from test_engine import FIFO_FIRST_FREE, ORACLE_EXPECTED, ORACLE_TRACE, sim_config, unit_job

    t0 = time.time()
    report = run(sim_config(2), [unit_job(*t) for t in ORACLE_TRACE], FIFO_FIRST_FREE)
    got = {p.job_id: (p.jct, p.responsiveness) for p in report.per_job}
    want = {i: (e["jct"], e["resp"]) for i, e in ORACLE_EXPECTED.items()}
    ok = got == want and time.time() - t0 < 1.0
    record(1, ok, f"engine {got} vs hand schedule {want}", t0)


# -- 2 ----------------------------------------------------------------------------


@pytest.mark.parametrize(
    "extra",
    [
        [],
        ["sched.kind=las", "placement.intra_node_random=true", "workload.bursty=true"],
    ],
    ids=["fifo", "las-random-bursty"],
)
def test_criterion_2_determinism(tmp_path, extra):
    t0 = time.time()
    base = ["workload.count=400", "sim.metrics_window=all", "seed=7"] + extra
    outputs = []
    for name in ("a", "b"):
        argv = ["simulate", "--out", str(tmp_path / name)]
        for item in base:
            argv += ["--set", item]
        assert main(argv) == 0
        outputs.append((tmp_path / name / "jobs.csv").read_bytes())
    ok = outputs[0] == outputs[1] and outputs[0].count(b"\n") > 400
    record(2, ok, f"[{'+'.join(extra) or 'defaults'}] jobs.csv identical across runs: {outputs[0] == outputs[1]}", t0)


# -- 3 ----------------------------------------------------------------------------


def test_criterion_3_crossover():
    t0 = time.time()
    rows = {}
    for lam in range(1, 10):
        jobs = jobs_for(lam)
        for kind in ("fifo", "las"):
            r = run(window_sim(), jobs, Policies(scheduling=SchedulerConfig(kind)))
            rows[(lam, kind)] = (r.avg_jct / H, r.avg_responsiveness / H)
    for lam in range(1, 10):
        (fj, fr), (lj, lr) = rows[(lam, "fifo")], rows[(lam, "las")]
        print(f"  lambda={lam}: fifo jct={fj:.2f}h resp={fr:.2f}h | las jct={lj:.2f}h resp={lr:.2f}h")
    checks = []
    for lam in (8, 9):
        (fj, fr), (lj, lr) = rows[(lam, "fifo")], rows[(lam, "las")]
        checks.append(lr < fr and fj < lj)
    detail = "; ".join(
        f"lambda={lam}: resp las {rows[(lam, 'las')][1]:.2f}h < fifo {rows[(lam, 'fifo')][1]:.2f}h, "
        f"jct fifo {rows[(lam, 'fifo')][0]:.2f}h < las {rows[(lam, 'las')][0]:.2f}h"
        for lam in (8, 9)
    )
    record(3, all(checks) and time.time() - t0 < 300, detail, t0)


# -- 4 ----------------------------------------------------------------------------


def test_criterion_4_admission_composition():
    t0 = time.time()
    jobs = jobs_for(8, spike=SpikeConfig(16, (9.0, 10.0), 24.0))
    las = SchedulerConfig("las")
    open_ = run(window_sim(), jobs, Policies(AdmissionConfig(), las))
    gated = run(window_sim(), jobs, Policies(AdmissionConfig(THRESHOLD_FIFO, 1.2), las))
    reduction = 1 - gated.avg_jct / open_.avg_jct
    ok = 0.15 <= reduction <= 0.40 and gated.avg_responsiveness > open_.avg_responsiveness
    detail = (
        f"jct {open_.avg_jct / H:.2f}h -> {gated.avg_jct / H:.2f}h (reduction {reduction:.1%}, want 15-40%); "
        f"resp {open_.avg_responsiveness / H:.2f}h -> {gated.avg_responsiveness / H:.2f}h (want worse)"
    )
    record(4, ok and time.time() - t0 < 300, detail, t0)


# -- 5 ----------------------------------------------------------------------------


def test_criterion_5_loss_termination():
    t0 = time.time()
    jobs = assign_convergence(jobs_for(7), 0.75, 0.4, seed=1)
    epochs = run(window_sim(), jobs, Policies(scheduling=SchedulerConfig("fifo")))
    loss = run(window_sim(), jobs, Policies(scheduling=SchedulerConfig("fifo", loss_termination=True)))
    reduction = 1 - loss.avg_jct / epochs.avg_jct
    detail = f"jct {epochs.avg_jct / H:.2f}h -> {loss.avg_jct / H:.2f}h (reduction {reduction:.1%}, want 30-55%)"
    record(5, 0.30 <= reduction <= 0.55 and time.time() - t0 < 300, detail, t0)


# -- 6 ----------------------------------------------------------------------------


def test_criterion_6_bandwidth_aware_placement():
    t0 = time.time()
    # 2-GPU-heavy trace at moderate load on the 128-GPU p3 cluster
    jobs = jobs_for(4, count=1500, shape=JobShape(demand_values=(1, 2), demand_probs=(0.1, 0.9)))
    cfg = SimConfig(cluster=default_cluster(), metrics_window=None, seed=1)
    results = {}
    for name, placement in (
        ("aware", PlacementConfig(intra_node_bandwidth_aware=True)),
        ("random", PlacementConfig(intra_node_random=True)),
    ):
        sim = Simulation(cfg, jobs, Policies(placement=placement))
        results[name] = (sim.run(), sim)
    aware, random_ = results["aware"][0], results["random"][0]
    ratio = aware.avg_observed_bandwidth / random_.avg_observed_bandwidth

    # pointwise: on every random placement event, the aware choice for the
    # same free set is at least as good
    sim = results["random"][1]
    worse = 0
    for ev in sim.placer.events:
        spec = sim.cluster.nodes[ev.node_id]
        best = refine_intra_node(ev.free_local, len(ev.chosen_local), spec)
        if spec.pair_bandwidth(best) < spec.pair_bandwidth(ev.chosen_local):
            worse += 1
    ok = 1.3 <= ratio <= 1.6 and worse == 0 and sim.placer.events
    detail = (
        f"random {random_.avg_observed_bandwidth:.1f} -> aware {aware.avg_observed_bandwidth:.1f} Gbps "
        f"(ratio {ratio:.3f}, want 1.3-1.6); dominance violations {worse}/{len(sim.placer.events)}"
    )
    record(6, bool(ok) and time.time() - t0 < 120, detail, t0)


# -- 7 ----------------------------------------------------------------------------


def test_criterion_7_lease_protocol():
    t0 = time.time()
    rng = random.Random(2024)
    bad, deadlocks, runs = 0, 0, 0
    for seed in range(1000):
        workers = 2 + seed % 15
        group = make_workers(workers, start_iteration=rng.randrange(0, 50))
        ev = LeaseEvent(rng.uniform(0.0, 40.0), REVOKE, SCHEDULER, 0)
        try:
            res = step_harness(group, [ev], seed=seed)
        except DeadlockError:
            deadlocks += 1
            continue
        runs += 1
        exits = set(res.exits.values())
        if res.delivery_iteration is None:
            bad += exits != {100}
        else:
            bad += exits != {res.delivery_iteration + 1}

    counts_ok = True
    for w in (2, 8, 16):
        optimistic = {simulate_optimistic(w, r, 2, seed=3).central_messages for r in (10, 50, 200)}
        counts_ok &= optimistic == {0}
        counts_ok &= count_messages(OPTIMISTIC, w, 10, 2) == count_messages(OPTIMISTIC, w, 500, 2)
        for r in (10, 50, 200):
            counts_ok &= simulate_central(w, r, 2, seed=3).central_messages == w * r
            counts_ok &= count_messages(CENTRAL, w, r, 2).central_messages == w * r
    ok = bad == 0 and deadlocks == 0 and counts_ok and runs == 1000
    detail = f"{runs} seeds (2-16 workers): {bad} inconsistent exits, {deadlocks} deadlocks; counting invariants {counts_ok}"
    record(7, ok and time.time() - t0 < 60, detail, t0)


# -- 8 ----------------------------------------------------------------------------


SYNTH_SIM = dict(cluster=default_cluster(nodes=2), metrics_window=None)


@pytest.mark.parametrize("bursty", [False, True], ids=["plain", "bursty"])
def test_criterion_8_synthesizer(bursty):
    t0 = time.time()
    # small cluster at low rate so 9 inner runs per period stay at desk scale
    jobs = jobs_for(0.5, count=80, bursty=BurstyConfig() if bursty else None)
    sim = SimConfig(**SYNTH_SIM)
    placement = PlacementConfig()
    static = {}
    for combo in default_candidates():
        static[combo.label] = run(sim, jobs, Policies(combo.admission, combo.scheduling, placement)).avg_jct
    best_label = min(static, key=static.get)
    report, log = run_synthesized(sim, jobs, placement, SynthConfig())
    ratio = report.avg_jct / static[best_label]
    kinds = sorted({e.combo.scheduling.kind for e in log})
    ok = ratio <= 1.10 and (not bursty or len(kinds) >= 2)
    detail = (
        f"[{'bursty' if bursty else 'plain'}] synth {report.avg_jct / H:.2f}h vs best static "
        f"{best_label} {static[best_label] / H:.2f}h (ratio {ratio:.3f}, want <= 1.10); "
        f"switch_log kinds {kinds} over {len(log)} entries"
    )
    record(8, ok and time.time() - t0 < 600, detail, t0)


# -- 9 ----------------------------------------------------------------------------


def _random_jobs(rng, n):
    jobs = []
    for i in range(n):
        j = make_job(i, arrival=float(rng.randrange(0, 10)), demand=rng.randint(1, 4), iters=rng.randint(1, 80))
        j.completed_iterations = rng.randint(0, j.total_iterations)
        j.attained_service = rng.choice([0.0, 100.0, 3600.0, 5000.0, 40000.0, rng.uniform(0, 1e5)])
        jobs.append(j)
    return jobs


def _consolidated_span_ok():
    masks = list(itertools.product([False, True], repeat=4))
    for n in range(1, 4):
        for pattern in itertools.product(masks, repeat=n):
            cluster = ClusterState.build(nodes(n))
            for r in cluster.rows:
                if not pattern[r.node_id][r.local_gpu_id]:
                    r.occupancy = -1
            free = cluster.free_by_node()
            counts = {k: len(v) for k, v in free.items()}
            for demand in range(1, 4 * n + 1):
                got = choose_gpus_consolidated(demand, free)
                if demand > sum(counts.values()):
                    if got is not None:
                        return False
                    continue
                spans = [
                    k
                    for k in range(1, n + 1)
                    for s in itertools.combinations(counts, k)
                    if sum(counts[x] for x in s) >= demand
                ]
                if len(got) != demand or len({cluster.rows[g].node_id for g in got}) != min(spans):
                    return False
    return True


def test_criterion_9_policy_properties():
    t0 = time.time()
    rng = random.Random(9)
    checks = {}

    rankers = (rank_fifo, rank_srtf, rank_las, rank_discrete_las)
    perm = True
    for _ in range(300):
        jobs = _random_jobs(rng, rng.randint(0, 12))
        for ranker in rankers:
            out = ranker(jobs).ids()
            shuffled = list(jobs)
            rng.shuffle(shuffled)
            perm &= sorted(out) == sorted(j.job_id for j in jobs) and ranker(shuffled).ids() == out
    checks["ranker permutation/determinism"] = perm
    tied = [make_job(i) for i in (5, 1, 3)]
    checks["tie rule"] = all(r(tied).ids() == [1, 3, 5] for r in rankers)

    scale_ok = True
    for _ in range(300):
        jobs = _random_jobs(rng, rng.randint(1, 12))
        c = rng.choice([1e-3, 0.5, 3.0, 1e3])
        las, dlas = rank_las(jobs).ids(), rank_discrete_las(jobs, (3600.0, 36000.0)).ids()
        for j in jobs:
            j.attained_service *= c
        scale_ok &= rank_las(jobs).ids() == las
        scale_ok &= rank_discrete_las(jobs, (3600.0 * c, 36000.0 * c)).ids() == dlas
    checks["LAS scaling invariance"] = scale_ok

    fixture = []
    for name, service in (("jC", 40000.0), ("jB", 5000.0), ("jA", 100.0)):
        j = make_job(name)
        j.attained_service = service
        fixture.append(j)
    checks["DiscreteLas fixture"] = rank_discrete_las(fixture, (3600, 36000)).ids() == ["jA", "jB", "jC"]

    caps = True
    for _ in range(300):
        jobs = _random_jobs(rng, rng.randint(0, 10))
        free = rng.randint(0, 16)
        granted = dict(rank_optimus_like(jobs, free).ordered)
        caps &= all(1 <= granted[j.job_id] <= j.gpu_demand for j in jobs)
        head = rank_optimus_like(jobs, free).ordered[:free]
        caps &= sum(g for _, g in head) <= free
    checks["OptimusLike grant caps"] = caps

    cap_ok = True
    cluster = make_cluster([4, 4])
    for _ in range(200):
        factor = rng.choice([0.5, 1.0, 1.2, 1.4, 1.5])
        policy, jobs, next_id = AdmissionPolicy(AdmissionConfig(THRESHOLD_FIFO, factor)), state_with(), 0
        for _ in range(10):
            for j in list(jobs.active.values()):
                if rng.random() < 0.3:
                    del jobs.active[j.job_id]
            new = []
            for _ in range(rng.randint(0, 4)):
                new.append(make_job(next_id, arrival=float(next_id), demand=rng.randint(1, 6)))
                next_id += 1
            for j in policy.admit(new, jobs, cluster):
                j.set_phase(Phase.ADMITTED)
                jobs.add(j)
            cap_ok &= admitted_demand(jobs) <= factor * cluster.total_gpus
    checks["admission cap"] = cap_ok

    checks["consolidated span minimality (exhaustive)"] = _consolidated_span_ok()
    failed = [k for k, v in checks.items() if not v]
    detail = f"{len(checks) - len(failed)}/{len(checks)} property suites hold" + (f"; failed: {failed}" if failed else "")
    record(9, not failed and time.time() - t0 < 60, detail, t0)

