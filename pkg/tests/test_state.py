import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_job, nodes, state_with
from roundsched.errors import ConflictError, MissingProfileError, UnknownJobError
from roundsched.state import (
    CONSOLIDATED,
    SPREAD,
    ClusterState,
    NodeSpec,
    Phase,
    RoundDecision,
    apply_decision,
    free_gpus,
    lookup_iter_time,
    p3_8xlarge_bw,
    prune_finished,
)


def running_on(cluster, jobs, job_id, gpus):
    apply_decision(cluster, jobs, RoundDecision(to_launch={job_id: gpus}))


# -- iteration-time lookup ----------------------------------------------------


def test_lookup_exact_rows():
    prof = {(1, CONSOLIDATED): 1.0, (4, CONSOLIDATED): 0.3, (4, SPREAD): 0.4}
    assert lookup_iter_time(prof, 4) == 0.3
    assert lookup_iter_time(prof, 4, SPREAD) == 0.4


def test_lookup_interpolates_on_inverse_gpu_count():
    prof = {(1, CONSOLIDATED): 1.0, (4, CONSOLIDATED): 0.25}
    # 1/2 sits two thirds of the way from 1/1 to 1/4
    assert lookup_iter_time(prof, 2) == pytest.approx(1.0 + (0.25 - 1.0) * (0.5 - 1.0) / (0.25 - 1.0))
    assert lookup_iter_time(prof, 2) == pytest.approx(0.5)


def test_lookup_never_extrapolates():
    prof = {(1, CONSOLIDATED): 1.0, (4, CONSOLIDATED): 0.25}
    with pytest.raises(MissingProfileError):
        lookup_iter_time(prof, 8)


def test_single_gpu_and_missing_spread_fall_back_to_consolidated():
    prof = {(1, CONSOLIDATED): 1.0, (2, CONSOLIDATED): 0.6}
    assert lookup_iter_time(prof, 1, SPREAD) == 1.0
    assert lookup_iter_time(prof, 2, SPREAD) == 0.6


# -- node specs ------------------------------------------------------------------


def test_node_spec_rejects_asymmetric_matrix():
    with pytest.raises(ValueError):
        NodeSpec(0, 2, "V100", ((0, 1), (2, 0)))


def test_node_spec_rejects_nonzero_diagonal_and_nonpositive_links():
    with pytest.raises(ValueError):
        NodeSpec(0, 2, "V100", ((1, 1), (1, 0)))
    with pytest.raises(ValueError):
        NodeSpec(0, 2, "V100", ((0, 0), (0, 0)))


def test_p3_matrix_pairs_are_twice_base():
    bw = p3_8xlarge_bw(10.0)
    assert bw[0][3] == bw[1][2] == 20.0
    assert bw[0][1] == bw[0][2] == bw[1][3] == bw[2][3] == 10.0
    spec = NodeSpec(0, 4, "V100", bw)
    assert spec.pair_bandwidth([0, 3]) == 20.0
    # mean over the three pairs of {0,1,3}: (10 + 20 + 10) / 3
    assert spec.pair_bandwidth([0, 1, 3]) == pytest.approx(40.0 / 3)


# -- cluster table ---------------------------------------------------------------


def test_cluster_rows_are_contiguous():
    c = ClusterState.build(nodes(3))
    assert [r.global_gpu_id for r in c.rows] == list(range(12))
    assert [r.local_gpu_id for r in c.rows[4:8]] == [0, 1, 2, 3]
    assert c.total_gpus == 12


def test_free_gpus_examples():
    c = ClusterState.build(nodes(2))
    assert free_gpus(c) == list(range(8))
    small = ClusterState.build([NodeSpec(0, 4)])
    jobs = state_with(make_job(1, demand=2))
    running_on(small, jobs, 1, [0, 1])
    assert free_gpus(small) == [2, 3]
    jobs.add(make_job(2, demand=2, phase=Phase.ADMITTED))
    running_on(small, jobs, 2, [2, 3])
    assert free_gpus(small) == []


# -- decision application ----------------------------------------------------------


def test_empty_decision_is_identity():
    c = ClusterState.build(nodes(1))
    jobs = state_with(make_job(1, demand=2))
    running_on(c, jobs, 1, [0, 1])
    before = [r.occupancy for r in c.rows], jobs.active[1].phase
    apply_decision(c, jobs, RoundDecision())
    assert ([r.occupancy for r in c.rows], jobs.active[1].phase) == before


def test_suspend_then_launch_swaps_occupancy():
    c = ClusterState.build(nodes(1))
    jobs = state_with(make_job(1, demand=2), make_job(2, demand=2))
    running_on(c, jobs, 1, [0, 1])
    apply_decision(c, jobs, RoundDecision(to_launch={2: [0, 1]}, to_suspend=[1]))
    assert [r.occupancy for r in c.rows[:2]] == [2, 2]
    assert jobs.active[1].phase is Phase.SUSPENDED
    assert jobs.active[2].phase is Phase.RUNNING
    assert jobs.active[1].preemption_count == 1


def test_launch_on_occupied_gpu_conflicts():
    c = ClusterState.build(nodes(1))
    jobs = state_with(make_job(1, demand=2), make_job(3))
    running_on(c, jobs, 1, [0, 1])
    with pytest.raises(ConflictError):
        apply_decision(c, jobs, RoundDecision(to_launch={3: [0]}))


def test_unknown_job_rejected():
    c = ClusterState.build(nodes(1))
    with pytest.raises(UnknownJobError):
        apply_decision(c, state_with(), RoundDecision(to_launch={9: [0]}))


def test_overhead_flag_only_when_gpu_set_changes():
    c = ClusterState.build(nodes(1))
    jobs = state_with(make_job(1, demand=2))
    running_on(c, jobs, 1, [0, 1])
    assert jobs.active[1].pay_overhead
    jobs.active[1].pay_overhead = False
    apply_decision(c, jobs, RoundDecision(renewals=[1]))
    assert not jobs.active[1].pay_overhead
    apply_decision(c, jobs, RoundDecision(to_launch={1: [2, 3]}))
    assert jobs.active[1].pay_overhead
    assert [r.occupancy for r in c.rows] == [None, None, 1, 1]


def test_first_scheduled_time_stamped_once():
    c = ClusterState.build(nodes(1))
    jobs = state_with(make_job(1))
    apply_decision(c, jobs, RoundDecision(to_launch={1: [0]}), now=600.0)
    apply_decision(c, jobs, RoundDecision(to_suspend=[1]), now=900.0)
    apply_decision(c, jobs, RoundDecision(to_launch={1: [1]}), now=1200.0)
    assert jobs.active[1].first_scheduled_time == 600.0


def test_illegal_phase_transition():
    job = make_job(1)
    with pytest.raises(ValueError):
        job.set_phase(Phase.RUNNING)  # Waiting must be admitted first


def test_decision_validation_rejects_shared_gpu():
    with pytest.raises(ValueError):
        RoundDecision(to_launch={1: [0], 2: [0]}).validate()
    with pytest.raises(ValueError):
        RoundDecision(to_launch={1: [0]}, to_suspend=[1]).validate()


# -- pruning ------------------------------------------------------------------------


def test_prune_examples():
    c = ClusterState.build(nodes(1))
    jobs = state_with(make_job(1, iters=10), make_job(2, iters=10), make_job(3, iters=10))
    running_on(c, jobs, 1, [0])
    assert prune_finished(jobs, 300.0, c) == []
    jobs.active[1].completed_iterations = 10
    jobs.active[3].set_phase(Phase.TERMINATED)
    assert prune_finished(jobs, 600.0, c) == [1, 3]
    assert [e.job_id for e in jobs.finished_log] == [1, 3]
    assert jobs.finished_log[1].terminated
    assert free_gpus(c) == [0, 1, 2, 3]
    assert set(jobs.active) == {2}


# -- GPU conservation under random decisions ---------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(1, 3)), min_size=1, max_size=25))
def test_gpu_conservation(ops):
    """Random launch/suspend sequences keep the occupancy table consistent."""
    c = ClusterState.build(nodes(2))
    jobs = state_with(*[make_job(i, demand=d) for i, d in enumerate([1, 2, 3, 1, 2, 4])])
    for job_id, _ in ops:
        job = jobs.active[job_id]
        if job.phase is Phase.RUNNING:
            apply_decision(c, jobs, RoundDecision(to_suspend=[job_id]))
        else:
            free = free_gpus(c)
            if len(free) >= job.gpu_demand:
                apply_decision(c, jobs, RoundDecision(to_launch={job_id: free[: job.gpu_demand]}))
        occupied = [r.occupancy for r in c.rows if r.occupancy is not None]
        running = jobs.running()
        assert len(occupied) + len(free_gpus(c)) == c.total_gpus
        assert len(occupied) == sum(j.gpu_demand for j in running)
        for j in running:
            assert occupied.count(j.job_id) == j.gpu_demand
