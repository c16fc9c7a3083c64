import pytest

from roundsched.state import (
    CONSOLIDATED,
    SPREAD,
    ClusterState,
    JobRecord,
    JobState,
    NodeSpec,
    Phase,
    uniform_bw,
)


def flat_profile(t=1.0, gpus=(1, 2, 4, 8), spread_penalty=1.0):
    """Perfectly scaling profile: iter_time(g) = t / g."""
    entries = {}
    for g in gpus:
        entries[(g, CONSOLIDATED)] = t / g
        if g > 1:
            entries[(g, SPREAD)] = t / g * spread_penalty
    return entries


def make_job(job_id, arrival=0.0, demand=1, iters=100, t=1.0, overhead=0.0, **kw):
    return JobRecord(
        job_id=job_id,
        arrival_time=arrival,
        gpu_demand=demand,
        total_iterations=iters,
        iter_time_profile=kw.pop("profile", flat_profile(t)),
        restart_overhead=overhead,
        **kw,
    )


def make_cluster(free_counts, gpus_per_node=4):
    """Cluster whose node ``n`` has ``free_counts[n]`` free GPUs (others held by job -1)."""
    nodes = [NodeSpec(n, gpus_per_node, "V100", uniform_bw(gpus_per_node, 10.0)) for n in range(len(free_counts))]
    cluster = ClusterState.build(nodes)
    for row in cluster.rows:
        if row.local_gpu_id >= free_counts[row.node_id]:
            row.occupancy = -1
    return cluster


def nodes(n, per=4, bw=10.0):
    return [NodeSpec(i, per, "V100", uniform_bw(per, bw)) for i in range(n)]


def state_with(*jobs, phase=Phase.ADMITTED):
    js = JobState()
    for j in jobs:
        if j.phase is Phase.WAITING:
            j.phase = phase
        js.add(j)
    return js


@pytest.fixture
def job_factory():
    return make_job


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
