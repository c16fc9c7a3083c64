"""Flat ``key = value`` run configuration with dotted keys.

Lines starting with ``#`` are comments. Every key has a default, unknown
keys are rejected, and the fully resolved mapping doubles as the run
manifest written next to each report.
"""

from __future__ import annotations

import math
from pathlib import Path

from roundsched.admission import ACCEPT_ALL, ADMISSION_KINDS, AdmissionConfig
from roundsched.engine import SimConfig
from roundsched.errors import ConfigError
from roundsched.placement import PLACEMENT_POLICY_KINDS, PlacementConfig
from roundsched.scheduling import SCHED_KINDS, SchedulerConfig
from roundsched.state import P3_BASE_GBPS, NodeSpec, p3_8xlarge_bw, uniform_bw
from roundsched.synthesizer import OBJECTIVES, PolicyCombo, SynthConfig
from roundsched.workload import (
    ArrivalConfig,
    BurstyConfig,
    JobShape,
    SpikeConfig,
    assign_convergence,
    assign_models,
    default_profiles,
    fill_arrivals,
    import_philly,
    parse_profiles,
    parse_trace,
    synthetic_trace,
)

DEFAULTS = {
    "seed": "0",
    # cluster and engine
    "sim.round_len": "300",
    "sim.nodes": "32",
    "sim.gpus_per_node": "4",
    "sim.gpu_type": "V100",
    "sim.intra_node_topology": "p3",
    "sim.inter_node_bw": "10",
    "sim.metrics_window": "3000,4000",
    "sim.horizon": "none",
    "sim.stall_rounds": "1000000",
    # workload
    "workload.trace": "",
    "workload.trace_format": "native",
    "workload.profiles": "",
    "workload.restart_overhead": "30",
    "workload.lambda": "8",
    "workload.count": "5000",
    "workload.demand_values": "1,2",
    "workload.demand_probs": "0.8,0.2",
    "workload.duration_median_h": "12.25",
    "workload.duration_sigma": "0.3",
    "workload.spike": "false",
    "workload.spike.extra_jobs": "16",
    "workload.spike.window_hours": "9,10",
    "workload.spike.period_hours": "24",
    "workload.bursty": "false",
    "workload.bursty.multiplier": "2",
    "workload.bursty.on_hours": "2",
    "workload.bursty.period_hours": "6",
    "workload.bursty.short_job_min": "600",
    "workload.bursty.short_job_max": "3600",
    "workload.converge_share": "0",
    "workload.converge_fraction": "0.4",
    # policies
    "admission.kind": ACCEPT_ALL,
    "admission.factor": "1.0",
    "sched.kind": "fifo",
    "sched.dlas_thresholds": "3600,36000",
    "sched.loss_termination": "false",
    "sched.loss_threshold": "0.002",
    "placement.kind": "consolidated",
    "placement.intra_node_bandwidth_aware": "false",
    "placement.intra_node_random": "false",
    "placement.skew_flags": "",
    "placement.consolidation_benefit": "",
    # synthesizer
    "synth.period_rounds": "10",
    "synth.objective": "avg_jct",
    "synth.inner_horizon": "drain",
    "synth.candidates": "fifo:accept_all,fifo:1.2,fifo:1.4,srtf:accept_all,srtf:1.2,srtf:1.4,las:accept_all,las:1.2,las:1.4",
    "synth.arrival_oracle": "false",
    # sweep and lease bench
    "sweep.param": "workload.lambda",
    "sweep.values": "1,2,3,4,5,6,7,8,9",
    "lease.workers": "8,16,32",
    "lease.rounds": "100",
    "lease.revocations": "2",
    "lease.seeds": "10",
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_text(text, source="<config>"):
    """Parse ``key = value`` lines into a dict; raises ``ConfigError`` on bad lines."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", "expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}", "empty key")
        out[key] = value
    return out


def parse_override(item):
    if "=" not in item:
        raise ConfigError(item, "override must look like KEY=VALUE")
    key, value = item.split("=", 1)
    return key.strip(), value.strip()


class Config:
    """Resolved configuration: defaults, then file values, then overrides."""

    def __init__(self, values=None):
        merged = dict(DEFAULTS)
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(key, "unknown key")
            merged[key] = str(value)
        self.values = merged

    @classmethod
    def load(cls, path=None, overrides=()):
        values = {}
        if path is not None:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
            values.update(parse_text(text, str(path)))
        for item in overrides:
            key, value = parse_override(item)
            values[key] = value
        return cls(values)

    def with_value(self, key, value):
        values = dict(self.values)
        values[key] = str(value)
        return Config(values)

    # typed getters -------------------------------------------------------

    def raw(self, key):
        return self.values[key]

    def int(self, key, lo=None):
        try:
            v = int(self.values[key])
        except ValueError:
            raise ConfigError(key, f"not an integer: {self.values[key]!r}") from None
        if lo is not None and v < lo:
            raise ConfigError(key, f"must be >= {lo}")
        return v

    def float(self, key, positive=False):
        try:
            v = float(self.values[key])
        except ValueError:
            raise ConfigError(key, f"not a number: {self.values[key]!r}") from None
        if not math.isfinite(v) or (positive and not v > 0):
            raise ConfigError(key, "must be a positive finite number" if positive else "must be finite")
        return v

    def bool(self, key):
        v = self.values[key].lower()
        if v in _TRUE:
            return True
        if v in _FALSE:
            return False
        raise ConfigError(key, f"not a boolean: {self.values[key]!r}")

    def choice(self, key, options):
        v = self.values[key]
        if v not in options:
            raise ConfigError(key, f"{v!r} is not one of {', '.join(options)}")
        return v

    def floats(self, key):
        raw = self.values[key]
        try:
            return tuple(float(x) for x in raw.split(",") if x.strip())
        except ValueError:
            raise ConfigError(key, f"not a comma-separated number list: {raw!r}") from None

    def ints(self, key):
        raw = self.values[key]
        try:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        except ValueError:
            raise ConfigError(key, f"not a comma-separated integer list: {raw!r}") from None

    def names(self, key):
        return tuple(x.strip() for x in self.values[key].split(",") if x.strip())

    def manifest(self):
        return dict(sorted(self.values.items()))

    def manifest_text(self):
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.values.items()))


# builders -------------------------------------------------------------------


def _guard(key, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


def build_cluster(cfg):
    nodes = cfg.int("sim.nodes", lo=1)
    per = cfg.int("sim.gpus_per_node", lo=1)
    topo = cfg.choice("sim.intra_node_topology", ("p3", "uniform"))
    if topo == "p3" and per != 4:
        raise ConfigError("sim.intra_node_topology", "p3 topology needs sim.gpus_per_node = 4")
    bw = p3_8xlarge_bw() if topo == "p3" else uniform_bw(per, P3_BASE_GBPS)
    inter = cfg.float("sim.inter_node_bw", positive=True)
    gpu_type = cfg.raw("sim.gpu_type")
    return [NodeSpec(n, per, gpu_type, bw, inter) for n in range(nodes)]


def build_sim(cfg):
    window_raw = cfg.raw("sim.metrics_window").strip().lower()
    if window_raw in ("all", "none", ""):
        window = None
    else:
        bounds = cfg.ints("sim.metrics_window")
        if len(bounds) != 2:
            raise ConfigError("sim.metrics_window", "expected LO,HI or 'all'")
        window = bounds
    horizon_raw = cfg.raw("sim.horizon").strip().lower()
    horizon = None if horizon_raw in ("none", "") else cfg.float("sim.horizon", positive=True)
    return _guard(
        "sim.metrics_window",
        SimConfig,
        round_len=cfg.float("sim.round_len", positive=True),
        cluster=build_cluster(cfg),
        metrics_window=window,
        seed=cfg.int("seed"),
        horizon=horizon,
        stall_rounds=cfg.int("sim.stall_rounds", lo=1),
    )


def build_admission(cfg):
    kind = cfg.choice("admission.kind", ADMISSION_KINDS)
    factor = cfg.float("admission.factor", positive=True)
    return AdmissionConfig(kind, factor)


def build_scheduler(cfg):
    kind = cfg.choice("sched.kind", SCHED_KINDS)
    thresholds = cfg.floats("sched.dlas_thresholds")
    return _guard(
        "sched.dlas_thresholds",
        SchedulerConfig,
        kind,
        thresholds,
        cfg.bool("sched.loss_termination"),
        cfg.float("sched.loss_threshold", positive=True),
    )


def build_placement(cfg):
    kind = cfg.choice("placement.kind", PLACEMENT_POLICY_KINDS)
    skew = {name: True for name in cfg.names("placement.skew_flags")}
    benefit = {name: True for name in cfg.names("placement.consolidation_benefit")}
    if kind == "tiresias" and not skew:
        raise ConfigError("placement.skew_flags", "tiresias placement needs at least one skewed model")
    if kind == "profile_guided" and not benefit:
        raise ConfigError("placement.consolidation_benefit", "profile_guided placement needs at least one model")
    return PlacementConfig(
        kind,
        cfg.bool("placement.intra_node_bandwidth_aware"),
        cfg.bool("placement.intra_node_random"),
        skew,
        benefit,
    )


def build_shape(cfg):
    values = cfg.ints("workload.demand_values")
    probs = cfg.floats("workload.demand_probs")
    if not values or len(values) != len(probs) or any(v < 1 for v in values):
        raise ConfigError("workload.demand_probs", "needs one probability per positive demand value")
    if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
        raise ConfigError("workload.demand_probs", "probabilities must be >= 0 and sum to 1")
    return JobShape(
        demand_values=values,
        demand_probs=probs,
        duration_median_s=cfg.float("workload.duration_median_h", positive=True) * 3600.0,
        duration_sigma=cfg.float("workload.duration_sigma"),
    )


def build_arrivals(cfg):
    spike = bursty = None
    if cfg.bool("workload.spike"):
        window = cfg.floats("workload.spike.window_hours")
        if len(window) != 2:
            raise ConfigError("workload.spike.window_hours", "expected START,END hours")
        spike = SpikeConfig(cfg.int("workload.spike.extra_jobs", lo=0), window, cfg.float("workload.spike.period_hours", positive=True))
    if cfg.bool("workload.bursty"):
        bursty = BurstyConfig(
            cfg.float("workload.bursty.multiplier"),
            cfg.float("workload.bursty.on_hours", positive=True),
            cfg.float("workload.bursty.period_hours", positive=True),
            cfg.float("workload.bursty.short_job_min", positive=True),
            cfg.float("workload.bursty.short_job_max", positive=True),
        )
    return _guard(
        "workload.lambda",
        ArrivalConfig,
        cfg.float("workload.lambda", positive=True),
        seed=cfg.int("seed"),
        count=cfg.int("workload.count", lo=0),
        spike=spike,
        bursty=bursty,
    )


def build_profiles(cfg):
    overhead = cfg.float("workload.restart_overhead")
    if overhead < 0:
        raise ConfigError("workload.restart_overhead", "must be >= 0")
    path = cfg.raw("workload.profiles")
    return parse_profiles(path) if path else default_profiles(overhead)


def build_jobs(cfg):
    """Job records for the configured trace (file or synthetic)."""
    arrivals = build_arrivals(cfg)
    path = cfg.raw("workload.trace")
    if path:
        fmt = cfg.choice("workload.trace_format", ("native", "philly"))
        entries = parse_trace(path) if fmt == "native" else import_philly(path)
        entries = fill_arrivals(entries, arrivals)
    else:
        entries = synthetic_trace(arrivals, build_shape(cfg))
    jobs = assign_models(entries, build_profiles(cfg), cfg.int("seed"))
    share = cfg.float("workload.converge_share")
    if share > 0:
        _guard(
            "workload.converge_share",
            assign_convergence,
            jobs,
            share,
            cfg.float("workload.converge_fraction", positive=True),
            cfg.int("seed"),
        )
    return jobs


def parse_candidates(cfg):
    out = []
    for item in cfg.names("synth.candidates"):
        if ":" not in item:
            raise ConfigError("synth.candidates", f"{item!r} should look like SCHED:ADMISSION")
        sched, adm = item.split(":", 1)
        if sched not in SCHED_KINDS:
            raise ConfigError("synth.candidates", f"unknown scheduling kind {sched!r}")
        if adm == ACCEPT_ALL:
            admission = AdmissionConfig()
        else:
            try:
                factor = float(adm.rstrip("x"))
            except ValueError:
                raise ConfigError("synth.candidates", f"bad admission {adm!r}") from None
            if not factor > 0:
                raise ConfigError("synth.candidates", f"bad admission factor {adm!r}")
            admission = AdmissionConfig("threshold_fifo", factor)
        out.append(PolicyCombo(admission, SchedulerConfig(sched)))
    if not out:
        raise ConfigError("synth.candidates", "needs at least one candidate")
    return tuple(out)


def build_synth(cfg):
    horizon_raw = cfg.raw("synth.inner_horizon").strip().lower()
    horizon = None if horizon_raw == "drain" else cfg.int("synth.inner_horizon", lo=1)
    oracle = cfg.bool("synth.arrival_oracle")
    if oracle and horizon is None:
        raise ConfigError("synth.arrival_oracle", "needs a numeric synth.inner_horizon")
    return SynthConfig(
        period_rounds=cfg.int("synth.period_rounds", lo=1),
        objective=cfg.choice("synth.objective", OBJECTIVES),
        inner_horizon=horizon,
        candidates=parse_candidates(cfg),
        arrival_oracle=oracle,
    )
