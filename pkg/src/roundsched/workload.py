"""Trace ingestion, synthetic arrival processes and model profiles."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Optional

import numpy as np

from roundsched.errors import MissingProfileError, ParseError
from roundsched.state import (
    CONSOLIDATED,
    DEFAULT_RESTART_OVERHEAD,
    PLACEMENT_KINDS,
    SPREAD,
    JobRecord,
    lookup_iter_time,
)

TRACE_HEADER = ["job_id", "submit_time_s", "gpu_demand", "duration_s", "model"]
PROFILE_HEADER = [
    "model",
    "gpu_count",
    "placement",
    "iter_time_s",
    "restart_overhead_s",
    "placement_sensitive",
]

# independent RNG streams derived from one seed
_ARRIVALS, _SPIKE, _BURSTY, _SHAPE, _MODELS, _CONVERGE = range(6)


def _rng(seed, stream):
    return np.random.default_rng([int(seed), stream])


@dataclass
class TraceEntry:
    job_id: int
    submit_time: Optional[float]
    gpu_demand: int
    duration_isolated: float
    model_name: Optional[str] = None

    def __post_init__(self):
        if self.gpu_demand < 1:
            raise ValueError(f"job {self.job_id}: gpu_demand must be >= 1")
        if not self.duration_isolated > 0:
            raise ValueError(f"job {self.job_id}: duration must be > 0")


@dataclass
class ModelProfile:
    model_name: str
    entries: dict
    restart_overhead: float = DEFAULT_RESTART_OVERHEAD
    placement_sensitive: bool = False
    loss_curve: Optional[list] = None

    def __post_init__(self):
        for (g, kind), t in self.entries.items():
            if kind not in PLACEMENT_KINDS or g < 1 or not t > 0:
                raise ValueError(f"{self.model_name}: bad profile entry ({g}, {kind}) -> {t}")
            other = self.entries.get((g, SPREAD))
            if kind == CONSOLIDATED and other is not None and t > other:
                raise ValueError(f"{self.model_name}: consolidated slower than spread at {g} GPUs")
        for kind in PLACEMENT_KINDS:
            times = [t for (g, k), t in sorted(self.entries.items()) if k == kind]
            if any(b > a for a, b in zip(times, times[1:])):
                raise ValueError(f"{self.model_name}: {kind} iter_time increases with GPU count")

    def iter_time(self, gpus, placement=CONSOLIDATED):
        return lookup_iter_time(self.entries, gpus, placement)


@dataclass
class SpikeConfig:
    extra_jobs: int = 16
    window_hours: tuple = (9.0, 10.0)
    period_hours: float = 24.0


@dataclass
class BurstyConfig:
    multiplier: float = 2.0
    on_hours: float = 2.0
    period_hours: float = 6.0
    short_job_min: float = 600.0
    short_job_max: float = 3600.0


@dataclass
class ArrivalConfig:
    lambda_jobs_per_hour: float
    seed: int = 0
    count: int = 0
    spike: Optional[SpikeConfig] = None
    bursty: Optional[BurstyConfig] = None

    def __post_init__(self):
        if not self.lambda_jobs_per_hour > 0:
            raise ValueError("lambda must be > 0")
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if self.spike is not None:
            lo, hi = self.spike.window_hours
            if not 0 <= lo < hi or hi - lo >= self.spike.period_hours or hi > self.spike.period_hours:
                raise ValueError("spike window must be non-empty and shorter than its period")
        if self.bursty is not None:
            b = self.bursty
            if not 0 < b.on_hours < b.period_hours:
                raise ValueError("bursty on-window must be shorter than its period")
            if not 0 < b.short_job_min <= b.short_job_max:
                raise ValueError("bursty short-job bounds are invalid")


@dataclass
class JobShape:
    """Distribution of GPU demand and isolated runtime for synthetic traces.

    Runtimes are log-normal (median ``duration_median_s``, log-space sigma
    ``duration_sigma``) clipped to ``[duration_min_s, duration_max_s]``.
    """

    demand_values: tuple = (1, 2)
    demand_probs: tuple = (0.80, 0.20)
    duration_median_s: float = 12.25 * 3600
    duration_sigma: float = 0.3
    duration_min_s: float = 300.0
    duration_max_s: float = 100 * 3600.0

    def sample(self, n, rng):
        demands = rng.choice(np.asarray(self.demand_values), size=n, p=np.asarray(self.demand_probs))
        durations = rng.lognormal(math.log(self.duration_median_s), self.duration_sigma, size=n)
        durations = np.clip(durations, self.duration_min_s, self.duration_max_s)
        return [int(d) for d in demands], [round(float(x), 1) for x in durations]


# ---------------------------------------------------------------------------
# trace and profile files


def _parse_float(raw, path, lineno, name):
    try:
        return float(raw)
    except ValueError:
        raise ParseError(path, lineno, f"{name} is not a number: {raw!r}") from None


def parse_trace(path):
    """Read a trace CSV; rows keep file order, missing ids are numbered densely."""
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return entries
        header = [h.strip() for h in header]
        if header != TRACE_HEADER:
            raise ParseError(path, 1, f"expected header {','.join(TRACE_HEADER)}")
        for index, row in enumerate(reader):
            lineno = index + 2
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(TRACE_HEADER):
                raise ParseError(path, lineno, f"expected {len(TRACE_HEADER)} fields, got {len(row)}")
            raw_id, raw_submit, raw_demand, raw_dur, raw_model = (c.strip() for c in row)
            job_id = int(_parse_float(raw_id, path, lineno, "job_id")) if raw_id else len(entries)
            submit = _parse_float(raw_submit, path, lineno, "submit_time_s") if raw_submit else None
            if submit is not None and submit < 0:
                raise ParseError(path, lineno, "submit_time_s must be >= 0")
            demand = _parse_float(raw_demand, path, lineno, "gpu_demand")
            if demand != int(demand) or demand < 1:
                raise ParseError(path, lineno, f"gpu_demand must be a positive integer, got {raw_demand}")
            duration = _parse_float(raw_dur, path, lineno, "duration_s")
            if duration <= 0:
                raise ParseError(path, lineno, f"duration_s must be positive, got {raw_dur}")
            entries.append(TraceEntry(job_id, submit, int(demand), duration, raw_model or None))
    return entries


def write_trace(path, entries):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for e in entries:
            submit = "" if e.submit_time is None else repr(float(e.submit_time))
            w.writerow([e.job_id, submit, e.gpu_demand, repr(float(e.duration_isolated)), e.model_name or ""])


_PHILLY_COLUMNS = {
    "job_id": ("job_id", "jobid", "job_name"),
    "submit": ("submit_time", "submitted_time", "arrival_time", "time"),
    "demand": ("num_gpus", "num_gpu", "gpu_num", "gpus"),
    "duration": ("duration", "run_time", "runtime", "duration_s"),
    "model": ("model", "model_name", "job_type"),
}


def import_philly(path):
    """Map a Philly-derived CSV (column aliases as in published derivatives) to trace entries.

    Job ids are renumbered densely in file order; rows with zero GPUs or a
    non-positive duration are skipped, matching how those traces are
    usually cleaned.
    """
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = {f.strip().lower(): f for f in reader.fieldnames or []}
        cols = {}
        for key, aliases in _PHILLY_COLUMNS.items():
            cols[key] = next((fields[a] for a in aliases if a in fields), None)
        for key in ("demand", "duration"):
            if cols[key] is None:
                raise ParseError(path, 1, f"no column for {key} (tried {', '.join(_PHILLY_COLUMNS[key])})")
        for lineno, row in enumerate(reader, start=2):
            demand = _parse_float(row[cols["demand"]], path, lineno, "num_gpus")
            duration = _parse_float(row[cols["duration"]], path, lineno, "duration")
            if demand < 1 or duration <= 0:
                continue
            submit = None
            if cols["submit"] is not None and row[cols["submit"]].strip():
                submit = _parse_float(row[cols["submit"]], path, lineno, "submit_time")
            model = row[cols["model"]].strip() if cols["model"] else None
            entries.append(TraceEntry(len(entries), submit, int(demand), duration, model or None))
    if entries and all(e.submit_time is not None for e in entries):
        t0 = min(e.submit_time for e in entries)
        entries = [replace(e, submit_time=e.submit_time - t0) for e in entries]
    return entries


def _parse_bool(raw):
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "y"):
        return True
    if v in ("0", "false", "no", "n", ""):
        return False
    raise ValueError(raw)


def parse_profiles(path):
    rows = {}
    meta = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != PROFILE_HEADER:
            raise ParseError(path, 1, f"expected header {','.join(PROFILE_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(PROFILE_HEADER):
                raise ParseError(path, lineno, f"expected {len(PROFILE_HEADER)} fields")
            model, g, kind, t, overhead, sensitive = (c.strip() for c in row)
            kind = kind.lower()
            if kind not in PLACEMENT_KINDS:
                raise ParseError(path, lineno, f"placement must be consolidated or spread, got {kind!r}")
            gpus = _parse_float(g, path, lineno, "gpu_count")
            rows.setdefault(model, {})[(int(gpus), kind)] = _parse_float(t, path, lineno, "iter_time_s")
            try:
                sens = _parse_bool(sensitive)
            except ValueError:
                raise ParseError(path, lineno, f"placement_sensitive is not a boolean: {sensitive!r}") from None
            ov = _parse_float(overhead, path, lineno, "restart_overhead_s") if overhead else None
            prev = meta.setdefault(model, [None, False])
            if ov is not None:
                prev[0] = ov
            prev[1] = prev[1] or sens
    profiles = {}
    for model, entries in rows.items():
        overhead, sens = meta[model]
        try:
            profiles[model] = ModelProfile(
                model,
                entries,
                DEFAULT_RESTART_OVERHEAD if overhead is None else overhead,
                sens,
            )
        except ValueError as exc:
            raise ParseError(path, 0, str(exc)) from None
    return profiles


def write_profiles(path, profiles):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROFILE_HEADER)
        for name in sorted(profiles):
            p = profiles[name]
            for (g, kind), t in sorted(p.entries.items()):
                w.writerow([name, g, kind, repr(t), repr(p.restart_overhead), str(p.placement_sensitive).lower()])


# Illustrative single-GPU iteration times and scaling efficiencies for the
# evaluated model zoo. These are placeholders, not measurements.
_ZOO = {
    # name: (t1, scaling efficiency per doubling, spread penalty, sensitive)
    "resnet18": (0.080, 0.92, 1.05, False),
    "cyclegan": (0.450, 0.90, 1.10, False),
    "resnet50": (0.300, 0.93, 1.25, True),
    "lstm": (0.120, 0.85, 1.30, True),
    "recoder": (0.060, 0.88, 1.08, False),
    "transformer": (0.250, 0.90, 1.20, True),
    "a3c": (0.040, 0.80, 1.03, False),
}


def default_profiles(restart_overhead=DEFAULT_RESTART_OVERHEAD):
    profiles = {}
    for name, (t1, eff, penalty, sensitive) in _ZOO.items():
        entries = {}
        for g in (1, 2, 4, 8):
            doublings = int(math.log2(g))
            t = round(t1 / (g * eff**doublings), 6)
            entries[(g, CONSOLIDATED)] = t
            if g > 1:
                entries[(g, SPREAD)] = round(t * penalty, 6)
        profiles[name] = ModelProfile(name, entries, restart_overhead, sensitive)
    return profiles


# ---------------------------------------------------------------------------
# arrival processes


def generate_arrivals(cfg):
    if cfg.count == 0:
        return []
    gaps = _rng(cfg.seed, _ARRIVALS).exponential(3600.0 / cfg.lambda_jobs_per_hour, size=cfg.count)
    return [float(t) for t in np.cumsum(gaps)]


def inject_spike(arrivals, cfg, span=None):
    """Add ``extra_jobs`` uniform arrivals inside every spike window.

    Windows repeat each period for as long as their start falls before
    ``span`` (default: the last base arrival).
    """
    spike = cfg.spike
    if spike is None or spike.extra_jobs == 0:
        return list(arrivals)
    if span is None:
        span = max(arrivals, default=0.0)
    rng = _rng(cfg.seed, _SPIKE)
    lo, hi = (h * 3600.0 for h in spike.window_hours)
    period = spike.period_hours * 3600.0
    extra = []
    k = 0
    while k * period + lo < span:
        start = k * period
        extra.extend(float(t) for t in rng.uniform(start + lo, start + hi, size=spike.extra_jobs))
        k += 1
    return sorted(list(arrivals) + extra)


def bursty_windows(cfg, span):
    b = cfg.bursty
    period, on = b.period_hours * 3600.0, b.on_hours * 3600.0
    windows = []
    k = 0
    while k * period + (period - on) < span:
        start = k * period + (period - on)
        windows.append((start, start + on))
        k += 1
    return windows


def inject_bursty(arrivals, cfg, span=None, shape=None):
    """Short jobs arriving at ``multiplier * lambda`` inside each on-window.

    On-windows occupy the last ``on_hours`` of every period (off first,
    then burst). Returned entries carry ``job_id = -1``; ``merge_entries``
    numbers them.
    """
    b = cfg.bursty
    if b is None or b.multiplier == 0:
        return []
    if span is None:
        span = max(arrivals, default=0.0)
    shape = shape or JobShape()
    rng = _rng(cfg.seed, _BURSTY)
    rate = b.multiplier * cfg.lambda_jobs_per_hour / 3600.0
    out = []
    for start, end in bursty_windows(cfg, span):
        t = start
        while True:
            t += rng.exponential(1.0 / rate)
            if t >= end:
                break
            demand = int(rng.choice(np.asarray(shape.demand_values), p=np.asarray(shape.demand_probs)))
            duration = round(float(rng.uniform(b.short_job_min, b.short_job_max)), 1)
            out.append(TraceEntry(-1, float(t), demand, duration))
    return out


def entries_for_arrivals(arrivals, seed, shape=None):
    shape = shape or JobShape()
    demands, durations = shape.sample(len(arrivals), _rng(seed, _SHAPE))
    return [TraceEntry(-1, t, g, d) for t, g, d in zip(arrivals, demands, durations)]


def merge_entries(*groups):
    """Concatenate entry lists, order by submit time, and renumber ids densely."""
    merged = [e for group in groups for e in group]
    merged.sort(key=lambda e: e.submit_time)
    return [replace(e, job_id=i) for i, e in enumerate(merged)]


def synthetic_trace(cfg, shape=None):
    """Philly-style synthetic trace: Poisson base load plus optional spike/bursts."""
    base = generate_arrivals(cfg)
    span = max(base, default=0.0)
    arrivals = inject_spike(base, cfg, span) if cfg.spike else base
    entries = entries_for_arrivals(arrivals, cfg.seed, shape)
    extra = inject_bursty(base, cfg, span, shape) if cfg.bursty else []
    return merge_entries(entries, extra)


def fill_arrivals(entries, cfg):
    """Give entries without ``submit_time`` generated Poisson timestamps, in file order."""
    missing = [i for i, e in enumerate(entries) if e.submit_time is None]
    if not missing:
        return list(entries)
    times = generate_arrivals(replace(cfg, count=len(missing), spike=None, bursty=None))
    out = list(entries)
    for i, t in zip(missing, times):
        out[i] = replace(out[i], submit_time=t)
    return out


# ---------------------------------------------------------------------------
# model assignment


def assign_models(entries, profiles, seed):
    """Attach a model profile to every entry and build job records.

    Entries naming a known model keep it; the rest draw uniformly from
    ``profiles`` (sorted by name for seed stability).
    """
    if not profiles:
        raise ValueError("at least one profile is required")
    names = sorted(profiles)
    picks = _rng(seed, _MODELS).integers(0, len(names), size=len(entries))
    jobs = []
    for entry, pick in zip(entries, picks):
        name = entry.model_name if entry.model_name in profiles else names[int(pick)]
        profile = profiles[name]
        try:
            t = profile.iter_time(entry.gpu_demand, CONSOLIDATED)
        except MissingProfileError as exc:
            raise MissingProfileError(f"job {entry.job_id} ({name}): {exc}") from None
        iters = math.ceil(Fraction(repr(float(entry.duration_isolated))) / Fraction(repr(t)))
        jobs.append(
            JobRecord(
                job_id=entry.job_id,
                arrival_time=float(entry.submit_time or 0.0),
                gpu_demand=entry.gpu_demand,
                total_iterations=max(1, iters),
                iter_time_profile=dict(profile.entries),
                restart_overhead=profile.restart_overhead,
                placement_sensitive=profile.placement_sensitive,
                model_name=name,
                loss_curve=list(profile.loss_curve) if profile.loss_curve else None,
            )
        )
    return jobs


def assign_convergence(jobs, share, fraction, seed):
    """Mark a random ``share`` of jobs to converge after ``fraction`` of their iterations."""
    if not 0 <= share <= 1 or not 0 < fraction <= 1:
        raise ValueError("share must be in [0,1] and fraction in (0,1]")
    chosen = _rng(seed, _CONVERGE).random(len(jobs)) < share
    for job, pick in zip(jobs, chosen):
        if pick:
            job.converge_at_fraction = fraction
    return jobs
