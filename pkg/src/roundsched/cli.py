"""Command line front end: simulate, sweep, synth and lease-bench."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path

from roundsched import __version__
from roundsched.config import (
    Config,
    build_admission,
    build_jobs,
    build_placement,
    build_scheduler,
    build_sim,
    build_synth,
)
from roundsched.engine import Policies, run
from roundsched.errors import ConfigError, ParseError, SchedError
from roundsched.lease import lease_bench
from roundsched.synthesizer import SWITCH_LOG_HEADER, run_synthesized

EXIT_OK, EXIT_ENGINE, EXIT_CONFIG = 0, 1, 2

JOBS_HEADER = ["job_id", "arrival", "first_sched", "finish", "jct", "responsiveness", "preemptions"]
SUMMARY_HEADER = ["param_value", "avg_jct", "avg_responsiveness"]
LEASE_HEADER = [
    "mode",
    "workers",
    "rounds",
    "revocations",
    "central_messages",
    "total_messages",
    "max_exit_skew_iterations",
]


def write_atomic(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def jobs_rows(report):
    return [
        [p.job_id, repr(p.arrival), repr(p.first_sched), repr(p.finish), repr(p.jct), repr(p.responsiveness), p.preemption_count]
        for p in report.per_job
    ]


def report_json(cfg, report, extra=None):
    body = report.to_dict()
    body["jobs_measured"] = len(report.per_job)
    body["tool_version"] = __version__
    body["config_echo"] = cfg.manifest()
    if extra:
        body.update(extra)
    return json.dumps(body, indent=2, sort_keys=True) + "\n"


def write_run(out, cfg, report, extra=None):
    write_atomic(out / "report.json", report_json(cfg, report, extra))
    write_atomic(out / "jobs.csv", csv_text(JOBS_HEADER, jobs_rows(report)))
    write_atomic(out / "manifest.cfg", cfg.manifest_text())


def summary_line(report):
    return f"avg_jct={report.avg_jct:.1f}s avg_responsiveness={report.avg_responsiveness:.1f}s jobs={len(report.per_job)}"


def simulate_config(cfg):
    sim = build_sim(cfg)
    policies = Policies(build_admission(cfg), build_scheduler(cfg), build_placement(cfg))
    return run(sim, build_jobs(cfg), policies)


# subcommands ---------------------------------------------------------------


def cmd_simulate(cfg, out):
    report = simulate_config(cfg)
    write_run(out, cfg, report)
    print(summary_line(report))
    return EXIT_OK


def cmd_sweep(cfg, out, param=None, values=None):
    param = param or cfg.raw("sweep.param")
    if param not in cfg.values:
        raise ConfigError(param, "unknown sweep parameter")
    if values is None:
        values = cfg.names("sweep.values")
    if not values:
        raise ConfigError("sweep.values", "no values to sweep")
    for v in values:
        try:
            float(v)
        except ValueError:
            raise ConfigError("sweep.values", f"not numeric: {v!r}") from None
    rows = []
    try:
        for v in values:
            point = cfg.with_value(param, v)
            report = simulate_config(point)
            write_run(out / f"{param}={v}", point, report)
            rows.append([v, repr(report.avg_jct), repr(report.avg_responsiveness)])
            print(f"{param}={v} {summary_line(report)}")
    finally:
        # keep whatever finished even if a later point fails
        write_atomic(out / "summary.csv", csv_text(SUMMARY_HEADER, rows))
    return EXIT_OK


def cmd_synth(cfg, out):
    sim = build_sim(cfg)
    synth = build_synth(cfg)
    report, log = run_synthesized(sim, build_jobs(cfg), build_placement(cfg), synth)
    extra = {"switches": len(log), "objective": synth.objective}
    write_run(out, cfg, report, extra)
    write_atomic(out / "switch_log.csv", csv_text(SWITCH_LOG_HEADER, [e.row() for e in log]))
    print(f"{summary_line(report)} switches={len(log)}")
    return EXIT_OK


def cmd_lease_bench(cfg, out, workers=None, rounds=None, revocations=None, seeds=None):
    workers = workers if workers is not None else cfg.ints("lease.workers")
    rounds = rounds if rounds is not None else cfg.int("lease.rounds", lo=1)
    revocations = revocations if revocations is not None else cfg.int("lease.revocations", lo=0)
    seeds = seeds if seeds is not None else cfg.int("lease.seeds", lo=0)
    if not workers or seeds < 1:
        raise ConfigError("lease.workers", "empty benchmark grid")
    if any(w < 1 for w in workers):
        raise ConfigError("lease.workers", "worker counts must be >= 1")
    if revocations > rounds:
        raise ConfigError("lease.revocations", "cannot exceed lease.rounds")
    base = cfg.int("seed")
    rows = lease_bench(workers, rounds, revocations, range(base, base + seeds))
    write_atomic(out / "lease.csv", csv_text(LEASE_HEADER, [[r[k] for k in LEASE_HEADER] for r in rows]))
    write_atomic(out / "manifest.cfg", cfg.manifest_text())
    for r in rows:
        print(",".join(str(r[k]) for k in LEASE_HEADER))
    return EXIT_OK


# argument handling -----------------------------------------------------------


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")

    parser = argparse.ArgumentParser(prog="roundsched", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="run one simulation")

    p = sub.add_parser("sweep", parents=[common], help="simulate once per value of a numeric key")
    p.add_argument("--param", help="config key to vary (default: sweep.param)")
    p.add_argument("--values", help="comma-separated values (default: sweep.values)")

    sub.add_parser("synth", parents=[common], help="run with periodic policy re-selection")

    p = sub.add_parser("lease-bench", parents=[common], help="lease message counts and exit skew")
    p.add_argument("--workers", type=_int_list, help="comma-separated worker counts")
    p.add_argument("--rounds", type=int)
    p.add_argument("--revocations", type=int)
    p.add_argument("--seeds", type=int, help="number of delay seeds per grid point")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = Config.load(args.config, overrides)
        if args.command == "simulate":
            return cmd_simulate(cfg, out)
        if args.command == "sweep":
            values = None if args.values is None else [v.strip() for v in args.values.split(",") if v.strip()]
            return cmd_sweep(cfg, out, args.param, values)
        if args.command == "synth":
            return cmd_synth(cfg, out)
        return cmd_lease_bench(cfg, out, args.workers, args.rounds, args.revocations, args.seeds)
    except (ConfigError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SchedError as exc:
        print(f"engine error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ENGINE


if __name__ == "__main__":
    sys.exit(main())
