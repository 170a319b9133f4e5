"""Command line entry points.

Verbs:
    run              simulate one experiment and write its artifacts
    gen-schedule     emit the deposition schedule JSON for a part config
    compare-policies run every policy over N seeds and report paired stats
    inspect-table    describe a saved lookup table, optionally dump a step

Exit codes: 0 success, 2 configuration errors, 3 numerical failures,
4 I/O errors.  Output files are written to a temp name and renamed, so a
failed run leaves no partial artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import config as config_mod
from . import kalman, part, perception
from .config import ConfigError, ExperimentConfig, build_setup, load_config
from .dynamics import StabilityError
from .geometry import MeshLoadError
from .groundtruth import TableFormatError, export_step_csv, load_table, save_table
from .perception import PolicyKind, run_loop

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class CliError(Exception):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


def _atomic_write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_csv_atomic(write_fn, path: str) -> None:
    tmp = path + ".tmp"
    write_fn(tmp)
    os.replace(tmp, path)


def _load_config_or_die(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}", EXIT_IO)
    return load_config(path)


def _fig5_text(trace: perception.PerceptionTrace) -> str:
    lines = ["# cycle step max_err_ext avg_err_ext max_err_int avg_err_int avg_cov"]
    for r in trace.records:
        lines.append(
            f"{r.cycle} {r.step} {r.max_err_ext!r} {r.avg_err_ext!r} "
            f"{r.max_err_int!r} {r.avg_err_int!r} {r.avg_cov!r}"
        )
    return "\n".join(lines) + "\n"


def _summary(cfg: ExperimentConfig, trace: perception.PerceptionTrace,
             wall_time: float) -> dict:
    last = trace.records[-1] if trace.records else None
    return {
        "n_cycles": len(trace.records),
        "final_max_err_ext": last.max_err_ext if last else None,
        "final_avg_err_ext": last.avg_err_ext if last else None,
        "final_max_err_int": last.max_err_int if last else None,
        "final_avg_err_int": last.avg_err_int if last else None,
        "final_avg_cov": last.avg_cov if last else None,
        "total_adjusted_measurements": int(sum(r.n_adjusted for r in trace.records)),
        "total_gated_measurements": int(sum(r.n_gated for r in trace.records)),
        "wall_time_s": wall_time,
        "config": cfg.to_dict(),
    }


def run_once(cfg: ExperimentConfig, out_dir: str) -> dict:
    """Run one experiment and write trace, summary, plot data and table."""
    os.makedirs(out_dir, exist_ok=True)
    setup = build_setup(cfg)
    setup = dataclasses.replace(setup, collect_states=cfg.trace_states)
    start = time.perf_counter()
    trace = run_loop(setup)
    wall = time.perf_counter() - start
    _write_csv_atomic(trace.write_csv, os.path.join(out_dir, "trace.csv"))
    _atomic_write_text(os.path.join(out_dir, "fig5.dat"), _fig5_text(trace))
    summary = _summary(cfg, trace, wall)
    _atomic_write_text(
        os.path.join(out_dir, "summary.json"),
        json.dumps(summary, indent=2) + "\n",
    )
    if cfg.ground_truth["save_table"]:
        tmp = os.path.join(out_dir, "groundtruth.tslut.tmp")
        save_table(setup.field, tmp)
        os.replace(tmp, os.path.join(out_dir, "groundtruth.tslut"))
    if cfg.trace_states:
        state_dir = os.path.join(out_dir, "states")
        os.makedirs(state_dir, exist_ok=True)
        for record, state in zip(trace.records, trace.states):
            _write_csv_atomic(
                lambda p, s=state: kalman.write_state_csv(s, p),
                os.path.join(state_dir, f"cycle_{record.cycle:04d}.csv"),
            )
    return summary


def cmd_run(args) -> int:
    cfg = _load_config_or_die(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.trace_states:
        cfg.trace_states = True
    summary = run_once(cfg, cfg.out_dir)
    print(f"wrote {cfg.out_dir}/trace.csv ({summary['n_cycles']} cycles, "
          f"{summary['wall_time_s']:.2f}s)")
    return 0


def cmd_gen_schedule(args) -> int:
    cfg = _load_config_or_die(args.config)
    if cfg.part is None:
        raise ConfigError("gen-schedule needs a config with a part section")
    spec = config_mod._part_spec(cfg)
    built = part.build_part(spec)
    _atomic_write_text(
        args.out, json.dumps(built.schedule.to_json_dict(), indent=2) + "\n"
    )
    print(f"wrote {args.out} ({len(built.schedule.layers)} layers, "
          f"{built.points.n_points} points)")
    return 0


def cmd_compare_policies(args) -> int:
    cfg = _load_config_or_die(args.config)
    out_dir = args.out if args.out is not None else cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    # the scenario (part, model, emulated process) is identical across
    # runs; build it once and swap only policy and seed
    base = build_setup(cfg)
    standoff = float(cfg.policy["standoff_scale"])
    kinds = [k.value for k in PolicyKind]
    finals: dict[str, list[float]] = {k: [] for k in kinds}
    rows = ["policy,seed,final_avg_cov"]
    for kind in kinds:
        for i in range(args.seeds):
            seed = cfg.seed + i
            setup = dataclasses.replace(
                base,
                policy=perception.Policy(PolicyKind(kind), standoff),
                seed=seed,
                collect_states=False,
            )
            trace = run_loop(setup)
            final = trace.records[-1].avg_cov if trace.records else float("nan")
            finals[kind].append(final)
            rows.append(f"{kind},{seed},{final!r}")
            _write_csv_atomic(
                trace.write_csv,
                os.path.join(out_dir, f"trace_{kind}_seed{seed}.csv"),
            )
    mu = np.array(finals[PolicyKind.MAX_UNCERTAINTY.value])
    rand = np.array(finals[PolicyKind.UNIFORM_RANDOM.value])
    wins = float(np.mean(mu < rand)) if mu.size else float("nan")
    report = {
        "seeds": args.seeds,
        "final_avg_cov_mean": {k: float(np.mean(v)) for k, v in finals.items()},
        "max_uncertainty_beats_random_fraction": wins,
    }
    _atomic_write_text(os.path.join(out_dir, "report.json"),
                       json.dumps(report, indent=2) + "\n")
    _atomic_write_text(os.path.join(out_dir, "report.csv"), "\n".join(rows) + "\n")
    print(json.dumps(report, indent=2))
    return 0


def cmd_inspect_table(args) -> int:
    if not os.path.exists(args.table):
        raise CliError(f"table file not found: {args.table}", EXIT_IO)
    field = load_table(args.table)
    print(f"steps:      {field.n_steps}")
    print(f"points:     {field.fine_points.shape[0]}")
    print(f"dt:         {field.dt}")
    print(f"substeps:   {field.substeps}")
    print(f"layers:     {len(field.schedule.layers)}")
    print(f"window:     {field.schedule.active_window}")
    if args.step is not None:
        if args.csv is None:
            raise ConfigError("--step needs --csv to write the export")
        _write_csv_atomic(
            lambda p: export_step_csv(field, args.step, p), args.csv
        )
        print(f"wrote {args.csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thermoscout",
        description="Active thermal-field estimation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    p_run.add_argument("--config", required=True, help="experiment config JSON")
    p_run.add_argument("--seed", type=int, default=None, help="override config seed")
    p_run.add_argument("--out", default=None, help="override output directory")
    p_run.add_argument("--trace-states", action="store_true",
                       help="write per-cycle state snapshots")
    p_run.set_defaults(func=cmd_run)

    p_gen = sub.add_parser("gen-schedule", help="emit a part deposition schedule")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--out", required=True, help="schedule JSON output path")
    p_gen.set_defaults(func=cmd_gen_schedule)

    p_cmp = sub.add_parser("compare-policies",
                           help="run all policies over N seeds")
    p_cmp.add_argument("--config", required=True)
    p_cmp.add_argument("--seeds", type=int, default=20)
    p_cmp.add_argument("--out", default=None)
    p_cmp.set_defaults(func=cmd_compare_policies)

    p_ins = sub.add_parser("inspect-table", help="describe a lookup table")
    p_ins.add_argument("--table", required=True)
    p_ins.add_argument("--step", type=int, default=None)
    p_ins.add_argument("--csv", default=None)
    p_ins.set_defaults(func=cmd_inspect_table)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MeshLoadError, TableFormatError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FileNotFoundError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (StabilityError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
