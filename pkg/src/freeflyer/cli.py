"""Command-line front end.

Each pipeline stage is a subcommand that can run standalone on the
previous stage's output file, so intermediate artifacts can be inspected
and replayed while debugging:

    freeflyer plan     --scenario corridor --out run/
    freeflyer smooth   --scenario corridor --in run/plan.csv --out run/
    freeflyer track    --scenario corridor --in run/reference.csv --out run/
    freeflyer mpc      --scenario corridor --in run/reference.csv --out run/
    freeflyer simulate --scenario pyramid10
    freeflyer export   --scenario pyramid10 --out run/

``--scenario`` takes either a file path or the name of a shipped
scenario. Exit codes: 0 on success, 1 on a phase or solve failure, 2 on
a configuration error.
"""

import argparse
import os
import sys

import numpy as np

from . import harness, lqr, nmpc, planner, smoother
from .errors import (ConfigurationError, FreeflyerError, NoPathError,
                     PhaseFailureError, ScenarioError)
from .scenarios import scenario_path
from .trajectory import Trajectory


def _resolve_scenario(arg):
    """A filesystem path if one exists, else a shipped scenario name."""
    if os.path.exists(arg):
        return arg
    try:
        return scenario_path(arg)
    except ScenarioError:
        raise ScenarioError(
            f"'{arg}' is neither a scenario file nor a shipped scenario "
            "name") from None


def _load(args):
    cfg = harness.load_scenario(_resolve_scenario(args.scenario))
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out_path(args, name):
    out = args.out if args.out is not None else "."
    os.makedirs(out, exist_ok=True)
    return os.path.join(out, name)


def _read_trajectory(args):
    if args.infile is None:
        raise ScenarioError("this subcommand needs --in <trajectory.csv>")
    if not os.path.exists(args.infile):
        raise ScenarioError(f"input trajectory not found: {args.infile}")
    return Trajectory.load(args.infile)


def _cmd_plan(args):
    """Plan start -> printer approach against the planning-margin field."""
    cfg = _load(args)
    field = cfg.base_field().inflated(cfg.planning_margin)
    goal = harness.rest_state(cfg.robot, cfg.printer_approach)
    pcfg = cfg.planner_config(np.zeros(cfg.robot.n_m), seed=cfg.seed)
    planned, info = planner.plan(cfg.robot, cfg.start_state, goal, field,
                                 pcfg, return_info=True)
    path = _out_path(args, "plan.csv")
    planned.save(path)
    print(f"planned {planned.n_knots} knots in {info.iterations} "
          f"iterations, cost {info.cost:.3f} -> {path}")
    return 0


def _cmd_smooth(args):
    """Shortcut a planned trajectory and retime it into a reference."""
    cfg = _load(args)
    raw = _read_trajectory(args)
    field = cfg.base_field().inflated(cfg.planning_margin)
    path = smoother.GeometricPath.from_trajectory(raw)
    short = smoother.shortcut(path, field,
                              iterations=cfg.smoother_opts["iterations"],
                              seed=cfg.seed + 1)
    reference = smoother.retime(
        cfg.robot, short, cost=cfg.tracking_cost(), h=cfg.h,
        v_ref=cfg.smoother_opts["v_ref"],
        settle_time=cfg.smoother_opts["settle_time"], x0=raw.states[0])
    out = _out_path(args, "reference.csv")
    reference.save(out)
    print(f"shortcut {path.total_length:.3f} m -> {short.total_length:.3f} m,"
          f" retimed to {reference.n_knots} knots -> {out}")
    return 0


def _cmd_track(args):
    """Roll the LQR tracking policy along a reference (no obstacles)."""
    cfg = _load(args)
    reference = _read_trajectory(args)
    executed = lqr.track(cfg.robot, reference, cfg.tracking_cost())
    err = executed.states[:, :3] - reference.states[:, :3]
    rms = float(np.sqrt(np.mean(np.sum(err ** 2, axis=1))))
    out = _out_path(args, "tracked.csv")
    executed.save(out)
    print(f"tracked {reference.n_knots} knots, position rms "
          f"{rms:.4f} m -> {out}")
    return 0


def _cmd_mpc(args):
    """Track a reference closed loop with the receding-horizon solver."""
    cfg = _load(args)
    reference = _read_trajectory(args)
    field = cfg.base_field().inflated(cfg.control_margin)
    obstacles = field if field.n_obs > 0 else None
    executed, diags = nmpc.run_receding_horizon(
        cfg.robot, reference.states[0], reference, obstacles,
        cfg.mpc_config())
    out = _out_path(args, "executed.csv")
    executed.save(out)
    ms = [d.solve_time_ms for d in diags]
    err = executed.states[:, :3] - reference.states[:, :3]
    rms = float(np.sqrt(np.mean(np.sum(err ** 2, axis=1))))
    worst = max(d.max_violation for d in diags)
    print(f"mpc tracked {len(diags)} steps, mean solve "
          f"{np.mean(ms):.1f} ms, position rms {rms:.4f} m, "
          f"max violation {worst:.2e} -> {out}")
    return 1 if any(d.status == "infeasible" for d in diags) else 0


def _print_report(report):
    for ph in report.phases:
        mark = "ok  " if ph.success else "FAIL"
        extra = f" ({ph.detail})" if ph.detail else ""
        print(f"  {mark} {ph.part:<12} {ph.phase:<16} "
              f"steps={ph.n_steps}{extra}")
    print(f"placed {report.parts_placed}/{report.n_parts} parts, "
          f"mean solve {report.mean_solve_ms:.1f} ms over "
          f"{report.total_mpc_steps} steps, min quad "
          f"{report.min_quad:.2f}, wall {report.wall_time_s:.1f} s")
    print(f"report hash {report.hash_value()}")


def _cmd_simulate(args):
    cfg = _load(args)
    report = harness.run_assembly(cfg, strict=args.strict)
    _print_report(report)
    if args.out is not None:
        written = harness.export_run(report, args.out)
        print(f"wrote {len(written)} files under {args.out}")
    return 0 if report.success else 1


def _cmd_export(args):
    """Run the scenario and write the full artifact bundle."""
    if args.out is None:
        raise ScenarioError("export needs --out <directory>")
    cfg = _load(args)
    report = harness.run_assembly(cfg, strict=args.strict)
    written = harness.export_run(report, args.out)
    print(f"wrote {len(written)} files under {args.out}")
    print(f"report hash {report.hash_value()}")
    return 0 if report.success else 1


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", required=True,
                        help="scenario file path or shipped scenario name")
    common.add_argument("--seed", type=int, default=None,
                        help="override the scenario seed")
    common.add_argument("--out", default=None,
                        help="output directory")
    common.add_argument("--strict", action="store_true",
                        help="stop the assembly at the first phase failure")

    parser = argparse.ArgumentParser(
        prog="freeflyer",
        description="Plan, smooth, track, and simulate free-flyer "
                    "assembly scenarios.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, needs_in=False):
        p = sub.add_parser(name, parents=[common], help=help_)
        if needs_in:
            p.add_argument("--in", dest="infile", default=None,
                           help="input trajectory from the previous stage")
        p.set_defaults(func=func)
        return p

    add("plan", _cmd_plan, "plan a path to the printer approach")
    add("smooth", _cmd_smooth,
        "shortcut and retime a planned trajectory", needs_in=True)
    add("track", _cmd_track,
        "LQR-track a reference trajectory", needs_in=True)
    add("mpc", _cmd_mpc,
        "closed-loop track a reference with the MPC", needs_in=True)
    add("simulate", _cmd_simulate, "run the full assembly scenario")
    add("export", _cmd_export, "run the scenario and write all artifacts")
    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, ConfigurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NoPathError, PhaseFailureError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 1
    except FreeflyerError as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
