"""Assembly scenario orchestration.

A scenario file describes a robot, a printer that dispenses structural
parts, and goal poses forming the target structure. ``run_assembly``
executes the five-phase cycle per part (move to printer, grasp, move to
goal, place, retract), planning each transit with the sampling planner,
shortcutting and retiming it, and tracking the result with the receding
horizon controller while every already-placed part is an active keep-out
zone. The loop is seeded and free of wall-clock entropy, so a repeated
run produces an identical report hash; solve times are recorded but
excluded from the hash.
"""

import enum
import hashlib
import json
import os
import time
from dataclasses import dataclass, field as dc_field

import numpy as np
import yaml

from . import collision as coll
from . import lqr, nmpc, planner, smoother
from ._kernels import backend_name
from .errors import FreeflyerError, NoPathError, ScenarioError
from .models import build_robot
from .trajectory import Trajectory

GRASP_ANGLE = np.pi / 4
RETRACT_ANGLE = 0.0


class AssemblyPhase(enum.Enum):
    MOVE_TO_PRINTER = "move_to_printer"
    GRASP = "grasp"
    MOVE_TO_GOAL = "move_to_goal"
    PLACE = "place"
    RETRACT = "retract"


@dataclass
class PartSpec:
    name: str
    semi_axes: np.ndarray
    goal_center: np.ndarray

    def __post_init__(self):
        self.semi_axes = np.asarray(self.semi_axes, dtype=float)
        self.goal_center = np.asarray(self.goal_center, dtype=float)
        if self.semi_axes.shape != (3,) or np.any(self.semi_axes <= 0):
            raise ScenarioError(
                f"part '{self.name}': semi_axes must be 3 positive values")
        if self.goal_center.shape != (3,):
            raise ScenarioError(f"part '{self.name}': goal_center must be 3 values")

    def obstacle(self):
        return coll.EllipsoidObstacle.from_semi_axes(
            self.goal_center, self.semi_axes, name=self.name)


_DEFAULTS = {
    "h": 0.1,
    "robot": "astrobee",
    "start_state": None,
    "workspace": {
        "position_low": [-1.3, -1.0, -0.9],
        "position_high": [1.9, 1.0, 1.0],
    },
    "printer": {
        "center": [-0.75, 0.0, 0.0],
        "semi_axes": [0.2, 0.2, 0.2],
        "approach_offset": [0.0, 0.0, 0.45],
    },
    "placement": {
        "approach_offset": [0.0, 0.0, 0.35],
        "tolerance": 0.08,
    },
    "grasp": {
        "angle": float(GRASP_ANGLE),
        "tolerance": 0.01,
        "duration": 3.0,
        "settle_time": 1.0,
    },
    "margins": {
        "planning": 1.30,
        "control": 1.12,
    },
    "planner": {
        "max_iterations": 1500,
        "goal_tolerance": 2.0,
        "gamma": 60.0,
        "v_max": 0.25,
        "goal_bias": 0.2,
        "stop_at_first_solution": True,
    },
    "smoother": {
        "iterations": 120,
        "v_ref": 0.22,
        # long enough that the retimed rollout actually arrives: the
        # tracked smoothstep lags its reference, and the placement
        # tolerance has to absorb what is left of that lag
        "settle_time": 3.0,
    },
    "tracking": {
        "q_position": 50.0,
        "q_attitude": 20.0,
        "q_arm": 20.0,
        "q_velocity": 5.0,
        "r_control": 1.0,
        "terminal_scale": 10.0,
    },
    "mpc": {
        "horizon": 10,
        "tolerance": 1e-3,
        "lbfgs_memory": 10,
        "max_inner_iterations": 60,
        "penalty_initial": 10.0,
        "penalty_growth": 10.0,
        "max_outer_iterations": 5,
        "constraint_tolerance": 1e-3,
        "terminal_scale": 10.0,
    },
    "parts": [],
    "extra_obstacles": [],
    "out_dir": None,
}


def _merge_defaults(block, defaults, path):
    """Fill missing keys from defaults; reject unknown keys."""
    if not isinstance(block, dict):
        raise ScenarioError(f"'{path}' must be a mapping")
    unknown = set(block) - set(defaults)
    if unknown:
        raise ScenarioError(
            f"unknown key(s) {sorted(unknown)} under '{path}'")
    out = dict(defaults)
    out.update(block)
    return out


@dataclass
class ScenarioConfig:
    """Fully resolved scenario.

    ``resolved`` echoes every setting after defaulting, in file form; it
    is embedded in the report so a run log records the exact inputs.
    """

    name: str
    seed: int
    robot: object
    h: float
    start_state: np.ndarray
    position_low: np.ndarray
    position_high: np.ndarray
    printer: coll.EllipsoidObstacle
    printer_approach: np.ndarray
    parts: list
    placement_offset: np.ndarray
    placement_tolerance: float
    grasp_angle: float
    grasp_tolerance: float
    grasp_duration: float
    grasp_settle: float
    planning_margin: float
    control_margin: float
    planner_opts: dict
    smoother_opts: dict
    tracking: dict
    mpc_opts: dict
    extra_obstacles: list
    out_dir: str
    resolved: dict

    @property
    def n_x(self):
        return self.robot.n_x

    def tracking_cost(self, terminal_scale=None):
        """Quadratic tracking weights shared by retiming and the MPC."""
        tr = self.tracking
        n_m = self.robot.n_m
        n_q = self.robot.n_q
        qd = np.concatenate([
            [tr["q_position"]] * 3,
            [tr["q_attitude"]] * 3,
            [tr["q_arm"]] * n_m,
            [tr["q_velocity"]] * n_q,
        ])
        scale = tr["terminal_scale"] if terminal_scale is None else terminal_scale
        return lqr.QuadraticCost(
            Q=np.diag(qd),
            R=tr["r_control"] * np.eye(self.robot.n_u),
            QN=scale * np.diag(qd))

    def mpc_config(self):
        opts = dict(self.mpc_opts)
        scale = opts.pop("terminal_scale")
        return nmpc.MpcConfig(h=self.h, cost=self.tracking_cost(scale), **opts)

    def planner_config(self, arm_angles, seed):
        """Sampling bounds pin attitude, arm angles, and velocities, so
        the tree explores base translation; steering still moves every
        coordinate."""
        n_q = self.robot.n_q
        low = np.concatenate([
            self.position_low, np.zeros(3), arm_angles, np.zeros(n_q)])
        high = np.concatenate([
            self.position_high, np.zeros(3), arm_angles, np.zeros(n_q)])
        return planner.PlannerConfig(
            bounds=np.vstack([low, high]), seed=seed, h=self.h,
            **self.planner_opts)

    def base_field(self):
        """Printer plus any static scenery; placed parts are added as
        the run progresses."""
        obstacles = [self.printer]
        for i, extra in enumerate(self.extra_obstacles):
            obstacles.append(coll.EllipsoidObstacle.from_semi_axes(
                extra["center"], extra["semi_axes"],
                name=extra.get("name", f"extra_{i}")))
        return coll.ObstacleField(obstacles)


def _vec(raw, n, what):
    v = np.asarray(raw, dtype=float)
    if v.shape != (n,):
        raise ScenarioError(f"'{what}' must have {n} entries, got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ScenarioError(f"'{what}' must be finite")
    return v


def _check_goal_overlaps(parts):
    """Bounding-sphere separation test; conservative but never misses a
    true ellipsoid overlap."""
    for i in range(len(parts)):
        for j in range(i + 1, len(parts)):
            gap = np.linalg.norm(parts[i].goal_center - parts[j].goal_center)
            if gap < np.max(parts[i].semi_axes) + np.max(parts[j].semi_axes):
                raise ScenarioError(
                    f"part goals overlap: '{parts[i].name}' and "
                    f"'{parts[j].name}' are {gap:.3f} m apart")


def scenario_from_dict(raw, name="scenario"):
    """Validate a scenario mapping and resolve all defaults."""
    if not isinstance(raw, dict):
        raise ScenarioError("scenario root must be a mapping")
    known = {"name", "seed"} | set(_DEFAULTS)
    unknown = set(raw) - known
    if unknown:
        raise ScenarioError(f"unknown top-level key(s): {sorted(unknown)}")
    if "seed" not in raw:
        raise ScenarioError(
            "scenario must set 'seed': runs draw no wall-clock entropy")
    seed = raw["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ScenarioError(f"'seed' must be an integer, got {seed!r}")
    name = raw.get("name", name)

    merged = {k: raw.get(k, _DEFAULTS[k]) for k in _DEFAULTS}
    for block in ("workspace", "printer", "placement", "grasp", "margins",
                  "planner", "smoother", "tracking", "mpc"):
        merged[block] = _merge_defaults(merged[block], _DEFAULTS[block], block)

    robot = build_robot(merged["robot"])
    h = float(merged["h"])
    if h <= 0:
        raise ScenarioError("'h' must be positive")

    if merged["start_state"] is None:
        start = np.zeros(robot.n_x)
    else:
        start = _vec(merged["start_state"], robot.n_x, "start_state")

    low = _vec(merged["workspace"]["position_low"], 3, "workspace.position_low")
    high = _vec(merged["workspace"]["position_high"], 3, "workspace.position_high")
    if np.any(low >= high):
        raise ScenarioError("workspace bounds must satisfy low < high")

    parts = []
    seen = set()
    for i, p in enumerate(merged["parts"]):
        if not isinstance(p, dict) or "goal_center" not in p:
            raise ScenarioError(f"part {i} must be a mapping with 'goal_center'")
        pname = p.get("name", f"part_{i + 1}")
        if pname in seen:
            raise ScenarioError(f"duplicate part name '{pname}'")
        seen.add(pname)
        parts.append(PartSpec(
            name=pname,
            semi_axes=p.get("semi_axes", [0.09, 0.09, 0.07]),
            goal_center=p["goal_center"]))
    _check_goal_overlaps(parts)
    if parts and robot.n_m == 0:
        raise ScenarioError(
            "parts need an arm to grasp them; robot "
            f"'{merged['robot']}' has no arm joints")

    printer_center = _vec(merged["printer"]["center"], 3, "printer.center")
    printer_semis = _vec(merged["printer"]["semi_axes"], 3, "printer.semi_axes")
    if np.any(printer_semis <= 0):
        raise ScenarioError("printer.semi_axes must be positive")
    printer = coll.EllipsoidObstacle.from_semi_axes(
        printer_center, printer_semis, name="printer")
    approach = printer_center + _vec(
        merged["printer"]["approach_offset"], 3, "printer.approach_offset")

    margins = merged["margins"]
    if margins["planning"] < 1.0 or margins["control"] < 1.0:
        raise ScenarioError("margins must be >= 1")
    if margins["planning"] < margins["control"]:
        raise ScenarioError(
            "planning margin must dominate the control margin: the plan "
            "has to leave room for tracking error")

    grasp = merged["grasp"]
    if grasp["tolerance"] <= 0 or grasp["duration"] <= 0:
        raise ScenarioError("grasp tolerance and duration must be positive")

    resolved = json.loads(json.dumps(
        {**merged, "name": name, "seed": seed,
         "robot": merged["robot"],
         "start_state": [float(v) for v in start]},
        default=_to_native, sort_keys=True))

    return ScenarioConfig(
        name=name, seed=seed, robot=robot, h=h, start_state=start,
        position_low=low, position_high=high,
        printer=printer, printer_approach=approach, parts=parts,
        placement_offset=_vec(merged["placement"]["approach_offset"], 3,
                              "placement.approach_offset"),
        placement_tolerance=float(merged["placement"]["tolerance"]),
        grasp_angle=float(grasp["angle"]),
        grasp_tolerance=float(grasp["tolerance"]),
        grasp_duration=float(grasp["duration"]),
        grasp_settle=float(grasp["settle_time"]),
        planning_margin=float(margins["planning"]),
        control_margin=float(margins["control"]),
        planner_opts=dict(merged["planner"]),
        smoother_opts=dict(merged["smoother"]),
        tracking=dict(merged["tracking"]),
        mpc_opts=dict(merged["mpc"]),
        extra_obstacles=list(merged["extra_obstacles"]),
        out_dir=merged["out_dir"],
        resolved=resolved)


def load_scenario(path):
    """Parse and validate a scenario file."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}") from None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1})" if mark is not None else ""
        raise ScenarioError(f"cannot parse {path}{where}: {exc}") from exc
    if raw is None:
        raise ScenarioError(f"scenario file is empty: {path}")
    default_name = os.path.splitext(os.path.basename(str(path)))[0]
    return scenario_from_dict(raw, name=default_name)


def _to_native(value):
    if isinstance(value, np.ndarray):
        return [float(v) for v in value.ravel()]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"cannot serialize {type(value).__name__}")


@dataclass
class PhaseRecord:
    part: str
    phase: str
    success: bool
    detail: str = ""
    n_steps: int = 0
    plan_iterations: int = 0
    plan_cost: float = 0.0
    path_length_raw: float = 0.0
    path_length_short: float = 0.0
    tracking_rms: float = 0.0
    terminal_error: float = 0.0
    arm_error: float = 0.0
    pose_error: float = 0.0
    min_quad: float = float("inf")
    audit_ok: bool = True
    inner_mean: float = 0.0
    inner_max: int = 0
    solve_ms_mean: float = 0.0
    solve_ms_max: float = 0.0

    def to_dict(self, include_timing=True):
        d = {
            "part": self.part, "phase": self.phase,
            "success": bool(self.success), "detail": self.detail,
            "n_steps": int(self.n_steps),
            "plan_iterations": int(self.plan_iterations),
            "plan_cost": float(self.plan_cost),
            "path_length_raw": float(self.path_length_raw),
            "path_length_short": float(self.path_length_short),
            "tracking_rms": float(self.tracking_rms),
            "terminal_error": float(self.terminal_error),
            "arm_error": float(self.arm_error),
            "pose_error": float(self.pose_error),
            "min_quad": float(self.min_quad),
            "audit_ok": bool(self.audit_ok),
            "inner_mean": float(self.inner_mean),
            "inner_max": int(self.inner_max),
        }
        if include_timing:
            d["solve_ms_mean"] = float(self.solve_ms_mean)
            d["solve_ms_max"] = float(self.solve_ms_max)
        return d


@dataclass
class AssemblyReport:
    """Aggregated run outcome.

    ``hash_value()`` digests the canonical JSON form with every timing
    field removed, so repeated seeded runs hash identically while their
    solve times float free.
    """

    scenario: str
    seed: int
    backend: str
    n_parts: int
    parts_placed: int = 0
    success: bool = True
    phases: list = dc_field(default_factory=list)
    # obstacle-field size when each part's cycle starts: the printer
    # plus every previously placed part
    obstacle_counts: list = dc_field(default_factory=list)
    total_mpc_steps: int = 0
    mean_inner_iterations: float = 0.0
    min_quad: float = float("inf")
    mean_solve_ms: float = 0.0
    max_solve_ms: float = 0.0
    wall_time_s: float = 0.0
    resolved_config: dict = dc_field(default_factory=dict)
    # artifacts carried for export; not part of the serialized report
    trajectories: dict = dc_field(default_factory=dict, repr=False)
    diagnostics: list = dc_field(default_factory=list, repr=False)

    def to_dict(self, include_timing=True):
        d = {
            "scenario": self.scenario,
            "seed": int(self.seed),
            "backend": self.backend,
            "n_parts": int(self.n_parts),
            "parts_placed": int(self.parts_placed),
            "success": bool(self.success),
            "phases": [p.to_dict(include_timing) for p in self.phases],
            "obstacle_counts": [int(c) for c in self.obstacle_counts],
            "total_mpc_steps": int(self.total_mpc_steps),
            "mean_inner_iterations": float(self.mean_inner_iterations),
            "min_quad": float(self.min_quad),
            "resolved_config": self.resolved_config,
        }
        if include_timing:
            d["mean_solve_ms"] = float(self.mean_solve_ms)
            d["max_solve_ms"] = float(self.max_solve_ms)
            d["wall_time_s"] = float(self.wall_time_s)
        return d

    def hash_value(self):
        return report_hash(self.to_dict())


def report_hash(report_dict):
    """Canonical hash of a report mapping, timing fields excluded."""
    clean = _strip_timing(report_dict)
    blob = json.dumps(clean, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


_TIMING_KEYS = {"solve_ms_mean", "solve_ms_max", "mean_solve_ms",
                "max_solve_ms", "wall_time_s"}


def _strip_timing(value):
    if isinstance(value, dict):
        return {k: _strip_timing(v) for k, v in value.items()
                if k not in _TIMING_KEYS}
    if isinstance(value, list):
        return [_strip_timing(v) for v in value]
    return value


def _dense_min_clearance(field_, positions, h_check=0.02):
    """Smallest quadratic form over segment-interpolated positions.

    This is the post-hoc audit: the executed closed-loop path is sampled
    densely between knots and checked against the uninflated field.
    """
    if field_.n_obs == 0:
        return float("inf")
    pts = [positions[:1]]
    for a, b in zip(positions[:-1], positions[1:]):
        n = max(int(np.ceil(np.linalg.norm(b - a) / h_check)), 1)
        w = np.arange(1, n + 1)[:, None] / n
        pts.append(a + w * (b - a))
    dense = np.vstack(pts)
    worst = float("inf")
    for obs in field_:
        d = dense - obs.center_at(0)
        q = np.einsum("ij,jk,ik->i", d, obs.effective_P, d)
        worst = min(worst, float(q.min()))
    return worst


def rest_state(desc, position, arm_angles=None):
    """Zero-velocity, zero-attitude state at a base position, with the
    arm at the given joint angles (folded if omitted)."""
    x = np.zeros(desc.n_x)
    x[:3] = np.asarray(position, dtype=float)
    if arm_angles is not None:
        x[6:6 + desc.n_m] = np.asarray(arm_angles, dtype=float)
    return x


def _hold_tail(reference, n_hold):
    """Extend a reference by holding its final state (zero controls)."""
    if n_hold <= 0:
        return reference
    states = np.vstack([reference.states,
                        np.tile(reference.states[-1], (n_hold, 1))])
    controls = np.vstack([reference.controls,
                          np.zeros((n_hold, reference.controls.shape[1]))])
    return Trajectory(h=reference.h, states=states, controls=controls,
                      dynamically_consistent=False, t0=reference.t0)


class _Runner:
    """One assembly run; keeps the sim state, obstacle field, and clock."""

    def __init__(self, config, strict=False):
        self.cfg = config
        self.strict = strict
        self.x = config.start_state.copy()
        self.field = config.base_field()
        self.t = 0.0
        self.report = AssemblyReport(
            scenario=config.name, seed=config.seed, backend=backend_name(),
            n_parts=len(config.parts),
            resolved_config=config.resolved)
        self._all_solve_ms = []
        self._all_inner = []

    # -- helpers ----------------------------------------------------

    def _seed(self, part_idx, slot):
        return self.cfg.seed + 101 * (part_idx + 1) + slot

    def _mpc_track(self, reference, record):
        """Track a reference with the receding-horizon controller and
        audit the executed path against the uninflated field."""
        cfg = self.cfg.mpc_config()
        control_field = self.field.inflated(self.cfg.control_margin)
        if control_field.n_obs == 0:
            control_field = None
        executed, diags = nmpc.run_receding_horizon(
            self.cfg.robot, self.x, reference, control_field, cfg)
        ms = [d.solve_time_ms for d in diags]
        inner = [d.inner_iterations for d in diags]
        record.n_steps = len(diags)
        record.solve_ms_mean = float(np.mean(ms)) if ms else 0.0
        record.solve_ms_max = float(np.max(ms)) if ms else 0.0
        record.inner_mean = float(np.mean(inner)) if inner else 0.0
        record.inner_max = int(np.max(inner)) if inner else 0
        err = executed.states[:, :3] - reference.states[:, :3]
        record.tracking_rms = float(np.sqrt(np.mean(np.sum(err ** 2, axis=1))))
        record.min_quad = _dense_min_clearance(self.field, executed.positions)
        record.audit_ok = record.min_quad >= 1.0
        self._all_solve_ms.extend(ms)
        self._all_inner.extend(inner)
        key = f"{record.part}/{record.phase}"
        executed.t0 = self.t
        self.report.trajectories[key] = executed
        self.report.diagnostics.extend(
            (record.part, record.phase, d) for d in diags)
        self.t += executed.duration
        self.x = executed.states[-1].copy()
        return executed

    def _transit(self, record, target_position, arm_angles, part_idx, slot):
        """Plan, shortcut, retime, and track a base move."""
        cfg = self.cfg
        goal = rest_state(cfg.robot, target_position, arm_angles)
        planning_field = self.field.inflated(cfg.planning_margin)
        pcfg = cfg.planner_config(arm_angles, seed=self._seed(part_idx, slot))
        planned, info = planner.plan(cfg.robot, self.x, goal, planning_field,
                                     pcfg, return_info=True)
        record.plan_iterations = info.iterations
        record.plan_cost = float(info.cost)
        path = smoother.GeometricPath.from_trajectory(planned)
        record.path_length_raw = path.total_length
        short = smoother.shortcut(
            path, planning_field, iterations=cfg.smoother_opts["iterations"],
            seed=self._seed(part_idx, slot + 1))
        record.path_length_short = short.total_length
        reference = smoother.retime(
            cfg.robot, short, cost=cfg.tracking_cost(), h=cfg.h,
            v_ref=cfg.smoother_opts["v_ref"],
            settle_time=cfg.smoother_opts["settle_time"], x0=self.x)
        executed = self._mpc_track(reference, record)
        record.terminal_error = float(
            np.linalg.norm(executed.states[-1, :3] - target_position))
        record.success = (record.terminal_error <= cfg.placement_tolerance
                          and record.audit_ok)
        if not record.success:
            record.detail = (f"terminal error {record.terminal_error:.3f} m, "
                             f"min quad {record.min_quad:.3f}")

    def _swing(self, record, anchor_position, arm_target):
        """Drive the first arm joint to its commanded angle at a fixed
        base pose, tracking a steered swing reference."""
        cfg = self.cfg
        arm_angles = np.zeros(cfg.robot.n_m)
        arm_angles[0] = arm_target
        goal = rest_state(cfg.robot, anchor_position, arm_angles)
        n_swing = max(int(round(cfg.grasp_duration / cfg.h)), 2)
        reference = lqr.lqr_steer(cfg.robot, self.x, goal, horizon=n_swing,
                                  cost=cfg.tracking_cost(), h=cfg.h)
        reference = _hold_tail(reference,
                               int(round(cfg.grasp_settle / cfg.h)))
        executed = self._mpc_track(reference, record)
        record.arm_error = float(abs(executed.states[-1, 6] - arm_target))
        record.success = record.arm_error <= cfg.grasp_tolerance \
            and record.audit_ok
        if not record.success:
            record.detail = (f"arm error {record.arm_error:.4f} rad, "
                             f"min quad {record.min_quad:.3f}")

    # -- phases -----------------------------------------------------

    def run_part(self, part_idx, part):
        cfg = self.cfg
        placed = False
        # field size while this part is worked: printer + parts placed so
        # far (the carried part is never an obstacle to its own carrier)
        self.report.obstacle_counts.append(self.field.n_obs)
        grasp_arm = np.zeros(cfg.robot.n_m)
        grasp_arm[0] = cfg.grasp_angle
        plan_phases = {
            AssemblyPhase.MOVE_TO_PRINTER:
                (cfg.printer_approach, np.zeros(cfg.robot.n_m), 0),
            AssemblyPhase.MOVE_TO_GOAL:
                (part.goal_center + cfg.placement_offset, grasp_arm, 10),
        }
        for phase in AssemblyPhase:
            record = PhaseRecord(part=part.name, phase=phase.value,
                                 success=False)
            try:
                if phase in plan_phases:
                    target, arm, slot = plan_phases[phase]
                    self._transit(record, target, arm, part_idx, slot)
                elif phase is AssemblyPhase.GRASP:
                    self._swing(record, cfg.printer_approach, cfg.grasp_angle)
                elif phase is AssemblyPhase.PLACE:
                    approach = part.goal_center + cfg.placement_offset
                    record.pose_error = float(
                        np.linalg.norm(self.x[:3] - approach))
                    record.success = \
                        record.pose_error <= cfg.placement_tolerance
                    if record.success:
                        self.field.add(part.obstacle())
                        placed = True
                    else:
                        record.detail = \
                            f"pose error {record.pose_error:.3f} m"
                elif phase is AssemblyPhase.RETRACT:
                    self._swing(record,
                                part.goal_center + cfg.placement_offset,
                                RETRACT_ANGLE)
            except (NoPathError, FreeflyerError) as exc:
                record.success = False
                record.detail = f"{type(exc).__name__}: {exc}"
            self.report.phases.append(record)
            if not record.success:
                self.report.success = False
                return placed, record
        return placed, None

    def run(self):
        t0 = time.perf_counter()
        for i, part in enumerate(self.cfg.parts):
            placed, failed = self.run_part(i, part)
            if placed:
                self.report.parts_placed += 1
            if failed is not None and self.strict:
                break
        rep = self.report
        if self._all_solve_ms:
            rep.total_mpc_steps = len(self._all_solve_ms)
            rep.mean_solve_ms = float(np.mean(self._all_solve_ms))
            rep.max_solve_ms = float(np.max(self._all_solve_ms))
            rep.mean_inner_iterations = float(np.mean(self._all_inner))
        quads = [p.min_quad for p in rep.phases if p.n_steps > 0]
        rep.min_quad = float(min(quads)) if quads else float("inf")
        rep.success = rep.success and rep.parts_placed == rep.n_parts
        rep.wall_time_s = time.perf_counter() - t0
        return rep


def run_assembly(config, strict=False):
    """Execute the full scenario; returns the AssemblyReport."""
    return _Runner(config, strict=strict).run()


def export_run(report, out_dir):
    """Write the run artifacts: report, hash, trajectories, diagnostics,
    and the assembled whole-episode time series. Returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def _emit(name, text):
        p = os.path.join(out_dir, name)
        with open(p, "w") as fh:
            fh.write(text)
        written.append(p)

    _emit("report.json",
          json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    _emit("report_hash.txt", report.hash_value() + "\n")
    _emit("scenario_resolved.yaml",
          yaml.safe_dump(report.resolved_config, sort_keys=True))

    traj_dir = os.path.join(out_dir, "trajectories")
    os.makedirs(traj_dir, exist_ok=True)
    for i, (key, traj) in enumerate(report.trajectories.items()):
        fname = f"{i:03d}_{key.replace('/', '_')}.csv"
        p = os.path.join(traj_dir, fname)
        traj.save(p)
        written.append(p)

    lines = ["part,phase,step,solve_ms,inner,outer,residual,violation,"
             "cost,status"]
    for part, phase, d in report.diagnostics:
        lines.append(
            f"{part},{phase},{d.step},{d.solve_time_ms:.6f},"
            f"{d.inner_iterations},{d.outer_iterations},{d.residual:.17g},"
            f"{d.max_violation:.17g},{d.cost:.17g},{d.status}")
    _emit("diagnostics.csv", "\n".join(lines) + "\n")

    _emit("timeseries.csv", render_timeseries(report.trajectories.values()))
    return written


def render_timeseries(trajectories):
    """Whole-episode per-axis series: base translation, base attitude,
    arm angles, one row per knot across the concatenated phases."""
    rows = []
    for traj in trajectories:
        n_m = traj.n_m
        block = np.column_stack([
            traj.times, traj.states[:, :6], traj.states[:, 6:6 + n_m]])
        rows.append(block)
    base_cols = ["t", "r_x", "r_y", "r_z", "roll", "pitch", "yaw"]
    if not rows:
        return ",".join(base_cols) + "\n"
    n_m = int((rows[0].shape[1] - 7))
    header = ",".join(base_cols + [f"q_{i + 1}" for i in range(n_m)])
    body = "\n".join(
        ",".join(f"{v:.17g}" for v in row)
        for block in rows for row in block)
    return header + "\n" + body + "\n"
