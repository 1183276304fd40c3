"""Shortcut smoothing of planned paths and LQR re-timing.

The planner returns a dynamically consistent but jagged trajectory. The
smoother first treats its states as a geometric path (configurations
only, no timestamps) and repeatedly replaces random sub-arcs with
straight collision-free segments. It then lays a smoothstep arclength
profile along the shortened path and tracks the resulting reference with
finite-horizon LQR, which restores dynamic consistency.
"""

from dataclasses import dataclass, field

import numpy as np

from . import collision as coll
from . import lqr
from .errors import ContractViolationError
from .trajectory import Trajectory

# knots closer than this (configuration-space metric) collapse to one
_DEGENERATE_KNOT = 1e-12

# default bound on the tracked trajectory's distance from its geometric
# path; the harness audits executions against it
DEFAULT_TRACKING_BOUND = 0.05


@dataclass
class GeometricPath:
    """Ordered configurations with cumulative arclength per knot.

    Arclength is the Euclidean metric on the full configuration vector
    (positions, Euler angles, joint angles), so shortcutting can only
    shorten attitude/arm motion along with translation.
    """

    states: np.ndarray
    cumulative_length: np.ndarray = field(init=False)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.states.shape[0] < 2:
            raise ContractViolationError("a path needs at least 2 knots")
        if not np.all(np.isfinite(self.states)):
            raise ContractViolationError("path knots must be finite")
        seg = np.linalg.norm(np.diff(self.states, axis=0), axis=1)
        self.cumulative_length = np.concatenate([[0.0], np.cumsum(seg)])

    @classmethod
    def from_trajectory(cls, traj):
        """Extract the configuration knots of a trajectory; a single-knot
        trajectory becomes a degenerate two-knot path."""
        n_q = traj.n_x // 2
        knots = traj.states[:, :n_q]
        if knots.shape[0] == 1:
            knots = np.vstack([knots, knots])
        return cls(states=knots.copy())

    @property
    def n_knots(self):
        return self.states.shape[0]

    @property
    def n_q(self):
        return self.states.shape[1]

    @property
    def total_length(self):
        return float(self.cumulative_length[-1])

    @property
    def positions(self):
        return self.states[:, :3]

    def interpolate(self, s):
        """Configuration at arclength s (scalar or array), linear per
        coordinate within each segment; s is clipped to [0, L]."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.total_length)
        scalar = s.ndim == 0
        s = np.atleast_1d(s)
        c = self.cumulative_length
        i = np.clip(np.searchsorted(c, s, side="right") - 1, 0,
                    self.n_knots - 2)
        seg = c[i + 1] - c[i]
        w = np.where(seg > 0.0, (s - c[i]) / np.where(seg > 0, seg, 1.0), 0.0)
        out = self.states[i] + w[:, None] * (self.states[i + 1]
                                             - self.states[i])
        return out[0] if scalar else out


def _dedupe(knots):
    keep = [0]
    for i in range(1, knots.shape[0]):
        if np.linalg.norm(knots[i] - knots[keep[-1]]) > _DEGENERATE_KNOT:
            keep.append(i)
    # the exact final knot must survive even when it duplicates its
    # predecessor (endpoint preservation)
    last = knots.shape[0] - 1
    if keep[-1] != last:
        if len(keep) > 1:
            keep[-1] = last
        else:
            keep.append(last)
    return knots[keep]


def shortcut(path, field_, iterations=200, seed=0, h_check=None,
             strict=True):
    """Random-pair shortcutting: sample two arclengths, connect their
    interpolated configurations with a straight segment, and splice it in
    when the segment's positions pass collision checks.

    Endpoints never move; total length never increases. Deterministic
    for a fixed seed.
    """
    if iterations < 0:
        raise ContractViolationError("iterations must be >= 0")
    rng = np.random.default_rng(seed)
    current = path
    for _ in range(iterations):
        L = current.total_length
        if L <= _DEGENERATE_KNOT:
            break
        sa, sb = np.sort(rng.uniform(0.0, L, size=2))
        if sb - sa <= _DEGENERATE_KNOT:
            continue
        xa = current.interpolate(sa)
        xb = current.interpolate(sb)
        if not coll.segment_clear(field_, xa[:3], xb[:3], h_check,
                                  strict=strict):
            continue
        c = current.cumulative_length
        ia = int(np.clip(np.searchsorted(c, sa, side="right") - 1, 0,
                         current.n_knots - 1))
        jb = int(np.searchsorted(c, sb, side="right"))
        knots = np.vstack([current.states[:ia + 1], xa, xb,
                           current.states[jb:]])
        candidate = GeometricPath(states=_dedupe(knots))
        if candidate.total_length <= current.total_length + 1e-12:
            current = candidate
    return current


def path_deviation(path, positions):
    """(rms, max) Euclidean distance from each position to the path's
    position polyline (closest point on any segment)."""
    P = np.atleast_2d(np.asarray(positions, dtype=float))
    A = path.positions[:-1]
    D = path.positions[1:] - A
    seg_len2 = np.einsum("ij,ij->i", D, D)
    best = np.full(P.shape[0], np.inf)
    for a, d, l2 in zip(A, D, seg_len2):
        if l2 <= _DEGENERATE_KNOT ** 2:
            dist = np.linalg.norm(P - a, axis=1)
        else:
            t = np.clip((P - a) @ d / l2, 0.0, 1.0)
            dist = np.linalg.norm(P - (a + t[:, None] * d), axis=1)
        best = np.minimum(best, dist)
    return float(np.sqrt(np.mean(best ** 2))), float(best.max())


def default_tracking_cost(desc):
    """Weights for re-timing and trajectory tracking: tight on position,
    moderate damping, unit control effort."""
    n_q = desc.n_q
    qdiag = np.concatenate([
        np.full(3, 50.0), np.full(3, 20.0), np.full(desc.n_m, 20.0),
        np.full(n_q, 5.0)])
    return lqr.QuadraticCost(Q=np.diag(qdiag), R=np.eye(desc.n_u),
                             QN=np.diag(10.0 * qdiag))


def reference_profile(path, h, v_ref, settle_time):
    """Time-stamped reference states along the path.

    Arclength follows the smoothstep s(t) = L (3u^2 - 2u^3), u = t/T,
    with T chosen so the peak speed (at u = 1/2) equals v_ref; the final
    configuration is then held for settle_time. Reference velocities are
    central differences of the sampled configurations.
    """
    if h <= 0 or v_ref <= 0 or settle_time < 0:
        raise ContractViolationError(
            "need h > 0, v_ref > 0, settle_time >= 0")
    L = path.total_length
    n_settle = int(np.ceil(settle_time / h))
    if L <= _DEGENERATE_KNOT:
        configs = np.repeat(path.states[:1], max(n_settle, 1) + 1, axis=0)
    else:
        T = 1.5 * L / v_ref
        n_move = int(np.ceil(T / h))
        u = np.minimum(np.arange(n_move + 1) * h / T, 1.0)
        s = L * (3.0 * u ** 2 - 2.0 * u ** 3)
        configs = path.interpolate(s)
        if n_settle > 0:
            configs = np.vstack([configs,
                                 np.repeat(configs[-1:], n_settle, axis=0)])
    vel = np.gradient(configs, h, axis=0)
    states = np.hstack([configs, vel])
    controls = np.zeros((states.shape[0], states.shape[1] // 2))
    return Trajectory(h=h, states=states, controls=controls,
                      dynamically_consistent=False)


def retime(desc, path, cost=None, h=0.1, v_ref=0.1, settle_time=2.0,
           x0=None):
    """Dynamically consistent trajectory tracking the geometric path.

    Builds the smoothstep reference along the path and rolls the
    finite-horizon LQR tracking policy on the nonlinear dynamics from
    x0 (default: at rest at the first knot). The result is a genuine
    rollout: replaying its controls reproduces its states.
    """
    if path.n_q * 2 != desc.n_x:
        raise ContractViolationError(
            f"path has n_q={path.n_q}, robot expects {desc.n_x // 2}")
    if cost is None:
        cost = default_tracking_cost(desc)
    reference = reference_profile(path, h, v_ref, settle_time)
    if x0 is None:
        x0 = np.concatenate([path.states[0], np.zeros(path.n_q)])
    return lqr.track(desc, reference, cost, x0=np.asarray(x0, dtype=float))
