"""Time-stamped state/control trajectories and their file format.

A trajectory holds knots at uniform spacing ``h``: states (M, n_x) and
controls (M, n_u) where controls row ``k`` is applied over
[t_k, t_{k+1}); the final control row is zero padding so both arrays have
one row per knot. ``dynamically_consistent`` records whether every state
knot is the integrator image of its predecessor under the stored control.
"""

from dataclasses import dataclass, field

import numpy as np

from . import dynamics
from .errors import ContractViolationError


def _state_columns(n_m):
    cols = ["r_x", "r_y", "r_z", "roll", "pitch", "yaw"]
    cols += [f"q_{i + 1}" for i in range(n_m)]
    cols += ["v_x", "v_y", "v_z", "roll_rate", "pitch_rate", "yaw_rate"]
    cols += [f"qdot_{i + 1}" for i in range(n_m)]
    return cols


def _control_columns(n_m):
    return ["f_x", "f_y", "f_z", "tau_x", "tau_y", "tau_z"] + \
        [f"tau_q{i + 1}" for i in range(n_m)]


@dataclass
class Trajectory:
    h: float
    states: np.ndarray
    controls: np.ndarray
    dynamically_consistent: bool = True
    t0: float = 0.0

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.controls = np.atleast_2d(np.asarray(self.controls, dtype=float))
        if self.controls.shape[0] == self.states.shape[0] - 1:
            # accept the natural (M-1) control rows and pad the terminal knot
            self.controls = np.vstack(
                [self.controls, np.zeros((1, self.controls.shape[1]))])
        if self.controls.shape[0] != self.states.shape[0]:
            raise ContractViolationError(
                f"controls rows {self.controls.shape[0]} do not match "
                f"state knots {self.states.shape[0]}")
        if not (np.isfinite(self.h) and self.h > 0.0):
            raise ContractViolationError(f"step size must be positive, got {self.h}")

    @property
    def n_knots(self):
        return self.states.shape[0]

    @property
    def n_x(self):
        return self.states.shape[1]

    @property
    def n_u(self):
        return self.controls.shape[1]

    @property
    def n_m(self):
        return self.states.shape[1] // 2 - 6

    @property
    def duration(self):
        return (self.n_knots - 1) * self.h

    @property
    def times(self):
        return self.t0 + self.h * np.arange(self.n_knots)

    @property
    def positions(self):
        """Base translation track, (M, 3)."""
        return self.states[:, 0:3]

    @property
    def configurations(self):
        return self.states[:, 0:self.states.shape[1] // 2]

    def consistency_defect(self, desc):
        """Largest gap between each knot and the integrated predecessor."""
        worst = 0.0
        for k in range(self.n_knots - 1):
            pred = dynamics.rk4_step(desc, self.states[k], self.controls[k], self.h)
            worst = max(worst, float(np.max(np.abs(pred - self.states[k + 1]))))
        return worst

    def concatenated(self, other):
        """Join a trajectory that starts at this one's final knot."""
        if abs(other.h - self.h) > 1e-12:
            raise ContractViolationError("step sizes differ")
        if not np.allclose(other.states[0], self.states[-1], atol=1e-9):
            raise ContractViolationError("segment does not start at the seam knot")
        states = np.vstack([self.states[:-1], other.states])
        controls = np.vstack([self.controls[:-1], other.controls])
        return Trajectory(self.h, states, controls,
                          dynamically_consistent=(self.dynamically_consistent
                                                  and other.dynamically_consistent),
                          t0=self.t0)

    def save(self, path):
        """Write the delimited text form: t, state columns, control columns."""
        n_m = self.n_m
        header = ",".join(["t"] + _state_columns(n_m) + _control_columns(n_m))
        data = np.column_stack([self.times, self.states, self.controls])
        np.savetxt(path, data, fmt="%.17g", delimiter=",", header=header,
                   comments="")

    @classmethod
    def load(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        cols = data.shape[1]
        n_m = (cols - 19) // 3
        n_x = 2 * (6 + n_m)
        n_u = 6 + n_m
        if cols != 1 + n_x + n_u or n_m < 0:
            raise ContractViolationError(
                f"trajectory file has {cols} columns; expected 1 + n_x + n_u")
        t = data[:, 0]
        h = float(t[1] - t[0]) if len(t) > 1 else 1.0
        if len(t) > 2 and np.max(np.abs(np.diff(t) - h)) > 1e-9:
            raise ContractViolationError("trajectory timestamps are not uniform")
        return cls(h=h, states=data[:, 1:1 + n_x],
                   controls=data[:, 1 + n_x:], t0=float(t[0]))
