"""Free-flyer multibody dynamics.

A robot is a rigid base with a serial chain of revolute-joint links; a
terminal body may be attached through a ``fixed`` joint and is folded into
its parent at compile time. The generalized coordinates are

    y = (r, theta, q_m)

with ``r`` the base position, ``theta`` the Z-Y-X Euler angles stored as
(roll, pitch, yaw), and ``q_m`` the joint angles. The state stacks
``x = (y, ydot)`` (dimension ``2 * (6 + n_m)``) and the control is the
generalized force ``u`` on ``y`` (base wrench plus joint torques,
dimension ``6 + n_m``), so the equations of motion are

    G(y) ydotdot + D(y, ydot) ydot = u.
"""

from dataclasses import dataclass, field

import numpy as np

from ._kernels import K, reference
from .errors import ConfigurationError, ContractViolationError

MAX_JOINTS = 8  # compiled-kernel stack buffers are sized for this

PITCH_GUARD = reference.PITCH_GUARD

euler_to_rotation = reference.euler_to_rotation
euler_rate_matrix = reference.euler_rate_matrix


def _vec3(v, what):
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        raise ConfigurationError(f"{what}: expected 3 finite numbers, got {v!r}")
    return a


def _inertia_matrix(value, what):
    a = np.asarray(value, dtype=float)
    if a.shape == (3,):
        a = np.diag(a)
    if a.shape != (3, 3) or not np.all(np.isfinite(a)):
        raise ConfigurationError(f"{what}: expected a 3-vector diagonal or 3x3 matrix")
    if not np.allclose(a, a.T, atol=1e-9):
        raise ConfigurationError(f"{what}: inertia must be symmetric")
    if np.min(np.linalg.eigvalsh(a)) < -1e-9:
        raise ConfigurationError(f"{what}: inertia must be positive semidefinite")
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class Body:
    name: str
    mass: float
    inertia: np.ndarray  # (3, 3) about the com, body-frame axes
    com: np.ndarray = field(default_factory=lambda: np.zeros(3))  # (3,) in body frame


@dataclass(frozen=True)
class Joint:
    """Connection from ``parent`` to ``child``.

    ``origin`` is the joint position in the parent frame. Revolute joints
    rotate the child frame about ``axis`` (unit, parent frame); ``fixed``
    joints rigidly attach the child with identity rotation.
    """
    type: str
    parent: str
    child: str
    origin: np.ndarray
    axis: np.ndarray | None = None


@dataclass
class RobotState:
    """Named view of one state vector."""
    r: np.ndarray
    theta: np.ndarray
    q_m: np.ndarray
    rdot: np.ndarray
    theta_dot: np.ndarray
    qdot_m: np.ndarray

    def to_vector(self):
        return np.concatenate([self.r, self.theta, self.q_m,
                               self.rdot, self.theta_dot, self.qdot_m])

    @classmethod
    def from_vector(cls, x, n_m):
        x = np.asarray(x, dtype=float)
        n = 6 + n_m
        if x.shape != (2 * n,):
            raise ContractViolationError(
                f"state must have shape ({2 * n},), got {x.shape}")
        return cls(r=x[0:3].copy(), theta=x[3:6].copy(), q_m=x[6:n].copy(),
                   rdot=x[n:n + 3].copy(), theta_dot=x[n + 3:n + 6].copy(),
                   qdot_m=x[n + 6:].copy())


@dataclass
class ControlInput:
    """Base wrench (force, torque) plus joint torques."""
    force: np.ndarray
    torque: np.ndarray
    joint_torques: np.ndarray

    def to_vector(self):
        return np.concatenate([self.force, self.torque, self.joint_torques])

    @classmethod
    def from_vector(cls, u, n_m):
        u = np.asarray(u, dtype=float)
        if u.shape != (6 + n_m,):
            raise ContractViolationError(
                f"control must have shape ({6 + n_m},), got {u.shape}")
        return cls(force=u[0:3].copy(), torque=u[3:6].copy(),
                   joint_torques=u[6:].copy())


class RobotDescription:
    """Validated robot model compiled to flat kernel parameters.

    ``n_m`` counts revolute joints; fixed-joint children are merged into
    their parent body (composite mass, com and inertia about the new com).
    """

    def __init__(self, name, bodies, joints, base):
        self.name = name
        self.bodies = list(bodies)
        self.joints = list(joints)
        self.base = base
        self._compile()

    @property
    def n_m(self):
        return self._n_m

    @property
    def n_q(self):
        return 6 + self._n_m

    @property
    def n_x(self):
        return 2 * (6 + self._n_m)

    @property
    def n_u(self):
        return 6 + self._n_m

    @property
    def params(self):
        return self._params

    @property
    def joint_names(self):
        return list(self._joint_names)

    @classmethod
    def from_dict(cls, d):
        """Build from a parsed description dictionary (see scenarios/*.yaml)."""
        try:
            bodies = [Body(name=b["name"], mass=float(b["mass"]),
                           inertia=_inertia_matrix(b.get("inertia", np.zeros(3)),
                                                   f"body {b['name']}"),
                           com=_vec3(b.get("com", (0, 0, 0)), f"body {b['name']} com"))
                      for b in d["bodies"]]
            joints = [Joint(type=j.get("type", "revolute"), parent=j["parent"],
                            child=j["child"],
                            origin=_vec3(j.get("origin", (0, 0, 0)),
                                         f"joint {j['parent']}->{j['child']} origin"),
                            axis=(_vec3(j["axis"], "joint axis")
                                  if j.get("axis") is not None else None))
                      for j in d.get("joints", [])]
        except KeyError as exc:
            raise ConfigurationError(f"robot description missing key {exc}") from exc
        return cls(name=d.get("name", "robot"), bodies=bodies, joints=joints,
                   base=d.get("base", d["bodies"][0]["name"]))

    def _compile(self):
        by_name = {}
        for b in self.bodies:
            if b.name in by_name:
                raise ConfigurationError(f"duplicate body name {b.name!r}")
            if not (np.isfinite(b.mass) and b.mass > 0.0):
                raise ConfigurationError(f"body {b.name!r}: mass must be positive")
            by_name[b.name] = Body(b.name, float(b.mass),
                                   _inertia_matrix(b.inertia, f"body {b.name}"),
                                   _vec3(b.com, f"body {b.name} com"))
        if self.base not in by_name:
            raise ConfigurationError(f"base body {self.base!r} not defined")

        children = {}
        for j in self.joints:
            if j.type not in ("revolute", "fixed"):
                raise ConfigurationError(f"unknown joint type {j.type!r}")
            for end in (j.parent, j.child):
                if end not in by_name:
                    raise ConfigurationError(f"joint references unknown body {end!r}")
            children.setdefault(j.parent, []).append(j)
        claimed = [j.child for j in self.joints]
        if len(set(claimed)) != len(claimed):
            raise ConfigurationError("a body has two parent joints")
        if self.base in claimed:
            raise ConfigurationError("base body cannot be a joint child")

        # Walk the serial revolute chain, folding fixed children into their
        # parent as they are encountered.
        def fold(body, fixed_joints):
            m, c, I = body.mass, body.com.copy(), body.inertia.copy()
            for j in fixed_joints:
                child = by_name[j.child]
                if children.get(j.child):
                    raise ConfigurationError(
                        f"fixed body {j.child!r} must be terminal")
                if np.linalg.norm(child.com) > 1e-12:
                    p2 = j.origin + child.com
                else:
                    p2 = j.origin
                m2 = child.mass
                mc = m + m2
                cc = (m * c + m2 * p2) / mc
                d1, d2 = c - cc, p2 - cc

                def K(d):
                    return (d @ d) * np.eye(3) - np.outer(d, d)

                I = I + m * K(d1) + child.inertia + m2 * K(d2)
                m, c = mc, cc
            return m, c, I

        masses, coms, inertias = [], [], []
        jorg, jax, jnames = [], [], []
        current = self.base
        while True:
            js = children.get(current, [])
            fixed = [j for j in js if j.type == "fixed"]
            rev = [j for j in js if j.type == "revolute"]
            if len(rev) > 1:
                raise ConfigurationError(
                    f"body {current!r} has {len(rev)} revolute children; "
                    "only serial chains are supported")
            m, c, I = fold(by_name[current], fixed)
            masses.append(m)
            coms.append(c)
            inertias.append(I)
            if not rev:
                break
            j = rev[0]
            if j.axis is None:
                raise ConfigurationError(
                    f"revolute joint {j.parent}->{j.child} needs an axis")
            norm = np.linalg.norm(j.axis)
            if abs(norm - 1.0) > 1e-6:
                raise ConfigurationError(
                    f"joint axis {j.axis} must be unit length")
            jorg.append(j.origin)
            jax.append(j.axis / norm)
            jnames.append(j.child)
            current = j.child

        reached = {self.base, *jnames,
                   *(j.child for j in self.joints if j.type == "fixed")}
        unreached = set(by_name) - reached
        if unreached:
            raise ConfigurationError(f"bodies not connected to the base: "
                                     f"{sorted(unreached)}")
        n_m = len(jnames)
        if n_m > MAX_JOINTS:
            raise ConfigurationError(
                f"{n_m} revolute joints exceeds the supported maximum "
                f"{MAX_JOINTS}")
        self._n_m = n_m
        self._joint_names = jnames
        self._params = (np.array(masses), np.array(coms),
                        np.array(inertias),
                        np.array(jorg).reshape(n_m, 3),
                        np.array(jax).reshape(n_m, 3))


def _as_state(desc, x):
    a = np.ascontiguousarray(x, dtype=float).reshape(-1)
    if a.shape != (desc.n_x,):
        raise ContractViolationError(
            f"state must have shape ({desc.n_x},), got {np.shape(x)}")
    return a


def _as_control(desc, u):
    a = np.ascontiguousarray(u, dtype=float).reshape(-1)
    if a.shape != (desc.n_u,):
        raise ContractViolationError(
            f"control must have shape ({desc.n_u},), got {np.shape(u)}")
    return a


def _as_config(desc, y):
    """Accept a configuration (n_q,) or a full state (n_x,)."""
    a = np.ascontiguousarray(y, dtype=float).reshape(-1)
    if a.shape == (desc.n_x,):
        return a[:desc.n_q]
    if a.shape != (desc.n_q,):
        raise ContractViolationError(
            f"expected configuration ({desc.n_q},) or state ({desc.n_x},), "
            f"got {np.shape(y)}")
    return a


def mass_matrix(desc, y):
    """Generalized mass matrix G(y); accepts a configuration or full state."""
    return K.mass_matrix(desc.params, _as_config(desc, y))


def bias_forces(desc, x):
    """Velocity-product forces D(y, ydot) ydot for a full state."""
    x = _as_state(desc, x)
    n = desc.n_q
    return K.bias_forces(desc.params, x[:n], x[n:])


def forward_dynamics(desc, x, u):
    """State derivative f(x, u)."""
    return K.dynamics(desc.params, _as_state(desc, x), _as_control(desc, u))


def rk4_step(desc, x, u, h):
    """One classical Runge-Kutta step of length h under zero-order hold."""
    if not (np.isfinite(h) and h > 0.0):
        raise ContractViolationError(f"step size must be positive, got {h}")
    return K.rk4_step(desc.params, _as_state(desc, x), _as_control(desc, u),
                      float(h))


def kinetic_energy(desc, x):
    x = _as_state(desc, x)
    n = desc.n_q
    return reference.kinetic_energy(desc.params, x[:n], x[n:])


def linear_momentum(desc, x):
    x = _as_state(desc, x)
    n = desc.n_q
    return reference.linear_momentum(desc.params, x[:n], x[n:])


def body_frames(desc, y):
    """World rotations and com positions of the compiled bodies."""
    return reference.body_frames(desc.params, _as_config(desc, y))
