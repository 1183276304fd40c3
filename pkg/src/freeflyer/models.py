"""Built-in robot models.

The free-flyer with a two-link arm mirrors a small cubic assembly robot:
a 7 kg base with a pair of 1 kg links and a 4 kg end effector whose mass
is folded into the distal link through a fixed joint. Arm geometry is
overridable per scenario since only the base properties are published.
"""

import numpy as np

from .dynamics import Body, Joint, RobotDescription
from .errors import ScenarioError


def make_astrobee(link_length=0.15, link_mass=1.0, ee_mass=4.0):
    """Free-flyer with a 2-link arm and a point-mass end effector.

    Base 7 kg / 0.11 kg m^2, links 1 kg / 0.05 kg m^2 with mid-link com,
    end effector mass folded into the distal link.
    """
    half = link_length / 2.0
    bodies = [
        Body("base", 7.0, np.diag([0.11, 0.11, 0.11]), np.zeros(3)),
        Body("arm1", link_mass, np.diag([0.05, 0.05, 0.05]),
             np.array([half, 0.0, 0.0])),
        Body("arm2", link_mass, np.diag([0.05, 0.05, 0.05]),
             np.array([half, 0.0, 0.0])),
        Body("ee", ee_mass, np.zeros((3, 3)), np.zeros(3)),
    ]
    joints = [
        Joint("revolute", "base", "arm1",
              np.array([link_length, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])),
        Joint("revolute", "arm1", "arm2",
              np.array([link_length, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])),
        Joint("fixed", "arm2", "ee", np.array([link_length, 0.0, 0.0])),
    ]
    return RobotDescription("astrobee", bodies, joints, "base")


def make_free_base(mass=7.0, inertia=0.11):
    """Armless free-flying base, 6-dof."""
    return RobotDescription(
        "base_only",
        [Body("base", mass, np.diag([inertia] * 3), np.zeros(3))],
        [], "base")


_BUILDERS = {
    "astrobee": make_astrobee,
    "free_base": make_free_base,
}


def build_robot(spec):
    """Robot from a scenario fragment: a model name or a mapping with a
    ``model`` key plus keyword overrides for that model's builder."""
    if isinstance(spec, str):
        name, kwargs = spec, {}
    elif isinstance(spec, dict):
        if "model" not in spec:
            raise ScenarioError("robot mapping needs a 'model' key")
        name = spec["model"]
        kwargs = {k: v for k, v in spec.items() if k != "model"}
    else:
        raise ScenarioError(f"robot must be a name or mapping, got {type(spec).__name__}")
    if name not in _BUILDERS:
        raise ScenarioError(
            f"unknown robot model '{name}' (available: {sorted(_BUILDERS)})")
    try:
        return _BUILDERS[name](**kwargs)
    except TypeError as exc:
        raise ScenarioError(f"bad robot overrides for '{name}': {exc}") from exc
