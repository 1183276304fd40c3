"""Motion planning and control for free-flying manipulators.

Modules: dynamics (multibody model), ltv (linearization/discretization),
lqr (finite-horizon value iteration, steering, tracking), planner
(kinodynamic RRT*), smoother (shortcutting and retiming), collision
(ellipsoid keep-out zones), nmpc (single-shooting MPC with a PANOC solver)
and harness (assembly scenarios and the CLI entry point).
"""

from ._kernels import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
