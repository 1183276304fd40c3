"""Linear time-varying models along trajectories.

``linearize`` produces continuous-time Jacobians by central differences,
``discretize`` the zero-order-hold step matrices from the degree-4 Taylor
polynomial of the matrix exponential (the same truncation order as the
RK4 integrator, so a linear system discretized here matches the integrator
exactly), and ``build_ltv_along`` assembles the per-knot sequence with the
affine defect g_k = rk4(xbar_k, ubar_k) - xbar_{k+1}.
"""

from dataclasses import dataclass

import numpy as np

from . import dynamics
from ._kernels import K
from .errors import ContractViolationError


@dataclass
class LTVSystem:
    """Discrete-time affine model x_{k+1} = A_k x_k + B_k u_k + c_k around
    operating knots: delta_x_{k+1} = A_k delta_x_k + B_k delta_u_k + g_k."""
    A: np.ndarray          # (N, nx, nx)
    B: np.ndarray          # (N, nx, nu)
    g: np.ndarray          # (N, nx)
    h: float
    x_op: np.ndarray | None = None  # (N, nx) operating states
    u_op: np.ndarray | None = None  # (N, nu) operating controls

    def __len__(self):
        return self.A.shape[0]


def linearize(desc, x, u):
    """Continuous-time Jacobians (A, B) of f about (x, u).

    Central differences with per-coordinate step max(1e-6, 1e-6 |coord|).
    """
    x = np.ascontiguousarray(x, dtype=float)
    u = np.ascontiguousarray(u, dtype=float)
    if x.shape != (desc.n_x,) or u.shape != (desc.n_u,):
        raise ContractViolationError(
            f"expected shapes ({desc.n_x},) and ({desc.n_u},), got "
            f"{x.shape} and {u.shape}")
    A, B, _ = K.linearize(desc.params, x, u)
    return A, B


def discretize(A, B, h):
    """Zero-order-hold step matrices from the degree-4 exponential Taylor.

    A_d = I + hA + h^2 A^2/2! + h^3 A^3/3! + h^4 A^4/4!
    B_d = (hI + h^2 A/2! + h^3 A^2/3! + h^4 A^3/4!) B
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
        raise ContractViolationError(
            f"incompatible Jacobian shapes {A.shape} and {B.shape}")
    if not (np.isfinite(h) and h > 0.0):
        raise ContractViolationError(f"step size must be positive, got {h}")
    n = A.shape[0]
    eye = np.eye(n)
    A2 = A @ A
    A3 = A2 @ A
    A4 = A3 @ A
    Ad = eye + h * A + (h * h / 2.0) * A2 + (h ** 3 / 6.0) * A3 \
        + (h ** 4 / 24.0) * A4
    Bd = (h * eye + (h * h / 2.0) * A + (h ** 3 / 6.0) * A2
          + (h ** 4 / 24.0) * A3) @ B
    return Ad, Bd


def build_ltv_along(desc, traj):
    """Discrete LTV sequence along a trajectory's knots.

    One (A_k, B_k, g_k) triple per knot. The defect
    g_k = rk4(xbar_k, ubar_k) - xbar_{k+1} vanishes on dynamically
    consistent trajectories; the final knot, having no successor, is
    differenced against itself (zero for an equilibrium hold).
    """
    X = traj.states
    U = traj.controls
    N = X.shape[0]
    A = np.empty((N, desc.n_x, desc.n_x))
    B = np.empty((N, desc.n_x, desc.n_u))
    g = np.empty((N, desc.n_x))
    for k in range(N):
        Ac, Bc, _ = K.linearize(desc.params, np.ascontiguousarray(X[k]),
                                np.ascontiguousarray(U[k]))
        A[k], B[k] = discretize(Ac, Bc, traj.h)
        nxt = X[k + 1] if k + 1 < N else X[k]
        g[k] = K.rk4_step(desc.params, np.ascontiguousarray(X[k]),
                          np.ascontiguousarray(U[k]), traj.h) - nxt
    return LTVSystem(A=A, B=B, g=g, h=traj.h, x_op=X.copy(), u_op=U.copy())
