"""Finite-horizon LQR: value iteration, steering and tracking.

The stage cost about operating points is

    l_k(dx, du) = 1/2 dx'Q dx + 1/2 du'R du + du'P dx + q'dx + r'du

with terminal 1/2 dx'QN dx + qN'dx + c_term. The backward pass propagates
the full affine value function V_k(dx) = 1/2 dx'S_k dx + s_k'dx + c_k
through x_{k+1} = A_k dx + B_k du + g_k, yielding the affine policy
du_k = K_k dx + l_k. With H = R + B'S'B, M = B'S'A + P and
h = B'(S'g + s') + r:

    K = -H^{-1} M                    l = -H^{-1} h
    S = A'S'A + Q - M'H^{-1}M
    s = q + A'(s' + S'g) - M'H^{-1}h
    c = c' + 1/2 g'S'g + s''g - 1/2 h'H^{-1}h
"""

from dataclasses import dataclass, field

import numpy as np

from . import ltv as ltv_mod
from ._kernels import K as kern
from .errors import (ContractViolationError, RiccatiSymmetryError,
                     SolveFailureError)
from .trajectory import Trajectory

SYMMETRY_TOL = 1e-8


def _sym_check(M, name):
    a = np.asarray(M, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractViolationError(f"{name} must be square, got {a.shape}")
    if np.max(np.abs(a - a.T)) > 1e-9 * max(1.0, np.max(np.abs(a))):
        raise ContractViolationError(f"{name} must be symmetric")
    return 0.5 * (a + a.T)


@dataclass
class QuadraticCost:
    """Constant stage weights; P couples control to state (n_u x n_x)."""
    Q: np.ndarray
    R: np.ndarray
    QN: np.ndarray = None
    P: np.ndarray = None
    q: np.ndarray = None
    r: np.ndarray = None
    qN: np.ndarray = None
    c_term: float = 0.0

    def __post_init__(self):
        self.Q = _sym_check(self.Q, "Q")
        self.R = _sym_check(self.R, "R")
        self.QN = self.Q.copy() if self.QN is None else _sym_check(self.QN, "QN")
        nx, nu = self.Q.shape[0], self.R.shape[0]
        self.P = np.zeros((nu, nx)) if self.P is None else \
            np.asarray(self.P, dtype=float)
        if self.P.shape != (nu, nx):
            raise ContractViolationError(
                f"P must have shape ({nu}, {nx}), got {self.P.shape}")
        self.q = np.zeros(nx) if self.q is None else np.asarray(self.q, float)
        self.r = np.zeros(nu) if self.r is None else np.asarray(self.r, float)
        self.qN = np.zeros(nx) if self.qN is None else np.asarray(self.qN, float)
        if np.min(np.linalg.eigvalsh(self.Q)) < -1e-10:
            raise ContractViolationError("Q must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(self.QN)) < -1e-10:
            raise ContractViolationError("QN must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(self.R)) <= 1e-12:
            raise ContractViolationError("R must be positive definite")
        block = np.block([[self.Q, self.P.T], [self.P, self.R]])
        if np.min(np.linalg.eigvalsh(block)) < -1e-9:
            raise ContractViolationError(
                "stage cost block [[Q, P'], [P, R]] must be positive "
                "semidefinite")

    @property
    def n_x(self):
        return self.Q.shape[0]

    @property
    def n_u(self):
        return self.R.shape[0]


@dataclass
class ValueFunctionSequence:
    """Backward-pass output: V_k(dx) = 1/2 dx'S_k dx + s_k'dx + c_k and the
    affine policy du_k = K_k dx + l_k for k = 0..N-1."""
    S: np.ndarray  # (N+1, nx, nx)
    s: np.ndarray  # (N+1, nx)
    c: np.ndarray  # (N+1,)
    K: np.ndarray  # (N, nu, nx)
    l: np.ndarray  # (N, nu)

    def __len__(self):
        return self.K.shape[0]


def value_iteration_step(A, B, g, cost, Sn, sn, cn):
    """One Bellman backup through x' = A dx + B du + g.

    Returns (S, s, c, K, l) for the stage preceding the value (Sn, sn, cn).
    """
    SB = Sn @ B
    H = cost.R + B.T @ SB
    M = SB.T @ A + cost.P
    hv = B.T @ (Sn @ g + sn) + cost.r
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise SolveFailureError(
            "control Hessian not positive definite") from exc
    HiM = np.linalg.solve(H, M)
    Hih = np.linalg.solve(H, hv)
    S = A.T @ Sn @ A + cost.Q - M.T @ HiM
    asym = np.max(np.abs(S - S.T))
    if asym > SYMMETRY_TOL * max(1.0, np.max(np.abs(S))):
        raise RiccatiSymmetryError(
            f"value matrix symmetry drifted to {asym:.3e}")
    S = 0.5 * (S + S.T)
    s = cost.q + A.T @ (sn + Sn @ g) - M.T @ Hih
    c = cn + 0.5 * g @ Sn @ g + sn @ g - 0.5 * hv @ Hih
    return S, s, float(c), -HiM, -Hih


def riccati_backward_pass(sys, cost):
    """Value iteration over an LTVSystem; len(sys) counts control steps."""
    N = len(sys)
    nx, nu = cost.n_x, cost.n_u
    if sys.A.shape[1:] != (nx, nx) or sys.B.shape[1:] != (nx, nu):
        raise ContractViolationError(
            f"cost dimensions ({nx}, {nu}) do not match the system "
            f"{sys.A.shape[1:]}, {sys.B.shape[1:]}")
    S = np.empty((N + 1, nx, nx))
    s = np.empty((N + 1, nx))
    c = np.empty(N + 1)
    Kg = np.empty((N, nu, nx))
    lg = np.empty((N, nu))
    S[N], s[N], c[N] = cost.QN, cost.qN, cost.c_term
    for k in range(N - 1, -1, -1):
        try:
            S[k], s[k], c[k], Kg[k], lg[k] = value_iteration_step(
                sys.A[k], sys.B[k], sys.g[k], cost, S[k + 1], s[k + 1],
                c[k + 1])
        except SolveFailureError as exc:
            raise SolveFailureError(f"{exc} at step {k}") from exc
    return ValueFunctionSequence(S=S, s=s, c=c, K=Kg, l=lg)


def cost_to_go(vfs, k, dx):
    """V_k(dx) = 1/2 dx'S_k dx + s_k'dx + c_k."""
    dx = np.asarray(dx, dtype=float)
    return float(0.5 * dx @ vfs.S[k] @ dx + vfs.s[k] @ dx + vfs.c[k])


def trajectory_cost(cost, X, U, xref, uref):
    """Accumulated stage + terminal cost of (X, U) about references.

    X has one more row than the applied controls; xref/uref may be single
    vectors (broadcast) or per-knot arrays.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    N = X.shape[0] - 1
    Xr = np.broadcast_to(np.asarray(xref, dtype=float), X.shape)
    Ur = np.broadcast_to(np.asarray(uref, dtype=float), (max(N, 1), U.shape[1]))
    total = 0.0
    for k in range(N):
        dx = X[k] - Xr[k]
        du = U[k] - Ur[k]
        total += 0.5 * dx @ cost.Q @ dx + 0.5 * du @ cost.R @ du \
            + du @ cost.P @ dx + cost.q @ dx + cost.r @ du
    dxN = X[N] - Xr[N]
    total += 0.5 * dxN @ cost.QN @ dxN + cost.qN @ dxN + cost.c_term
    return float(total)


def _constant_system(desc, x_about, h, horizon):
    """Constant-coefficient LTV about (x_about, 0) with the hold defect."""
    u0 = np.zeros(desc.n_u)
    Ac, Bc, _ = kern.linearize(desc.params, x_about, u0)
    Ad, Bd = ltv_mod.discretize(Ac, Bc, h)
    g = kern.rk4_step(desc.params, x_about, u0, h) - x_about
    return ltv_mod.LTVSystem(
        A=np.broadcast_to(Ad, (horizon, *Ad.shape)).copy(),
        B=np.broadcast_to(Bd, (horizon, *Bd.shape)).copy(),
        g=np.broadcast_to(g, (horizon, len(g))).copy(), h=h)


def lqr_steer(desc, x_from, x_to, horizon, cost, h):
    """Steer toward x_to with the affine LQR policy about (x_to, 0).

    The policy from a backward pass of ``horizon`` steps is rolled on the
    nonlinear dynamics; the result is dynamically consistent by
    construction but reaches x_to only approximately.
    """
    x_from = np.ascontiguousarray(x_from, dtype=float)
    x_to = np.ascontiguousarray(x_to, dtype=float)
    if x_from.shape != (desc.n_x,) or x_to.shape != (desc.n_x,):
        raise ContractViolationError(
            f"states must have shape ({desc.n_x},)")
    if horizon < 1:
        raise ContractViolationError(f"horizon must be >= 1, got {horizon}")
    sys = _constant_system(desc, x_to, h, horizon)
    vfs = riccati_backward_pass(sys, cost)
    xbar = np.broadcast_to(x_to, (horizon, desc.n_x))
    ubar = np.zeros((horizon, desc.n_u))
    X, U = kern.affine_rollout(desc.params, x_from, h, xbar, ubar, vfs.K, vfs.l)
    return Trajectory(h=h, states=X, controls=U)


def track(desc, reference, cost, x0=None):
    """Roll the time-varying LQR tracking policy along a reference.

    The reference need not be dynamically consistent: the per-knot defects
    g_k enter the backward pass and the affine terms compensate them. The
    executed trajectory is consistent by construction.
    """
    if reference.n_knots < 2:
        raise ContractViolationError("reference needs at least two knots")
    sys = ltv_mod.build_ltv_along(desc, reference)
    N = reference.n_knots - 1
    steps = ltv_mod.LTVSystem(A=sys.A[:N], B=sys.B[:N], g=sys.g[:N],
                              h=reference.h)
    vfs = riccati_backward_pass(steps, cost)
    x0 = reference.states[0] if x0 is None else \
        np.ascontiguousarray(x0, dtype=float)
    X, U = kern.affine_rollout(
        desc.params, x0, reference.h,
        np.ascontiguousarray(reference.states[:N]),
        np.ascontiguousarray(reference.controls[:N]), vfs.K, vfs.l)
    return Trajectory(h=reference.h, states=X, controls=U, t0=reference.t0)
