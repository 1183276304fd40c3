"""Single-shooting nonlinear MPC solved by a PANOC-style method.

The tracking problem over a prediction horizon is reduced to an
unconstrained-but-projectable problem in the stacked control sequence:
states are eliminated by rolling the nonlinear dynamics forward, the
gradient comes from an adjoint sweep through the rollout, obstacle
keep-out zones enter as quadratic penalties on max[0, residual], and
control box bounds are handled by projection. The solver combines
projected-gradient (forward-backward) steps with L-BFGS directions on
the fixed-point residual, accepted by a line search on the
forward-backward envelope.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import collision as coll
from . import lqr
from . import ltv
from ._kernels import K as kern
from .errors import (ConfigurationError, ContractViolationError,
                     DivergedRolloutError, NumericalOverflowError,
                     SingularityError, SolveFailureError)
from .trajectory import Trajectory

_ALPHA = 0.95        # gamma = _ALPHA / L
_SIGMA = 0.01        # sufficient-decrease coefficient on the envelope
_L_MAX = 1e12
_MAX_TAU_HALVINGS = 20


@dataclass
class Box:
    """Axis-aligned projectable set; None bounds mean unbounded."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != self.hi.shape:
            raise ConfigurationError("box bounds must share a shape")
        if np.any(self.lo > self.hi):
            raise ConfigurationError("box requires lo <= hi")

    def project(self, u):
        return np.clip(u, self.lo, self.hi)

    def tile(self, n):
        """Box for n stacked copies of this bound."""
        return Box(lo=np.tile(self.lo, n), hi=np.tile(self.hi, n))


@dataclass
class ParametricProblem:
    """Problem data for panoc_solve.

    cost_and_grad maps the stacked decision vector to (value, gradient).
    box is the projectable set (None = all space). f1/c_project hold an
    equality-constraint mapping onto a convex target set for augmented
    Lagrangian treatment (unused by the shipped problems, kept as part
    of the problem shape); f2 maps the decision vector to inequality
    violations used by the outer penalty loop for reporting.
    """

    n_v: int
    cost_and_grad: callable
    box: Box = None
    f1: callable = None
    c_project: callable = None
    f2: callable = None

    def project(self, u):
        return u if self.box is None else self.box.project(u)


@dataclass
class MpcConfig:
    """Receding-horizon and solver settings.

    The tolerance applies to the 2-norm of the fixed-point residual.
    1e-3 is enough in closed loop: the applied control stops changing
    well before the residual bottoms out, and the slow tail of the
    quasi-Newton iteration on stiff tracking problems (light arm links
    driven against a heavy terminal weight) buys no tracking accuracy.
    max_inner_iterations doubles as a real-time style truncation knob:
    a capped solve returns the best iterate and the receding horizon
    carries on, re-polishing from the warm start at the next step.

    preconditioned solves each window in the metric of its Gauss-Newton
    Hessian (built from the LTV linearization along the reference), which
    collapses the temporal ill-conditioning of the shooting cost; it
    applies only when control_box is None, since the change of variables
    would warp a box into a general polytope.
    """

    horizon: int = 10
    h: float = 0.1
    tolerance: float = 1e-3
    max_inner_iterations: int = 500
    lbfgs_memory: int = 10
    penalty_initial: float = 10.0
    penalty_growth: float = 10.0
    max_outer_iterations: int = 5
    constraint_tolerance: float = 1e-3
    control_box: Box = None
    cost: lqr.QuadraticCost = None
    preconditioned: bool = True

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        if self.tolerance <= 0:
            raise ConfigurationError("tolerance must be positive")
        if self.penalty_growth <= 1.0:
            raise ConfigurationError("penalty growth factor must be > 1")
        if self.lbfgs_memory < 0 or self.max_inner_iterations < 1 \
                or self.max_outer_iterations < 1:
            raise ConfigurationError("iteration/memory budgets must be positive")
        if self.h <= 0:
            raise ConfigurationError("h must be positive")


@dataclass
class SolverState:
    """Terminal solver state. ``iterations`` counts update steps
    actually applied; the convergence check that ends the run is not a
    step."""

    u: np.ndarray
    gamma: float
    lipschitz: float
    residual: float
    iterations: int
    status: str
    cost: float
    n_cost_evals: int
    n_fallbacks: int
    fbe_history: list = field(default_factory=list)


@dataclass
class StepDiagnostics:
    step: int
    solve_time_ms: float
    inner_iterations: int
    outer_iterations: int
    residual: float
    max_violation: float
    cost: float
    status: str
    # (penalty weight, max violation) after each outer round
    outer_history: list = field(default_factory=list)


@dataclass
class ShootingData:
    """Parameters of one tracking window (the p of the parametric
    problem): initial state, reference slice, weights, obstacle data,
    and penalty weight."""

    desc: object
    x0: np.ndarray
    xref: np.ndarray
    uref: np.ndarray
    cost: lqr.QuadraticCost
    h: float
    obs_P: np.ndarray
    obs_c: np.ndarray
    mu: float

    @property
    def n_steps(self):
        return self.uref.shape[0]


def rollout_cost_and_gradient(problem, U, x0=None):
    """Cost and adjoint gradient of the single-shooting problem.

    U may be (N, n_u) or flat (N*n_u,); the gradient is always flat.
    A rollout that leaves the representable range raises
    DivergedRolloutError.
    """
    sd = problem
    x0 = sd.x0 if x0 is None else np.asarray(x0, dtype=float)
    nu = sd.desc.n_u
    Uarr = np.ascontiguousarray(
        np.asarray(U, dtype=float).reshape(sd.n_steps, nu))
    try:
        return kern.shooting_cost_grad(
            sd.desc.params, np.ascontiguousarray(x0), Uarr, sd.h,
            sd.xref, sd.uref, sd.cost.Q, sd.cost.R, sd.cost.QN,
            sd.obs_P, sd.obs_c, sd.mu)
    except (NumericalOverflowError, SolveFailureError,
            SingularityError) as exc:
        # any dynamics failure along the rollout (overflow, lost
        # positive definiteness, attitude singularity) makes this
        # control sequence unusable
        raise DivergedRolloutError(
            f"shooting rollout diverged: {exc}") from exc


def _obstacle_arrays(field_, n_knots, start_index):
    """Stacked inflated shape matrices (m,3,3) and per-knot centers
    (n_knots, m, 3) for the penalty kernel."""
    if field_ is None or field_.n_obs == 0:
        return np.zeros((0, 3, 3)), np.zeros((n_knots, 0, 3))
    P = np.ascontiguousarray([o.effective_P for o in field_.obstacles])
    C = np.empty((n_knots, field_.n_obs, 3))
    for j, o in enumerate(field_.obstacles):
        for k in range(n_knots):
            C[k, j] = o.center_at(start_index + k)
    return P, C


def shooting_problem(desc, x0, xref, uref, cost, obstacles=None, mu=0.0,
                     h=0.1, box=None, start_index=0):
    """ParametricProblem for one MPC window."""
    xref = np.ascontiguousarray(xref, dtype=float)
    uref = np.ascontiguousarray(uref, dtype=float)
    N = uref.shape[0]
    if xref.shape != (N + 1, desc.n_x):
        raise ContractViolationError(
            f"xref must be ({N + 1}, {desc.n_x}), got {xref.shape}")
    if (np.any(cost.P) or np.any(cost.q) or np.any(cost.r)
            or np.any(cost.qN) or cost.c_term != 0.0):
        raise ConfigurationError(
            "shooting cost supports only the Q/R/QN weights; "
            "cross and affine terms are not modeled")
    obs_P, obs_c = _obstacle_arrays(obstacles, N + 1, start_index)
    sd = ShootingData(desc=desc, x0=np.asarray(x0, dtype=float),
                      xref=xref, uref=uref, cost=cost, h=h,
                      obs_P=obs_P, obs_c=obs_c, mu=mu)

    def f2(U):
        X = kern.rollout(desc.params,
                         np.ascontiguousarray(sd.x0),
                         np.ascontiguousarray(
                             np.asarray(U, dtype=float).reshape(N,
                                                                desc.n_u)),
                         h)
        if obstacles is None or obstacles.n_obs == 0:
            return np.zeros(0)
        res = coll.trajectory_constraint(obstacles, X[1:, :3],
                                         start_index=start_index + 1)
        return np.maximum(0.0, res)

    stacked_box = box.tile(N) if box is not None else None
    return ParametricProblem(
        n_v=N * desc.n_u,
        cost_and_grad=lambda U: rollout_cost_and_gradient(sd, U),
        box=stacked_box, f2=f2)


def _initial_lipschitz(cost_and_grad, u, g):
    """Two-point gradient-difference estimate of the local Lipschitz
    constant, floored away from zero.

    The probe step must sit well above the gradient's own noise floor:
    shooting gradients come from finite-difference Jacobians, so a
    probe near the Jacobian step would measure noise, grossly inflate
    L, and stall the solver on a microscopic gamma (gamma never grows
    back in this scheme, it only shrinks).
    """
    delta = np.maximum(1e-3, 1e-3 * np.abs(u))
    _, g2 = cost_and_grad(u + delta)
    L = float(np.linalg.norm(g2 - g) / np.linalg.norm(delta))
    if not np.isfinite(L):
        return 1.0
    return max(L, 1e-6)


def _lbfgs_direction(r, S, Y):
    """Two-loop recursion for d = -H r over stored (s, y) pairs."""
    q = r.copy()
    alphas = []
    rhos = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append(a)
        rhos.append(rho)
    if S:
        s, y = S[-1], Y[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), a, rho in zip(zip(S, Y), reversed(alphas), reversed(rhos)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def panoc_solve(problem, U0, config, debug=False):
    """Minimize the problem cost over its box from U0.

    Returns (U*, SolverState) with U* the projected iterate whose
    fixed-point residual ||u - proj(u - gamma grad)|| / gamma (2-norm)
    is at or below config.tolerance, or the best iterate with status
    "max_iterations". The forward-backward envelope is non-increasing
    across accepted steps for a fixed gamma; gamma only shrinks, and
    shrinks only when the local descent inequality fails.
    """
    evals = [0]
    raw = problem.cost_and_grad

    def cg(u):
        # diverged trial points act as infinite cost so the step logic
        # (L doubling, tau halving) backs away from them on its own
        evals[0] += 1
        try:
            return raw(u)
        except DivergedRolloutError:
            return np.inf, np.full(u.shape, np.nan)

    u = problem.project(np.asarray(U0, dtype=float).ravel().copy())
    f_u, g_u = cg(u)
    if not np.isfinite(f_u):
        raise DivergedRolloutError("initial iterate has non-finite cost")
    L = _initial_lipschitz(cg, u, g_u)
    gamma = _ALPHA / L
    S, Y = [], []
    prev_u = prev_r = None
    n_fallbacks = 0
    history = []
    status = "max_iterations"
    it = 0

    def fb_quantities(u, f_u, g_u, gamma):
        ubar = problem.project(u - gamma * g_u)
        diff = ubar - u
        r = -diff / gamma
        phi = f_u + g_u @ diff + (diff @ diff) / (2.0 * gamma)
        return ubar, r, phi

    ubar, r_vec, phi = fb_quantities(u, f_u, g_u, gamma)
    f_ubar, g_ubar = cg(ubar)
    steps = 0

    for it in range(1, config.max_inner_iterations + 1):
        # lazy Lipschitz adaptation: enforce the descent inequality at
        # the current forward-backward pair, doubling L until it holds
        while (f_ubar > f_u + g_u @ (ubar - u)
               + 0.5 * L * np.sum((ubar - u) ** 2)
               + 1e-10 * (1.0 + abs(f_u)) and L < _L_MAX):
            L *= 2.0
            gamma = _ALPHA / L
            S.clear()
            Y.clear()
            prev_u = prev_r = None
            ubar, r_vec, phi = fb_quantities(u, f_u, g_u, gamma)
            f_ubar, g_ubar = cg(ubar)

        rnorm = float(np.linalg.norm(r_vec))
        if debug:
            history.append((it, gamma, phi))
        if not np.isfinite(rnorm):
            raise DivergedRolloutError("solver residual is non-finite")
        if rnorm <= config.tolerance:
            status = "converged"
            u, f_u = ubar, f_ubar
            break

        if prev_u is not None and config.lbfgs_memory > 0:
            s = u - prev_u
            y = r_vec - prev_r
            sy = s @ y
            if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
                S.append(s)
                Y.append(y)
                if len(S) > config.lbfgs_memory:
                    S.pop(0)
                    Y.pop(0)
        prev_u, prev_r = u, r_vec

        d = _lbfgs_direction(r_vec, S, Y) if S else -gamma * r_vec
        tau = 1.0
        accepted = False
        target = phi - _SIGMA * gamma * rnorm * rnorm
        for _ in range(_MAX_TAU_HALVINGS + 1):
            u_c = u - (1.0 - tau) * gamma * r_vec + tau * d
            f_c, g_c = cg(u_c)
            if np.isfinite(f_c):
                ubar_c, r_c, phi_c = fb_quantities(u_c, f_c, g_c, gamma)
                if phi_c <= target:
                    accepted = True
                    break
            tau *= 0.5
        if accepted:
            u, f_u, g_u = u_c, f_c, g_c
            ubar, r_vec, phi = ubar_c, r_c, phi_c
            f_ubar, g_ubar = cg(ubar)
        else:
            # pure forward-backward fallback (tau = 0): guaranteed to
            # decrease the envelope once gamma matches the local L
            n_fallbacks += 1
            u, f_u, g_u = ubar, f_ubar, g_ubar
            ubar, r_vec, phi = fb_quantities(u, f_u, g_u, gamma)
            f_ubar, g_ubar = cg(ubar)
        steps = it

    state = SolverState(u=u, gamma=gamma, lipschitz=L,
                        residual=float(np.linalg.norm(r_vec)),
                        iterations=steps, status=status, cost=f_u,
                        n_cost_evals=evals[0], n_fallbacks=n_fallbacks,
                        fbe_history=history)
    return u, state


def _reference_window(reference, k, horizon, desc):
    """(xref, uref) for the window starting at knot k, padded by holding
    the final reference state (controls pad with zeros)."""
    states = reference.states
    controls = reference.controls
    n = states.shape[0]
    idx = np.minimum(np.arange(k, k + horizon + 1), n - 1)
    xref = states[idx]
    uref = np.zeros((horizon, desc.n_u))
    m = max(0, min(horizon, n - 1 - k))
    if m > 0:
        uref[:m] = controls[k:k + m]
    return np.ascontiguousarray(xref), np.ascontiguousarray(uref)


def _gauss_newton_factor(desc, xref, uref, cost, h):
    """Cholesky factor of the window's Gauss-Newton Hessian.

    The shooting cost is a least-squares composition through the
    rollout, so its curvature is captured by G^T blkdiag(Q,..,Q,QN) G
    + I kron R, where G stacks the LTV sensitivities of the window
    states to the window controls. Solving in this metric flattens the
    temporal coupling (a terminal weight reached through light, fast
    links) that otherwise pushes the raw Lipschitz constant four to
    five orders of magnitude above the control-cost floor and starves
    the forward-backward steps.
    """
    N = uref.shape[0]
    n_x, n_u = desc.n_x, desc.n_u
    window = Trajectory(h=h, states=xref,
                        controls=np.vstack([uref, np.zeros((1, n_u))]),
                        dynamically_consistent=False)
    sys = ltv.build_ltv_along(desc, window)
    G = np.zeros((N * n_x, N * n_u))
    for k in range(N):
        P = sys.B[k]
        for j in range(k + 1, N + 1):
            G[(j - 1) * n_x:j * n_x, k * n_u:(k + 1) * n_u] = P
            if j <= N - 1:
                P = sys.A[j] @ P
    blkQ = np.kron(np.eye(N), cost.Q)
    blkQ[-n_x:, -n_x:] = cost.QN
    H = G.T @ blkQ @ G + np.kron(np.eye(N), cost.R)
    return np.linalg.cholesky(H)


def _scaled_problem(problem, M):
    """The problem rewritten in v = M^T u coordinates (M lower
    triangular, M M^T the Gauss-Newton Hessian), where the curvature is
    near identity. Only valid without a box: a box in u is not a box
    in v."""
    raw = problem.cost_and_grad

    def cost_and_grad(v):
        f, g = raw(np.linalg.solve(M.T, v))
        return f, np.linalg.solve(M, g)

    return ParametricProblem(n_v=problem.n_v, cost_and_grad=cost_and_grad)


def mpc_step(desc, x_now, reference, obstacles, config, u_warm=None,
             start_index=0):
    """One receding-horizon step: build the window problem, escalate the
    obstacle penalty until clear (or the outer budget is spent), and
    return (first control, full sequence, diagnostics).

    reference is a Trajectory whose knot 0 corresponds to now; windows
    shorter than the horizon hold their final state. u_warm is the
    previous solution (N, n_u), shifted internally by one step. With
    config.preconditioned (and no control box) the inner solves run in
    the Gauss-Newton metric of the window; the reported residual is
    measured in that metric.
    """
    t0 = time.perf_counter()
    cost = config.cost if config.cost is not None else _default_cost(desc)
    N = config.horizon
    x_now = np.asarray(x_now, dtype=float)
    xref, uref = _reference_window(reference, 0, N, desc)

    if u_warm is not None:
        u_warm = np.asarray(u_warm, dtype=float).reshape(N, desc.n_u)
        U0 = np.vstack([u_warm[1:], u_warm[-1:]]).ravel()
    else:
        U0 = uref.ravel().copy()

    M = None
    if config.preconditioned and config.control_box is None:
        try:
            M = _gauss_newton_factor(desc, xref, uref, cost, config.h)
        except np.linalg.LinAlgError:
            M = None

    has_obs = obstacles is not None and obstacles.n_obs > 0
    mu = config.penalty_initial if has_obs else 0.0
    inner_total = 0
    outer_history = []
    U_star, state = None, None
    viol = 0.0
    for outer in range(config.max_outer_iterations if has_obs else 1):
        problem = shooting_problem(desc, x_now, xref, uref, cost,
                                   obstacles=obstacles, mu=mu, h=config.h,
                                   box=config.control_box,
                                   start_index=start_index)
        if M is not None:
            v_star, state = panoc_solve(_scaled_problem(problem, M),
                                        M.T @ U0, config)
            U_star = np.linalg.solve(M.T, v_star)
        else:
            U_star, state = panoc_solve(problem, U0, config)
        inner_total += state.iterations
        viol = float(problem.f2(U_star).max(initial=0.0))
        outer_history.append((mu, viol))
        U0 = U_star
        if viol <= config.constraint_tolerance:
            break
        mu *= config.penalty_growth

    status = state.status
    if has_obs and viol > config.constraint_tolerance:
        status = "infeasible"
    diag = StepDiagnostics(
        step=start_index,
        solve_time_ms=1e3 * (time.perf_counter() - t0),
        inner_iterations=inner_total,
        outer_iterations=len(outer_history) if has_obs else 1,
        residual=state.residual,
        max_violation=viol,
        cost=state.cost,
        status=status,
        outer_history=outer_history)
    U_seq = U_star.reshape(N, desc.n_u)
    return U_seq[0].copy(), U_seq, diag


def _default_cost(desc):
    from . import smoother
    return smoother.default_tracking_cost(desc)


def run_receding_horizon(desc, x0, reference, obstacles, config):
    """Track the reference with MPC in closed loop on the nonlinear
    plant. Returns (executed Trajectory, per-step diagnostics)."""
    n_steps = reference.n_knots - 1
    if n_steps < 1:
        raise ContractViolationError("reference needs at least 2 knots")
    x = np.asarray(x0, dtype=float).copy()
    states = np.empty((n_steps + 1, desc.n_x))
    controls = np.empty((n_steps, desc.n_u))
    states[0] = x
    diags = []
    u_warm = None
    for k in range(n_steps):
        sub = Trajectory(h=reference.h,
                         states=reference.states[k:],
                         controls=reference.controls[k:],
                         dynamically_consistent=False)
        u, u_warm, diag = mpc_step(desc, x, sub, obstacles, config,
                                   u_warm=u_warm, start_index=k)
        diag.step = k
        diags.append(diag)
        x = kern.rk4_step(desc.params, x, np.ascontiguousarray(u),
                          reference.h)
        states[k + 1] = x
        controls[k] = u
    executed = Trajectory(h=reference.h, states=states, controls=controls)
    return executed, diags
