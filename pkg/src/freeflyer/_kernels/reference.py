"""Pure-numpy dynamics kernels.

This module is the semantics reference for the compiled backend in
``_core.pyx``; both expose the same flat-array API and must agree to float
precision. ``params`` is the 5-tuple produced by
``RobotDescription.compile()``:

    (masses (nb,), coms (nb, 3), inertias (nb, 3, 3),
     joint_origins (n_m, 3), joint_axes (n_m, 3))

with ``nb = 1 + n_m`` bodies, body 0 the base, and link ``i`` the child of
body ``i - 1`` (serial chain). Coordinates are ``y = (r, theta, q_m)`` with
``theta`` the Z-Y-X Euler angles stored as (roll, pitch, yaw); the state is
``x = (y, ydot)`` and the control is the generalized force on ``y``.
"""

import numpy as np

from ..errors import NumericalOverflowError, SingularityError, SolveFailureError

BACKEND_NAME = "pure"

PITCH_GUARD = 1e-3  # rad distance from |pitch| = pi/2 that trips the guard
_FD_REL = 1e-6      # finite-difference step: max(1e-6, 1e-6 * |coord|)

_EZ = np.array([0.0, 0.0, 1.0])


def _skew(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def euler_to_rotation(theta):
    """Rotation matrix for Z-Y-X Euler angles (roll, pitch, yaw)."""
    cr, sr = np.cos(theta[0]), np.sin(theta[0])
    cp, sp = np.cos(theta[1]), np.sin(theta[1])
    cy, sy = np.cos(theta[2]), np.sin(theta[2])
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def euler_rate_matrix(theta):
    """Matrix mapping Euler-angle rates to the world angular velocity.

    Columns are the world-frame rotation axes of roll, pitch and yaw;
    singular where cos(pitch) = 0.
    """
    R = euler_to_rotation(theta)
    cy, sy = np.cos(theta[2]), np.sin(theta[2])
    E = np.empty((3, 3))
    E[:, 0] = R[:, 0]                       # Rz Ry x_hat
    E[:, 1] = np.array([-sy, cy, 0.0])      # Rz y_hat
    E[:, 2] = _EZ
    return E


def _rot_axis(axis, q):
    """Rodrigues rotation about a unit axis."""
    c, s = np.cos(q), np.sin(q)
    K = _skew(axis)
    return c * np.eye(3) + s * K + (1.0 - c) * np.outer(axis, axis)


def _fk(params, y):
    """Forward kinematics: body rotations, com positions, com Jacobians.

    Returns (R (nb,3,3), xc (nb,3), Jv (nb,3,n), Jw (nb,3,n)) where the
    Jacobians map coordinate rates ydot to world com velocity / world
    angular velocity.
    """
    masses, coms, inertias, jorg, jax = params
    n_m = jorg.shape[0]
    nb = 1 + n_m
    n = 6 + n_m
    r, theta, q = y[0:3], y[3:6], y[6:6 + n_m]

    Rs = np.empty((nb, 3, 3))
    xc = np.empty((nb, 3))
    Jv = np.zeros((nb, 3, n))
    Jw = np.zeros((nb, 3, n))

    Rb = euler_to_rotation(theta)
    E = euler_rate_matrix(theta)

    # frame of the current parent body: origin, rotation, origin/angular Jacobians
    Ro, oo = Rb, r.copy()
    Jo = np.zeros((3, n))
    Jo[:, 0:3] = np.eye(3)
    Jwf = np.zeros((3, n))
    Jwf[:, 3:6] = E

    cb = Rb @ coms[0]
    Rs[0] = Rb
    xc[0] = r + cb
    Jv[0] = Jo - _skew(cb) @ Jwf
    Jw[0] = Jwf

    for i in range(n_m):
        pw = Ro @ jorg[i]
        o_new = oo + pw
        Jo_new = Jo - _skew(pw) @ Jwf
        aw = Ro @ jax[i]
        R_new = Ro @ _rot_axis(jax[i], q[i])
        Jw_new = Jwf.copy()
        Jw_new[:, 6 + i] += aw
        cw = R_new @ coms[1 + i]
        Rs[1 + i] = R_new
        xc[1 + i] = o_new + cw
        Jv[1 + i] = Jo_new - _skew(cw) @ Jw_new
        Jw[1 + i] = Jw_new
        Ro, oo, Jo, Jwf = R_new, o_new, Jo_new, Jw_new

    return Rs, xc, Jv, Jw


def body_frames(params, y):
    """World rotation and com position of every body."""
    Rs, xc, _, _ = _fk(params, y)
    return Rs, xc


def mass_matrix(params, y):
    """Generalized mass matrix G(y), symmetric positive definite away from
    the pitch singularity."""
    masses, coms, inertias, _, _ = params
    Rs, _, Jv, Jw = _fk(params, y)
    n = Jv.shape[2]
    G = np.zeros((n, n))
    for b in range(len(masses)):
        W = Rs[b] @ inertias[b] @ Rs[b].T
        G += masses[b] * (Jv[b].T @ Jv[b]) + Jw[b].T @ W @ Jw[b]
    return 0.5 * (G + G.T)


def _body_rates(params, y, yd):
    """Angular velocity, angular acceleration and com acceleration of every
    body under zero coordinate acceleration (velocity-product terms only)."""
    masses, coms, inertias, jorg, jax = params
    n_m = jorg.shape[0]
    theta = y[3:6]
    q = y[6:6 + n_m]
    rdot_unused = yd[0:3]  # base translation contributes no velocity products
    thd = yd[3:6]
    qd = yd[6:6 + n_m]

    Rb = euler_to_rotation(theta)
    E = euler_rate_matrix(theta)
    c1, c2 = E[:, 0], E[:, 1]
    # time derivatives of the roll/pitch axis columns (yaw axis is fixed)
    c1dot = thd[2] * np.cross(_EZ, c1) + thd[1] * np.cross(c2, c1)
    c2dot = thd[2] * np.cross(_EZ, c2)

    nb = 1 + n_m
    omega = np.empty((nb, 3))
    omegad = np.empty((nb, 3))
    acc = np.empty((nb, 3))

    w = E @ thd
    wd = c1dot * thd[0] + c2dot * thd[1]
    omega[0], omegad[0] = w, wd
    cb = Rb @ coms[0]
    acc[0] = np.cross(wd, cb) + np.cross(w, np.cross(w, cb))

    Ro = Rb
    ao = np.zeros(3)  # world acceleration of the current frame origin
    for i in range(n_m):
        pw = Ro @ jorg[i]
        ao = ao + np.cross(wd, pw) + np.cross(w, np.cross(w, pw))
        aw = Ro @ jax[i]
        R_new = Ro @ _rot_axis(jax[i], q[i])
        w_new = w + aw * qd[i]
        wd_new = wd + np.cross(w, aw) * qd[i]
        cw = R_new @ coms[1 + i]
        omega[1 + i], omegad[1 + i] = w_new, wd_new
        acc[1 + i] = ao + np.cross(wd_new, cw) + np.cross(w_new, np.cross(w_new, cw))
        Ro, w, wd = R_new, w_new, wd_new

    return omega, omegad, acc


def bias_forces(params, y, yd):
    """Velocity-product generalized forces D(y, ydot) ydot.

    Equals d/dt(dT/dydot) - dT/dy evaluated with ydotdot = 0.
    """
    masses, coms, inertias, _, _ = params
    Rs, _, Jv, Jw = _fk(params, y)
    omega, omegad, acc = _body_rates(params, y, yd)
    n = Jv.shape[2]
    b = np.zeros(n)
    for k in range(len(masses)):
        W = Rs[k] @ inertias[k] @ Rs[k].T
        f = masses[k] * acc[k]
        nmom = W @ omegad[k] + np.cross(omega[k], W @ omega[k])
        b += Jv[k].T @ f + Jw[k].T @ nmom
    return b


def kinetic_energy(params, y, yd):
    return 0.5 * yd @ mass_matrix(params, y) @ yd


def linear_momentum(params, y, yd):
    """Total world-frame linear momentum of the chain."""
    masses, _, _, _, _ = params
    _, _, Jv, _ = _fk(params, y)
    p = np.zeros(3)
    for b in range(len(masses)):
        p += masses[b] * (Jv[b] @ yd)
    return p


def _check_pitch(y):
    if abs(abs(y[4]) - 0.5 * np.pi) < PITCH_GUARD:
        raise SingularityError(
            f"base pitch {y[4]:.6f} rad is within {PITCH_GUARD} of the "
            "attitude-representation singularity")


def dynamics(params, x, u):
    """State derivative f(x, u) = (ydot, G^{-1}(u - D ydot))."""
    n = x.shape[0] // 2
    y, yd = x[:n], x[n:]
    _check_pitch(x)
    G = mass_matrix(params, y)
    b = bias_forces(params, y, yd)
    try:
        np.linalg.cholesky(G)
        ydd = np.linalg.solve(G, u - b)
    except np.linalg.LinAlgError as exc:
        raise SolveFailureError(f"mass matrix not positive definite: {exc}") from exc
    out = np.empty(2 * n)
    out[:n] = yd
    out[n:] = ydd
    return out


def rk4_step(params, x, u, h):
    """One classical Runge-Kutta step under a zero-order-hold control."""
    k1 = dynamics(params, x, u)
    k2 = dynamics(params, x + 0.5 * h * k1, u)
    k3 = dynamics(params, x + 0.5 * h * k2, u)
    k4 = dynamics(params, x + h * k3, u)
    out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NumericalOverflowError("integration step produced non-finite values")
    return out


def rollout(params, x0, U, h):
    """Integrate a control sequence; returns states (N+1, nx)."""
    N = U.shape[0]
    X = np.empty((N + 1, x0.shape[0]))
    X[0] = x0
    for k in range(N):
        X[k + 1] = rk4_step(params, X[k], U[k], h)
    return X

def affine_rollout(params, x0, h, xbar, ubar, K, l):
    """Roll an affine state-feedback policy on the nonlinear dynamics.

    u_k = ubar_k + K_k (x_k - xbar_k) + l_k. Returns (states (N+1, nx),
    controls (N, nu)).
    """
    N = K.shape[0]
    X = np.empty((N + 1, x0.shape[0]))
    Uc = np.empty((N, K.shape[1]))
    X[0] = x0
    for k in range(N):
        u = ubar[k] + K[k] @ (X[k] - xbar[k]) + l[k]
        if not np.all(np.isfinite(u)):
            raise NumericalOverflowError("feedback control is non-finite")
        Uc[k] = u
        X[k + 1] = rk4_step(params, X[k], u, h)
    return X, Uc


def _fd_step(v):
    return np.maximum(_FD_REL, _FD_REL * np.abs(v))


def linearize(params, x, u):
    """Continuous-time Jacobians (A, B) and drift f0 by central differences.

    Step per coordinate: max(1e-6, 1e-6 |coord|).
    """
    nx, nu = x.shape[0], u.shape[0]
    A = np.empty((nx, nx))
    B = np.empty((nx, nu))
    f0 = dynamics(params, x, u)
    dx = _fd_step(x)
    for i in range(nx):
        xp, xm = x.copy(), x.copy()
        xp[i] += dx[i]
        xm[i] -= dx[i]
        A[:, i] = (dynamics(params, xp, u) - dynamics(params, xm, u)) / (2.0 * dx[i])
    du = _fd_step(u)
    for i in range(nu):
        up, um = u.copy(), u.copy()
        up[i] += du[i]
        um[i] -= du[i]
        B[:, i] = (dynamics(params, x, up) - dynamics(params, x, um)) / (2.0 * du[i])
    return A, B, f0


def step_jacobians(params, x, u, h):
    """Central-difference Jacobians of the discrete map rk4_step."""
    nx, nu = x.shape[0], u.shape[0]
    Ad = np.empty((nx, nx))
    Bd = np.empty((nx, nu))
    dx = _fd_step(x)
    for i in range(nx):
        xp, xm = x.copy(), x.copy()
        xp[i] += dx[i]
        xm[i] -= dx[i]
        Ad[:, i] = (rk4_step(params, xp, u, h) - rk4_step(params, xm, u, h)) / (2.0 * dx[i])
    du = _fd_step(u)
    for i in range(nu):
        up, um = u.copy(), u.copy()
        up[i] += du[i]
        um[i] -= du[i]
        Bd[:, i] = (rk4_step(params, x, up, h) - rk4_step(params, x, um, h)) / (2.0 * du[i])
    return Ad, Bd


def shooting_cost_grad(params, x0, U, h, xref, uref, Q, R, QN, obs_P, obs_c, mu):
    """Cost and exact gradient of the single-shooting tracking problem.

    f(U) = sum_k 1/2 dx_k' Q dx_k + 1/2 du_k' R du_k
         + 1/2 dx_N' QN dx_N + mu * sum_{k>=1} sum_j max(0, h_kj)^2

    with dx_k = x_k(U) - xref_k, du_k = U_k - uref_k and
    h_kj = 1 - (p_k - c_kj)' P_j (p_k - c_kj) on the base position p_k.
    The gradient is the adjoint (reverse) accumulation through the rollout
    using central-difference step Jacobians, returned as (N*nu,).
    """
    N = U.shape[0]
    nx = x0.shape[0]
    nu = U.shape[1]
    m = obs_P.shape[0]

    X = np.empty((N + 1, nx))
    X[0] = x0
    cost = 0.0
    for k in range(N):
        dxk = X[k] - xref[k]
        duk = U[k] - uref[k]
        cost += 0.5 * dxk @ Q @ dxk + 0.5 * duk @ R @ duk
        X[k + 1] = rk4_step(params, X[k], U[k], h)
    dxN = X[N] - xref[N]
    cost += 0.5 * dxN @ QN @ dxN

    def penalty_grad(k):
        """Position-block gradient of the obstacle penalty at knot k."""
        g = np.zeros(nx)
        nonlocal cost
        p = X[k, 0:3]
        for j in range(m):
            d = p - obs_c[k, j]
            hval = 1.0 - d @ obs_P[j] @ d
            if hval > 0.0:
                cost += mu * hval * hval
                g[0:3] += -4.0 * mu * hval * (obs_P[j] @ d)
        return g

    pen = np.zeros((N + 1, nx))
    if m > 0 and mu > 0.0:
        for k in range(1, N + 1):
            pen[k] = penalty_grad(k)

    grad = np.empty((N, nu))
    lam = QN @ dxN + pen[N]
    for k in range(N - 1, -1, -1):
        Ad, Bd = step_jacobians(params, X[k], U[k], h)
        grad[k] = R @ (U[k] - uref[k]) + Bd.T @ lam
        lam = Q @ (X[k] - xref[k]) + pen[k] + Ad.T @ lam
    return cost, grad.ravel()
