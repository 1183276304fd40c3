"""Value-iteration oracle tests.

The dense oracle never uses the Riccati code: the quadratic cost J(U) is
evaluated by plain affine rollouts, its Hessian and gradient are recovered
by exact polarization (J is quadratic), and the optimum is solved densely.
"""

import numpy as np
import pytest

from conftest import random_state
from freeflyer import dynamics, lqr
from freeflyer.errors import ContractViolationError
from freeflyer.ltv import LTVSystem
from freeflyer.trajectory import Trajectory


def rollout_affine(A, B, g, dx0, U):
    dxs = [np.asarray(dx0, dtype=float)]
    for k in range(len(U)):
        dxs.append(A[k] @ dxs[-1] + B[k] @ U[k] + g[k])
    return np.array(dxs)


def stage_sum(cost, dxs, U):
    total = 0.0
    for k in range(len(U)):
        dx, du = dxs[k], U[k]
        total += 0.5 * dx @ cost.Q @ dx + 0.5 * du @ cost.R @ du \
            + du @ cost.P @ dx + cost.q @ dx + cost.r @ du
    dxN = dxs[-1]
    return total + 0.5 * dxN @ cost.QN @ dxN + cost.qN @ dxN + cost.c_term


def dense_optimum(A, B, g, cost, dx0):
    """Global minimum of J(U) by polarization of the exact quadratic."""
    N, nu = len(A), B[0].shape[1]
    n = N * nu

    def J(Uflat):
        U = Uflat.reshape(N, nu)
        return stage_sum(cost, rollout_affine(A, B, g, dx0, U), U)

    J0 = J(np.zeros(n))
    basis = np.eye(n)
    Ji = np.array([J(basis[i]) for i in range(n)])
    Jmi = np.array([J(-basis[i]) for i in range(n)])
    H = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            Jij = J(basis[i] + basis[j])
            H[i, j] = H[j, i] = Jij - Ji[i] - Ji[j] + J0
    f = 0.5 * (Ji - Jmi)
    U_opt = np.linalg.solve(H, -f)
    return U_opt.reshape(N, nu), J(U_opt)


def random_lti(rng, nx, nu, N):
    """Random affine system with a guaranteed block-PSD stage cost."""
    W = rng.normal(size=(nx + nu, nx + nu))
    W = W.T @ W / (nx + nu)
    cost = lqr.QuadraticCost(
        Q=W[:nx, :nx], R=W[nx:, nx:] + 0.5 * np.eye(nu), P=W[nx:, :nx],
        QN=np.diag(rng.uniform(0.1, 2.0, nx)),
        q=rng.normal(size=nx) * 0.3, r=rng.normal(size=nu) * 0.3,
        qN=rng.normal(size=nx) * 0.3, c_term=float(rng.normal()) * 0.1)
    A = rng.normal(size=(N, nx, nx))
    A *= 0.9 / np.maximum(1.0, np.abs(np.linalg.eigvals(A)).max(axis=1))[:, None, None]
    B = rng.normal(size=(N, nx, nu))
    g = rng.normal(size=(N, nx)) * 0.2
    return LTVSystem(A=A, B=B, g=g, h=0.1), cost


class TestBackwardPass:
    def test_frozen_scalar_with_drift(self):
        sys = LTVSystem(A=np.ones((1, 1, 1)), B=np.ones((1, 1, 1)),
                        g=np.ones((1, 1)), h=0.1)
        cost = lqr.QuadraticCost(Q=np.eye(1), R=np.eye(1), QN=np.eye(1))
        vfs = lqr.riccati_backward_pass(sys, cost)
        assert abs(vfs.S[0, 0, 0] - 1.5) < 1e-15
        assert abs(vfs.K[0, 0, 0] + 0.5) < 1e-15
        assert abs(vfs.l[0, 0] + 0.5) < 1e-15
        assert abs(vfs.s[0, 0] - 0.5) < 1e-15
        assert abs(vfs.c[0] - 0.25) < 1e-15

    def test_zero_input_matrix(self):
        A = 0.8 * np.eye(3)
        sys = LTVSystem(A=A[None], B=np.zeros((1, 3, 2)), g=np.zeros((1, 3)),
                        h=0.1)
        cost = lqr.QuadraticCost(Q=np.eye(3), R=np.eye(2), QN=2 * np.eye(3))
        vfs = lqr.riccati_backward_pass(sys, cost)
        assert np.array_equal(vfs.K[0], np.zeros((2, 3)))
        assert np.allclose(vfs.S[0], A.T @ (2 * np.eye(3)) @ A + np.eye(3),
                           atol=1e-15)

    def test_policy_matches_dense_optimum(self):
        rng = np.random.default_rng(81)
        for _ in range(10):
            nx = int(rng.integers(2, 5))
            nu = int(rng.integers(1, 3))
            N = int(rng.integers(2, 7))
            sys, cost = random_lti(rng, nx, nu, N)
            dx0 = rng.normal(size=nx)
            vfs = lqr.riccati_backward_pass(sys, cost)
            dx = dx0.copy()
            U_pi = []
            for k in range(N):
                u = vfs.K[k] @ dx + vfs.l[k]
                U_pi.append(u)
                dx = sys.A[k] @ dx + sys.B[k] @ u + sys.g[k]
            U_pi = np.array(U_pi)
            J_pi = stage_sum(cost, rollout_affine(sys.A, sys.B, sys.g, dx0,
                                                  U_pi), U_pi)
            _, J_opt = dense_optimum(sys.A, sys.B, sys.g, cost, dx0)
            scale = max(1.0, abs(J_opt))
            assert abs(J_pi - J_opt) < 1e-8 * scale
            assert abs(lqr.cost_to_go(vfs, 0, dx0) - J_opt) < 1e-8 * scale

    def test_bellman_consistency(self):
        # V_k(dx) = min_u l(dx,u) + V_{k+1}(A dx + B u + g) at the policy
        rng = np.random.default_rng(82)
        for _ in range(10):
            sys, cost = random_lti(rng, 3, 2, 5)
            vfs = lqr.riccati_backward_pass(sys, cost)
            for k in (0, 2, 4):
                dx = rng.normal(size=3)
                u = vfs.K[k] @ dx + vfs.l[k]
                dxn = sys.A[k] @ dx + sys.B[k] @ u + sys.g[k]
                stage = 0.5 * dx @ cost.Q @ dx + 0.5 * u @ cost.R @ u \
                    + u @ cost.P @ dx + cost.q @ dx + cost.r @ u
                lhs = lqr.cost_to_go(vfs, k, dx)
                rhs = stage + lqr.cost_to_go(vfs, k + 1, dxn)
                assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))

    def test_cost_validation(self):
        with pytest.raises(ContractViolationError):
            lqr.QuadraticCost(Q=np.eye(2), R=np.zeros((2, 2)))
        with pytest.raises(ContractViolationError):
            lqr.QuadraticCost(Q=-np.eye(2), R=np.eye(2))
        with pytest.raises(ContractViolationError):
            lqr.QuadraticCost(Q=np.array([[1.0, 0.5], [0.0, 1.0]]), R=np.eye(2))
        with pytest.raises(ContractViolationError):
            # cross term large enough to break the block condition
            lqr.QuadraticCost(Q=0.01 * np.eye(2), R=0.01 * np.eye(2),
                              P=np.eye(2))


def steering_cost(desc):
    n = desc.n_q
    Q = np.diag([10.0] * 3 + [5.0] * 3 + [5.0] * desc.n_m + [1.0] * n)
    return lqr.QuadraticCost(Q=Q, R=np.eye(desc.n_u), QN=20.0 * Q)


class TestSteer:
    def test_free_base_reaches_origin(self, free_base):
        x_from = np.zeros(12)
        x_from[0:3] = [1.0, -0.5, 0.3]
        x_to = np.zeros(12)
        traj = lqr.lqr_steer(free_base, x_from, x_to, 120,
                             steering_cost(free_base), 0.1)
        assert traj.n_knots == 121
        assert traj.dynamically_consistent
        assert traj.consistency_defect(free_base) < 1e-12
        assert np.linalg.norm(traj.states[-1][:3]) < 0.05
        assert np.linalg.norm(traj.states[-1][6:9]) < 0.05

    def test_astrobee_attitude_and_arm(self, astrobee):
        x_from = np.zeros(16)
        x_to = np.zeros(16)
        x_to[3:6] = [0.3, -0.2, 0.4]
        x_to[6:8] = [0.5, -0.3]
        traj = lqr.lqr_steer(astrobee, x_from, x_to, 120,
                             steering_cost(astrobee), 0.1)
        err0 = np.linalg.norm(x_from[3:8] - x_to[3:8])
        err1 = np.linalg.norm(traj.states[-1][3:8] - x_to[3:8])
        assert err1 < 0.1 * err0

    def test_deterministic(self, free_base):
        x_from = np.zeros(12)
        x_from[0] = 0.4
        a = lqr.lqr_steer(free_base, x_from, np.zeros(12), 40,
                          steering_cost(free_base), 0.1)
        b = lqr.lqr_steer(free_base, x_from, np.zeros(12), 40,
                          steering_cost(free_base), 0.1)
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.controls, b.controls)


class TestTrack:
    def test_infeasible_reference_executed_consistently(self, astrobee):
        # straight-line interpolation between rest states is not a
        # dynamics rollout; tracking must still execute it closely
        n = 60
        x0 = np.zeros(16)
        x1 = np.zeros(16)
        x1[0:3] = [0.8, 0.2, -0.4]
        alpha = np.linspace(0.0, 1.0, n)[:, None]
        states = (1 - alpha) * x0 + alpha * x1
        ref = Trajectory(h=0.1, states=states, controls=np.zeros((n, 8)))
        out = lqr.track(astrobee, ref, steering_cost(astrobee))
        assert out.dynamically_consistent
        assert out.consistency_defect(astrobee) < 1e-12
        assert np.linalg.norm(out.states[-1][:3] - x1[:3]) < 0.1
        dev = np.max(np.linalg.norm(out.positions - ref.positions, axis=1))
        assert dev < 0.2

    def test_tracks_from_offset_start(self, free_base):
        n = 80
        states = np.zeros((n, 12))
        ref = Trajectory(h=0.1, states=states, controls=np.zeros((n, 6)))
        x0 = np.zeros(12)
        x0[1] = 0.5
        out = lqr.track(free_base, ref, steering_cost(free_base), x0=x0)
        assert abs(out.states[-1][1]) < 0.02


class TestTrajectoryCost:
    def test_matches_manual_sum(self):
        rng = np.random.default_rng(91)
        cost = lqr.QuadraticCost(Q=np.eye(3), R=2 * np.eye(2),
                                 QN=3 * np.eye(3),
                                 q=rng.normal(size=3), r=rng.normal(size=2))
        X = rng.normal(size=(5, 3))
        U = rng.normal(size=(4, 2))
        xr = rng.normal(size=3)
        ur = rng.normal(size=2)
        got = lqr.trajectory_cost(cost, X, U, xr, ur)
        want = stage_sum(cost, X - xr, U - ur)
        assert abs(got - want) < 1e-12 * max(1.0, abs(want))
