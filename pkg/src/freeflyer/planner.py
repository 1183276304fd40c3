"""Kinodynamic RRT* with an LQR cost-to-go pseudo-metric.

Distances are measured by the finite-horizon LQR value about the query
point: a backward value iteration about (x_query, 0) yields (S, s, c) and
the pseudo-metric m(x) = d'S d + d's + c with d = x - x_query. The same
backward pass provides the time-varying affine policy used to steer, so
each iteration costs one pass per new target (the pass is indexed by
steps-to-go and grown on demand, serving every steering horizon).

Steering rolls the affine LQR policy on the nonlinear dynamics, so tree
edges are dynamically consistent by construction and each edge's terminal
state is exactly its child node's state. A rewire re-steers toward an
existing node and is accepted only if it lands within a snap tolerance;
the terminal knot is then snapped onto the node and the edge is stamped
not dynamically consistent (the path is re-timed downstream anyway).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import collision as coll
from . import lqr
from . import ltv as ltv_mod
from ._kernels import K as kern
from .errors import (ConfigurationError, ContractViolationError, NoPathError,
                     NumericalOverflowError, SingularityError,
                     SolveFailureError)
from .trajectory import Trajectory

_STEER_ERRORS = (SingularityError, SolveFailureError, NumericalOverflowError)


def default_steering_cost(desc):
    """Position-heavy weights for tree extension and the pseudo-metric.

    Control is priced low on purpose: the metric then ranks states by how
    far they are from the target rather than by braking effort, so the
    goal ball is geometrically meaningful, and steering rollouts settle
    onto their targets within transit-time horizons. Edge timing is
    discarded by the downstream re-timing stage, so aggressive steering
    controls never reach the tracking controller.
    """
    qdiag = np.array([50.0] * 3 + [5.0] * 3 + [5.0] * desc.n_m
                     + [1.0] * desc.n_q)
    return lqr.QuadraticCost(Q=np.diag(qdiag), R=0.1 * np.eye(desc.n_u),
                             QN=np.diag(50.0 * qdiag))


@dataclass
class PlannerConfig:
    """Sampling bounds are (2, n_x) rows (low, high); a coordinate with
    low == high is held at that value in every sample.

    v_max sets steering horizons as transit time at that average speed.
    goal_tolerance is in cost-to-go units of the steering cost; with the
    default weights a value of 2.0 accepts states within ~7 cm of the
    goal at rest (steered arrivals score well below that, a rest state
    0.3 m out scores ~40 and a state coasting goalward from 0.6 m out
    scores ~140, so neither is accepted).
    """
    bounds: np.ndarray
    gamma: float = 60.0
    goal_tolerance: float = 2.0
    max_iterations: int = 2000
    seed: int = 0
    h: float = 0.1
    v_max: float = 0.2
    min_horizon: int = 10
    max_horizon: int = 200
    metric_horizon: int = 30
    goal_bias: float = 0.05
    max_near: int = 8
    rewire_connect_tol: float = 1e-3
    stop_at_first_solution: bool = True
    h_check: float | None = None
    cost: lqr.QuadraticCost | None = None

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=float)
        if self.bounds.ndim != 2 or self.bounds.shape[0] != 2:
            raise ConfigurationError(
                f"bounds must be (2, n_x), got {self.bounds.shape}")
        if np.any(self.bounds[0] > self.bounds[1]):
            raise ConfigurationError("bounds rows must satisfy low <= high")
        if not (self.gamma > 0 and self.goal_tolerance > 0):
            raise ConfigurationError("gamma and goal_tolerance must be positive")
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")
        if not (0.0 <= self.goal_bias < 1.0):
            raise ConfigurationError("goal_bias must be in [0, 1)")
        if not (1 <= self.min_horizon <= self.max_horizon):
            raise ConfigurationError("need 1 <= min_horizon <= max_horizon")
        if self.metric_horizon < 1:
            raise ConfigurationError("metric_horizon must be >= 1")
        if not (self.h > 0 and self.v_max > 0):
            raise ConfigurationError("h and v_max must be positive")

    @property
    def n_x(self):
        return self.bounds.shape[1]


class _TargetContext:
    """Backward value iteration about (target, 0), grown on demand.

    Index j is steps-to-go: _S[j] is the value matrix of a j-step problem,
    _K[j] / _l[j] the policy when j steps remain. A horizon-N steer uses
    the gain sequence [K_N, ..., K_1].
    """

    def __init__(self, desc, target, cost, h):
        self.target = np.asarray(target, dtype=float)
        self.cost = cost
        u0 = np.zeros(desc.n_u)
        Ac, Bc, _ = kern.linearize(desc.params,
                                   np.ascontiguousarray(self.target), u0)
        self.A, self.B = ltv_mod.discretize(Ac, Bc, h)
        self.g = kern.rk4_step(desc.params,
                               np.ascontiguousarray(self.target), u0, h) \
            - self.target
        self._S = [cost.QN]
        self._s = [cost.qN]
        self._c = [cost.c_term]
        self._K = [None]
        self._l = [None]

    def ensure(self, j):
        while len(self._K) <= j:
            S, s, c, Kk, lk = lqr.value_iteration_step(
                self.A, self.B, self.g, self.cost,
                self._S[-1], self._s[-1], self._c[-1])
            self._S.append(S)
            self._s.append(s)
            self._c.append(c)
            self._K.append(Kk)
            self._l.append(lk)

    def metric(self, X, j):
        """Pseudo-metric d'S d + d's + c with j steps to go."""
        self.ensure(j)
        D = np.atleast_2d(np.asarray(X, dtype=float)) - self.target
        return np.einsum("ni,ij,nj->n", D, self._S[j], D) \
            + D @ self._s[j] + self._c[j]

    def gains(self, N):
        self.ensure(N)
        Kf = np.ascontiguousarray([self._K[j] for j in range(N, 0, -1)])
        lf = np.ascontiguousarray([self._l[j] for j in range(N, 0, -1)])
        return Kf, lf


class PlannerTree:
    """Array-backed search tree; node 0 is the root."""

    def __init__(self, root_state):
        root_state = np.asarray(root_state, dtype=float)
        self._states = np.empty((64, root_state.shape[0]))
        self._states[0] = root_state
        self.n = 1
        self.parents = [-1]
        self.costs = [0.0]
        self.edges = [None]
        self.edge_costs = [0.0]
        self.children = [[]]

    @property
    def states(self):
        return self._states[:self.n]

    def __len__(self):
        return self.n

    def add(self, state, parent, edge, edge_cost):
        if self.n == self._states.shape[0]:
            grown = np.empty((2 * self.n, self._states.shape[1]))
            grown[:self.n] = self._states
            self._states = grown
        idx = self.n
        self._states[idx] = state
        self.n += 1
        self.parents.append(parent)
        self.costs.append(self.costs[parent] + edge_cost)
        self.edges.append(edge)
        self.edge_costs.append(edge_cost)
        self.children.append([])
        self.children[parent].append(idx)
        return idx

    def is_ancestor(self, i, j):
        """True when node i lies on the root path of node j."""
        while j != -1:
            if j == i:
                return True
            j = self.parents[j]
        return False

    def reparent(self, i, new_parent, edge, edge_cost):
        self.children[self.parents[i]].remove(i)
        self.parents[i] = new_parent
        self.children[new_parent].append(i)
        self.edges[i] = edge
        self.edge_costs[i] = edge_cost
        delta = self.costs[new_parent] + edge_cost - self.costs[i]
        stack = [i]
        while stack:
            k = stack.pop()
            self.costs[k] += delta
            stack.extend(self.children[k])

    def path_indices(self, i):
        out = []
        while i != -1:
            out.append(i)
            i = self.parents[i]
        return out[::-1]


@dataclass
class PlanInfo:
    solved: bool
    iterations: int
    n_nodes: int
    cost: float
    goal_indices: list
    tree: PlannerTree


def sample(config, rng):
    """Uniform sample within the per-coordinate bounds."""
    return rng.uniform(config.bounds[0], config.bounds[1])


def _context(desc, x, config, cost):
    return _TargetContext(desc, x, cost, config.h)


def nearest(desc, tree, x, config, cost=None, _ctx=None):
    """Index of the tree node with the smallest pseudo-metric to x."""
    cost = cost or default_steering_cost(desc)
    ctx = _ctx if _ctx is not None else _context(desc, x, config, cost)
    m = ctx.metric(tree.states, config.metric_horizon)
    return int(np.argmin(m))


def near_radius(config, n):
    return config.gamma * (math.log(n) / n) ** (1.0 / config.n_x)


def near_nodes(desc, tree, x, config, cost=None, _ctx=None):
    """Indices within the shrinking metric ball, sorted by metric.

    Requires at least two tree nodes (the radius is undefined at n = 1).
    """
    if len(tree) < 2:
        raise ContractViolationError("near_nodes needs a tree with >= 2 nodes")
    cost = cost or default_steering_cost(desc)
    ctx = _ctx if _ctx is not None else _context(desc, x, config, cost)
    m = ctx.metric(tree.states, config.metric_horizon)
    radius = near_radius(config, len(tree))
    idx = np.nonzero(m <= radius)[0]
    return idx[np.argsort(m[idx], kind="stable")]


def _horizon(config, p_from, p_to):
    dist = float(np.linalg.norm(np.asarray(p_to) - np.asarray(p_from)))
    n = int(math.ceil(dist / (config.v_max * config.h)))
    return min(max(n, config.min_horizon), config.max_horizon)


def _steer(desc, x_from, ctx, N, h):
    Kf, lf = ctx.gains(N)
    xbar = np.ascontiguousarray(np.broadcast_to(ctx.target, (N, len(ctx.target))))
    ubar = np.zeros((N, desc.n_u))
    return kern.affine_rollout(desc.params, np.ascontiguousarray(x_from),
                               h, xbar, ubar, Kf, lf)


def plan(desc, start, goal, field, config, return_info=False):
    """Grow a tree from start until a node enters the goal metric ball.

    Returns the root-to-goal trajectory (with PlanInfo when requested).
    With ``stop_at_first_solution`` the first accepted goal connection is
    returned; otherwise the full budget runs and the cheapest goal node
    wins. Raises NoPathError (carrying the tree) when the budget is
    exhausted without a connection.
    """
    start = np.ascontiguousarray(start, dtype=float)
    goal = np.ascontiguousarray(goal, dtype=float)
    if start.shape != (desc.n_x,) or goal.shape != (desc.n_x,):
        raise ContractViolationError(f"states must have shape ({desc.n_x},)")
    if config.n_x != desc.n_x:
        raise ConfigurationError(
            f"bounds are for n_x={config.n_x}, robot has n_x={desc.n_x}")
    if not coll.point_clear(field, start[:3]):
        raise ContractViolationError("start position is inside a keep-out zone")
    cost = config.cost if config.cost is not None else default_steering_cost(desc)
    if cost.n_x != desc.n_x or cost.n_u != desc.n_u:
        raise ConfigurationError("steering cost dimensions do not match robot")

    rng = np.random.default_rng(config.seed)
    tree = PlannerTree(start)
    goal_ctx = _context(desc, goal, config, cost)
    goal_nodes = []
    iterations_run = 0

    def build(idx):
        path = tree.path_indices(idx)
        traj = None
        for j in path[1:]:
            traj = tree.edges[j] if traj is None else \
                traj.concatenated(tree.edges[j])
        if traj is None:  # the root itself satisfies the goal ball
            traj = Trajectory(h=config.h, states=start[None, :],
                              controls=np.zeros((1, desc.n_u)))
        info = PlanInfo(solved=True, iterations=iterations_run,
                        n_nodes=len(tree), cost=tree.costs[idx],
                        goal_indices=list(goal_nodes), tree=tree)
        return (traj, info) if return_info else traj

    if goal_ctx.metric(start, config.metric_horizon)[0] <= config.goal_tolerance:
        goal_nodes.append(0)
        return build(0)

    for it in range(config.max_iterations):
        iterations_run = it + 1
        try:
            if rng.uniform() < config.goal_bias:
                x_rand, ctx_rand = goal, goal_ctx
            else:
                x_rand = sample(config, rng)
                ctx_rand = _context(desc, x_rand, config, cost)
            i_nearest = nearest(desc, tree, x_rand, config, cost,
                                _ctx=ctx_rand)
            N0 = _horizon(config, tree.states[i_nearest][:3], x_rand[:3])
            X0, _ = _steer(desc, tree.states[i_nearest], ctx_rand, N0,
                           config.h)
            x_new = X0[-1]
            ctx_new = _context(desc, x_new, config, cost)
        except _STEER_ERRORS:
            continue

        if len(tree) >= 2:
            near = near_nodes(desc, tree, x_new, config, cost, _ctx=ctx_new)
            cands = list(near[:config.max_near])
            if i_nearest not in cands:
                cands.append(i_nearest)
        else:
            near = np.empty(0, dtype=int)
            cands = [i_nearest]

        best = None
        for i in cands:
            Ni = _horizon(config, tree.states[i][:3], x_new[:3])
            try:
                Xi, Ui = _steer(desc, tree.states[i], ctx_new, Ni, config.h)
            except _STEER_ERRORS:
                continue
            ec = lqr.trajectory_cost(cost, Xi, Ui, x_new, np.zeros(desc.n_u))
            total = tree.costs[i] + ec
            if best is None or total < best[0]:
                best = (total, int(i), Xi, Ui, ec)
        if best is None:
            continue
        _, i_par, Xw, Uw, ecw = best
        if not coll.path_clear(field, Xw[:, :3], config.h_check):
            continue

        x_node = Xw[-1]
        edge = Trajectory(h=config.h, states=Xw, controls=Uw)
        idx = tree.add(x_node, i_par, edge, ecw)

        if goal_ctx.metric(x_node, config.metric_horizon)[0] \
                <= config.goal_tolerance:
            goal_nodes.append(idx)
            if config.stop_at_first_solution:
                return build(idx)

        for i in near[:config.max_near]:
            i = int(i)
            if i == i_par or tree.costs[idx] >= tree.costs[i]:
                continue
            if tree.is_ancestor(i, idx):
                continue
            node_state = tree.states[i].copy()
            Ni = _horizon(config, x_node[:3], node_state[:3])
            try:
                ctx_i = _context(desc, node_state, config, cost)
                Xi, Ui = _steer(desc, x_node, ctx_i, Ni, config.h)
            except _STEER_ERRORS:
                continue
            scale = 1.0 + float(np.max(np.abs(node_state)))
            if np.max(np.abs(Xi[-1] - node_state)) > \
                    config.rewire_connect_tol * scale:
                continue
            ec2 = lqr.trajectory_cost(cost, Xi, Ui, node_state,
                                      np.zeros(desc.n_u))
            if tree.costs[idx] + ec2 + 1e-12 >= tree.costs[i]:
                continue
            if not coll.path_clear(field, Xi[:, :3], config.h_check):
                continue
            Xi[-1] = node_state  # snap onto the existing node
            tree.reparent(i, idx, Trajectory(h=config.h, states=Xi,
                                             controls=Ui,
                                             dynamically_consistent=False),
                          ec2)

    if goal_nodes:
        best_idx = min(goal_nodes, key=lambda i: tree.costs[i])
        return build(best_idx)
    raise NoPathError(
        f"no goal connection within {config.max_iterations} iterations "
        f"({len(tree)} nodes)", tree=tree)
