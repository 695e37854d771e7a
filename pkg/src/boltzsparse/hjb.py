"""Infinite-horizon dynamic programming for the two-agent system.

The Bellman equation

    V(x, y) = min_{u in U^2} beta V(x+(u), y+(u)) + dt l(x, y, u)

is discretized on a uniform grid over Omega^2 with bilinear interpolation
of V at the successor states (semi-Lagrangian), successors clamped to
Omega^2, and the control set replaced by a uniform grid on U that contains 0.
Policy iteration alternates an exact sparse solve of the linear policy
evaluation system with a greedy sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math

import numba
import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .errors import GeometryMismatch, NonConvergence
from .kernels import InteractionKernel, radial_weight
from .sparse_feedback import ControlBox, Penalty

logger = logging.getLogger(__name__)

TIE_TOL = 1e-12


@dataclass(frozen=True)
class HjbParams:
    lam: float
    gamma_bar: float
    penalty: Penalty = Penalty.L1
    dt: float = 0.1
    target: float = 0.0
    n_controls: int = 21
    tol: float = 1e-6
    max_policy_iters: int = 200
    max_eval_iters: int = 10_000

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.lam > 0:
            raise ValueError("lam must be positive for a contractive Bellman operator")
        if self.n_controls < 1 or self.n_controls % 2 == 0:
            raise ValueError("n_controls must be odd so that 0 is a grid control")
        if not self.gamma_bar >= 0:
            raise ValueError(f"gamma_bar must be >= 0, got {self.gamma_bar}")
        object.__setattr__(self, "penalty", Penalty(self.penalty))

    @property
    def beta(self) -> float:
        return math.exp(-self.lam * self.dt)

    @property
    def gamma(self) -> float:
        return self.gamma_bar * self.beta * self.dt**2


@dataclass
class ValueGrid:
    omega_min: float
    omega_max: float
    n_nodes: int
    values: np.ndarray = None

    def __post_init__(self):
        if not self.omega_min < self.omega_max:
            raise GeometryMismatch("empty domain")
        if self.n_nodes < 2:
            raise GeometryMismatch("need at least two nodes per axis")
        if self.values is None:
            self.values = np.zeros((self.n_nodes, self.n_nodes))
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.n_nodes, self.n_nodes):
            raise GeometryMismatch(
                f"values shape {self.values.shape} does not match {self.n_nodes} nodes")

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.omega_min, self.omega_max, self.n_nodes)

    @property
    def spacing(self) -> float:
        return (self.omega_max - self.omega_min) / (self.n_nodes - 1)

    def with_values(self, values) -> "ValueGrid":
        return ValueGrid(self.omega_min, self.omega_max, self.n_nodes, values)

    def interpolate(self, x, y):
        """Bilinear interpolation of the stored values, arguments clamped to the grid."""
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        out = _bilinear_many(self.values, x.ravel(), y.ravel(), self.omega_min,
                             self.omega_max, self.spacing)
        return out.reshape(x.shape)


@dataclass
class FeedbackTable:
    omega_min: float
    omega_max: float
    n_nodes: int
    controls: np.ndarray  # (n, n, 2): (u_i, u_j) at node (x_a, y_b)
    values: np.ndarray = field(default=None, repr=False)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.omega_min, self.omega_max, self.n_nodes)

    @property
    def spacing(self) -> float:
        return (self.omega_max - self.omega_min) / (self.n_nodes - 1)

    @property
    def u_first(self) -> np.ndarray:
        return self.controls[:, :, 0]

    def _index(self, v):
        k = np.floor((np.asarray(v, float) - self.omega_min) / self.spacing + 0.5)
        return np.clip(k, 0, self.n_nodes - 1).astype(np.intp)

    def lookup(self, x, y):
        """Nearest-node control pair (u_i, u_j) after clamping into Omega^2."""
        pair = self.controls[self._index(x), self._index(y)]
        if pair.ndim == 1:
            return float(pair[0]), float(pair[1])
        return pair[..., 0], pair[..., 1]

    def lookup_first(self, x, y):
        return self.controls[self._index(x), self._index(y), 0]

    def to_csv(self, path) -> None:
        nodes = self.nodes
        xx, yy = np.meshgrid(nodes, nodes, indexing="ij")
        values = self.values if self.values is not None else np.full(xx.shape, np.nan)
        rows = np.column_stack([xx.ravel(), yy.ravel(), self.controls[..., 0].ravel(),
                                self.controls[..., 1].ravel(), values.ravel()])
        np.savetxt(path, rows, delimiter=",", fmt="%.17g", header="x,y,u_i,u_j,value",
                   comments="")

    @classmethod
    def from_csv(cls, path) -> "FeedbackTable":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        n = int(round(math.sqrt(data.shape[0])))
        if n * n != data.shape[0]:
            raise GeometryMismatch(f"{path}: {data.shape[0]} rows is not a square grid")
        controls = data[:, 2:4].reshape(n, n, 2)
        return cls(float(data[0, 0]), float(data[-1, 0]), n, controls,
                   data[:, 4].reshape(n, n))


def control_grid(box: ControlBox, n_controls: int) -> np.ndarray:
    """Control pairs ordered for tie-breaking: smallest |u_i|+|u_j| first, then lexicographic."""
    u = np.linspace(box.u_min, box.u_max, n_controls)
    if box.u_min <= 0.0 <= box.u_max:
        u[np.argmin(np.abs(u))] = 0.0
    ui, uj = np.meshgrid(u, u, indexing="ij")
    pairs = np.column_stack([ui.ravel(), uj.ravel()])
    order = np.lexsort((pairs[:, 1], pairs[:, 0], np.abs(pairs).sum(axis=1)))
    return np.ascontiguousarray(pairs[order])


@numba.njit(cache=True, inline="always")
def _bilinear_weights(xs, ys, lo, hi, h, n):
    xs = min(max(xs, lo), hi)
    ys = min(max(ys, lo), hi)
    fx = (xs - lo) / h
    fy = (ys - lo) / h
    i0 = min(int(np.floor(fx)), n - 2)
    j0 = min(int(np.floor(fy)), n - 2)
    return i0, j0, fx - i0, fy - j0


@numba.njit(cache=True)
def _bilinear_many(values, xs, ys, lo, hi, h):
    n = values.shape[0]
    out = np.empty(xs.size)
    for k in range(xs.size):
        i0, j0, tx, ty = _bilinear_weights(xs[k], ys[k], lo, hi, h, n)
        out[k] = ((1 - tx) * (1 - ty) * values[i0, j0] + tx * (1 - ty) * values[i0 + 1, j0]
                  + (1 - tx) * ty * values[i0, j0 + 1] + tx * ty * values[i0 + 1, j0 + 1])
    return out


@numba.njit(cache=True, inline="always")
def _stage(x, y, ui, uj, dt, gamma, target, penalty, unit_cost, kcode, kpar):
    # successor of the two-agent step and its running cost
    d = y - x
    p = radial_weight(kcode, abs(d), kpar[0], kpar[1], kpar[2])
    xs = x + 0.5 * dt * p * d + dt * ui
    ys = y - 0.5 * dt * p * d + dt * uj
    if unit_cost:
        c = 1.0
    else:
        c = 0.5 * ((target - x) ** 2 + (target - y) ** 2)
        if penalty == 1:
            c += gamma * (abs(ui) + abs(uj))
        else:
            c += gamma * (ui * ui + uj * uj)
    return xs, ys, c


@numba.njit(cache=True, parallel=True)
def _bellman_sweep(values, nodes, lo, hi, h, controls, dt, beta, gamma, target,
                   penalty, unit_cost, kcode, kpar):
    n = nodes.size
    m = controls.shape[0]
    new_values = np.empty((n, n))
    argmin = np.empty((n, n), dtype=np.int64)
    for a in numba.prange(n * n):
        i = a // n
        j = a % n
        x = nodes[i]
        y = nodes[j]
        q = np.empty(m)
        best = np.inf
        for k in range(m):
            xs, ys, c = _stage(x, y, controls[k, 0], controls[k, 1], dt, gamma,
                               target, penalty, unit_cost, kcode, kpar)
            i0, j0, tx, ty = _bilinear_weights(xs, ys, lo, hi, h, n)
            v = ((1 - tx) * (1 - ty) * values[i0, j0] + tx * (1 - ty) * values[i0 + 1, j0]
                 + (1 - tx) * ty * values[i0, j0 + 1] + tx * ty * values[i0 + 1, j0 + 1])
            q[k] = beta * v + dt * c
            if q[k] < best:
                best = q[k]
        # controls are pre-sorted, so the first near-minimizer wins the tie-break
        for k in range(m):
            if q[k] <= best + TIE_TOL:
                argmin[i, j] = k
                new_values[i, j] = q[k]
                break
    return new_values, argmin


@numba.njit(cache=True)
def _policy_system(policy, nodes, lo, hi, h, controls, dt, gamma, target, penalty,
                   unit_cost, kcode, kpar):
    n = nodes.size
    rows = np.empty(4 * n * n, dtype=np.int64)
    cols = np.empty(4 * n * n, dtype=np.int64)
    data = np.empty(4 * n * n)
    cost = np.empty(n * n)
    for i in range(n):
        for j in range(n):
            r = i * n + j
            k = policy[i, j]
            xs, ys, c = _stage(nodes[i], nodes[j], controls[k, 0], controls[k, 1], dt,
                               gamma, target, penalty, unit_cost, kcode, kpar)
            i0, j0, tx, ty = _bilinear_weights(xs, ys, lo, hi, h, n)
            base = 4 * r
            rows[base:base + 4] = r
            cols[base] = i0 * n + j0
            cols[base + 1] = (i0 + 1) * n + j0
            cols[base + 2] = i0 * n + j0 + 1
            cols[base + 3] = (i0 + 1) * n + j0 + 1
            data[base] = (1 - tx) * (1 - ty)
            data[base + 1] = tx * (1 - ty)
            data[base + 2] = (1 - tx) * ty
            data[base + 3] = tx * ty
            cost[r] = dt * c
    return rows, cols, data, cost


class _Problem:
    """Packed arguments shared by the sweep and the policy evaluation."""

    def __init__(self, grid: ValueGrid, kernel: InteractionKernel, params: HjbParams,
                 box: ControlBox, unit_cost: bool = False):
        if not grid.omega_min <= params.target <= grid.omega_max:
            raise GeometryMismatch(
                f"target {params.target} outside [{grid.omega_min}, {grid.omega_max}]")
        kcode, *kpar = kernel.packed
        self.grid = grid
        self.params = params
        self.controls = control_grid(box, params.n_controls)
        self.geom = (grid.nodes, grid.omega_min, grid.omega_max, grid.spacing)
        self.model = (params.dt, params.gamma, params.target,
                      1 if params.penalty is Penalty.L1 else 2, unit_cost, kcode,
                      np.array(kpar, dtype=np.float64))

    def sweep(self, values):
        nodes, lo, hi, h = self.geom
        dt, gamma, target, pen, unit, kcode, kpar = self.model
        return _bellman_sweep(values, nodes, lo, hi, h, self.controls, dt,
                              self.params.beta, gamma, target, pen, unit, kcode, kpar)

    def evaluate(self, policy):
        nodes, lo, hi, h = self.geom
        rows, cols, data, cost = _policy_system(policy, nodes, lo, hi, h, self.controls,
                                                *self.model)
        n2 = nodes.size ** 2
        a = sp.csr_matrix((data, (rows, cols)), shape=(n2, n2))
        system = sp.identity(n2, format="csr") - self.params.beta * a
        return spsolve(system.tocsc(), cost).reshape(nodes.size, nodes.size)

    def table(self, argmin, values) -> FeedbackTable:
        g = self.grid
        return FeedbackTable(g.omega_min, g.omega_max, g.n_nodes,
                             self.controls[argmin], values)


def bellman_update(grid: ValueGrid, kernel: InteractionKernel, params: HjbParams,
                   box: ControlBox, unit_cost: bool = False):
    """One synchronous Bellman sweep; returns the new grid and its argmin table.

    ``unit_cost`` replaces the running cost by the constant 1 (test stub).
    """
    prob = _Problem(grid, kernel, params, box, unit_cost)
    values, argmin = prob.sweep(grid.values)
    return grid.with_values(values), prob.table(argmin, values)


@dataclass
class SolveReport:
    iterations: int
    residual: float
    method: str


def solve_policy_iteration(initial: ValueGrid, kernel: InteractionKernel,
                           params: HjbParams, box: ControlBox,
                           unit_cost: bool = False):
    """Howard policy iteration.

    Returns ``(ValueGrid, FeedbackTable, SolveReport)``.  Stops when the
    greedy policy repeats or the Bellman residual drops below ``params.tol``.
    """
    prob = _Problem(initial, kernel, params, box, unit_cost)
    _, policy = prob.sweep(initial.values)
    residual = np.inf
    for it in range(1, params.max_policy_iters + 1):
        values = np.maximum(prob.evaluate(policy), 0.0)
        improved, new_policy = prob.sweep(values)
        residual = float(np.max(np.abs(improved - values)))
        logger.debug("policy iteration %d: residual %.3e", it, residual)
        if residual <= params.tol or np.array_equal(new_policy, policy):
            table = prob.table(new_policy, values)
            return initial.with_values(values), table, SolveReport(it, residual, "policy")
        policy = new_policy
    raise NonConvergence(f"policy iteration did not converge in "
                         f"{params.max_policy_iters} iterations", residual)


def solve_value_iteration(initial: ValueGrid, kernel: InteractionKernel,
                          params: HjbParams, box: ControlBox, unit_cost: bool = False,
                          max_iters: int = 100_000):
    """Plain fixed-point iteration of the Bellman operator.

    Stops once successive iterates differ by at most tol*(1-beta)/beta, which
    bounds the distance to the fixed point by tol.
    """
    prob = _Problem(initial, kernel, params, box, unit_cost)
    beta = params.beta
    stop = params.tol * (1.0 - beta) / beta
    values = initial.values
    for it in range(1, max_iters + 1):
        new_values, argmin = prob.sweep(values)
        delta = float(np.max(np.abs(new_values - values)))
        values = new_values
        if delta <= stop:
            return (initial.with_values(values), prob.table(argmin, values),
                    SolveReport(it, delta, "value"))
    raise NonConvergence(f"value iteration did not converge in {max_iters} sweeps", delta)


def bellman_residual(grid: ValueGrid, kernel, params, box, unit_cost=False) -> float:
    """Sup-norm of V - T V."""
    new, _ = bellman_update(grid, kernel, params, box, unit_cost)
    return float(np.max(np.abs(new.values - grid.values)))


def feedback_lookup(table: FeedbackTable, x, y):
    return table.lookup(x, y)
