"""Closed-form instantaneous (one-step) feedback for the two-agent system.

For one step of the binary model

    x_i+ = x_i + dt/2 * P_ij (x_j - x_i) + dt * u_i

the one-step cost (beta/2)|xhat - x+|^2 + gamma*pen(u) separates per agent.
Dividing by beta*dt^2 leaves (1/2)(xi - u)^2 + gamma_bar*pen(u), with

    xi = (xhat - x_i - dt/2 * P_ij (x_j - x_i)) / dt,

so the l1 minimizer is the soft threshold of xi and the l2 minimizer is the
shrinkage xi / (1 + 2 gamma_bar); box constraints reduce to clamping because
the problem is one-dimensional and convex.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
import math

import numba
import numpy as np

from .kernels import InteractionKernel, eval_kernel


class Penalty(str, Enum):
    L1 = "l1"
    L2 = "l2"

    @property
    def code(self) -> int:
        return 1 if self is Penalty.L1 else 2


@dataclass(frozen=True)
class ControlBox:
    u_min: float = -1.0
    u_max: float = 1.0

    def __post_init__(self):
        if not self.u_min < self.u_max:
            raise ValueError(f"empty control box [{self.u_min}, {self.u_max}]")
        if not self.u_min <= 0.0 <= self.u_max:
            raise ValueError("zero control must be admissible")

    @property
    def bound(self) -> float:
        return max(abs(self.u_min), abs(self.u_max))


@dataclass(frozen=True)
class InstantaneousParams:
    gamma_bar: float
    beta: float
    dt: float
    target: float = 0.0
    penalty: Penalty = Penalty.L1

    def __post_init__(self):
        if not self.gamma_bar >= 0:
            raise ValueError(f"gamma_bar must be >= 0, got {self.gamma_bar}")
        if not 0 < self.beta <= 1:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    @classmethod
    def from_rate(cls, gamma_bar, lam, dt, target=0.0, penalty=Penalty.L1):
        """Build from a continuous discount rate, beta = exp(-lam*dt)."""
        return cls(gamma_bar, math.exp(-lam * dt), dt, target, Penalty(penalty))

    @property
    def gamma(self) -> float:
        """Control weight in the running cost, gamma_bar * beta * dt^2."""
        return self.gamma_bar * self.beta * self.dt**2


@numba.vectorize(["float64(float64, float64)"], cache=True)
def soft_threshold(xi, gamma_bar):
    """(1 - gamma_bar/|xi|) xi for |xi| > gamma_bar, else 0."""
    return xi - min(max(xi, -gamma_bar), gamma_bar)


@numba.vectorize(
    [
        "float64(float64, float64, float64, float64, float64, float64,"
        " float64, float64, int64)"
    ],
    cache=True,
)
def pair_control(x_self, x_other, p, target, dt, gamma_bar, u_min, u_max, penalty):
    """Optimal one-step control of the agent at ``x_self`` paired with ``x_other``.

    ``p`` is P(x_self, x_other); ``penalty`` is 1 for l1 and 2 for l2.
    """
    # (target - x_self)/dt is invariant over partners; kept separate so it hoists
    xi = (target - x_self) / dt - 0.5 * p * (x_other - x_self)
    if penalty == 1:
        # soft threshold in clip form: branch-free, so compiled pair loops vectorize
        u = xi - min(max(xi, -gamma_bar), gamma_bar)
    else:
        u = xi / (1.0 + 2.0 * gamma_bar)
    return min(max(u, u_min), u_max)


def project_box(u, box: ControlBox):
    out = np.clip(u, box.u_min, box.u_max)
    return float(out) if np.ndim(out) == 0 else out


def instantaneous_control(x_i, x_j, kernel: InteractionKernel, p: InstantaneousParams,
                          box: ControlBox):
    """Return the optimal pair (u_i, u_j); broadcasts over array states."""
    p_ij = eval_kernel(kernel, x_i, x_j)
    p_ji = eval_kernel(kernel, x_j, x_i)
    args = (p.target, p.dt, p.gamma_bar, box.u_min, box.u_max, p.penalty.code)
    u_i = pair_control(x_i, x_j, p_ij, *args)
    u_j = pair_control(x_j, x_i, p_ji, *args)
    if np.ndim(u_i) == 0:
        return float(u_i), float(u_j)
    return u_i, u_j


def running_cost(x_i, x_j, u_i, u_j, p: InstantaneousParams):
    """Two-agent running cost: mean squared distance to target plus control penalty."""
    state = 0.5 * ((p.target - x_i) ** 2 + (p.target - x_j) ** 2)
    if p.penalty is Penalty.L1:
        control = np.abs(u_i) + np.abs(u_j)
    else:
        control = np.square(u_i) + np.square(u_j)
    return state + p.gamma * control
