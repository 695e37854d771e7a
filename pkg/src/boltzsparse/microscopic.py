"""Direct N-agent simulation, used to cross-check the kinetic engine.

    x_i <- x_i + dt * ( 1/N sum_j P(x_i, x_j)(x_j - x_i) + u_i ),
    u_i  = 1/N sum_j S(x_i, x_j),

where S = 2 u* is the same binary forcing the kinetic engine applies, so
the microscopic and kinetic models share one mean-field limit.  The self
term j = i is included.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Callable, Optional

import numpy as np

from . import _engine
from .kernels import InteractionKernel
from .kinetic import BinaryFeedback, pack_feedback


@dataclass
class AgentSystem:
    states: np.ndarray
    dt: float
    step: int = 0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 1 or self.states.size < 1:
            raise ValueError("need at least one agent")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("states must be finite")

    @property
    def positions(self) -> np.ndarray:
        # same attribute name as ParticleEnsemble so observers serve both
        return self.states

    @property
    def time(self) -> float:
        return self.step * self.dt


def _packed(kernel: InteractionKernel, feedback: BinaryFeedback, dt: float):
    kcode, *kpar = kernel.packed
    # the binary forcing is evaluated at the interaction strength alpha = dt/2
    return (kcode, np.array(kpar, dtype=np.float64)) + pack_feedback(feedback, dt / 2)


def micro_step(sys: AgentSystem, kernel: InteractionKernel, feedback: BinaryFeedback,
               _packed_args=None) -> AgentSystem:
    """One synchronous forward-Euler step, in place."""
    args = _packed_args or _packed(kernel, feedback, sys.dt)
    inter, ctrl = _engine.micro_drift(sys.states, *args)
    sys.states = sys.states + sys.dt * (inter + 2.0 * ctrl)
    sys.step += 1
    return sys


def micro_run(sys: AgentSystem, kernel: InteractionKernel, feedback: BinaryFeedback,
              T: float, observer: Optional[Callable[[AgentSystem], None]] = None,
              n_frames: int = 100, every: Optional[int] = None) -> AgentSystem:
    """ceil(T/dt) steps; observer sees the initial state, every ``every`` steps and the end."""
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
    m = math.ceil(T / sys.dt - 1e-9)
    if every is None:
        every = max(1, int(round(m / n_frames)))
    args = _packed(kernel, feedback, sys.dt)
    if observer is not None:
        observer(sys)
    for k in range(1, m + 1):
        micro_step(sys, kernel, feedback, args)
        if observer is not None and (k % every == 0 or k == m):
            observer(sys)
    return sys
