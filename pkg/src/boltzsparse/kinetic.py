"""Binary Constrained Interaction (BCI) Monte Carlo engine.

The particle ensemble samples the kinetic density.  One step pairs the
particles at random without repetition and replaces every paired particle by
its post-interaction state

    x* = x + alpha P(x, y)(y - x) + alpha S(x, y),

with alpha = epsilon and time step epsilon (quasi-invariant scaling), so the
loss term of the collision scheme vanishes and every pair interacts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import TYPE_CHECKING, Callable, Optional, Union

import numpy as np

from . import _engine
from .kernels import InteractionKernel, eval_kernel
from .sparse_feedback import ControlBox, InstantaneousParams, Penalty, pair_control

if TYPE_CHECKING:
    from .hjb import FeedbackTable


@dataclass(frozen=True)
class InstantaneousFeedback:
    """Closed-form one-step feedback, recomputed for every pair.

    ``dt`` is the controller horizon.  ``None`` ties it to the interaction
    strength as dt = 2*alpha, which makes one binary interaction identical to
    one step of the two-agent model.
    """

    gamma_bar: float
    lam: float
    target: float = 0.0
    penalty: Penalty = Penalty.L1
    box: ControlBox = field(default_factory=ControlBox)
    dt: Optional[float] = None

    def params(self, alpha: float) -> InstantaneousParams:
        dt = 2.0 * alpha if self.dt is None else self.dt
        return InstantaneousParams.from_rate(self.gamma_bar, self.lam, dt,
                                             self.target, self.penalty)

    def control(self, x, y, kernel: InteractionKernel, alpha: float):
        p = self.params(alpha)
        return pair_control(x, y, eval_kernel(kernel, x, y), p.target, p.dt,
                            p.gamma_bar, self.box.u_min, self.box.u_max,
                            p.penalty.code)


@dataclass(frozen=True)
class TableFeedback:
    """Feedback read from a precomputed infinite-horizon table."""

    table: "FeedbackTable"

    def control(self, x, y, kernel: InteractionKernel, alpha: float):
        return self.table.lookup_first(x, y)


BinaryFeedback = Union[None, InstantaneousFeedback, TableFeedback]


def feedback_force(feedback: BinaryFeedback, x, y, kernel, alpha):
    """S(x, y) = 2 u*(x, y), the control forcing of a binary interaction."""
    if feedback is None:
        return np.zeros(np.broadcast(x, y).shape)
    return 2.0 * np.asarray(feedback.control(x, y, kernel, alpha))


def binary_interact(x, y, kernel: InteractionKernel, feedback: BinaryFeedback,
                    alpha: float):
    """Post-interaction states (x*, y*); broadcasts over arrays of pairs."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = y - x
    x_star = x + alpha * eval_kernel(kernel, x, y) * d
    y_star = y - alpha * eval_kernel(kernel, y, x) * d
    if feedback is not None:
        x_star = x_star + alpha * feedback_force(feedback, x, y, kernel, alpha)
        y_star = y_star + alpha * feedback_force(feedback, y, x, kernel, alpha)
    if x_star.ndim == 0:
        return float(x_star), float(y_star)
    return x_star, y_star


def iround(v: float, rng: np.random.Generator) -> int:
    """Stochastic rounding: floor(v) + Bernoulli(frac(v)).

    Always consumes exactly one uniform draw so the stream stays aligned.
    """
    if v < 0:
        raise ValueError("iround expects a nonnegative value")
    base = math.floor(v)
    return base + int(rng.random() < v - base)


@dataclass
class ParticleEnsemble:
    positions: np.ndarray
    epsilon: float
    seed: int = 0
    step: int = 0
    rng: np.random.Generator = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 1 or self.positions.size < 2:
            raise ValueError("ensemble needs at least two particles")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)

    @classmethod
    def uniform(cls, n: int, epsilon: float, seed: int, low=-1.0, high=1.0):
        """Seeded Unif[low, high] initial data; the same stream drives pairing."""
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(low, high, size=n), epsilon, seed=seed, rng=rng)

    @property
    def time(self) -> float:
        return self.step * self.epsilon

    def copy(self) -> "ParticleEnsemble":
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng.bit_generator.state
        return ParticleEnsemble(self.positions.copy(), self.epsilon, self.seed,
                                self.step, rng)

    def checkpoint(self) -> dict:
        return {"positions": self.positions.copy(), "epsilon": self.epsilon,
                "seed": self.seed, "step": self.step,
                "rng_state": self.rng.bit_generator.state}

    @classmethod
    def restore(cls, state: dict) -> "ParticleEnsemble":
        rng = np.random.default_rng()
        rng.bit_generator.state = state["rng_state"]
        return cls(np.array(state["positions"]), state["epsilon"], state["seed"],
                   state["step"], rng)


def draw_pairs(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint random pairs: shuffle all indices, pair consecutive entries."""
    n_pairs = min(iround(n / 2, rng), n // 2)
    perm = rng.permutation(n)
    return perm[0:2 * n_pairs:2], perm[1:2 * n_pairs:2]


def pack_feedback(feedback: BinaryFeedback, alpha: float):
    """Flatten a feedback into the (code, params, table, lo, h) engine layout."""
    if feedback is None:
        return _engine.FB_NONE, np.zeros(6), _engine._EMPTY_TABLE, 0.0, 1.0
    if isinstance(feedback, InstantaneousFeedback):
        p = feedback.params(alpha)
        fpar = np.array([p.target, p.dt, p.gamma_bar, feedback.box.u_min,
                         feedback.box.u_max, p.penalty.code], dtype=np.float64)
        return _engine.FB_INSTANT, fpar, _engine._EMPTY_TABLE, 0.0, 1.0
    t = feedback.table
    return (_engine.FB_TABLE, np.zeros(6), np.ascontiguousarray(t.u_first),
            t.omega_min, t.spacing)


def _packed(kernel, feedback, alpha):
    kcode, *kpar = kernel.packed
    return (kcode, np.array(kpar, dtype=np.float64)) + pack_feedback(feedback, alpha)


def bci_step(ens: ParticleEnsemble, kernel: InteractionKernel,
             feedback: BinaryFeedback, _packed_args=None) -> ParticleEnsemble:
    """Advance the ensemble in place by one step of length epsilon."""
    args = _packed_args or _packed(kernel, feedback, ens.epsilon)
    left, right = draw_pairs(ens.positions.size, ens.rng)
    _engine.bci_pairs(ens.positions, left, right, ens.epsilon, *args)
    ens.step += 1
    return ens


Observer = Callable[[ParticleEnsemble], None]


def n_steps(T: float, epsilon: float) -> int:
    m = int(round(T / epsilon))
    if not T > 0 or m < 1:
        raise ValueError(f"horizon T={T} shorter than one step of {epsilon}")
    return m


def bci_run(ens: ParticleEnsemble, kernel: InteractionKernel,
            feedback: BinaryFeedback, T: float,
            observer: Optional[Observer] = None, n_frames: int = 100,
            every: Optional[int] = None) -> ParticleEnsemble:
    """Run ``round(T/epsilon)`` BCI steps.

    The observer sees the initial ensemble and then every ``every`` steps
    (default ``round(M/n_frames)``), and always the final state.
    """
    m = n_steps(T, ens.epsilon)
    if every is None:
        every = max(1, int(round(m / n_frames)))
    args = _packed(kernel, feedback, ens.epsilon)
    if observer is not None:
        observer(ens)
    for k in range(1, m + 1):
        bci_step(ens, kernel, feedback, args)
        if observer is not None and (k % every == 0 or k == m):
            observer(ens)
    return ens
