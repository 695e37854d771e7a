"""Pairwise interaction kernels P(x, y).

All kernels are radial (functions of |x - y| only) and therefore symmetric.
The scalar formulas are numba ufuncs so the same code serves the numpy
engines and the compiled microscopic sums.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numba
import numpy as np


class KernelKind(IntEnum):
    ZERO = 0
    CONSTANT = 1
    BOUNDED_CONFIDENCE = 2
    ATTRACTION_REPULSION = 3


@numba.vectorize(["float64(float64, float64, float64)"], cache=True)
def confidence_weight(r, delta, smoothing):
    """Piecewise-linear regularization of the indicator of ``r <= delta``."""
    if smoothing == 0.0:
        return 1.0 if r <= delta else 0.0
    if r <= delta - smoothing:
        return 1.0
    if r >= delta + smoothing:
        return 0.0
    return (delta + smoothing - r) * (0.5 / smoothing)


@numba.vectorize(["float64(float64, float64, float64, float64)"], cache=True)
def power_law_weight(r, a, b, sigma):
    s = sigma + r
    return s**a - s**b


@numba.vectorize(
    ["float64(int64, float64, float64, float64, float64)"], cache=True
)
def radial_weight(kind, r, p0, p1, p2):
    # kind codes follow KernelKind; p0..p2 are packed by InteractionKernel.packed
    if kind == 2:
        return confidence_weight(r, p0, p1)
    if kind == 3:
        return power_law_weight(r, p0, p1, p2)
    if kind == 1:
        return 1.0
    return 0.0


@dataclass(frozen=True)
class InteractionKernel:
    kind: KernelKind
    delta: float = 0.4
    smoothing: float = 0.02
    a: float = 1.0
    b: float = -1.0
    sigma: float = 1e-4

    def __post_init__(self):
        if self.kind == KernelKind.BOUNDED_CONFIDENCE:
            if not self.delta > 0:
                raise ValueError(f"delta must be positive, got {self.delta}")
            if not self.smoothing >= 0:
                raise ValueError(f"smoothing must be >= 0, got {self.smoothing}")
        if self.kind == KernelKind.ATTRACTION_REPULSION and not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @classmethod
    def bounded_confidence(cls, delta=0.4, smoothing=0.02):
        return cls(KernelKind.BOUNDED_CONFIDENCE, delta=delta, smoothing=smoothing)

    @classmethod
    def attraction_repulsion(cls, a=1.0, b=-1.0, sigma=1e-4):
        return cls(KernelKind.ATTRACTION_REPULSION, a=a, b=b, sigma=sigma)

    @classmethod
    def constant(cls):
        return cls(KernelKind.CONSTANT)

    @classmethod
    def zero(cls):
        return cls(KernelKind.ZERO)

    @property
    def packed(self) -> tuple[int, float, float, float]:
        """(kind code, p0, p1, p2) in the layout ``radial_weight`` expects."""
        if self.kind == KernelKind.BOUNDED_CONFIDENCE:
            return int(self.kind), self.delta, self.smoothing, 0.0
        if self.kind == KernelKind.ATTRACTION_REPULSION:
            return int(self.kind), self.a, self.b, self.sigma
        return int(self.kind), 0.0, 0.0, 0.0

    @property
    def is_consensus(self) -> bool:
        return self.kind in (KernelKind.BOUNDED_CONFIDENCE, KernelKind.CONSTANT)

    def __call__(self, x, y):
        return eval_kernel(self, x, y)


def eval_kernel(kernel: InteractionKernel, x, y):
    """Evaluate P(x, y); broadcasts over array arguments."""
    r = np.abs(np.subtract(x, y, dtype=np.float64))
    kind, p0, p1, p2 = kernel.packed
    out = radial_weight(kind, r, p0, p1, p2)
    return float(out) if np.ndim(out) == 0 else out
