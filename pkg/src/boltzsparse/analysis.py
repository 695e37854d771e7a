"""Densities and scalar diagnostics of particle ensembles."""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import find_peaks

from .errors import EmptyEnsemble, GeometryMismatch
from .kinetic import BinaryFeedback, feedback_force

ACTIVE_EPS = 1e-12


@dataclass
class DensityFrame:
    t: float
    bin_centers: np.ndarray
    mass: np.ndarray

    @property
    def dx(self) -> float:
        return float(self.bin_centers[1] - self.bin_centers[0])

    def same_grid(self, other: "DensityFrame") -> bool:
        return (self.bin_centers.shape == other.bin_centers.shape
                and np.allclose(self.bin_centers, other.bin_centers, rtol=0, atol=1e-12))


@dataclass
class DensitySeries:
    frames: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def append(self, frame: DensityFrame) -> None:
        if self.frames and not frame.t > self.frames[-1].t:
            raise ValueError("frame times must increase strictly")
        self.frames.append(frame)

    @property
    def times(self) -> np.ndarray:
        return np.array([f.t for f in self.frames])

    @property
    def bin_centers(self) -> np.ndarray:
        return self.frames[0].bin_centers

    def matrix(self) -> np.ndarray:
        """(n_frames, n_bins) array of bin masses."""
        return np.array([f.mass for f in self.frames])


def n_bins(omega: tuple[float, float], dx: float) -> int:
    if not dx > 0:
        raise ValueError(f"dx must be positive, got {dx}")
    width = omega[1] - omega[0]
    if not width > 0:
        raise ValueError(f"empty domain {omega}")
    # tolerate representation error, e.g. 2/0.025 = 80.00000000000001
    return max(1, math.ceil(width / dx - 1e-9))


def histogram(positions, omega=(-1.0, 1.0), dx=0.025, t=0.0) -> DensityFrame:
    """Bin probabilities on a uniform grid over omega; outliers go to the edge bins."""
    x = np.asarray(positions, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptyEnsemble("cannot build a histogram from no positions")
    n = n_bins(omega, dx)
    lo, hi = omega
    h = (hi - lo) / n
    idx = np.clip(np.floor((x - lo) / h).astype(np.int64), 0, n - 1)
    counts = np.bincount(idx, minlength=n).astype(np.float64)
    centers = lo + (np.arange(n) + 0.5) * h
    return DensityFrame(float(t), centers, counts / counts.sum())


def peak_count(frame: DensityFrame, min_prominence: float = 0.2):
    """Count local maxima of the 3-bin smoothed mass whose prominence exceeds
    ``min_prominence`` times the smoothed maximum.  Returns (count, centers)."""
    if not 0 < min_prominence < 1:
        raise ValueError("min_prominence must lie in (0, 1)")
    smooth = uniform_filter1d(np.asarray(frame.mass, float), size=3, mode="nearest")
    top = smooth.max()
    if top <= 0:
        return 0, np.array([])
    peaks, _ = find_peaks(smooth, prominence=min_prominence * top)
    return len(peaks), frame.bin_centers[peaks]


def wasserstein1(a: DensityFrame, b: DensityFrame) -> float:
    """Exact 1-D optimal transport cost between two frames on the same grid."""
    if not a.same_grid(b):
        raise GeometryMismatch("frames live on different bin grids")
    cdf_gap = np.cumsum(a.mass) - np.cumsum(b.mass)
    return float(a.dx * np.abs(cdf_gap).sum())


def moments(positions) -> tuple[float, float]:
    x = np.asarray(positions, dtype=np.float64)
    return float(x.mean()), float(x.var())


def realized_controls(positions, feedback: BinaryFeedback, kernel, alpha: float,
                      rng: np.random.Generator) -> np.ndarray:
    """u*(x, y) for every particle x against an independently drawn partner y."""
    x = np.asarray(positions, dtype=np.float64)
    partners = x[rng.integers(0, x.size, size=x.size)]
    return np.asarray(feedback.control(x, partners, kernel, alpha), dtype=np.float64)


def control_metrics(positions, feedback: BinaryFeedback, kernel, alpha: float,
                    rng: np.random.Generator) -> dict:
    """Mean |u| and fraction of particles under nonzero control."""
    if feedback is None:
        raise ValueError("control metrics need a feedback")
    u = realized_controls(positions, feedback, kernel, alpha, rng)
    return {"l1_mass": float(np.abs(u).mean()),
            "active_fraction": float(np.mean(np.abs(u) > ACTIVE_EPS))}


def control_field(positions, feedback: BinaryFeedback, kernel, alpha: float,
                  bin_centers, rng: np.random.Generator, max_partners: int = 2000):
    """Mean forcing K[mu](x) = E_y S(x, y) at each bin center.

    The expectation runs over at most ``max_partners`` ensemble samples.
    """
    x = np.asarray(positions, dtype=np.float64)
    if x.size > max_partners:
        x = x[rng.choice(x.size, size=max_partners, replace=False)]
    centers = np.asarray(bin_centers, dtype=np.float64)
    if feedback is None:
        return np.zeros(centers.size)
    force = feedback_force(feedback, centers[:, None], x[None, :], kernel, alpha)
    return force.mean(axis=1)


def time_to_consensus(times, variances, threshold: float = 1e-3) -> float:
    below = np.nonzero(np.asarray(variances) < threshold)[0]
    return float(np.asarray(times)[below[0]]) if below.size else math.inf
