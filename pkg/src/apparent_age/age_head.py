"""Distribution-over-ages output head and its age readouts.

The network emits one logit per age category. After a softmax the
prediction is read out as the probability-weighted mean of the category
ages, optionally refined by re-centering on the mass near that mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInputError

SUM_TOL = 1e-6
EMPTY_WINDOW_MASS = 1e-12


@dataclass(frozen=True, eq=False)
class AgeGrid:
    """Category-to-age mapping. Defaults to the 101 integer ages 0..100."""

    ages: np.ndarray

    def __post_init__(self):
        ages = np.asarray(self.ages, dtype=np.float64).reshape(-1)
        if ages.size < 2:
            raise InvalidInputError("an age grid needs at least 2 categories")
        if not np.all(np.isfinite(ages)):
            raise InvalidInputError("age grid entries must be finite")
        if not np.all(np.diff(ages) > 0):
            raise InvalidInputError("age grid must be strictly increasing")
        ages.setflags(write=False)
        object.__setattr__(self, "ages", ages)

    @classmethod
    def integers(cls, start: int = 0, stop: int = 100) -> "AgeGrid":
        return cls(np.arange(start, stop + 1, dtype=np.float64))

    def __len__(self):
        return self.ages.size

    def __eq__(self, other):
        return isinstance(other, AgeGrid) and np.array_equal(self.ages, other.ages)

    def __hash__(self):
        return hash(self.ages.tobytes())

    @property
    def min_age(self) -> float:
        return float(self.ages[0])

    @property
    def max_age(self) -> float:
        return float(self.ages[-1])

    @property
    def span(self) -> float:
        return self.max_age - self.min_age

    def nearest_category(self, age):
        """Index of the grid age closest to ``age``; ties go to the lower category.

        Accepts a scalar or an array of ages.
        """
        age = np.asarray(age, dtype=np.float64)
        dist = np.abs(age[..., None] - self.ages)
        # argmin returns the first minimum, i.e. the lower category on ties
        idx = np.argmin(dist, axis=-1)
        return int(idx) if idx.ndim == 0 else idx


DEFAULT_GRID = AgeGrid.integers(0, 100)


@dataclass(frozen=True, eq=False)
class AgeDistribution:
    probs: np.ndarray
    grid: AgeGrid = DEFAULT_GRID

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        if probs.size != len(self.grid):
            raise InvalidInputError(f"distribution has {probs.size} entries, grid has {len(self.grid)}")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise InvalidInputError("probabilities must be finite and nonnegative")
        if abs(probs.sum() - 1.0) > SUM_TOL:
            raise InvalidInputError(f"probabilities sum to {probs.sum():.9f}, expected 1")
        object.__setattr__(self, "probs", probs)


def softmax_array(logits, axis=-1):
    """Max-subtracted softmax over ``axis`` for raw arrays (batched use)."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits must be finite")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(logits, grid: AgeGrid = DEFAULT_GRID) -> AgeDistribution:
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if logits.size != len(grid):
        raise InvalidInputError(f"got {logits.size} logits for a grid of {len(grid)} categories")
    return AgeDistribution(softmax_array(logits), grid)


def expected_age(dist: AgeDistribution) -> float:
    return float(dist.probs @ dist.grid.ages)


def distribution_variance(dist: AgeDistribution) -> float:
    m = expected_age(dist)
    return float(dist.probs @ (dist.grid.ages - m) ** 2)


def residue_adjusted_age(dist: AgeDistribution, half_width: float) -> float:
    """Refine the expected age using only the mass within ``half_width`` of it.

    The coarse estimate is the plain expectation. Categories farther than
    ``half_width`` years from it are dropped, the remaining mass is
    renormalized, and its expectation is returned. If the window holds
    (numerically) no mass the coarse estimate is returned unchanged.
    """
    if not half_width > 0:
        raise InvalidInputError(f"half_width must be positive, got {half_width}")
    ages = dist.grid.ages
    m = float(dist.probs @ ages)
    inside = np.abs(ages - m) <= half_width
    mass = dist.probs[inside].sum()
    if mass < EMPTY_WINDOW_MASS:
        return m
    return float(dist.probs[inside] @ ages[inside] / mass)


def readout_array(probs, ages, half_width=None):
    """Batched readout: expectation, or residue-adjusted if ``half_width`` is set.

    ``probs`` has shape (..., N); returns shape (...).
    """
    probs = np.asarray(probs, dtype=np.float64)
    m = probs @ ages
    if half_width is None:
        return m
    inside = np.abs(ages - m[..., None]) <= half_width
    masked = np.where(inside, probs, 0.0)
    mass = masked.sum(axis=-1)
    refined = (masked @ ages) / np.where(mass < EMPTY_WINDOW_MASS, 1.0, mass)
    return np.where(mass < EMPTY_WINDOW_MASS, m, refined)
