"""Training objectives over the age distribution, with analytic logit gradients.

Three objectives are provided:

``ce``
    softmax cross-entropy against the nearest age category.
``mvl``
    cross-entropy plus a mean penalty ``0.5 * (m - t)**2`` on the expected
    age ``m`` and a variance penalty on the spread of the distribution.
``amrl``
    cross-entropy plus the mean penalty and a residue penalty
    ``-log(1 - R)`` (stabilized by 1e-12), where ``R`` is the probability mass lying farther
    than ``residue_half_width`` years from the target.

Every penalty ``f(p)`` is differentiated through the softmax Jacobian,
``df/dz_k = p_k * (g_k - sum_j p_j g_j)`` with ``g = df/dp``, which gives
closed forms for each term (see ``_objective_terms``).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .age_head import DEFAULT_GRID, AgeGrid, softmax_array
from .exceptions import InvalidInputError

OBJECTIVES = ("ce", "mvl", "amrl")
RESIDUE_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_mean: float = 0.2
    lambda_variance: float = 0.05
    lambda_residue: float = 0.05
    residue_half_width: float = 5.0

    def __post_init__(self):
        for name in ("lambda_mean", "lambda_variance", "lambda_residue"):
            if not getattr(self, name) >= 0:
                raise InvalidInputError(f"{name} must be nonnegative")
        if not self.residue_half_width > 0:
            raise InvalidInputError("residue_half_width must be positive")

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(v) for k, v in (d or {}).items()})

    def to_dict(self):
        return {
            "lambda_mean": self.lambda_mean,
            "lambda_variance": self.lambda_variance,
            "lambda_residue": self.lambda_residue,
            "residue_half_width": self.residue_half_width,
        }


@dataclass
class LossOutput:
    total: float
    components: dict = field(default_factory=dict)
    grad_logits: np.ndarray | None = None

    def recompose(self, weights: LossWeights) -> float:
        """Rebuild the total from the stored components."""
        scale = {
            "ce": 1.0,
            "mean": weights.lambda_mean,
            "variance": weights.lambda_variance,
            "residue": weights.lambda_residue,
        }
        return float(sum(scale[k] * v for k, v in self.components.items() if v is not None))


def _check_objective(objective):
    if objective not in OBJECTIVES:
        raise InvalidInputError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")


def _objective_terms(logits, targets, grid, objective, weights):
    """Batched core. ``logits`` (B, N); ``targets`` (B,) ages, or category ids for ``ce``.

    Returns ``(totals, components, grads)`` with ``totals`` (B,), each component
    (B,), and ``grads`` (B, N).
    """
    ages = grid.ages
    p = softmax_array(logits)
    rows = np.arange(p.shape[0])

    if objective == "ce":
        cat = np.asarray(targets, dtype=np.int64)
    else:
        cat = grid.nearest_category(targets)
        cat = np.atleast_1d(cat)
    onehot = np.zeros_like(p)
    onehot[rows, cat] = 1.0

    # log-softmax evaluated directly for accuracy when p[target] underflows
    z = np.asarray(logits, dtype=np.float64)
    zmax = z.max(axis=-1, keepdims=True)
    logsumexp = (zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True)))[:, 0]
    ce = logsumexp - z[rows, cat]
    comps = {"ce": ce}
    total = ce.copy()
    grad = p - onehot
    if objective == "ce":
        return total, comps, grad

    t = np.asarray(targets, dtype=np.float64)
    m = p @ ages
    diff = m - t
    comps["mean"] = 0.5 * diff**2
    total = total + weights.lambda_mean * comps["mean"]
    # g_i = (m - t) * a_i  ->  grad_k = (m - t) * p_k * (a_k - m)
    grad = grad + weights.lambda_mean * diff[:, None] * p * (ages - m[:, None])

    if objective == "mvl":
        dev2 = (ages - m[:, None]) ** 2
        var = (p * dev2).sum(axis=-1)
        comps["variance"] = var
        total = total + weights.lambda_variance * var
        # g_i = a_i^2 - 2 m a_i  ->  grad_k = p_k * ((a_k - m)^2 - v)
        grad = grad + weights.lambda_variance * p * (dev2 - var[:, None])
    else:
        outside = np.abs(ages - t[:, None]) > weights.residue_half_width
        r = (p * outside).sum(axis=-1)
        denom = 1.0 - r + RESIDUE_EPS
        # offset by log(1 + eps) so the term is exactly 0 when R = 0
        comps["residue"] = np.log1p(RESIDUE_EPS) - np.log(denom)
        total = total + weights.lambda_residue * comps["residue"]
        # g_i = 1[i outside] / denom  ->  grad_k = p_k * (1[k outside] - R) / denom
        grad = grad + weights.lambda_residue * p * (outside - r[:, None]) / denom[:, None]
    return total, comps, grad


def batch_loss(logits, targets, objective="ce", weights=None, grid: AgeGrid = DEFAULT_GRID):
    """Vectorized loss for a mini-batch; used by the training loop.

    Returns per-sample totals (B,), a dict of per-sample components and the
    per-sample gradient (B, N).
    """
    _check_objective(objective)
    weights = weights or LossWeights()
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if logits.shape[-1] != len(grid):
        raise InvalidInputError(f"got {logits.shape[-1]} logits for a grid of {len(grid)} categories")
    return _objective_terms(logits, np.atleast_1d(targets), grid, objective, weights)


def _single(logits, target, objective, weights, grid):
    totals, comps, grads = batch_loss(logits, [target], objective, weights, grid)
    return LossOutput(
        total=float(totals[0]),
        components={k: float(v[0]) for k, v in comps.items()},
        grad_logits=grads[0],
    )


def cross_entropy_loss(logits, target_category: int, grid: AgeGrid = DEFAULT_GRID) -> LossOutput:
    if not (isinstance(target_category, (int, np.integer)) and 0 <= target_category < len(grid)):
        raise InvalidInputError(f"target category {target_category!r} outside [0, {len(grid)})")
    return _single(logits, int(target_category), "ce", None, grid)


def cross_entropy_from_probs(probs, target_category: int) -> float:
    """Cross-entropy of an explicit probability vector (allows exact zeros/ones)."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= target_category < probs.size:
        raise InvalidInputError(f"target category {target_category!r} outside [0, {probs.size})")
    pt = probs[target_category]
    return float("inf") if pt == 0 else float(-np.log(pt))


def _warn_outside(target_age, grid):
    if not grid.min_age <= target_age <= grid.max_age:
        warnings.warn(
            f"target age {target_age} lies outside the grid span [{grid.min_age}, {grid.max_age}]",
            stacklevel=3,
        )


def mean_variance_loss(logits, target_age: float, weights: LossWeights | None = None,
                       grid: AgeGrid = DEFAULT_GRID) -> LossOutput:
    _warn_outside(target_age, grid)
    return _single(logits, float(target_age), "mvl", weights or LossWeights(), grid)


def adaptive_mean_residue_loss(logits, target_age: float, weights: LossWeights | None = None,
                               grid: AgeGrid = DEFAULT_GRID) -> LossOutput:
    _warn_outside(target_age, grid)
    return _single(logits, float(target_age), "amrl", weights or LossWeights(), grid)


def distribution_terms(probs, target_age, grid: AgeGrid = DEFAULT_GRID, half_width=5.0):
    """Mean, variance and residue penalties of an explicit distribution.

    Lets the penalty terms be inspected on distributions that no finite
    logits can produce (e.g. exact one-hots).
    """
    probs = np.asarray(probs, dtype=np.float64)
    ages = grid.ages
    m = probs @ ages
    r = probs[np.abs(ages - target_age) > half_width].sum()
    return {
        "mean": 0.5 * (m - target_age) ** 2,
        "variance": float(probs @ (ages - m) ** 2),
        "residue": float(np.log1p(RESIDUE_EPS) - np.log(1.0 - r + RESIDUE_EPS)),
    }


def finite_difference_grad(objective, logits, target, weights=None, grid: AgeGrid = DEFAULT_GRID, h=1e-5):
    """Central-difference gradient of the scalar total w.r.t. each logit."""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.size
    steps = np.eye(n) * h
    plus, _, _ = batch_loss(logits + steps, np.full(n, target), objective, weights, grid)
    minus, _, _ = batch_loss(logits - steps, np.full(n, target), objective, weights, grid)
    return (plus - minus) / (2 * h)


def gradient_check(objective="ce", trials=100, seed=0, weights=None, grid: AgeGrid = DEFAULT_GRID,
                   logit_scale=3.0, h=1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Each trial draws logits ``~ N(0, logit_scale**2)`` and a target (a random
    category for ``ce``, a uniform age within the grid span otherwise). The
    relative error of a trial is ``|a - f| / max(|a|, |f|, 1e-12)`` in the
    Euclidean norm.
    """
    _check_objective(objective)
    if trials < 1:
        raise InvalidInputError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        z = rng.normal(0.0, logit_scale, size=len(grid))
        if objective == "ce":
            target = int(rng.integers(len(grid)))
        else:
            target = float(rng.uniform(grid.min_age, grid.max_age))
        _, _, analytic = batch_loss(z, [target], objective, weights, grid)
        numeric = finite_difference_grad(objective, z, target, weights, grid, h)
        a = analytic[0]
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(a - numeric) / denom))
    return worst
