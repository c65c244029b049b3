"""Apparent-age estimation by distribution learning, with fairness auditing."""

from .age_head import (
    DEFAULT_GRID,
    AgeDistribution,
    AgeGrid,
    distribution_variance,
    expected_age,
    residue_adjusted_age,
    softmax,
)
from .exceptions import EmptyInputError, InvalidInputError, ManifestError, ProjectorUnavailableError
from .losses import (
    LossOutput,
    LossWeights,
    adaptive_mean_residue_loss,
    cross_entropy_loss,
    gradient_check,
    mean_variance_loss,
)
from .metrics import PredictionRecord, epsilon_error, group_report, kl_divergence, mae, render_tables

__version__ = "0.1.0"
