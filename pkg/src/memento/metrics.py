"""Normalized Entropy and log-loss.

NE is the model's average log-loss divided by the log-loss of a constant
predictor emitting the batch's empirical positive rate; 1.0 means no skill and
lower is better. Natural log throughout. Summation uses math.fsum (exactly
rounded), so results are independent of summation order even at N = 1e6.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateLabels, EmptyBatch

# Probabilities are clamped to [CLAMP_EPS, 1 - CLAMP_EPS] before taking logs so
# saturated sigmoids cannot produce infinite loss. Recorded in report metadata.
CLAMP_EPS = 1e-7


@dataclass(frozen=True)
class PredictionBatch:
    """Paired predictions p in (0,1) and binary labels."""

    p: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        p = np.asarray(self.p, dtype=np.float64)
        y = np.asarray(self.y)
        if p.ndim != 1 or y.ndim != 1 or p.shape != y.shape:
            raise EmptyBatch(f"p and y must be equal-length 1-D, got {p.shape}, {y.shape}")
        if p.shape[0] == 0:
            raise EmptyBatch("empty prediction batch")
        if not np.all(np.isfinite(p)):
            raise EmptyBatch("predictions contain NaN or Inf")
        labels = y.astype(np.int8)
        if not np.all((labels == 0) | (labels == 1)):
            raise EmptyBatch("labels must be 0 or 1")
        p = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
        p.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "y", labels)

    @property
    def size(self) -> int:
        return int(self.p.shape[0])


def log_loss(batch: PredictionBatch) -> float:
    """Average negative log-likelihood per example."""
    y = batch.y.astype(np.float64)
    terms = y * np.log(batch.p) + (1.0 - y) * np.log1p(-batch.p)
    return -math.fsum(terms) / batch.size


def normalized_entropy(batch: PredictionBatch) -> float:
    """Log-loss divided by the entropy of the batch's empirical positive rate."""
    n_pos = int(batch.y.sum())
    if n_pos == 0 or n_pos == batch.size:
        raise DegenerateLabels("all labels identical; constant-model loss is zero")
    pbar = n_pos / batch.size
    denom = -(pbar * math.log(pbar) + (1.0 - pbar) * math.log1p(-pbar))
    return log_loss(batch) / denom


def relative_ne(candidate_ne: float, baseline_ne: float) -> float:
    """Signed percent change vs. a baseline NE; negative means improvement."""
    if baseline_ne <= 0.0:
        raise ValueError(f"baseline NE must be > 0, got {baseline_ne}")
    return 100.0 * (candidate_ne - baseline_ne) / baseline_ne
