"""Training-free vector PRF: Average-PRF and Rocchio-PRF."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class RocchioParams:
    alpha: float = 0.5  # artifact default
    beta: float = 0.5  # artifact default

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise ValidationError("rocchio alpha and beta must be finite")


def _check(query, feedback) -> tuple[np.ndarray, np.ndarray]:
    q = np.asarray(query)
    fb = np.asarray(feedback)
    if fb.ndim == 1 and fb.size:
        fb = fb[None, :]
    if fb.ndim != 2 or fb.shape[0] == 0:
        raise ValidationError("feedback must contain at least one vector")
    if q.ndim != 1 or fb.shape[1] != q.shape[0]:
        raise ValidationError(f"dimension mismatch: query {q.shape}, feedback {fb.shape}")
    return q, fb


def average_prf(query, feedback) -> np.ndarray:
    """Mean of the query and its ``k`` feedback vectors."""
    q, fb = _check(query, feedback)
    return (q + fb.sum(axis=0)) / (fb.shape[0] + 1)


def rocchio_prf(query, feedback, params: RocchioParams = RocchioParams()) -> np.ndarray:
    """``alpha * q + beta * mean(feedback)``; no negative-feedback term."""
    q, fb = _check(query, feedback)
    return params.alpha * q + params.beta * fb.mean(axis=0)
