"""Collapse-avoidance operators: Sinkhorn-Knopp, logit centering, ME-MAX."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as td
from .tensor import Tensor


def sinkhorn(p: np.ndarray, iters: int = 3) -> np.ndarray:
    """Alternating column/row normalization of a positive b-by-c matrix.

    Columns are driven toward sum b/c (codes equally used across the batch)
    and rows toward sum 1; each cycle ends with the row step, so every output
    row is a distribution regardless of iteration count. A uniform matrix is
    a fixed point of the full cycle.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"sinkhorn expects a 2-d matrix, got shape {p.shape}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not np.all(p > 0.0):
        raise ValueError("sinkhorn requires strictly positive entries")
    b, c = p.shape
    col_target = b / c
    out = p.copy()
    for _ in range(iters):
        out *= col_target / np.sum(out, axis=0, keepdims=True)
        out /= np.sum(out, axis=1, keepdims=True)
    return out


@dataclass
class CenterState:
    """Running mean of teacher logits for one head."""

    center: np.ndarray
    rate: float = 0.9

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"center rate must be in [0, 1), got {self.rate}")


def center_apply(logits: np.ndarray, state: CenterState) -> np.ndarray:
    """Subtract the running center from every row of a logit batch."""
    logits = np.asarray(logits, dtype=np.float64)
    return logits - state.center[None, :]


def center_update(state: CenterState, logits: np.ndarray) -> CenterState:
    """center <- rate * center + (1 - rate) * batch_mean(logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    state.center = state.rate * state.center + (1.0 - state.rate) * logits.mean(axis=0)
    return state


def memax_term(student_logprobs: Tensor, lam: float) -> Tensor:
    """Mean-entropy-maximization penalty over pooled student predictions.

    ``student_logprobs`` is an (n, m, c) cube of log-probabilities pooled
    over the batch and every student view. Returns
    -lam * mean_j H[pbar_j] with pbar_j the mean head-j probability row, so
    minimizing the total loss pushes the mean prediction toward uniform.
    Differentiable; lam=0 yields an exact zero.
    """
    if lam < 0.0:
        raise ValueError(f"memax weight must be >= 0, got {lam}")
    if lam == 0.0:
        return td.const(0.0)
    probs = td.exp(student_logprobs)          # (n, m, c)
    pbar = td.tmean(probs, axis=0)            # (m, c)
    ent_rows = td.scale(td.tsum(td.mul(pbar, td.log(pbar)), axis=1), -1.0)  # (m,)
    return td.scale(td.tmean(ent_rows), -lam)
