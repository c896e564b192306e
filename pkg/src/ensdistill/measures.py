"""Unnormalized information measures over finite outcome spaces.

The calculus here works on nonnegative weight vectors that need not sum to
one: cross_entropy(p, q) = -sum(p log q) + sum(q) - 1, entropy(p) =
cross_entropy(p, p), and kl(p, q) = cross_entropy(p, q) - entropy(p). All
three collapse to their textbook definitions for normalized inputs. Natural
logarithms throughout.

Absolute-continuity violations (p_y > 0 where q_y = 0) return the +inf
sentinel instead of being epsilon-smoothed: training paths never hit them
because softmax outputs are strictly positive, and smoothing would mask
bugs in the property tests.
"""

from __future__ import annotations

import numpy as np

_HALF_LOG_2PIE = 0.5 * np.log(2.0 * np.pi * np.e)


def _as_measure(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"{name} must be a 1-d weight vector, got shape {p.shape}")
    if np.any(p < 0.0):
        raise ValueError(f"{name} has negative entries")
    return p


def _xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """x * log(y) with the 0 log 0 = 0 convention."""
    out = np.zeros_like(x)
    nz = x > 0.0
    out[nz] = x[nz] * np.log(y[nz])
    return out


def unnorm_cross_entropy(p, q) -> float:
    """-sum(p log q) + sum(q) - 1, with 0 log 0 = 0.

    Returns +inf when p puts mass where q has none.
    """
    p = _as_measure(p, "p")
    q = _as_measure(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    if np.any((p > 0.0) & (q == 0.0)):
        return float("inf")
    return float(-np.sum(_xlogy(p, q)) + np.sum(q) - 1.0)


def entropy(p) -> float:
    """Unnormalized entropy, cross_entropy(p, p); -sum(p log p) for normalized p."""
    p = _as_measure(p, "p")
    return float(-np.sum(_xlogy(p, p)) + np.sum(p) - 1.0)


def unnorm_kl(p, q) -> float:
    """cross_entropy(p, q) - entropy(p); nonnegative for normalized p, q."""
    return unnorm_cross_entropy(p, q) - entropy(p)


def entropy_from_logs(logp) -> np.ndarray:
    """Entropy of normalized log-probability rows, -sum(exp(l) * l) over the last axis.

    Works on any leading batch shape; avoids an exp/log round trip for
    log-domain inputs. exp(-inf) * -inf is taken as 0 (masked outcomes).
    """
    logp = np.asarray(logp, dtype=np.float64)
    p = np.exp(logp)
    terms = np.where(p > 0.0, p * logp, 0.0)
    return -np.sum(terms, axis=-1)


def kl_from_logs(logp, logq) -> np.ndarray:
    """Unnormalized KL between rows given in log domain, over the last axis.

    sum(p * (logp - logq)) + sum(q) - sum(p); equals the classic KL when both
    rows are normalized.
    """
    logp = np.asarray(logp, dtype=np.float64)
    logq = np.asarray(logq, dtype=np.float64)
    p = np.exp(logp)
    q = np.exp(logq)
    terms = np.where(p > 0.0, p * (logp - logq), 0.0)
    return np.sum(terms, axis=-1) + np.sum(q, axis=-1) - np.sum(p, axis=-1)


def index_variance(p) -> np.ndarray:
    """Variance of the outcome index under p, outcomes numbered 1..c.

    Codes carry no natural order; this treats them as ordered integers
    exactly as the low-variance weighting is written, arbitrariness and all.
    Accepts batched rows (variance over the last axis).
    """
    p = np.asarray(p, dtype=np.float64)
    c = p.shape[-1]
    y = np.arange(1, c + 1, dtype=np.float64)
    mu = np.sum(p * y, axis=-1, keepdims=True)
    return np.sum(p * (y - mu) ** 2, axis=-1)


def entropy_variance_bound_gap(p) -> float:
    """Slack of H[p] <= 0.5*log(Var_p[X] + 1/12) + 0.5*log(2*pi*e).

    ``p`` must be normalized over outcomes 1..c; the returned RHS - LHS is
    nonnegative for every distribution.
    """
    p = _as_measure(p, "p")
    total = float(np.sum(p))
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"p must be normalized (sum={total!r})")
    var = float(index_variance(p))
    rhs = 0.5 * np.log(var + 1.0 / 12.0) + _HALF_LOG_2PIE
    return float(rhs - entropy(p))
