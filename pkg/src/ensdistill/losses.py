"""The weighted-average unnormalized cross-entropy loss family.

Given teacher and student log-probability cubes of shape (b, m, c), every
scheme produces a score cube f[b, i, j, y] over (teacher i, student j,
outcome y). The importance weights are a softmax of f/gamma over all m^2
(i, j) pairs per (sample, outcome); they are computed from values only
(stop-gradient), so the loss gradient stays a reweighted log-likelihood
gradient. -inf scores act as masks and receive exactly zero weight.

Fast paths mirror the per-scheme simplifications (per-pair average for
Unif, cross-entropy of head-averaged predictions for Prob, entropy-softmax
weighting for Ent); the general weighted path is their oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as td
from .errors import InvalidMaskError, ShapeError
from .measures import entropy_from_logs, index_variance, kl_from_logs
from .tensor import Tensor

SCHEME_TAGS = (
    "Unif",
    "UnifAll",
    "Prob",
    "ProbTe",
    "ProbMax",
    "ProbMaxTe",
    "Ent",
    "EntSt",
    "Disagree",
    "LowVarTeacher",
)

_HARD_TAGS = frozenset({"ProbMax", "ProbMaxTe"})


@dataclass(frozen=True)
class WeightingScheme:
    """A weighting scheme tag plus its temperature and options.

    ``gamma`` is the softmax temperature (ignored by the Max variants, which
    are the hard gamma->0 limit). ``aligned`` restricts any scheme to
    matching teacher/student pairs by adding the log-Kronecker-delta mask.
    ``epsilon`` is the variance floor of the low-variance scheme.
    """

    tag: str
    gamma: float = 1.0
    aligned: bool = False
    epsilon: float = 1.0 / 12.0

    def __post_init__(self):
        if self.tag not in SCHEME_TAGS:
            raise ValueError(
                f"unknown scheme {self.tag!r}; valid schemes: {', '.join(SCHEME_TAGS)}"
            )
        if self.tag not in _HARD_TAGS and not self.gamma > 0.0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")

    @property
    def hard(self) -> bool:
        return self.tag in _HARD_TAGS

    @property
    def effective_gamma(self) -> float:
        return 0.0 if self.hard else self.gamma


def _vals(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _check_cubes(pt: np.ndarray, ps: np.ndarray):
    if pt.ndim != 3 or ps.ndim != 3:
        raise ShapeError("log-probability cubes must have shape (b, m, c)")
    if pt.shape != ps.shape:
        raise ShapeError(f"cube shapes differ: {pt.shape} vs {ps.shape}")


def _diag_mask(m: int) -> np.ndarray:
    """log delta(i - j): 0 on the diagonal, -inf off it."""
    mask = np.full((m, m), -np.inf)
    np.fill_diagonal(mask, 0.0)
    return mask


def scheme_f(scheme: WeightingScheme, log_pt, log_ps) -> np.ndarray:
    """Score cube f[b, i, j, y] for the given scheme.

    Depends only on values of the inputs (gradients never flow through it).
    Entropy, variance and divergence terms are computed on the normalized
    rows that enter the cross-entropy.
    """
    pt = _vals(log_pt)
    ps = _vals(log_ps)
    _check_cubes(pt, ps)
    b, m, c = pt.shape
    tag = scheme.tag

    if tag == "Unif":
        f = np.broadcast_to(_diag_mask(m)[None, :, :, None], (b, m, m, c)).copy()
    elif tag == "UnifAll":
        f = np.zeros((b, m, m, c))
    elif tag in ("Prob", "ProbMax"):
        f = np.broadcast_to(ps[:, None, :, :], (b, m, m, c)).copy()
    elif tag in ("ProbTe", "ProbMaxTe"):
        f = np.broadcast_to(pt[:, :, None, :], (b, m, m, c)).copy()
    elif tag == "Ent":
        ent = entropy_from_logs(pt)  # (b, m)
        f = -ent[:, :, None, None] + _diag_mask(m)[None, :, :, None]
        f = np.broadcast_to(f, (b, m, m, c)).copy()
    elif tag == "EntSt":
        ent = entropy_from_logs(ps)  # (b, m)
        f = -ent[:, None, :, None] + _diag_mask(m)[None, :, :, None]
        f = np.broadcast_to(f, (b, m, m, c)).copy()
    elif tag == "Disagree":
        div = kl_from_logs(pt[:, :, None, :], ps[:, None, :, :])  # (b, m, m)
        f = np.broadcast_to(div[:, :, :, None], (b, m, m, c)).copy()
    elif tag == "LowVarTeacher":
        var = index_variance(np.exp(pt))  # (b, m)
        f = -0.5 * np.log(var + scheme.epsilon)
        f = np.broadcast_to(f[:, :, None, None], (b, m, m, c)).copy()
    else:  # pragma: no cover - guarded by the dataclass validator
        raise ValueError(tag)

    if scheme.aligned:
        # idempotent for schemes whose definition already carries the mask
        f = f + _diag_mask(m)[None, :, :, None]
    return f


def compute_weights(f_cube: np.ndarray, gamma: float) -> np.ndarray:
    """Softmax of f/gamma over all (i, j) pairs per (sample, outcome).

    gamma=0 selects the hard limit: weight 1 on the argmax pair, ties broken
    by the lexicographically smallest (i, j). -inf scores get exactly zero
    weight; a (sample, outcome) group with no finite score raises
    InvalidMaskError.
    """
    f = np.asarray(f_cube, dtype=np.float64)
    if f.ndim != 4 or f.shape[1] != f.shape[2]:
        raise ShapeError(f"weight score cube must be (b, m, m, c), got {f.shape}")
    if gamma < 0.0:
        raise ValueError("gamma must be >= 0")
    b, m, _, c = f.shape
    flat = f.reshape(b, m * m, c)
    top = np.max(flat, axis=1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise InvalidMaskError("a (sample, outcome) group has all pair scores masked")
    if gamma == 0.0:
        # np.argmax takes the first maximum; row-major pair index i*m+j makes
        # that the lexicographically smallest (i, j)
        idx = np.argmax(flat, axis=1)
        w = np.zeros_like(flat)
        np.put_along_axis(w, idx[:, None, :], 1.0, axis=1)
    else:
        e = np.exp((flat - top) / gamma)
        w = e / np.sum(e, axis=1, keepdims=True)
    return w.reshape(b, m, m, c)


def scheme_weights(scheme: WeightingScheme, log_pt, log_ps) -> np.ndarray:
    return compute_weights(scheme_f(scheme, log_pt, log_ps), scheme.effective_gamma)


def ensemble_loss(log_pt, log_ps, scheme: WeightingScheme,
                  weights: np.ndarray | None = None) -> Tensor:
    """Differentiable scalar -1/b * sum_{x,i,j,y} w * t_i(y) * log s_j(y).

    The student mass term of the unnormalized cross-entropy (sum_y s - 1 per
    pair) is dropped: it is identically zero in value and constant in the
    model parameters for normalized students. ``ensemble_loss_value`` re-adds
    it when the exact formula value is wanted.

    ``weights`` overrides the weight cube; finite-difference harnesses use
    this to freeze the stop-gradient boundary at the evaluation point.
    """
    pt = _vals(log_pt)
    ps = log_ps if isinstance(log_ps, Tensor) else td.const(log_ps)
    _check_cubes(pt, ps.data)
    w = scheme_weights(scheme, pt, ps.data) if weights is None else weights
    agg = np.einsum("bijy,biy->bjy", w, np.exp(pt))
    b = pt.shape[0]
    return td.scale(td.tsum(td.mul(td.const(agg), ps)), -1.0 / b)


def ensemble_loss_value(log_pt, log_ps, scheme: WeightingScheme,
                        include_mass_term: bool = False) -> float:
    """Value-only evaluation of the weighted loss.

    With ``include_mass_term`` the exact per-pair ``sum_y s_j(y) - 1`` piece
    of the unnormalized cross-entropy is added back (it vanishes for
    normalized student rows).
    """
    pt, ps = _vals(log_pt), _vals(log_ps)
    _check_cubes(pt, ps)
    w = scheme_weights(scheme, pt, ps)
    b, m, _ = pt.shape
    value = -np.einsum("bijy,biy,bjy->", w, np.exp(pt), ps) / b
    if include_mass_term:
        value += (m * np.sum(np.exp(ps)) / b) - m * m
    return float(value)


def loss_unif_fast(log_pt, log_ps, gamma: float | None = None) -> Tensor:
    """Mean over heads of the per-pair cross-entropy (the aligned-uniform loss)."""
    pt = _vals(log_pt)
    ps = log_ps if isinstance(log_ps, Tensor) else td.const(log_ps)
    _check_cubes(pt, ps.data)
    ce = td.scale(td.tsum(td.mul(td.const(np.exp(pt)), ps), axis=2), -1.0)  # (b, m)
    return td.tmean(td.tmean(ce, axis=1))


def loss_prob_fast(log_pt, log_ps, gamma: float | None = None) -> Tensor:
    """Cross-entropy of head-averaged teacher against head-averaged student.

    Head averages are taken in probability space via logsumexp - log m.
    """
    pt = _vals(log_pt)
    ps = log_ps if isinstance(log_ps, Tensor) else td.const(log_ps)
    _check_cubes(pt, ps.data)
    m = pt.shape[1]
    log_mean_pt = _np_logsumexp(pt, axis=1) - np.log(m)  # (b, c)
    log_mean_ps = td.add_scalar(td.logsumexp(ps, axis=1), -np.log(m))
    per_sample = td.scale(
        td.tsum(td.mul(td.const(np.exp(log_mean_pt)), log_mean_ps), axis=1), -1.0
    )
    return td.tmean(per_sample)


def ent_weights(log_pt, gamma: float) -> np.ndarray:
    """Per-sample head weights softmax_i(-H[t_i]/gamma), shape (b, m)."""
    if not gamma > 0.0:
        raise ValueError("gamma must be positive")
    ent = entropy_from_logs(_vals(log_pt))
    scores = -ent / gamma
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=1, keepdims=True)


def loss_ent_fast(log_pt, log_ps, gamma: float, weights: np.ndarray | None = None) -> Tensor:
    """Per-sample entropy-softmax weighted sum of per-head cross-entropies.

    ``weights`` short-circuits the entropy computation when the caller has
    already derived the (b, m) head weights for this teacher cube.
    """
    pt = _vals(log_pt)
    ps = log_ps if isinstance(log_ps, Tensor) else td.const(log_ps)
    _check_cubes(pt, ps.data)
    w = ent_weights(pt, gamma) if weights is None else weights
    ce = td.scale(td.tsum(td.mul(td.const(np.exp(pt)), ps), axis=2), -1.0)  # (b, m)
    return td.tmean(td.tsum(td.mul(td.const(w), ce), axis=1))


def _np_logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def verify_prob_identity(log_pt, log_ps) -> float:
    """Max relative gradient discrepancy between the Prob fast path and the
    general weighted path at gamma=1, treating the student cube as the leaf.

    The appendix-level identity says these gradients agree exactly; anything
    above ~1e-10 indicates a broken weight computation.
    """
    pt, psd = _vals(log_pt), _vals(log_ps)
    lf1 = td.leaf("ps", psd)
    g_fast = td.backward(loss_prob_fast(pt, lf1))["ps"]
    lf2 = td.leaf("ps", psd)
    g_gen = td.backward(ensemble_loss(pt, lf2, WeightingScheme("Prob", gamma=1.0)))["ps"]
    denom = np.maximum(np.maximum(np.abs(g_fast), np.abs(g_gen)), 1e-8)
    return float(np.max(np.abs(g_fast - g_gen) / denom))


def verify_bound_ordering(log_pt, log_ps) -> tuple[float, float]:
    """Joint-convexity slacks, averaged over the batch.

    slack1 = mean_i K[t_i, s_i] - K[tbar, sbar]
    slack2 = mean_{i,j} K[t_i, s_j] - K[tbar, sbar]
    Both are nonnegative for normalized cubes.
    """
    pt, ps = _vals(log_pt), _vals(log_ps)
    _check_cubes(pt, ps)
    b, m, _ = pt.shape
    k_pair = kl_from_logs(pt[:, :, None, :], ps[:, None, :, :])  # (b, m, m)
    k_diag = np.diagonal(k_pair, axis1=1, axis2=2)  # (b, m)
    log_tbar = _np_logsumexp(pt, axis=1) - np.log(m)
    log_sbar = _np_logsumexp(ps, axis=1) - np.log(m)
    k_mix = kl_from_logs(log_tbar, log_sbar)  # (b,)
    slack1 = float(np.mean(k_diag.mean(axis=1) - k_mix))
    slack2 = float(np.mean(k_pair.mean(axis=(1, 2)) - k_mix))
    return slack1, slack2


def weight_mass_per_head(scheme: WeightingScheme, log_pt, log_ps) -> np.ndarray:
    """Diagnostic: mean over (sample, outcome) of the student-side weight mass.

    Returns an (m,) vector summing to ~1; a persistently one-hot vector
    signals over-specialization onto a single head.
    """
    w = scheme_weights(scheme, log_pt, log_ps)
    return w.sum(axis=1).mean(axis=(0, 2))
