"""Finite-difference verification of the full model loss, scheme by scheme.

Builds a small random student/teacher pair, freezes the stop-gradient
boundary (teacher cube and weight cube) at the evaluation point, and
compares reverse-mode gradients of every student parameter against central
finite differences.
"""

from __future__ import annotations

import numpy as np

from . import tensor as td
from .losses import SCHEME_TAGS, WeightingScheme, ensemble_loss, scheme_weights
from .model import ModelDims, TeacherState, encode, head_logits, init_params, param_tensors
from .tensor import Tensor

CHECK_DIMS = ModelDims(
    input_dim=8,
    repr_dim=6,
    embed_dim=6,
    codebook_size=5,
    heads=3,
    encoder_hidden=(6,),
    head_hidden=(6,),
)


def _student_cube(x: np.ndarray, leaves: dict[str, Tensor], dims: ModelDims,
                  tau_s: float) -> Tensor:
    z = encode(x, leaves, dims)
    return td.stack(
        [td.log_softmax_rows(head_logits(z, leaves, dims, j), temperature=tau_s)
         for j in range(dims.heads)],
        axis=1,
    )


def scheme_gradient_error(
    tag: str,
    seed: int = 0,
    batch: int = 4,
    gamma: float = 0.7,
    aligned: bool = False,
    h: float = 1e-5,
    dims: ModelDims = CHECK_DIMS,
) -> float:
    """Max relative autodiff-vs-finite-difference error over all parameters."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, dims.input_dim))
    student = init_params(seed, dims)
    teacher = TeacherState.from_student(init_params(seed + 1, dims))
    scheme = WeightingScheme(tag, gamma=gamma, aligned=aligned)

    t_ts = param_tensors(teacher.params)
    zt = encode(x, t_ts, dims)
    pt = np.stack(
        [td.log_softmax_rows(head_logits(zt, t_ts, dims, j), temperature=0.05).data
         for j in range(dims.heads)],
        axis=1,
    )

    base_leaves = param_tensors(student, trainable=True)
    ps0 = _student_cube(x, base_leaves, dims, tau_s=0.1).data
    w0 = scheme_weights(scheme, pt, ps0)

    def loss_fn(leaves: dict[str, Tensor]) -> Tensor:
        cube = _student_cube(x, leaves, dims, tau_s=0.1)
        return ensemble_loss(pt, cube, scheme, weights=w0)

    report = td.finite_diff_check(loss_fn, student.tensors, h=h)
    return max(report.values())


def gradient_suite(tags: tuple[str, ...] = SCHEME_TAGS, seed: int = 0) -> dict[str, float]:
    """Run the check for every requested scheme; returns tag -> max rel error."""
    return {tag: scheme_gradient_error(tag, seed=seed) for tag in tags}
