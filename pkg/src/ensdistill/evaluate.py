"""Frozen-representation evaluation and ensemble-diversity analysis.

Representations come from the frozen teacher encoder on clean inputs. The
weighted k-NN and the logistic-regression probe are self-contained and
deterministic; the code-diversity analysis aligns per-head empirical
assignment matrices with an exact Hungarian solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .model import ModelDims, ModelParams, TeacherState, encode, head_logits, param_tensors
from .regularize import center_apply, sinkhorn

PROBE_L2_GRID = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0, 3.0, 10.0)


@dataclass
class ReprBank:
    """Frozen encoder outputs with their evaluation labels."""

    z: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.z.ndim != 2 or self.labels.shape != (self.z.shape[0],):
            raise ValueError("bank needs (n, l) representations and n labels")
        if self.z.shape[0] == 0:
            raise ValueError("bank is empty")


def extract_representations(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Encoder forward on clean (un-augmented) inputs, no gradient."""
    ts = param_tensors(params)
    return encode(np.asarray(features, dtype=np.float64), ts, params.dims).data


def build_bank(teacher: TeacherState, dataset: Dataset) -> ReprBank:
    return ReprBank(
        z=extract_representations(teacher.params, dataset.features),
        labels=dataset.labels_for_eval(),
    )


def _cosine_to_bank(bank_z: np.ndarray, queries: np.ndarray) -> np.ndarray:
    qn = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
    bn = bank_z / np.maximum(np.linalg.norm(bank_z, axis=1, keepdims=True), 1e-12)
    return qn @ bn.T


def knn_predict(bank: ReprBank, query: np.ndarray, k: int, tau: float = 0.07) -> int:
    """Weighted k-NN vote: top-k by cosine, weights exp(cos/tau), ties to the
    smallest label id."""
    return int(knn_predict_batch(bank, np.asarray(query, dtype=np.float64)[None, :], k, tau)[0])


def knn_predict_batch(bank: ReprBank, queries: np.ndarray, k: int, tau: float = 0.07) -> np.ndarray:
    if k < 1 or k > bank.z.shape[0]:
        raise ValueError(f"k must be in [1, {bank.z.shape[0]}]")
    sims = _cosine_to_bank(bank.z, np.asarray(queries, dtype=np.float64))
    n_labels = int(bank.labels.max()) + 1
    out = np.empty(sims.shape[0], dtype=np.int64)
    for i, row in enumerate(sims):
        top = np.argpartition(-row, k - 1)[:k]
        votes = np.zeros(n_labels)
        np.add.at(votes, bank.labels[top], np.exp(row[top] / tau))
        out[i] = int(np.argmax(votes))  # argmax takes the smallest label on ties
    return out


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _logistic_fit(z: np.ndarray, y: np.ndarray, n_classes: int, lam: float,
                  max_iters: int = 5000, tol: float = 1e-6,
                  init: tuple[np.ndarray, np.ndarray] | None = None,
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Multinomial logistic regression by gradient descent with backtracking.

    Deterministic zero initialization; the objective (mean cross-entropy +
    lam * ||W||^2) is convex, so any initialization reaches the same optimum.
    Stops when the gradient norm drops below ``tol``.
    """
    n, d = z.shape
    if init is None:
        w = np.zeros((d, n_classes))
        b = np.zeros(n_classes)
    else:
        w, b = init[0].copy(), init[1].copy()
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0

    def value_and_grads(w, b):
        logits = z @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(logits).sum(axis=1))
        nll = float(np.mean(lse - logits[np.arange(n), y]))
        p = _softmax_rows(logits)
        diff = (p - onehot) / n
        gw = z.T @ diff + 2.0 * lam * w
        gb = diff.sum(axis=0)
        return nll + lam * float(np.sum(w * w)), gw, gb

    step = 1.0
    val, gw, gb = value_and_grads(w, b)
    for _ in range(max_iters):
        gnorm = math.sqrt(float(np.sum(gw * gw)) + float(np.sum(gb * gb)))
        if gnorm < tol:
            break
        # backtracking line search on the Armijo condition
        while step > 1e-12:
            w2 = w - step * gw
            b2 = b - step * gb
            val2, gw2, gb2 = value_and_grads(w2, b2)
            if val2 <= val - 0.5 * step * gnorm * gnorm:
                w, b, val, gw, gb = w2, b2, val2, gw2, gb2
                step *= 1.3
                break
            step *= 0.5
        else:
            break
    return w, b


def _probe_accuracy(w, b, z, y) -> float:
    pred = np.argmax(z @ w + b, axis=1)
    return float(np.mean(pred == y))


def linear_probe(
    bank_train: ReprBank,
    bank_test: ReprBank,
    l2_grid: tuple[float, ...] = PROBE_L2_GRID,
    seed: int = 0,
) -> tuple[float, float]:
    """Grid-searched logistic-regression probe; returns (test accuracy, best lambda).

    Lambda is selected on a held-out fifth of the training bank (a seeded
    shuffle taking every 5th index; selection falls back to train accuracy
    when fewer than 5 points exist), then the winning model is refit on the
    full training bank before test evaluation.
    """
    n_classes = int(max(bank_train.labels.max(), bank_test.labels.max())) + 1
    present = np.unique(bank_train.labels)
    if len(present) < n_classes:
        missing = sorted(set(range(n_classes)) - set(present.tolist()))
        raise ValueError(f"classes missing from the probe training bank: {missing}")

    n = bank_train.z.shape[0]
    order = np.random.default_rng(seed).permutation(n)
    if n >= 5:
        hold = order[::5]
        inner = np.setdiff1d(order, hold)
    else:
        hold = inner = order
    best_lam, best_acc = None, -1.0
    for lam in l2_grid:
        w, b = _logistic_fit(bank_train.z[inner], bank_train.labels[inner], n_classes, lam)
        acc = _probe_accuracy(w, b, bank_train.z[hold], bank_train.labels[hold])
        if acc > best_acc:
            best_acc, best_lam = acc, lam
    w, b = _logistic_fit(bank_train.z, bank_train.labels, n_classes, best_lam)
    return _probe_accuracy(w, b, bank_test.z, bank_test.labels), best_lam


def fewshot_split(dataset: Dataset, shots: int, seed: int) -> tuple[Dataset, Dataset]:
    """Exactly ``shots`` labelled samples per class, disjoint test remainder."""
    if shots < 1:
        raise ValueError("shots must be >= 1")
    labels = dataset.labels_for_eval()
    rng = np.random.default_rng(seed)
    train_idx: list[np.ndarray] = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) < shots + 1:
            raise ValueError(f"class {cls} has only {len(members)} samples for {shots} shots")
        train_idx.append(rng.choice(members, size=shots, replace=False))
    train_idx = np.sort(np.concatenate(train_idx))
    mask = np.zeros(len(dataset), dtype=bool)
    mask[train_idx] = True
    subset = lambda idx: Dataset(  # noqa: E731 - tiny local helper
        features=dataset.features[idx], meta=dict(dataset.meta), _labels=labels[idx]
    )
    return subset(mask), subset(~mask)


def hungarian_max(sim: np.ndarray) -> np.ndarray:
    """Exact max-total-similarity assignment on a square matrix.

    O(c^3) shortest-augmenting-path (Jonker-Volgenant) on the negated
    similarity; returns pi with pi[row] = assigned column.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {sim.shape}")
    n = sim.shape[0]
    cost = -sim
    # potentials u, v; col_to_row[j0] tracks the row matched to column j0;
    # column 0 slot is a virtual root
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    col_to_row = np.full(n + 1, -1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        col_to_row[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_to_row[j0]
            delta = np.inf
            j1 = -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0, j - 1] - u[i0 + 1] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[col_to_row[j] + 1] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if col_to_row[j0] == -1:
                break
        while j0:
            j1 = way[j0]
            col_to_row[j0] = col_to_row[j1]
            j0 = j1
    pi = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        pi[col_to_row[j]] = j - 1
    return pi


def _column_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity between every column pair; all-zero columns
    (dead codes) score 0 against everything by convention."""
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    sim = a.T @ b
    denom = np.outer(na, nb)
    out = np.zeros_like(sim)
    ok = denom > 0.0
    out[ok] = sim[ok] / denom[ok]
    return out


def code_alignment(a_j: np.ndarray, a_k: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Align the codes of two assignment matrices by empirical usage.

    Columns are embedded as their empirical assignment over the probe
    inputs; the Hungarian solver maximizes the summed column cosine. Returns
    (pi, aligned diagonal sorted descending, full similarity matrix).
    """
    a_j = np.asarray(a_j, dtype=np.float64)
    a_k = np.asarray(a_k, dtype=np.float64)
    if a_j.shape != a_k.shape:
        raise ValueError(f"assignment matrices differ in shape: {a_j.shape} vs {a_k.shape}")
    sim = _column_cosine(a_j, a_k)
    pi = hungarian_max(sim)
    diag = np.sort(sim[np.arange(sim.shape[0]), pi])[::-1]
    return pi, diag, sim


def assignment_matrix(teacher: TeacherState, features: np.ndarray, j: int,
                      tau_t: float = 0.025, renorm: str = "none",
                      sinkhorn_iters: int = 50) -> np.ndarray:
    """Empirical teacher assignment of head j over probe inputs: (N, c) rows
    of teacher probabilities, with the configured renormalization applied to
    the probe set as one batch."""
    dims = teacher.params.dims
    ts = param_tensors(teacher.params)
    z = encode(np.asarray(features, dtype=np.float64), ts, dims)
    logits = head_logits(z, ts, dims, j).data
    if renorm == "none":
        pass
    elif renorm == "center":
        logits = center_apply(logits, teacher.centers[j])
    elif renorm == "sinkhorn":
        scaled = (logits - logits.max()) / tau_t
        return sinkhorn(np.exp(scaled), iters=sinkhorn_iters)
    else:
        raise ValueError(f"unknown renorm mode {renorm!r}")
    return _softmax_rows(logits / tau_t)


@dataclass
class PairDiversity:
    head_i: int
    head_j: int
    diagonal: np.ndarray  # aligned similarities, descending

    @property
    def mean_similarity(self) -> float:
        return float(np.mean(self.diagonal))


def diversity_report(
    teacher: TeacherState,
    probe_features: np.ndarray,
    tau_t: float = 0.025,
    renorm: str = "none",
    sinkhorn_iters: int = 50,
) -> list[PairDiversity]:
    """Aligned-similarity decay curves for every head pair (empty for m=1)."""
    m = teacher.params.dims.heads
    mats = [
        assignment_matrix(teacher, probe_features, j, tau_t=tau_t, renorm=renorm,
                          sinkhorn_iters=sinkhorn_iters)
        for j in range(m)
    ]
    report = []
    for i in range(m):
        for j in range(i + 1, m):
            _, diag, _ = code_alignment(mats[i], mats[j])
            report.append(PairDiversity(head_i=i, head_j=j, diagonal=diag))
    return report
