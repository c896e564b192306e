"""Desk-scale data: gaussian-mixture generation, CSV ingestion, multi-view
augmentation (noise plus coordinate masking) standing in for multi-crop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError


@dataclass
class Dataset:
    """Feature matrix plus labels that only evaluation may read.

    Labels are deliberately hidden behind ``labels_for_eval``; the training
    path never calls it, which the tests enforce with a poisoned accessor.
    """

    features: np.ndarray
    meta: dict = field(default_factory=dict)
    _labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataFormatError("features must be a 2-d matrix")
        if np.any(~np.isfinite(self.features)):
            raise DataFormatError("features contain non-finite values")
        if self._labels is not None:
            self._labels = np.asarray(self._labels, dtype=np.int64)
            if self._labels.shape != (self.features.shape[0],):
                raise DataFormatError("labels length must match feature rows")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def labels_for_eval(self) -> np.ndarray:
        """Evaluation-only accessor; training code must never call this."""
        if self._labels is None:
            raise DataFormatError("dataset carries no labels")
        return self._labels


@dataclass
class ViewBatch:
    """Augmented views of one batch; index i of every view is the same sample."""

    global_views: list[np.ndarray]
    local_views: list[np.ndarray]
    mask_ratio: float = 0.0

    @property
    def all_views(self) -> list[np.ndarray]:
        return self.global_views + self.local_views


def gen_gaussian_mixture(
    seed: int,
    classes: int,
    dim: int,
    samples: int,
    class_sep: float = 4.0,
    within_std: float = 1.0,
) -> Dataset:
    """Balanced gaussian mixture with class means on a common sphere.

    The sphere radius is class_sep * sqrt(2), putting each mean a distance
    of class_sep from the midpoint of a typical pair (random high-dim
    directions are near-orthogonal, so inter-mean distances concentrate at
    2 * class_sep). Pure function of the seed: means, label permutation and
    noise are all drawn from one generator.
    """
    if classes < 2 or dim < 2:
        raise ValueError("need classes >= 2 and dim >= 2")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(classes, dim))
    means *= class_sep * np.sqrt(2.0) / np.linalg.norm(means, axis=1, keepdims=True)
    labels = rng.permutation(np.arange(samples) % classes)
    feats = means[labels] + within_std * rng.normal(size=(samples, dim))
    meta = {
        "seed": seed,
        "classes": classes,
        "dim": dim,
        "samples": samples,
        "class_sep": class_sep,
        "within_std": within_std,
    }
    return Dataset(features=feats, meta=meta, _labels=labels)


def make_views(
    batch: np.ndarray,
    seed: int,
    g: int = 2,
    v: int = 4,
    noise_global: float = 0.25,
    noise_local: float = 0.75,
    mask_ratio: float = 0.2,
) -> ViewBatch:
    """Global views add gaussian noise; local views add noise and zero out
    ceil(mask_ratio * D) randomly chosen coordinates per view.

    Deterministic per seed. With zero noise and zero mask ratio every view
    equals the input.
    """
    if noise_global < 0.0 or noise_local < 0.0:
        raise ValueError("noise levels must be >= 0")
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError("mask_ratio must be in [0, 1)")
    batch = np.asarray(batch, dtype=np.float64)
    b, d = batch.shape
    rng = np.random.default_rng(seed)
    global_views = [batch + noise_global * rng.normal(size=(b, d)) for _ in range(g)]
    n_masked = math.ceil(mask_ratio * d)
    local_views = []
    for _ in range(v):
        view = batch + noise_local * rng.normal(size=(b, d))
        if n_masked:
            # per-row uniform scores; the n_masked smallest pick the coordinates
            scores = rng.random(size=(b, d))
            idx = np.argpartition(scores, n_masked - 1, axis=1)[:, :n_masked]
            np.put_along_axis(view, idx, 0.0, axis=1)
        local_views.append(view)
    return ViewBatch(global_views=global_views, local_views=local_views, mask_ratio=mask_ratio)


def save_csv(dataset: Dataset, path) -> None:
    """Write ``label,f0,f1,...`` rows; floats keep 17 significant digits."""
    labels = dataset.labels_for_eval()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_NONE)
        writer.writerow(["label"] + [f"f{i}" for i in range(dataset.dim)])
        for y, row in zip(labels, dataset.features):
            writer.writerow([int(y)] + [format(x, ".17g") for x in row])


def load_csv(path) -> Dataset:
    """Parse the CSV format written by ``save_csv``; rejects ragged rows."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if not header or header[0] != "label":
            raise DataFormatError(f"{path}: header must start with 'label'")
        width = len(header) - 1
        if width < 1 or header[1:] != [f"f{i}" for i in range(width)]:
            raise DataFormatError(f"{path}: feature columns must be f0..f{max(width - 1, 0)}")
        labels: list[int] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width + 1:
                raise DataFormatError(
                    f"{path}: line {lineno}: expected {width + 1} fields, got {len(row)}"
                )
            try:
                labels.append(int(row[0]))
            except ValueError:
                raise DataFormatError(
                    f"{path}: line {lineno}: label {row[0]!r} is not an integer"
                ) from None
            try:
                rows.append([float(x) for x in row[1:]])
            except ValueError:
                raise DataFormatError(f"{path}: line {lineno}: malformed float") from None
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return Dataset(
        features=np.array(rows, dtype=np.float64),
        meta={"source": str(path)},
        _labels=np.array(labels, dtype=np.int64),
    )
