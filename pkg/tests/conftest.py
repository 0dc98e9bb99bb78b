"""Shared synthetic data helpers.

Score rows come from softmaxed Gaussian logits, so top confidences and
conformity scores are continuous and distinct almost surely; labels are
drawn from each row's own distribution, which makes (scores, label)
pairs exchangeable for coverage checks.
"""

from __future__ import annotations

import numpy as np
from hypothesis import settings

from cshift.scores import LabeledDataset, ScoreMatrix, UnlabeledDataset

settings.register_profile("suite", deadline=None, max_examples=50)
settings.load_profile("suite")


def softmax_rows(n: int, n_classes: int, seed: int, scale: float = 2.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    logits = scale * rng.standard_normal((n, n_classes))
    v = np.exp(logits - logits.max(axis=1, keepdims=True))
    return v / v.sum(axis=1, keepdims=True)


def sample_labels(values: np.ndarray, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    cum = np.cumsum(values, axis=1)
    r = rng.random((values.shape[0], 1))
    return np.minimum((cum < r).sum(axis=1), values.shape[1] - 1)


def labeled(n: int, n_classes: int, seed: int, scale: float = 2.0) -> LabeledDataset:
    v = softmax_rows(n, n_classes, seed, scale)
    return LabeledDataset(ScoreMatrix(v), sample_labels(v, seed + 1))


def unlabeled(n: int, n_classes: int, seed: int, scale: float = 2.0) -> UnlabeledDataset:
    return UnlabeledDataset(ScoreMatrix(softmax_rows(n, n_classes, seed, scale)))


def write_csv(path, values: np.ndarray, labels=None) -> None:
    n_classes = values.shape[1]
    lines = ["label," + ",".join(f"c{i}" for i in range(n_classes))]
    for i, row in enumerate(values):
        lab = -1 if labels is None else int(labels[i])
        lines.append(str(lab) + "," + ",".join(repr(float(x)) for x in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
