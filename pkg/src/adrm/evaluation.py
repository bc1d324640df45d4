"""Accuracy bookkeeping, robustness sweeps, feature export and CKA similarity."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attacks import predict
from .corruptions import CorruptionSpec, corrupt
from .errors import InvalidArgument, UndefinedSimilarity
from .models import eval_mode


class AccuracyMatrix:
    """Lower-triangular ``R[t, i]``: accuracy on task ``i`` after training task ``t``."""

    def __init__(self, T):
        if T < 1:
            raise InvalidArgument("T must be >= 1")
        self.T = T
        self.R = np.full((T, T), np.nan)

    @classmethod
    def from_rows(cls, rows):
        m = cls(len(rows))
        for t, row in enumerate(rows):
            for i, acc in enumerate(row):
                m.set(t, i, acc)
        return m

    def set(self, t, i, accuracy):
        if i > t:
            raise InvalidArgument(f"R[{t}][{i}] is above the diagonal")
        if not 0.0 <= accuracy <= 1.0:
            raise InvalidArgument(f"accuracy {accuracy} outside [0, 1]")
        self.R[t, i] = accuracy

    def row(self, t):
        return self.R[t, :t + 1]

    def rows_completed(self):
        return int(sum(np.all(np.isfinite(self.row(t))) for t in range(self.T)))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step"] + [f"task_{i}" for i in range(self.T)])
            for t in range(self.T):
                w.writerow([t] + ["" if np.isnan(v) else repr(float(v)) for v in self.R[t]])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        m = cls(len(rows))
        for t, row in enumerate(rows):
            for i, cell in enumerate(row[1:]):
                if cell:
                    m.set(t, i, float(cell))
        return m


def aca(matrix):
    """Mean of the final row: the final model's accuracy averaged over all tasks."""
    R = matrix.R if isinstance(matrix, AccuracyMatrix) else np.atleast_2d(np.asarray(matrix, float))
    final = R[-1, :R.shape[0]]
    if final.size == 0 or not np.all(np.isfinite(final)):
        raise InvalidArgument("final row of the accuracy matrix is incomplete")
    return float(np.mean(final))


def accuracy(model, images, labels, batch_size=512):
    labels = torch.as_tensor(labels)
    if len(labels) == 0:
        raise InvalidArgument("cannot compute accuracy on an empty set")
    return int((predict(model, torch.as_tensor(images), batch_size) == labels).sum()) / len(labels)


CORRUPTION_HEADER = ("model_id", "kind", "severity", "accuracy", "n")


def corruption_sweep(model, images, labels, kinds, severities, seed=0, model_id="model"):
    """One accuracy per (kind, severity); severity 0 is the clean accuracy."""
    images = np.asarray(images, dtype=np.float32)
    rows = []
    for kind in kinds:
        for severity in severities:
            x = corrupt(images, CorruptionSpec(kind, severity), seed)
            rows.append({"model_id": model_id, "kind": kind, "severity": int(severity),
                         "accuracy": accuracy(model, torch.from_numpy(x), labels), "n": len(labels)})
    return rows


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in header})


# --------------------------------------------------------------------------
# features and similarity


@dataclass
class FeatureMatrix:
    features: np.ndarray
    labels: np.ndarray
    model_id: str = "model"
    layer_id: str = "penultimate"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if not np.all(np.isfinite(self.features)):
            raise InvalidArgument("features contain non-finite values")

    @property
    def N(self):
        return self.features.shape[0]

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / f"{self.model_id}.npy", self.features)
        manifest = {"model_id": self.model_id, "layer_id": self.layer_id,
                    "shape": list(self.features.shape), "labels": self.labels.tolist(), **self.meta}
        (directory / f"{self.model_id}.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, directory, model_id):
        directory = Path(directory)
        meta = json.loads((directory / f"{model_id}.json").read_text())
        labels = np.asarray(meta.pop("labels"))
        meta.pop("shape")
        return cls(np.load(directory / f"{model_id}.npy"), labels, meta.pop("model_id"),
                   meta.pop("layer_id"), meta)


def extract_features(model, images, labels=None, model_id="model", batch_size=512):
    """Penultimate-layer activations, computed in eval mode."""
    images = torch.as_tensor(images)
    with eval_mode(model), torch.no_grad():
        feats = torch.cat([model.features(images[i:i + batch_size])
                           for i in range(0, len(images), batch_size)])
    labels = np.full(len(images), -1) if labels is None else np.asarray(labels)
    return FeatureMatrix(feats.numpy(), labels, model_id)


def _as_features(X):
    X = X.features if isinstance(X, FeatureMatrix) else X
    X = np.asarray(X, dtype=np.float64)
    return X.reshape(len(X), -1)


def linear_cka(X, Y):
    """Linear CKA on column-centered features of the same N examples."""
    X, Y = _as_features(X), _as_features(Y)
    if X.shape[0] != Y.shape[0]:
        raise InvalidArgument("CKA inputs must describe the same examples")
    if X.shape[0] < 2:
        raise InvalidArgument("CKA needs at least two examples")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    xx = np.linalg.norm(X.T @ X)
    yy = np.linalg.norm(Y.T @ Y)
    if xx == 0 or yy == 0:
        raise UndefinedSimilarity("CKA is undefined for zero-variance features")
    return float(np.linalg.norm(Y.T @ X) ** 2 / (xx * yy))


def _rbf_gram(X, sigma_frac):
    sq = np.sum(X * X, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0)
    sigma2 = sigma_frac ** 2 * np.median(d2[d2 > 0]) if np.any(d2 > 0) else 1.0
    return np.exp(-d2 / (2 * sigma2))


def _hsic(K, L, debiased):
    n = K.shape[0]
    if not debiased:
        H = np.eye(n) - 1.0 / n
        return np.sum((H @ K @ H) * L)
    K = K.copy()
    L = L.copy()
    np.fill_diagonal(K, 0)
    np.fill_diagonal(L, 0)
    one = np.ones(n)
    return (np.sum(K * L) + one @ K @ one * (one @ L @ one) / ((n - 1) * (n - 2))
            - 2 / (n - 2) * (one @ K @ (L @ one)))


def cka(X, Y, kernel="linear", debiased=False, sigma_frac=0.8):
    """Gram-matrix CKA: linear or RBF kernel, optionally with the debiased HSIC estimator."""
    X, Y = _as_features(X), _as_features(Y)
    if X.shape[0] != Y.shape[0] or X.shape[0] < (4 if debiased else 2):
        raise InvalidArgument("CKA inputs must share N >= 2 (>= 4 when debiased)")
    if kernel == "linear":
        K, L = X @ X.T, Y @ Y.T
    elif kernel == "rbf":
        K, L = _rbf_gram(X, sigma_frac), _rbf_gram(Y, sigma_frac)
    else:
        raise InvalidArgument(f"unknown CKA kernel {kernel!r}")
    kl, kk, ll = _hsic(K, L, debiased), _hsic(K, K, debiased), _hsic(L, L, debiased)
    if kk <= 0 or ll <= 0:
        raise UndefinedSimilarity("CKA is undefined for zero-variance features")
    return float(kl / np.sqrt(kk * ll))


@dataclass
class SimilarityMatrix:
    scores: np.ndarray
    model_ids: list

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model_id"] + list(self.model_ids))
            for mid, row in zip(self.model_ids, self.scores):
                w.writerow([mid] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        return cls(np.array([[float(v) for v in r[1:]] for r in rows[1:]]), rows[0][1:])


def similarity_matrix(features, similarity=linear_cka):
    """Pairwise similarity between FeatureMatrix objects.

    Each pair is computed once and mirrored, so the result is exactly
    symmetric; the diagonal holds the computed self-similarities.
    """
    m = len(features)
    scores = np.zeros((m, m))
    for a in range(m):
        for b in range(a, m):
            scores[a, b] = scores[b, a] = similarity(features[a], features[b])
    return SimilarityMatrix(scores, [f.model_id for f in features])
