"""Generative-quality metrics: kNN-manifold precision/recall/density/coverage,
train-on-synthetic-test-on-real AUC and feature-name overlap."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from .data import DatasetBundle
from .errors import DataError

SAMPLE_CAP = 5000


def sample_cap(n_test, cap=SAMPLE_CAP):
    """Number of synthetic rows to generate for evaluation: min(n_test, 5000)."""
    return int(min(n_test, cap))


def knn_radii(points, k):
    """Distance from each point to its k-th nearest neighbour, excluding itself."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n <= k:
        raise DataError(f"need more than k={k} points, got {n}")
    d = cdist(points, points)
    # drop exactly one self-distance per row, so duplicates still count as neighbours
    np.fill_diagonal(d, np.inf)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


@dataclass
class MetricReport:
    precision: float
    recall: float
    density: float
    coverage: float
    n_real: int
    n_synth: int
    k: int
    downstream_auc: float | None = None

    def to_json(self, **kw):
        return json.dumps(asdict(self), **kw)


def prdc(real, synth, k=5) -> MetricReport:
    real = np.asarray(real, dtype=np.float64)
    synth = np.asarray(synth, dtype=np.float64)
    if real.ndim != 2 or synth.ndim != 2 or real.shape[1] != synth.shape[1]:
        raise DataError(f"point sets must share a column space, got {real.shape} and {synth.shape}")
    real_r = knn_radii(real, k)
    synth_r = knn_radii(synth, k)
    d = cdist(real, synth)  # (n_real, n_synth)
    inside_real = d <= real_r[:, None]
    precision = inside_real.any(axis=0).mean()
    recall = (d <= synth_r[None, :]).any(axis=1).mean()
    density = inside_real.sum() / (k * len(synth))
    coverage = inside_real.any(axis=1).mean()
    return MetricReport(float(precision), float(recall), float(density), float(coverage), len(real), len(synth), k)


def metric_space(bundle: DatasetBundle, reference: DatasetBundle | None = None, exclude=()):
    """Numeric matrix for distance metrics.

    Numericals are z-scored with the reference table's mean/std; categoricals
    become one-hot scaled by 1/sqrt(2), so a mismatch adds exactly 1 to the
    squared distance. Missing cells contribute zeros.
    """
    reference = reference if reference is not None else bundle
    b = bundle.denormalized()
    ref = reference.denormalized()
    blocks = []
    for j, f in enumerate(b.features):
        if f.name in exclude:
            continue
        rj = ref.feature_index(f.name)
        miss = b.missing[:, j]
        if f.is_categorical:
            onehot = np.zeros((b.n_rows, len(f.categories)))
            rows = np.flatnonzero(~miss)
            onehot[rows, b.columns[j][rows]] = 1.0 / np.sqrt(2.0)
            blocks.append(onehot)
        else:
            vals = ref.columns[rj][~ref.missing[:, rj]]
            mu = vals.mean() if vals.size else 0.0
            sd = vals.std() if vals.size else 1.0
            sd = sd if sd > 0 else 1.0
            blocks.append(np.where(miss, 0.0, (b.columns[j] - mu) / sd)[:, None])
    if not blocks:
        raise DataError("no features left to embed")
    return np.hstack(blocks)


def evaluate(real: DatasetBundle, synth: DatasetBundle, k=5) -> MetricReport:
    """PRDC in the mixed metric space; only the first min(n_real, 5000) synthetic rows count."""
    cap = sample_cap(real.n_rows)
    if synth.n_rows > cap:
        synth = synth.take(np.arange(cap))
    return prdc(metric_space(real, real), metric_space(synth, real), k)


def roc_auc(labels, scores):
    """Mann-Whitney AUC; tied scores get half credit."""
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both classes in the labels")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def fit_logistic(X, y, l2=1e-3, iters=50):
    """Newton-IRLS logistic regression with intercept; returns weights (d + 1,)."""
    X1 = np.hstack([X, np.ones((len(X), 1))])
    w = np.zeros(X1.shape[1])
    reg = l2 * np.eye(X1.shape[1])
    reg[-1, -1] = 0.0
    for _ in range(iters):
        z = np.clip(X1 @ w, -30, 30)
        p = 1.0 / (1.0 + np.exp(-z))
        grad = X1.T @ (p - y) + reg @ w
        H = (X1 * (p * (1 - p))[:, None]).T @ X1 + reg + 1e-9 * np.eye(len(w))
        step = np.linalg.solve(H, grad)
        w -= step
        if np.max(np.abs(step)) < 1e-8:
            break
    return w


def downstream_auc(synth: DatasetBundle, real_test: DatasetBundle, label: str) -> float:
    """Fit a logistic classifier on synthetic rows, score real test rows.

    Multiclass labels use one-vs-rest with a macro average over classes
    present in the test labels.
    """
    j = real_test.feature_index(label)
    feat = real_test.features[j]
    if not feat.is_categorical:
        raise DataError(f"label feature {label!r} must be categorical")
    if synth.features[synth.feature_index(label)].categories != feat.categories:
        raise DataError(f"label {label!r} has different categories in synthetic and real data")
    Xs = metric_space(synth, synth, exclude=(label,))
    Xr = metric_space(real_test, synth, exclude=(label,))
    ys = synth.columns[synth.feature_index(label)]
    keep_s = ~synth.missing[:, synth.feature_index(label)]
    keep_r = ~real_test.missing[:, j]
    Xs, ys = Xs[keep_s], ys[keep_s]
    Xr, yr = Xr[keep_r], real_test.columns[j][keep_r]
    classes = np.unique(yr)
    if len(classes) < 2:
        raise DataError(f"real test labels for {label!r} contain a single class")
    positive = classes if len(feat.categories) > 2 else classes[1:]
    aucs = []
    for c in positive:
        target = (ys == c).astype(np.float64)
        w = fit_logistic(Xs, target)
        aucs.append(roc_auc(yr == c, np.hstack([Xr, np.ones((len(Xr), 1))]) @ w))
    return float(np.mean(aucs))


@dataclass
class OverlapReport:
    source_names: list
    target_names: list
    similarity: np.ndarray  # (n_target, n_source)
    threshold: float
    dissimilar_fraction: float

    def to_json(self, **kw):
        d = asdict(self)
        d["similarity"] = self.similarity.tolist()
        return json.dumps(d, **kw)

    def write_matrix_csv(self, path):
        import csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["target"] + list(self.source_names))
            for name, row in zip(self.target_names, self.similarity):
                w.writerow([name] + [f"{v:.6f}" for v in row])


def feature_overlap(sources, targets, embedder, threshold=0.8) -> OverlapReport:
    """Cosine similarity between feature-name embeddings of two groups of tables."""
    src = [f.name for b in sources for f in b.features]
    tgt = [f.name for b in targets for f in b.features]
    if not src or not tgt:
        raise DataError("feature overlap needs features on both sides")
    S = embedder.embed_many(src).astype(np.float64)
    T = embedder.embed_many(tgt).astype(np.float64)
    S /= np.linalg.norm(S, axis=1, keepdims=True)
    T /= np.linalg.norm(T, axis=1, keepdims=True)
    sim = np.clip(T @ S.T, -1.0, 1.0)
    frac = float((sim.max(axis=1) < threshold).mean())
    return OverlapReport(src, tgt, sim, threshold, frac)
