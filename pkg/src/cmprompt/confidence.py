"""Multi-prototype visual/textual confidence scoring.

Each class is summarised by K cluster centroids of its training image
features (Lloyd's K-means from k-means++ seeds, written out here because the
exact seeding/fixpoint/singleton behaviour is part of the contract). A query
feature scores against a class as the max cosine over that class's centroids
(visual), the cosine to the class caption embedding (textual), or their
equal-weight average (joint). Task confidence is the mean of the top-k class
scores, and per-task thresholds calibrated as the 20th/80th nearest-rank
percentiles of the training confidences map a query's confidence onto a
prompting weight in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .numerics import (
    cosine_matrix,
    l2_normalize,
    make_rng,
    percentile_nearest_rank,
)
from .validation import check_matrix

__all__ = [
    "CONFIDENCE_MODES",
    "LloydKMeans",
    "fit_kmeans",
    "TaskThresholds",
    "TaskConfidenceModel",
    "visual_confidence",
    "textual_confidence",
    "joint_confidence",
    "task_confidence",
    "calibrate_thresholds",
    "prompting_weight",
]

CONFIDENCE_MODES = ("joint", "visual_only", "textual_only")


# ---------------------------------------------------------------- k-means --

def _kmeanspp_seed(X, k, rng):
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[int(rng.integers(n))]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass at distance zero: duplicate points
            centers[j:] = centers[0]
            return centers
        probs = d2 / total
        centers[j] = X[int(rng.choice(n, p=probs))]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(axis=1))
    return centers


def _assign(X, centers):
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(X.shape[0]), labels].sum()


def _lloyd(X, k, rng, max_iter):
    """One Lloyd run from a k-means++ seed. Returns (centers, labels, wcss,
    per-iteration wcss history)."""
    centers = _kmeanspp_seed(X, k, rng)
    labels, wcss = _assign(X, centers)
    history = [wcss]
    for _ in range(max_iter):
        new_centers = centers.copy()
        for j in range(k):
            members = X[labels == j]
            if members.shape[0] > 0:
                new_centers[j] = members.mean(axis=0)
            else:
                # re-seat an empty cluster on the point farthest from its center
                d2 = ((X - centers[labels]) ** 2).sum(axis=1)
                new_centers[j] = X[int(np.argmax(d2))]
        new_labels, new_wcss = _assign(X, new_centers)
        centers = new_centers
        history.append(new_wcss)
        if np.array_equal(new_labels, labels):
            labels = new_labels
            wcss = new_wcss
            break
        labels, wcss = new_labels, new_wcss
    return centers, labels, wcss, history


class LloydKMeans(BaseEstimator):
    """Lloyd's algorithm from k-means++ seeds with deterministic restarts.

    Fewer points than clusters yields one singleton centroid per point.
    ``inertia_history_`` holds the per-iteration WCSS of the winning restart
    (non-increasing by construction).
    """

    def __init__(self, n_clusters: int = 3, n_init: int = 10, max_iter: int = 100,
                 random_state: int = 0):
        self.n_clusters = n_clusters
        self.n_init = n_init
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None, rng: np.random.Generator | None = None):
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be at least 1")
        X = check_matrix(X)
        n = X.shape[0]
        if n == 0:
            raise ValueError("k-means requires at least one point")
        if rng is None:
            rng = make_rng(self.random_state, "kmeans")
        if n < self.n_clusters:
            self.cluster_centers_ = X.copy()
            self.labels_ = np.arange(n)
            self.inertia_ = 0.0
            self.inertia_history_ = [0.0]
            return self
        best = None
        for _ in range(self.n_init):
            centers, labels, wcss, history = _lloyd(X, self.n_clusters, rng, self.max_iter)
            if best is None or wcss < best[2]:
                best = (centers, labels, wcss, history)
        self.cluster_centers_, self.labels_, self.inertia_, self.inertia_history_ = best
        return self

    def predict(self, X):
        X = check_matrix(X, cols=self.cluster_centers_.shape[1])
        labels, _ = _assign(X, self.cluster_centers_)
        return labels


def fit_kmeans(points, k: int, rng: np.random.Generator, n_init: int = 10,
               max_iter: int = 100) -> np.ndarray:
    """Functional front door: returns the centroid matrix only."""
    km = LloydKMeans(n_clusters=k, n_init=n_init, max_iter=max_iter)
    km.fit(points, rng=rng)
    return km.cluster_centers_


# ----------------------------------------------------------- confidences --

def visual_confidence(v, centroids) -> float:
    """Max cosine between a feature and a class's centroids."""
    C = check_matrix(centroids)
    if C.shape[0] == 0:
        raise ValueError("class has no centroids")
    return float(cosine_matrix(np.asarray(v, dtype=np.float64).reshape(1, -1), C).max())


def textual_confidence(v, class_embedding) -> float:
    """Cosine between a feature and the frozen class caption embedding."""
    e = np.asarray(class_embedding, dtype=np.float64).reshape(1, -1)
    return float(cosine_matrix(np.asarray(v, dtype=np.float64).reshape(1, -1), e)[0, 0])


def joint_confidence(vis: float, txt: float, mode: str = "joint") -> float:
    if mode == "joint":
        return 0.5 * vis + 0.5 * txt
    if mode == "visual_only":
        return float(vis)
    if mode == "textual_only":
        return float(txt)
    raise ValueError(f"unknown confidence mode {mode!r}")


def task_confidence(per_class_scores, k: int = 5) -> float:
    """Mean of the min(k, n) largest class scores."""
    scores = np.asarray(per_class_scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("task_confidence requires a non-empty score list")
    kk = min(int(k), scores.size)
    top = np.sort(scores)[-kk:]
    return float(top.mean())


@dataclass(frozen=True)
class TaskThresholds:
    upper: float
    lower: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError("lower threshold exceeds upper threshold")


def calibrate_thresholds(train_confidences) -> TaskThresholds:
    """Per-task thresholds: 80th/20th nearest-rank percentiles of the
    training-set task confidences."""
    vals = np.asarray(train_confidences, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("cannot calibrate thresholds from an empty confidence list")
    return TaskThresholds(
        upper=percentile_nearest_rank(vals, 80.0),
        lower=percentile_nearest_rank(vals, 20.0),
    )


def prompting_weight(C: float, th: TaskThresholds) -> float:
    """Three-branch mapping from task confidence to prompt strength.

    Strictly above the upper threshold the prompt applies fully; strictly
    below the lower threshold it is suppressed; in between (boundaries
    included) the confidence itself is the weight, clamped to [0, 1] since
    cosine-based confidences may be negative.
    """
    if not np.isfinite(C):
        raise ValueError("confidence must be finite")
    if C > th.upper:
        return 1.0
    if C < th.lower:
        return 0.0
    return float(min(1.0, max(0.0, C)))


class TaskConfidenceModel(BaseEstimator):
    """Fitted confidence scorer for one task: per-class K-means centroids,
    frozen class caption embeddings, and calibrated (or fixed) thresholds.

    K-means runs on L2-normalized features so centroid proximity tracks the
    cosine geometry used at query time.
    """

    def __init__(self, n_clusters: int = 3, top_k: int = 5, mode: str = "joint",
                 thresholds: str = "calibrated", fixed_upper: float = 0.8,
                 fixed_lower: float = 0.2, n_init: int = 10, random_state: int = 0):
        self.n_clusters = n_clusters
        self.top_k = top_k
        self.mode = mode
        self.thresholds = thresholds
        self.fixed_upper = fixed_upper
        self.fixed_lower = fixed_lower
        self.n_init = n_init
        self.random_state = random_state

    def fit(self, V, y, class_embeddings: dict):
        """Fit from one task's training features V labelled y, plus the frozen
        caption embedding for every class in the task."""
        if self.mode not in CONFIDENCE_MODES:
            raise ValueError(f"unknown confidence mode {self.mode!r}")
        if self.thresholds not in ("calibrated", "fixed"):
            raise ValueError(f"unknown threshold policy {self.thresholds!r}")
        V = check_matrix(V)
        y = np.asarray(y)
        self.classes_ = sorted(int(c) for c in np.unique(y))
        missing = [c for c in self.classes_ if c not in class_embeddings]
        if missing:
            raise ValueError(f"missing class embeddings for {missing}")
        self.class_embeddings_ = {
            int(c): np.asarray(class_embeddings[c], dtype=np.float64)
            for c in self.classes_
        }
        self.centroids_ = {}
        for c in self.classes_:
            pts = l2_normalize(V[y == c])
            rng = make_rng(self.random_state, "class-kmeans", c)
            self.centroids_[c] = fit_kmeans(pts, self.n_clusters, rng, n_init=self.n_init)
        train_conf = self.confidences(V)
        if self.thresholds == "calibrated":
            self.thresholds_ = calibrate_thresholds(train_conf)
        else:
            self.thresholds_ = TaskThresholds(upper=self.fixed_upper, lower=self.fixed_lower)
        return self

    def class_scores(self, V) -> np.ndarray:
        """(n, n_classes) joint confidences, class columns in sorted order."""
        V = check_matrix(V)
        E = np.stack([self.class_embeddings_[c] for c in self.classes_])
        txt = cosine_matrix(V, E)
        vis = np.stack(
            [cosine_matrix(V, self.centroids_[c]).max(axis=1) for c in self.classes_],
            axis=1,
        )
        if self.mode == "visual_only":
            return vis
        if self.mode == "textual_only":
            return txt
        return 0.5 * vis + 0.5 * txt

    def confidences(self, V) -> np.ndarray:
        """(n,) task confidences: top-k mean over class scores."""
        scores = self.class_scores(V)
        kk = min(self.top_k, scores.shape[1])
        top = np.sort(scores, axis=1)[:, -kk:]
        return top.mean(axis=1)

    def weights(self, V) -> np.ndarray:
        """(n,) prompting weights through the calibrated thresholds."""
        return np.array([prompting_weight(c, self.thresholds_) for c in self.confidences(V)])
