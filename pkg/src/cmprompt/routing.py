"""Task routers: cosine to frozen text prototypes (zero learnable parameters),
plus the two visual ablation baselines (mean prototype and diagonal Gaussian).

All routers follow the estimator protocol: ``partial_fit(X, y)`` registers the
tasks appearing in ``y`` (one call per task or many, order irrelevant), and
``predict(V)`` returns a task id per query row, ties broken toward the lowest
task id. For the text router, X holds frozen class-caption embeddings and y
the task that owns each class; for the visual routers, X holds training image
features and y their task.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator

from . import matio
from .numerics import DegenerateInputError, cosine_matrix
from .validation import check_matrix

__all__ = [
    "TextPrototypeRouter",
    "VisualMeanRouter",
    "VisualGaussianRouter",
    "save_router",
    "load_router",
]

_VAR_FLOOR = 1e-6  # survives 1-shot Gaussian fits


class _PrototypeRouter(BaseEstimator):
    """Shared argmax-cosine machinery over one prototype vector per task."""

    def __init__(self):
        self.prototypes_ = {}

    def fit(self, X, y, **kw):
        self.prototypes_ = {}
        return self.partial_fit(X, y, **kw)

    def _mean_per_task(self, X, y):
        X = check_matrix(X)
        y = np.asarray(y)
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y length mismatch")
        out = {}
        for t in np.unique(y):
            out[int(t)] = X[y == t].mean(axis=0)
        return out

    def task_ids(self):
        return sorted(self.prototypes_)

    def decision_matrix(self, V) -> np.ndarray:
        """(n_queries, n_tasks) cosine scores, task columns in sorted-id order."""
        if not self.prototypes_:
            raise ValueError("router has no registered tasks")
        V = check_matrix(V)
        P = np.stack([self.prototypes_[t] for t in self.task_ids()])
        return cosine_matrix(V, P)

    def predict(self, V) -> np.ndarray:
        scores = self.decision_matrix(V)
        ids = np.asarray(self.task_ids())
        return ids[np.argmax(scores, axis=1)]  # argmax takes the first maximum


class TextPrototypeRouter(_PrototypeRouter):
    """Routes image features by cosine similarity to per-task mean class-text
    embeddings. Prototypes are built once from frozen caption embeddings and
    reference no visual training data, so they are independent of task
    arrival order and of how many training images exist."""

    def __init__(self):
        super().__init__()
        self.class_ids_ = {}

    def partial_fit(self, X, y, class_ids=None):
        """Register tasks from class embeddings X labelled with task ids y.

        ``class_ids`` optionally records which class each row is, for the
        serialized index. Class sets must be disjoint across tasks.
        """
        X = check_matrix(X)
        y = np.asarray(y)
        new = self._mean_per_task(X, y)
        for t, proto in new.items():
            if t in self.prototypes_:
                raise ValueError(f"task {t} already registered")
            if X[y == t].shape[0] == 0:
                raise ValueError(f"task {t} has an empty class list")
            self.prototypes_[t] = proto
        if class_ids is not None:
            class_ids = np.asarray(class_ids)
            seen = {c for ids in self.class_ids_.values() for c in ids}
            for t in new:
                ids = [int(c) for c in class_ids[y == t]]
                overlap = seen.intersection(ids)
                if overlap:
                    raise ValueError(f"class sets overlap across tasks: {sorted(overlap)}")
                self.class_ids_[t] = ids
                seen.update(ids)
        return self


class VisualMeanRouter(_PrototypeRouter):
    """Ablation baseline: per-task mean of training image features."""

    def partial_fit(self, X, y):
        for t, proto in self._mean_per_task(X, y).items():
            if t in self.prototypes_:
                raise ValueError(f"task {t} already registered")
            self.prototypes_[t] = proto
        return self


class VisualGaussianRouter(BaseEstimator):
    """Ablation baseline: per-task diagonal Gaussian over training features,
    routed by maximum log-density. Covariance is diagonal with a 1e-6 variance
    floor so 1-shot fits survive; serialized output is labelled "diagonal" to
    avoid over-claiming a full-covariance fit."""

    covariance = "diagonal"

    def __init__(self):
        self.means_ = {}
        self.variances_ = {}

    def fit(self, X, y):
        self.means_ = {}
        self.variances_ = {}
        return self.partial_fit(X, y)

    def partial_fit(self, X, y):
        X = check_matrix(X)
        y = np.asarray(y)
        for t in np.unique(y):
            t = int(t)
            if t in self.means_:
                raise ValueError(f"task {t} already registered")
            pts = X[y == t]
            self.means_[t] = pts.mean(axis=0)
            self.variances_[t] = np.maximum(pts.var(axis=0), _VAR_FLOOR)
        return self

    def task_ids(self):
        return sorted(self.means_)

    def log_density(self, V, task: int) -> np.ndarray:
        if task not in self.means_:
            raise ValueError(f"task {task} has no fitted Gaussian")
        V = check_matrix(V)
        mu = self.means_[task]
        var = self.variances_[task]
        quad = ((V - mu) ** 2 / (2.0 * var)).sum(axis=1)
        norm = 0.5 * np.sum(np.log(2.0 * math.pi * var))
        return -quad - norm

    def decision_matrix(self, V) -> np.ndarray:
        if not self.means_:
            raise ValueError("router has no registered tasks")
        return np.stack([self.log_density(V, t) for t in self.task_ids()], axis=1)

    def predict(self, V) -> np.ndarray:
        scores = self.decision_matrix(V)
        ids = np.asarray(self.task_ids())
        return ids[np.argmax(scores, axis=1)]


def _router_kind(router) -> str:
    return {
        TextPrototypeRouter: "text_prototype",
        VisualMeanRouter: "visual_mean",
        VisualGaussianRouter: "visual_gaussian",
    }[type(router)]


def save_router(router, matrix_path, index_path) -> None:
    """Persist a router as a binary prototype matrix plus a JSON index."""
    kind = _router_kind(router)
    ids = router.task_ids()
    index = {"kind": kind, "task_ids": ids}
    if kind == "visual_gaussian":
        M = np.stack([router.means_[t] for t in ids] + [router.variances_[t] for t in ids])
        index["covariance"] = router.covariance
    else:
        M = np.stack([router.prototypes_[t] for t in ids])
        if kind == "text_prototype":
            index["class_ids"] = {str(t): router.class_ids_.get(t, []) for t in ids}
    matio.write_matrix(matrix_path, M)
    matio.write_index(index_path, index)


def load_router(matrix_path, index_path):
    index = matio.read_index(index_path)
    M = matio.read_matrix(matrix_path).astype(np.float64)
    kind = index["kind"]
    ids = [int(t) for t in index["task_ids"]]
    if kind == "visual_gaussian":
        router = VisualGaussianRouter()
        n = len(ids)
        for i, t in enumerate(ids):
            router.means_[t] = M[i]
            router.variances_[t] = M[n + i]
        return router
    cls = TextPrototypeRouter if kind == "text_prototype" else VisualMeanRouter
    router = cls()
    for i, t in enumerate(ids):
        router.prototypes_[t] = M[i]
    if kind == "text_prototype":
        router.class_ids_ = {int(t): list(v) for t, v in index.get("class_ids", {}).items()}
    return router


def route(v, router) -> int:
    """Single-query convenience wrapper over ``router.predict``."""
    arr = np.asarray(v, dtype=np.float64)
    if np.linalg.norm(arr) == 0.0 and not isinstance(router, VisualGaussianRouter):
        raise DegenerateInputError("cannot route a zero feature vector")
    return int(router.predict(arr.reshape(1, -1))[0])
