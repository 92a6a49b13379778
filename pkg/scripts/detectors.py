#!/usr/bin/env python3
"""
Unsupervised detectors applied to latent representations.

- k-means: k-means++ seeding, Lloyd iterations, best of ``n_init`` restarts
- agglomerative clustering: scipy linkage, cut at the requested cluster count
- linear one-class SVM: nu-formulation solved by subgradient descent
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.cluster.hierarchy import linkage as scipy_linkage
from scipy.spatial.distance import cdist
from sklearn.cluster import kmeans_plusplus

from errors import ConfigurationError, CountError, DivergenceError, NumericError, ShapeError
from tensor_net import as_matrix

logger = logging.getLogger(__name__)

# ============================================================================
# Defaults
# ============================================================================

KMEANS_MAX_ITER = 300
KMEANS_N_INIT = 10
OCSVM_ITERATIONS = 5000
OCSVM_STEP = 1.0
INERTIA_RTOL = 1e-12


class Linkage(str, Enum):
    WARD = "ward"
    COMPLETE = "complete"
    AVERAGE = "average"
    SINGLE = "single"


class DetectorKind(str, Enum):
    KMEANS = "kmeans"
    AGGLOMERATIVE = "agglo"
    OCSVM = "ocsvm"


class DetectorConfig(BaseModel):
    kind: DetectorKind = DetectorKind.KMEANS
    n_clusters: int = Field(2, ge=1)
    n_init: int = Field(KMEANS_N_INIT, ge=1)
    max_iter: int = Field(KMEANS_MAX_ITER, ge=1)
    linkage: Linkage = Linkage.WARD
    nu: float = Field(0.5, gt=0, le=1)
    iterations: int = Field(OCSVM_ITERATIONS, ge=1)


# ============================================================================
# k-means
# ============================================================================

@dataclass
class KMeansModel:
    centroids: np.ndarray
    k: int
    inertia: float
    seed: int
    labels: np.ndarray = field(repr=False, default=None)
    inertia_trace: List[float] = field(default_factory=list, repr=False)


def _sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return cdist(x, centroids, metric="sqeuclidean")


def _lloyd(x: np.ndarray, centroids: np.ndarray,
           max_iter: int) -> Tuple[np.ndarray, np.ndarray, float, List[float]]:
    centroids = centroids.copy()
    labels = None
    trace: List[float] = []
    for _ in range(max_iter):
        d = _sq_distances(x, centroids)
        new_labels = np.argmin(d, axis=1)
        inertia = float(d[np.arange(x.shape[0]), new_labels].sum())
        if trace and inertia > trace[-1] * (1.0 + INERTIA_RTOL) + INERTIA_RTOL:
            raise NumericError(f"k-means inertia increased from {trace[-1]} to {inertia}")
        trace.append(inertia)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(centroids.shape[0]):
            members = labels == j
            if np.any(members):
                centroids[j] = x[members].mean(axis=0)
    else:
        # Budget exhausted: labels and inertia must describe the returned centroids
        d = _sq_distances(x, centroids)
        labels = np.argmin(d, axis=1)
        trace.append(float(d[np.arange(x.shape[0]), labels].sum()))
    return centroids, labels, trace[-1], trace


def kmeans_fit(latents: np.ndarray, k: int = 2, seed: int = 0, n_init: int = KMEANS_N_INIT,
               max_iter: int = KMEANS_MAX_ITER) -> KMeansModel:
    """
    Best-of-``n_init`` Lloyd runs from k-means++ seeds.

    Restart seeds are drawn from ``seed`` so every restart is reproducible.
    """
    x = as_matrix(latents, "latents")
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if x.shape[0] < k:
        raise CountError(f"k-means with k={k} needs at least {k} points, got {x.shape[0]}")

    restart_seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n_init)
    best: Optional[KMeansModel] = None
    for s in restart_seeds:
        init, _ = kmeans_plusplus(x, n_clusters=k, random_state=int(s))
        centroids, labels, inertia, trace = _lloyd(x, init, max_iter)
        if best is None or inertia < best.inertia:
            best = KMeansModel(centroids, k, inertia, seed, labels, trace)
    logger.debug("k-means k=%d: inertia %.6f after %d iterations", k, best.inertia, len(best.inertia_trace))
    return best


def kmeans_predict(model: KMeansModel, latents: np.ndarray) -> np.ndarray:
    """Nearest centroid; ties go to the lower cluster id."""
    x = as_matrix(latents, "latents")
    if x.shape[1] != model.centroids.shape[1]:
        raise ShapeError(f"latents have {x.shape[1]} columns, centroids {model.centroids.shape[1]}")
    return np.argmin(_sq_distances(x, model.centroids), axis=1)


# ============================================================================
# Agglomerative clustering
# ============================================================================

@dataclass
class AgglomerativeResult:
    labels: np.ndarray
    n_clusters: int
    linkage: Linkage
    merges: np.ndarray = field(repr=False, default=None)

    def merge_history(self) -> List[frozenset]:
        """Original members of each merged cluster, in merge order."""
        n = self.labels.shape[0]
        members = {i: frozenset([i]) for i in range(n)}
        history = []
        for i, row in enumerate(self.merges):
            merged = members.pop(int(row[0])) | members.pop(int(row[1]))
            members[n + i] = merged
            history.append(merged)
        return history


def agglomerative_fit(latents: np.ndarray, n_clusters: int = 2,
                      linkage: Linkage = Linkage.WARD) -> AgglomerativeResult:
    """Merge singletons under ``linkage`` until ``n_clusters`` remain."""
    x = as_matrix(latents, "latents")
    linkage = Linkage(linkage)
    n = x.shape[0]
    if n_clusters < 1:
        raise ConfigurationError(f"n_clusters must be >= 1, got {n_clusters}")
    if n < n_clusters:
        raise CountError(f"cannot form {n_clusters} clusters from {n} points")
    if n == 1:
        return AgglomerativeResult(np.zeros(1, dtype=np.int64), 1, linkage, np.empty((0, 4)))

    merges = scipy_linkage(x, method=linkage.value, metric="euclidean")
    parent = np.arange(2 * n - 1)
    for i in range(n - n_clusters):
        parent[int(merges[i, 0])] = n + i
        parent[int(merges[i, 1])] = n + i

    def root(i: int) -> int:
        while parent[i] != i:
            i = parent[i]
        return i

    roots = [root(i) for i in range(n)]
    relabel = {}
    labels = np.array([relabel.setdefault(r, len(relabel)) for r in roots], dtype=np.int64)
    return AgglomerativeResult(labels, n_clusters, linkage, merges)


# ============================================================================
# Linear one-class SVM
# ============================================================================

@dataclass
class OcsvmModel:
    w: np.ndarray
    rho: float
    nu: float
    objective: float


def _ocsvm_objective(x: np.ndarray, w: np.ndarray, rho: float, nu: float) -> float:
    slack = np.maximum(0.0, rho - x @ w)
    return float(0.5 * w @ w - rho + slack.sum() / (nu * x.shape[0]))


def _optimal_rho(scores: np.ndarray, nu: float) -> float:
    """Minimiser of the objective in rho for fixed w: the ceil(nu*N)-th smallest score."""
    k = max(1, math.ceil(nu * scores.shape[0] - 1e-12))
    return float(np.partition(scores, k - 1)[k - 1])


def ocsvm_fit(latents: np.ndarray, nu: float = 0.5, iterations: int = OCSVM_ITERATIONS,
              step: float = OCSVM_STEP) -> OcsvmModel:
    """
    Minimise 1/2 |w|^2 - rho + 1/(nu N) sum max(0, rho - w.x) by subgradient
    descent with step ``step / sqrt(t + 1)`` scaled by the data radius.

    Starts from w = data mean and rho at its nu-quantile score; the best
    iterate is kept and rho is finally set to its exact optimum for that w,
    which bounds the training outlier fraction by nu.
    """
    x = as_matrix(latents, "latents")
    if not 0 < nu <= 1:
        raise ConfigurationError(f"nu must be in (0, 1], got {nu}")
    if x.shape[0] == 0:
        raise CountError("one-class SVM needs at least one point")
    n = x.shape[0]
    radius = float(np.max(np.linalg.norm(x, axis=1)))
    scale = step / (1.0 + radius * radius)

    w = x.mean(axis=0)
    rho = _optimal_rho(x @ w, nu)
    best_w, best_rho = w.copy(), rho
    best_obj = _ocsvm_objective(x, w, rho, nu)
    for t in range(iterations):
        active = (x @ w) < rho
        grad_w = w - x[active].sum(axis=0) / (nu * n)
        grad_rho = -1.0 + active.sum() / (nu * n)
        eta = scale / math.sqrt(t + 1.0)
        w = w - eta * grad_w
        rho = rho - eta * grad_rho
        obj = _ocsvm_objective(x, w, rho, nu)
        if not np.isfinite(obj):
            raise DivergenceError("one-class SVM objective is not finite", t)
        if obj < best_obj:
            best_w, best_rho, best_obj = w.copy(), rho, obj

    if float(np.linalg.norm(best_w)) < 1e-12:
        raise NumericError("one-class SVM converged to a zero weight vector")
    rho = _optimal_rho(x @ best_w, nu)
    return OcsvmModel(best_w, rho, nu, _ocsvm_objective(x, best_w, rho, nu))


def ocsvm_score(model: OcsvmModel, latents: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Scores w.x - rho and anomaly flags (score < 0; the boundary is normal)."""
    x = as_matrix(latents, "latents")
    if x.shape[1] != model.w.shape[0]:
        raise ShapeError(f"latents have {x.shape[1]} columns, model expects {model.w.shape[0]}")
    scores = x @ model.w - model.rho
    return scores, scores < 0


# ============================================================================
# Dispatch
# ============================================================================

@dataclass
class DetectorOutput:
    """Cluster ids (clustering detectors) or anomaly flags as 0/1 (one-class SVM)."""
    assignments: np.ndarray
    is_clustering: bool


def run_detector(latents: np.ndarray, cfg: DetectorConfig, seed: int = 0) -> DetectorOutput:
    if cfg.kind is DetectorKind.KMEANS:
        model = kmeans_fit(latents, cfg.n_clusters, seed, cfg.n_init, cfg.max_iter)
        return DetectorOutput(kmeans_predict(model, latents), True)
    if cfg.kind is DetectorKind.AGGLOMERATIVE:
        return DetectorOutput(agglomerative_fit(latents, cfg.n_clusters, cfg.linkage).labels, True)
    model = ocsvm_fit(latents, cfg.nu, cfg.iterations)
    _, flags = ocsvm_score(model, latents)
    return DetectorOutput(flags.astype(np.int64), False)
