#!/usr/bin/env python3
"""
Scoring of unsupervised detections against ground truth.

Cluster ids carry no label meaning, so they are first put in the bijection
with the labels that maximises accuracy. Precision, recall and F1 are then
reported for every class (the anomalous one is ``positive_class``) together
with their micro averages over pooled confusion counts.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import confusion_matrix
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from errors import CountError, MappingError, ShapeError

logger = logging.getLogger(__name__)

REPORT_DECIMALS = 6


# ============================================================================
# Result Types
# ============================================================================

@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    # Set when a zero denominator forced a metric to 0.
    degenerate: bool = False


@dataclass
class MicroMetrics:
    precision: float
    recall: float
    f1: float


@dataclass
class ClusterMapping:
    mapping: Dict[int, int]
    predictions: np.ndarray
    accuracy: float


@dataclass
class DetectionReport:
    """Metrics of one detector run on one set of latents."""
    arm: str
    positive_class: int
    per_class: Dict[int, ClassMetrics]
    micro: MicroMetrics
    confusion: List[List[int]]
    mapping: Dict[int, int]
    n_samples: int
    seed: int = 0
    config_hash: str = ""
    scope: str = "full"
    separability: Optional[float] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def anomalous(self) -> ClassMetrics:
        return self.per_class[self.positive_class]

    def to_dict(self) -> Dict[str, Any]:
        """Plain-JSON form with floats rounded to six decimals."""
        out = asdict(self)
        out["per_class"] = {str(c): m for c, m in out["per_class"].items()}
        out["mapping"] = {str(c): l for c, l in out["mapping"].items()}
        return round_floats(out)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DetectionReport":
        return cls(
            arm=data["arm"],
            positive_class=int(data["positive_class"]),
            per_class={int(c): ClassMetrics(**m) for c, m in data["per_class"].items()},
            micro=MicroMetrics(**data["micro"]),
            confusion=[list(map(int, row)) for row in data["confusion"]],
            mapping={int(c): int(l) for c, l in data["mapping"].items()},
            n_samples=int(data["n_samples"]),
            seed=int(data.get("seed", 0)),
            config_hash=data.get("config_hash", ""),
            scope=data.get("scope", "full"),
            separability=data.get("separability"),
            metadata=dict(data.get("metadata", {})),
        )


def round_floats(value: Any, decimals: int = REPORT_DECIMALS) -> Any:
    """Recursively round floats (numpy scalars included) for stable report text."""
    if isinstance(value, dict):
        return {k: round_floats(v, decimals) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [round_floats(v, decimals) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (float, np.floating)):
        return round(float(value), decimals)
    if isinstance(value, np.integer):
        return int(value)
    return value


# ============================================================================
# Alignment
# ============================================================================

def _aligned(predictions, true_labels) -> tuple:
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise ShapeError(f"{pred.size} predictions for {true.size} labels")
    if pred.size == 0:
        raise CountError("cannot score an empty prediction vector")
    return pred, true


def map_clusters_to_labels(cluster_ids, true_labels, n_classes: Optional[int] = None) -> ClusterMapping:
    """
    Bijection from cluster ids to labels maximising accuracy.

    Among equally accurate bijections the one mapping the most clusters to
    the label of the same value wins, so cluster 0 -> label 0 on a tie.
    """
    clusters, true = _aligned(cluster_ids, true_labels)
    n_classes = n_classes or max(2, int(true.max()) + 1)
    labels = np.arange(n_classes)
    ids = np.unique(clusters)
    if ids.size > n_classes:
        raise MappingError(f"{ids.size} clusters cannot be mapped one-to-one onto {n_classes} labels")
    if np.any(true >= n_classes) or np.any(true < 0):
        raise MappingError(f"labels outside 0..{n_classes - 1}")

    counts = np.array([[np.sum((clusters == c) & (true == l)) for l in labels] for c in ids], dtype=np.float64)
    identity = (ids[:, None] == labels[None, :]).astype(np.float64)
    # Agreement counts dominate; identity only separates exact ties.
    rows, cols = linear_sum_assignment(-(counts * (ids.size + 1) + identity))
    mapping = {int(ids[r]): int(labels[c]) for r, c in zip(rows, cols)}
    predictions = np.array([mapping[int(c)] for c in clusters], dtype=np.int64)
    accuracy = float(np.mean(predictions == true))
    return ClusterMapping(mapping, predictions, accuracy)


# ============================================================================
# Metrics
# ============================================================================

def _confusion(pred: np.ndarray, true: np.ndarray) -> tuple:
    labels = np.union1d(np.unique(true), np.unique(pred))
    return confusion_matrix(true, pred, labels=labels), labels


def prf1(predictions, true_labels, positive_class: int = 1) -> ClassMetrics:
    """Precision, recall and F1 of ``positive_class``; zero denominators give 0 and set ``degenerate``."""
    pred, true = _aligned(predictions, true_labels)
    cm, labels = _confusion(pred, true)
    tp = fp = fn = 0
    if positive_class in labels:
        i = int(np.searchsorted(labels, positive_class))
        tp = int(cm[i, i])
        fp = int(cm[:, i].sum()) - tp
        fn = int(cm[i, :].sum()) - tp

    degenerate = False
    if tp + fp == 0:
        precision, degenerate = 0.0, True
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall, degenerate = 0.0, True
    else:
        recall = tp / (tp + fn)
    f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
    return ClassMetrics(precision, recall, f1, tp + fn, degenerate)


def micro_prf1(predictions, true_labels) -> MicroMetrics:
    """
    Micro averages over pooled counts. With one predicted label per sample,
    pooled FP and FN both equal N - trace, so P = R = F1 = accuracy exactly.
    """
    pred, true = _aligned(predictions, true_labels)
    cm, _ = _confusion(pred, true)
    tp = int(np.trace(cm))
    fp = int(cm.sum() - tp)
    fn = int(cm.sum() - tp)
    return MicroMetrics(tp / (tp + fp), tp / (tp + fn), 2 * tp / (2 * tp + fp + fn))


def linear_separability(latents: np.ndarray, true_labels, seed: int = 0) -> Optional[float]:
    """Training accuracy of a linear classifier on the latents; None with a single class."""
    y = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    if np.unique(y).size < 2:
        return None
    probe = make_pipeline(StandardScaler(), LogisticRegression(C=100.0, max_iter=2000, random_state=seed))
    probe.fit(latents, y)
    return float(probe.score(latents, y))


def evaluate_detection(assignments, true_labels, *, arm: str, is_clustering: bool = True,
                       positive_class: int = 1, latents: Optional[np.ndarray] = None,
                       seed: int = 0, config_hash: str = "", scope: str = "full",
                       metadata: Optional[Dict[str, Any]] = None) -> DetectionReport:
    """
    Build a DetectionReport from detector output.

    Clustering output goes through ``map_clusters_to_labels``; one-class SVM
    flags are already labels (1 = anomalous) and map by identity.
    """
    pred, true = _aligned(assignments, true_labels)
    if is_clustering:
        aligned = map_clusters_to_labels(pred, true)
        mapping, pred = aligned.mapping, aligned.predictions
    else:
        mapping = {int(c): int(c) for c in np.unique(pred)}

    classes = sorted(set(np.unique(true).tolist()) | {positive_class})
    per_class = {int(c): prf1(pred, true, int(c)) for c in classes}
    cm = confusion_matrix(true, pred, labels=classes)
    report = DetectionReport(
        arm=arm,
        positive_class=positive_class,
        per_class=per_class,
        micro=micro_prf1(pred, true),
        confusion=cm.tolist(),
        mapping=mapping,
        n_samples=int(true.size),
        seed=seed,
        config_hash=config_hash,
        scope=scope,
        separability=linear_separability(latents, true, seed) if latents is not None else None,
        metadata=dict(metadata or {}),
    )
    logger.info("%s/%s: anomalous F1 %.4f, micro F1 %.4f", arm, scope,
                report.anomalous.f1, report.micro.f1)
    return report
