#!/usr/bin/env python3
"""
Class balancing: SMOTE over-sampling, random under-sampling, ENN editing of
the majority class, and SMOTE followed by ENN.

Every result keeps ``source_index``: the row of the input each output row came
from, or -1 for synthetic SMOTE rows. Untouched rows are copied bit for bit.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional

import numpy as np
from imblearn.over_sampling import SMOTE
from imblearn.under_sampling import EditedNearestNeighbours, RandomUnderSampler
from pydantic import BaseModel, Field

from errors import ConfigurationError, CountError, ShapeError
from tensor_net import as_matrix

logger = logging.getLogger(__name__)


class SamplingStrategy(str, Enum):
    NONE = "none"
    OVERSAMPLE = "oversample"
    UNDERSAMPLE = "undersample"
    COMBINE = "combine"


class SmoteConfig(BaseModel):
    k_neighbors: int = Field(5, ge=1)
    target_ratio: float = Field(1.0, gt=0)


class EnnConfig(BaseModel):
    k: int = Field(3, ge=1)


class SamplingConfig(BaseModel):
    smote: SmoteConfig = Field(default_factory=SmoteConfig)
    enn: EnnConfig = Field(default_factory=EnnConfig)
    undersample_ratio: float = Field(1.0, gt=0)


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    source_index: Optional[np.ndarray] = None
    timestamps: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.features = as_matrix(self.features, "features")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != self.features.shape[0]:
            raise ShapeError(f"{self.labels.shape[0]} labels for {self.features.shape[0]} feature rows")
        if self.source_index is None:
            self.source_index = np.arange(self.labels.shape[0])
        self.source_index = np.asarray(self.source_index, dtype=np.int64)

    @property
    def class_counts(self) -> Dict[int, int]:
        classes, counts = np.unique(self.labels, return_counts=True)
        return {int(c): int(n) for c, n in zip(classes, counts)}

    @property
    def n_rows(self) -> int:
        return self.labels.shape[0]

    @property
    def has_synthetic(self) -> bool:
        return bool(np.any(self.source_index < 0))

    def take(self, rows: np.ndarray) -> "LabeledDataset":
        ts = self.timestamps[rows] if self.timestamps is not None else None
        return LabeledDataset(self.features[rows], self.labels[rows], self.source_index[rows], ts)


def _counts(ds: LabeledDataset) -> Dict[int, int]:
    counts = ds.class_counts
    if len(counts) < 2:
        raise CountError(f"resampling needs at least two classes, got {list(counts)}")
    return counts


def smote_oversample(ds: LabeledDataset, k_neighbors: int = 5, target_ratio: float = 1.0,
                     seed: int = 0) -> LabeledDataset:
    """
    Raise every class below ``target_ratio * majority_count`` to that count with
    points interpolated between a class member and one of its k nearest
    same-class neighbors.
    """
    counts = _counts(ds)
    target = int(round(target_ratio * max(counts.values())))
    strategy = {c: target for c, n in counts.items() if n < target}
    if not strategy:
        return ds
    for c in strategy:
        if counts[c] < k_neighbors + 1:
            raise CountError(f"class {c} has {counts[c]} samples, SMOTE with k={k_neighbors} needs {k_neighbors + 1}")

    sampler = SMOTE(sampling_strategy=strategy, k_neighbors=k_neighbors, random_state=seed)
    x_res, y_res = sampler.fit_resample(ds.features, ds.labels)
    n_new = x_res.shape[0] - ds.n_rows
    logger.info("SMOTE: %d synthetic rows (target %d per class)", n_new, target)
    source = np.concatenate([ds.source_index, np.full(n_new, -1, dtype=np.int64)])
    return LabeledDataset(np.asarray(x_res, dtype=np.float64), y_res, source)


def random_undersample(ds: LabeledDataset, target_ratio: float = 1.0, seed: int = 0) -> LabeledDataset:
    """Keep ``target_ratio * minority_count`` rows of every larger class, chosen without replacement."""
    counts = _counts(ds)
    target = int(round(target_ratio * min(counts.values())))
    strategy = {c: min(n, target) for c, n in counts.items()}
    if target < 1:
        raise CountError(f"under-sampling to {target} rows per class leaves classes empty")
    if target > max(counts.values()):
        raise CountError(f"target {target} exceeds the available {max(counts.values())} majority rows")

    sampler = RandomUnderSampler(sampling_strategy=strategy, random_state=seed)
    sampler.fit_resample(ds.features, ds.labels)
    rows = np.sort(sampler.sample_indices_)
    logger.info("under-sampling: %d -> %d rows", ds.n_rows, rows.size)
    return ds.take(rows)


def enn_edit(ds: LabeledDataset, k: int = 3) -> LabeledDataset:
    """Drop majority-class rows whose label differs from the mode of their k nearest neighbors."""
    if k < 1:
        raise ConfigurationError(f"ENN needs k >= 1, got {k}")
    if k >= ds.n_rows:
        raise CountError(f"ENN with k={k} needs more than {k} rows, got {ds.n_rows}")
    _counts(ds)
    editor = EditedNearestNeighbours(sampling_strategy="majority", n_neighbors=k, kind_sel="mode")
    editor.fit_resample(ds.features, ds.labels)
    rows = np.sort(editor.sample_indices_)
    logger.info("ENN: removed %d rows", ds.n_rows - rows.size)
    return ds.take(rows)


def smoteenn(ds: LabeledDataset, smote_cfg: Optional[SmoteConfig] = None,
             enn_cfg: Optional[EnnConfig] = None, seed: int = 0) -> LabeledDataset:
    smote_cfg = smote_cfg or SmoteConfig()
    enn_cfg = enn_cfg or EnnConfig()
    oversampled = smote_oversample(ds, smote_cfg.k_neighbors, smote_cfg.target_ratio, seed)
    return enn_edit(oversampled, enn_cfg.k)


def apply_sampling(ds: LabeledDataset, strategy: SamplingStrategy,
                   cfg: Optional[SamplingConfig] = None, seed: int = 0) -> LabeledDataset:
    """Dispatch one of the balancing strategies."""
    cfg = cfg or SamplingConfig()
    strategy = SamplingStrategy(strategy)
    if strategy is SamplingStrategy.OVERSAMPLE:
        return smote_oversample(ds, cfg.smote.k_neighbors, cfg.smote.target_ratio, seed)
    if strategy is SamplingStrategy.UNDERSAMPLE:
        return random_undersample(ds, cfg.undersample_ratio, seed)
    if strategy is SamplingStrategy.COMBINE:
        return smoteenn(ds, cfg.smote, cfg.enn, seed)
    return ds
