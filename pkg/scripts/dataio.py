#!/usr/bin/env python3
"""
Feature matrices, event catalogs and the datasets built from them.

Feature files are a fixed header followed by the row timestamps and the raw
row-major float64 values:

    magic "EVTF" | version u16 | pad | N u64 | D u64 | start i64 | step i64
    N x i64 timestamps (UTC seconds)
    N x D x f64 values

Event catalogs are comma-separated text with one event per row and
semicolon-separated lists for countries and dates.
"""

import csv
import logging
import struct
from dataclasses import dataclass, field
from datetime import date, timedelta
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from sklearn.decomposition import PCA

from errors import (CatalogParseError, ConfigurationError, CountError, DataLoadError, ShapeError)
from evitransfer import EvidenceSet
from resampling import LabeledDataset

logger = logging.getLogger(__name__)

# ============================================================================
# Formats
# ============================================================================

FEATURE_MAGIC = b"EVTF"
FEATURE_VERSION = 1
HEADER = struct.Struct("<4sHxxQQqq")
SAMPLE_STEP_SECONDS = 6 * 3600
SAMPLES_PER_DAY = 4
SECONDS_PER_DAY = 86400
EPOCH = date(1970, 1, 1)

CATALOG_FIELDS = ["name", "event_type", "affected_countries", "location",
                  "latitude", "longitude", "description", "dates"]
LIST_SEPARATOR = ";"

NONSEVERE_TARGET = 500


class EventType(str, Enum):
    HAILSTORM = "hailstorm"
    FLOOD = "flood"
    TORNADO = "tornado"
    WINDSTORM = "windstorm"


def day_number(d: date) -> int:
    return (d - EPOCH).days


# ============================================================================
# Feature matrix
# ============================================================================

@dataclass
class FeatureMatrix:
    """
    Primary data: one row per 6-hour sample.

    ``values`` are min-max normalised per feature; ``raw`` keeps the file
    contents and ``feature_min``/``feature_range`` undo the scaling.
    """
    raw: np.ndarray
    timestamps: np.ndarray
    step: int = SAMPLE_STEP_SECONDS
    values: np.ndarray = field(init=False, repr=False)
    feature_min: np.ndarray = field(init=False, repr=False)
    feature_range: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64).reshape(-1)
        if self.raw.ndim != 2:
            raise ShapeError(f"feature values must be 2-D, got shape {self.raw.shape}")
        if self.timestamps.shape[0] != self.raw.shape[0]:
            raise ShapeError(f"{self.timestamps.shape[0]} timestamps for {self.raw.shape[0]} rows")
        _validate_timestamps(self.timestamps, self.step)
        bad = np.flatnonzero(~np.all(np.isfinite(self.raw), axis=1))
        if bad.size:
            raise DataLoadError(f"row {int(bad[0])}: non-finite feature value")

        if self.raw.shape[0]:
            self.feature_min = self.raw.min(axis=0)
            span = self.raw.max(axis=0) - self.feature_min
        else:
            self.feature_min = np.zeros(self.raw.shape[1])
            span = np.zeros(self.raw.shape[1])
        self.feature_range = np.where(span > 0, span, 1.0)
        self.values = (self.raw - self.feature_min) / self.feature_range

    @property
    def n_rows(self) -> int:
        return self.raw.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.raw.shape[1]

    @property
    def days(self) -> np.ndarray:
        """UTC day number (days since 1970-01-01) of every row."""
        return self.timestamps // SECONDS_PER_DAY

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values) * self.feature_range + self.feature_min


def _validate_timestamps(timestamps: np.ndarray, step: int) -> None:
    if step <= 0 or step % SAMPLE_STEP_SECONDS:
        raise DataLoadError(f"step {step}s is not a positive multiple of {SAMPLE_STEP_SECONDS}s")
    if timestamps.size == 0:
        return
    if timestamps[0] % SAMPLE_STEP_SECONDS:
        raise DataLoadError(f"row 0: timestamp {int(timestamps[0])} is not on the 6-hour grid")
    gaps = np.diff(timestamps)
    bad = np.flatnonzero((gaps <= 0) | (gaps % step != 0))
    if bad.size:
        i = int(bad[0]) + 1
        raise DataLoadError(
            f"row {i}: timestamp gap of {int(gaps[i - 1])}s is not a positive multiple of {step}s"
        )


def save_feature_matrix(fm: FeatureMatrix, path: Union[str, Path]) -> Path:
    path = Path(path)
    start = int(fm.timestamps[0]) if fm.n_rows else 0
    with open(path, "wb") as f:
        f.write(HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, fm.n_rows, fm.feature_dim, start, fm.step))
        f.write(fm.timestamps.astype("<i8").tobytes())
        f.write(fm.raw.astype("<f8").tobytes())
    return path


def load_feature_matrix(path: Union[str, Path]) -> FeatureMatrix:
    """
    Read and validate a feature file.

    Raises:
        DataLoadError: bad header, truncated body, timestamps off the 6-hour
            grid or out of order, non-finite values (with the row index)
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataLoadError(f"{path}: {e}") from e
    if len(blob) < HEADER.size:
        raise DataLoadError(f"{path}: file shorter than the {HEADER.size}-byte header")
    magic, version, n, d, start, step = HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise DataLoadError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DataLoadError(f"{path}: unsupported version {version}")
    expected = HEADER.size + 8 * n + 8 * n * d
    if len(blob) != expected:
        raise DataLoadError(f"{path}: header declares {n}x{d} but body has {len(blob) - HEADER.size} bytes")

    timestamps = np.frombuffer(blob, dtype="<i8", count=n, offset=HEADER.size).astype(np.int64)
    raw = np.frombuffer(blob, dtype="<f8", count=n * d, offset=HEADER.size + 8 * n).reshape(n, d)
    if n and int(timestamps[0]) != start:
        raise DataLoadError(f"{path}: row 0 timestamp {int(timestamps[0])} != header start {start}")
    try:
        fm = FeatureMatrix(raw.astype(np.float64), timestamps, step=int(step))
    except DataLoadError as e:
        raise DataLoadError(f"{path}: {e}") from e
    logger.info("loaded %s: %d samples x %d features", path.name, n, d)
    return fm


# ============================================================================
# Event catalog
# ============================================================================

class EventRecord(BaseModel):
    name: str = Field(min_length=1)
    event_type: EventType
    affected_countries: List[str] = Field(default_factory=list)
    location: Optional[str] = None
    latitude: float = Field(ge=-90, le=90)
    longitude: float = Field(ge=-180, le=180)
    description: str = ""
    dates: List[date] = Field(min_length=1)

    @field_validator("event_type", mode="before")
    @classmethod
    def _lower_type(cls, v):
        return v.strip().lower() if isinstance(v, str) else v

    @field_validator("affected_countries", "dates", mode="before")
    @classmethod
    def _split_list(cls, v):
        if isinstance(v, str):
            return [item.strip() for item in v.split(LIST_SEPARATOR) if item.strip()]
        return v

    @field_validator("location", mode="before")
    @classmethod
    def _empty_location(cls, v):
        return v or None


@dataclass
class EventCatalog:
    records: List[EventRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def of_type(self, event_type: EventType) -> List[EventRecord]:
        return [r for r in self.records if r.event_type is EventType(event_type)]

    @property
    def event_types(self) -> List[EventType]:
        return sorted({r.event_type for r in self.records}, key=lambda t: t.value)

    def event_days(self, event_type: EventType) -> List[date]:
        """Distinct dates of ``event_type``, sorted."""
        return sorted({d for r in self.of_type(event_type) for d in r.dates})


def ingest_event_catalog(path: Union[str, Path]) -> EventCatalog:
    """
    Parse a catalog file. Records are kept as written; duplicate
    (date, type) pairs are only collapsed when labels are expanded.

    Raises:
        CatalogParseError: missing column or invalid field, with the line number
    """
    path = Path(path)
    records = []
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            missing = [c for c in CATALOG_FIELDS if c not in (reader.fieldnames or [])]
            if missing:
                raise CatalogParseError(f"{path}: line 1: missing columns {missing}")
            for row in reader:
                empty = [c for c in ("name", "event_type", "latitude", "longitude", "dates")
                         if not (row.get(c) or "").strip()]
                if empty:
                    raise CatalogParseError(f"{path}: line {reader.line_num}: missing {', '.join(empty)}")
                try:
                    records.append(EventRecord(**{c: row[c] for c in CATALOG_FIELDS}))
                except ValidationError as e:
                    raise CatalogParseError(f"{path}: line {reader.line_num}: {e.errors()[0]['msg']}") from e
    except OSError as e:
        raise CatalogParseError(f"{path}: {e}") from e
    logger.info("catalog %s: %d events", path.name, len(records))
    return EventCatalog(records)


def write_event_catalog(catalog: EventCatalog, path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CATALOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in catalog.records:
            writer.writerow({
                "name": r.name,
                "event_type": r.event_type.value,
                "affected_countries": LIST_SEPARATOR.join(r.affected_countries),
                "location": r.location or "",
                "latitude": repr(r.latitude),
                "longitude": repr(r.longitude),
                "description": r.description,
                "dates": LIST_SEPARATOR.join(d.isoformat() for d in r.dates),
            })
    return path


# ============================================================================
# Labels
# ============================================================================

@dataclass
class EventLabels:
    labels: np.ndarray
    event_days: List[date]
    out_of_coverage: List[date] = field(default_factory=list)

    @property
    def positives(self) -> int:
        return int(self.labels.sum())


def expand_event_labels(catalog: EventCatalog, fm: FeatureMatrix, event_type: EventType) -> EventLabels:
    """
    Label every sample on a calendar day of ``event_type`` as 1.

    Days are whole UTC days, so one covered event day marks its four 6-hour
    samples. Dates with no sample are reported, not raised.
    """
    days = fm.days
    event_days = catalog.event_days(event_type)
    wanted = np.array([day_number(d) for d in event_days], dtype=np.int64)
    labels = np.isin(days, wanted).astype(np.int64)
    present = set(days.tolist())
    missing = [d for d in event_days if day_number(d) not in present]
    for d in missing:
        logger.warning("%s event on %s is outside the feature coverage", EventType(event_type).value, d)
    return EventLabels(labels, [d for d in event_days if d not in missing], missing)


def severity_labels(catalog: EventCatalog, fm: FeatureMatrix,
                    event_types: Optional[Sequence[EventType]] = None) -> np.ndarray:
    """1 on samples of any of ``event_types`` (default: every type in the catalog)."""
    labels = np.zeros(fm.n_rows, dtype=np.int64)
    for t in (event_types or catalog.event_types):
        labels |= expand_event_labels(catalog, fm, t).labels
    return labels


# ============================================================================
# Rotation experiments
# ============================================================================

class RotationSpec(BaseModel):
    """One ground-truth type against one or more evidence types."""
    ground_truth_type: EventType
    evidence_types: List[EventType] = Field(min_length=1)
    nonsevere_sample_target: int = Field(NONSEVERE_TARGET, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _disjoint(self):
        if self.ground_truth_type in self.evidence_types:
            raise ValueError(f"ground truth {self.ground_truth_type.value} is also listed as evidence")
        if len(set(self.evidence_types)) != len(self.evidence_types):
            raise ValueError("duplicate evidence types")
        return self


@dataclass
class RotationExperiment:
    dataset: LabeledDataset
    evidence: EvidenceSet
    rows: np.ndarray
    composition: Dict[str, int]


def build_rotation_experiment(fm: FeatureMatrix, catalog: EventCatalog, spec: RotationSpec) -> RotationExperiment:
    """
    Ground-truth samples, evidence samples and a uniform random draw of
    ``nonsevere_sample_target`` samples with no event of any type.

    Ground truth is positive only on its own type; every evidence source is
    positive only on its own type, so evidence marks the ground-truth rows as
    normal.
    """
    if not catalog.of_type(spec.ground_truth_type):
        raise ConfigurationError(f"no {spec.ground_truth_type.value} events in the catalog")
    truth = expand_event_labels(catalog, fm, spec.ground_truth_type).labels
    if not truth.any():
        raise CountError(f"no {spec.ground_truth_type.value} samples inside the feature coverage")
    evidence = [expand_event_labels(catalog, fm, t).labels for t in spec.evidence_types]
    for t, lab in zip(spec.evidence_types, evidence):
        if not lab.any():
            raise CountError(f"no {t.value} samples inside the feature coverage")

    pool = np.flatnonzero(severity_labels(catalog, fm) == 0)
    if pool.size < spec.nonsevere_sample_target:
        raise CountError(f"{pool.size} non-severe samples, {spec.nonsevere_sample_target} requested")
    rng = np.random.default_rng(spec.seed)
    nonsevere = np.sort(rng.choice(pool, size=spec.nonsevere_sample_target, replace=False))

    event_rows = np.flatnonzero(truth | np.any(evidence, axis=0))
    rows = np.union1d(event_rows, nonsevere)
    dataset = LabeledDataset(fm.values[rows], truth[rows], rows, fm.timestamps[rows])
    evidence_set = EvidenceSet.from_labels([lab[rows] for lab in evidence],
                                           [t.value for t in spec.evidence_types],
                                           n_classes=[2] * len(evidence))
    composition = {"ground_truth": int(truth[rows].sum()), "nonsevere": int(nonsevere.size)}
    composition.update({f"evidence:{t.value}": int(lab[rows].sum()) for t, lab in zip(spec.evidence_types, evidence)})
    logger.info("rotation %s <- %s: %s", spec.ground_truth_type.value,
                [t.value for t in spec.evidence_types], composition)
    return RotationExperiment(dataset, evidence_set, rows, composition)


# ============================================================================
# Synthetic benchmark
# ============================================================================

class SynthConfig(BaseModel):
    """
    Gaussian benchmark with a nuisance factor and a severity factor.

    Every day draws a Bernoulli nuisance state that shifts the first
    ``nuisance_dims`` features by ``overlap * nuisance_shift``; event days
    shift the remaining features by ``separation`` plus ``type_separation`` on
    a block specific to their type. With the default overlap the nuisance
    split dominates the variance and hides the severe/non-severe split.
    """
    n_days: int = Field(400, ge=1)
    event_types: List[EventType] = Field(
        default_factory=lambda: [EventType.FLOOD, EventType.TORNADO, EventType.WINDSTORM])
    events_per_type: int = Field(40, ge=1)
    nuisance_dims: int = Field(16, ge=0)
    severity_dims: int = Field(16, ge=1)
    separation: float = Field(2.5, ge=0)
    type_separation: float = Field(2.0, ge=0)
    nuisance_shift: float = Field(6.0, ge=0)
    overlap: float = Field(0.8, ge=0, le=1)
    start_day: date = date(2010, 1, 1)

    @property
    def feature_dim(self) -> int:
        return self.nuisance_dims + self.severity_dims


def synth_generate(cfg: Optional[SynthConfig] = None, seed: int = 0) -> Tuple[FeatureMatrix, EventCatalog]:
    cfg = cfg or SynthConfig()
    n_types = len(cfg.event_types)
    if len(set(cfg.event_types)) != n_types:
        raise ConfigurationError("duplicate event types in synth config")
    if n_types * cfg.events_per_type > cfg.n_days:
        raise ConfigurationError(
            f"{n_types} x {cfg.events_per_type} event days do not fit into {cfg.n_days} days"
        )
    if cfg.severity_dims < n_types:
        raise ConfigurationError(f"{cfg.severity_dims} severity features cannot hold {n_types} type blocks")

    rng = np.random.default_rng(seed)
    n = cfg.n_days * SAMPLES_PER_DAY
    row_day = np.repeat(np.arange(cfg.n_days), SAMPLES_PER_DAY)
    chosen = rng.choice(cfg.n_days, size=n_types * cfg.events_per_type, replace=False)
    day_type = np.full(cfg.n_days, -1)
    for t in range(n_types):
        day_type[chosen[t * cfg.events_per_type:(t + 1) * cfg.events_per_type]] = t
    nuisance_on = rng.random(cfg.n_days) < 0.5

    raw = rng.standard_normal((n, cfg.feature_dim))
    raw[:, :cfg.nuisance_dims] += cfg.overlap * cfg.nuisance_shift * nuisance_on[row_day, None]
    severity = np.arange(cfg.nuisance_dims, cfg.feature_dim)
    blocks = np.array_split(severity, n_types)
    row_type = day_type[row_day]
    raw[np.ix_(row_type >= 0, severity)] += cfg.separation
    for t, block in enumerate(blocks):
        raw[np.ix_(row_type == t, block)] += cfg.type_separation

    start = day_number(cfg.start_day) * SECONDS_PER_DAY
    fm = FeatureMatrix(raw, start + SAMPLE_STEP_SECONDS * np.arange(n, dtype=np.int64))

    records = []
    for t, event_type in enumerate(cfg.event_types):
        for k, d in enumerate(np.sort(np.flatnonzero(day_type == t))):
            records.append(EventRecord(
                name=f"Synthetic {event_type.value} {k + 1:03d}",
                event_type=event_type,
                affected_countries=["Synthland"],
                latitude=round(float(rng.uniform(35.0, 70.0)), 4),
                longitude=round(float(rng.uniform(-10.0, 30.0)), 4),
                description="generated event day",
                dates=[cfg.start_day + timedelta(days=int(d))],
            ))
    logger.info("synthetic benchmark: %d samples x %d features, %d events", n, cfg.feature_dim, len(records))
    return fm, EventCatalog(records)


# ============================================================================
# Projection export
# ============================================================================

def export_latent_projection(latents: np.ndarray, labels: Sequence[int], path: Union[str, Path]) -> np.ndarray:
    """Write the first two principal components with labels as CSV; returns the N x 2 coordinates."""
    x = np.asarray(latents, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if x.ndim != 2 or x.shape[0] == 0:
        raise CountError(f"cannot project latents of shape {x.shape}")
    if y.shape[0] != x.shape[0]:
        raise ShapeError(f"{y.shape[0]} labels for {x.shape[0]} latent rows")
    k = min(2, x.shape[0], x.shape[1])
    coords = np.zeros((x.shape[0], 2))
    if x.shape[0] > 1:
        coords[:, :k] = PCA(n_components=k, svd_solver="full").fit_transform(x)

    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["pc1", "pc2", "label"])
        for (a, b), lab in zip(coords, y):
            writer.writerow([f"{a:.6f}", f"{b:.6f}", int(lab)])
    return coords
