#!/usr/bin/env python3
"""
Experiment configuration.

One hand-editable JSON file declares the whole run. Every setting the method
leaves open appears with its default, so the file written by ``setup.py``
documents the experiment it reproduces.
"""

import hashlib
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from dataio import NONSEVERE_TARGET, EventType, SynthConfig
from detectors import DetectorConfig, DetectorKind
from errors import ConfigurationError
from evitransfer import AutoencoderConfig, ScreeningConfig, TrainConfig
from resampling import SamplingConfig, SamplingStrategy

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = Path.home() / ".evitransfer" / "config" / "experiment.json"


class DataSource(BaseModel):
    """Feature file plus catalog, or a synthetic benchmark; never both."""
    features: Optional[Path] = None
    catalog: Optional[Path] = None
    synth: Optional[SynthConfig] = None

    @model_validator(mode="after")
    def _exactly_one(self):
        files = self.features is not None or self.catalog is not None
        if files and self.synth is not None:
            raise ValueError("data source must be either files or synth, not both")
        if not files and self.synth is None:
            raise ValueError("data source needs features + catalog paths or a synth section")
        if files and (self.features is None or self.catalog is None):
            raise ValueError("file data source needs both features and catalog")
        return self


class EvaluationMode(str, Enum):
    FULL = "full"
    SPLIT = "split"


class EvaluationConfig(BaseModel):
    mode: EvaluationMode = EvaluationMode.FULL
    test_fraction: float = Field(0.25, gt=0, lt=1)
    positive_class: int = 1
    separability_probe: bool = True


class TransferSettings(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    lam: float = Field(1.0, ge=0, alias="lambda")
    screening: bool = True
    screening_params: ScreeningConfig = Field(default_factory=ScreeningConfig)


class RotationConfig(BaseModel):
    """
    Rotation over event types. ``ground_truth_type``/``evidence_types``
    select the single cell ``run`` executes; the suite uses every ordered
    pair of ``event_types``.
    """
    event_types: List[EventType] = Field(
        default_factory=lambda: [EventType.FLOOD, EventType.TORNADO, EventType.WINDSTORM])
    ground_truth_type: Optional[EventType] = None
    evidence_types: List[EventType] = Field(default_factory=list)
    nonsevere_sample_target: int = Field(NONSEVERE_TARGET, ge=1)
    # "<ground truth>-><evidence>" -> detector for that cell only
    detector_overrides: Dict[str, DetectorKind] = Field(default_factory=dict)
    # Adds one cell per ground truth with all other types as evidence.
    all_evidence_cells: bool = False


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    seed: int = Field(0, ge=0)
    output_dir: Path = Path("evitransfer_output")
    data: DataSource = Field(default_factory=lambda: DataSource(synth=SynthConfig()))
    ground_truth_as_evidence: bool = True
    severe_types: Optional[List[EventType]] = None
    sampling: SamplingStrategy = SamplingStrategy.UNDERSAMPLE
    sampling_params: SamplingConfig = Field(default_factory=SamplingConfig)
    autoencoder: AutoencoderConfig = Field(default_factory=AutoencoderConfig)
    init_training: TrainConfig = Field(default_factory=TrainConfig)
    transfer_training: TrainConfig = Field(default_factory=TrainConfig)
    transfer: TransferSettings = Field(default_factory=TransferSettings)
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    rotation: Optional[RotationConfig] = None
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    checkpoints: bool = True
    projections: bool = True
    parallel_cells: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _evidence_mode(self):
        if not self.ground_truth_as_evidence and self.rotation is None:
            raise ValueError("without ground_truth_as_evidence a rotation section is required")
        return self


def canonical_json(config: ExperimentConfig) -> str:
    """Sorted-key JSON of every field, defaults included."""
    return json.dumps(config.model_dump(mode="json", by_alias=True), sort_keys=True, separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def parse_config(data: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid experiment config: {e}") from e


def load_config(path: Union[str, Path, None] = None) -> ExperimentConfig:
    """Load an experiment config (default ``~/.evitransfer/config/experiment.json``)."""
    config_path = Path(path) if path is not None else DEFAULT_CONFIG_PATH
    if not config_path.exists():
        raise ConfigurationError(f"experiment config not found at {config_path}")
    try:
        with open(config_path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{config_path}: line {e.lineno}: {e.msg}") from e
    config = parse_config(data)
    logger.info("loaded config %s (%s)", config_path, config_hash(config)[:12])
    return config


def save_config(config: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.model_dump(mode="json", by_alias=True), indent=2, sort_keys=True) + "\n")
    return path


def apply_overrides(config: ExperimentConfig, *, seed: Optional[int] = None, output_dir: Optional[Path] = None,
                    detector: Optional[str] = None, lam: Optional[float] = None,
                    skip_screening: bool = False) -> ExperimentConfig:
    """Return a copy with command-line overrides applied and re-validated."""
    data = config.model_dump(mode="json", by_alias=True)
    if seed is not None:
        data["seed"] = seed
    if output_dir is not None:
        data["output_dir"] = str(output_dir)
    if detector is not None:
        data["detector"]["kind"] = detector
    if lam is not None:
        data["transfer"]["lambda"] = lam
    if skip_screening:
        data["transfer"]["screening"] = False
    return parse_config(data)
