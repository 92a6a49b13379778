#!/usr/bin/env python3
"""
End-to-end experiment runs.

``run_pipeline`` executes one experiment: load -> dataset -> sampling ->
init training -> screening -> transfer training -> detection -> evaluation.
Both arms use the same initialisation-step model and the same detector seed:
the baseline arm detects on its latents as they are, the transfer arm on the
latents after evidence transfer continued from it.

``run_rotation_suite`` and ``run_sampling_comparison`` run many such
experiments as independent cells; a failing cell is recorded and the suite
moves on.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from sklearn.model_selection import train_test_split

from config import EvaluationMode, ExperimentConfig, config_hash
from dataio import (EventCatalog, EventType, FeatureMatrix, RotationSpec, SynthConfig,
                    build_rotation_experiment, export_latent_projection, ingest_event_catalog,
                    load_feature_matrix, save_feature_matrix, severity_labels, synth_generate,
                    write_event_catalog)
from detectors import DetectorConfig, DetectorKind, DetectorOutput, run_detector
from errors import (CellResult, ConfigurationError, CountError, EvidenceRejectedError, run_stage,
                    safe_cell)
from evaluation import DetectionReport, evaluate_detection, map_clusters_to_labels
from evitransfer import (AutoencoderModel, EvidenceSet, ScreeningVerdict, TrainHistory,
                         attach_evidence_heads, build_autoencoder, encode, save_model,
                         screen_evidence, train_init, train_transfer)
from generate_report import (atomic_write_text, dumps, emit_report, render_rotation_table,
                             render_run_table, render_sampling_table, run_document)
from losses import TransferConfig
from resampling import LabeledDataset, SamplingStrategy, apply_sampling
from status_reporter import mark_complete, update_status

logger = logging.getLogger(__name__)

GROUND_TRUTH_SOURCE = "ground_truth"
SEED_STREAMS = ("model", "init", "heads", "transfer", "sampling", "detector", "split", "screening")
COMPARED_STRATEGIES = (SamplingStrategy.OVERSAMPLE, SamplingStrategy.UNDERSAMPLE, SamplingStrategy.COMBINE)


# ============================================================================
# Result Types
# ============================================================================

@dataclass
class Experiment:
    """Inputs of one run before balancing."""
    name: str
    dataset: LabeledDataset
    evidence: Optional[EvidenceSet]
    detector: DetectorConfig
    ground_truth_as_evidence: bool
    composition: Dict[str, int] = field(default_factory=dict)


@dataclass
class PipelineResult:
    name: str
    seed: int
    config_hash: str
    reports: Dict[str, DetectionReport]
    test_reports: Optional[Dict[str, DetectionReport]]
    screening: List[ScreeningVerdict]
    labels: np.ndarray
    latents: Dict[str, np.ndarray] = field(repr=False)
    models: Dict[str, AutoencoderModel] = field(repr=False)
    histories: Dict[str, Optional[TrainHistory]] = field(repr=False)
    document: Dict[str, Any] = field(repr=False)
    outputs: List[Path] = field(default_factory=list)


@dataclass
class SuiteResult:
    kind: str
    cells: List[CellResult]
    document: Dict[str, Any]
    table: str
    outputs: List[Path] = field(default_factory=list)


def stage_seeds(seed: int) -> Dict[str, int]:
    """Independent, reproducible seeds for every randomised stage."""
    states = np.random.SeedSequence(seed).generate_state(len(SEED_STREAMS))
    return {name: int(s) for name, s in zip(SEED_STREAMS, states)}


# ============================================================================
# Stages
# ============================================================================

def load_data(config: ExperimentConfig) -> Tuple[FeatureMatrix, EventCatalog]:
    if config.data.synth is not None:
        return synth_generate(config.data.synth, seed=config.seed)
    return load_feature_matrix(config.data.features), ingest_event_catalog(config.data.catalog)


def rotation_spec(config: ExperimentConfig) -> RotationSpec:
    rot = config.rotation
    if rot is None or rot.ground_truth_type is None:
        raise ConfigurationError("rotation run needs rotation.ground_truth_type")
    if not rot.evidence_types:
        raise ConfigurationError("rotation run needs at least one evidence type")
    try:
        return RotationSpec(ground_truth_type=rot.ground_truth_type, evidence_types=rot.evidence_types,
                            nonsevere_sample_target=rot.nonsevere_sample_target, seed=config.seed)
    except ValueError as e:
        raise ConfigurationError(str(e)) from e


def build_experiment(config: ExperimentConfig, fm: FeatureMatrix, catalog: EventCatalog,
                     spec: Optional[RotationSpec] = None,
                     detector: Optional[DetectorConfig] = None) -> Experiment:
    detector = detector or config.detector
    if config.ground_truth_as_evidence:
        labels = severity_labels(catalog, fm, config.severe_types)
        if not labels.any():
            raise CountError("no severe samples inside the feature coverage")
        logger.warning("ground truth is used as evidence: results show the attainable effect only")
        dataset = LabeledDataset(fm.values, labels, None, fm.timestamps)
        return Experiment(config.name, dataset, None, detector, True,
                          {"severe": int(labels.sum()), "nonsevere": int((labels == 0).sum())})
    spec = spec or rotation_spec(config)
    rot = build_rotation_experiment(fm, catalog, spec)
    name = f"{spec.ground_truth_type.value}<-{'+'.join(t.value for t in spec.evidence_types)}"
    return Experiment(name, rot.dataset, rot.evidence, detector, False, rot.composition)


def balance(experiment: Experiment, strategy: SamplingStrategy, config: ExperimentConfig,
            seed: int) -> Tuple[LabeledDataset, EvidenceSet]:
    """Resample the dataset and carry the evidence rows along."""
    before = experiment.dataset
    after = apply_sampling(before, strategy, config.sampling_params, seed)
    if experiment.ground_truth_as_evidence:
        return after, EvidenceSet.from_labels([after.labels], [GROUND_TRUTH_SOURCE], n_classes=[2])
    if after.has_synthetic:
        raise ConfigurationError(f"{strategy.value} creates synthetic rows, which have no external evidence")
    position = {int(s): i for i, s in enumerate(before.source_index)}
    rows = np.array([position[int(s)] for s in after.source_index], dtype=np.int64)
    return after, experiment.evidence.subset(rows)


def screen_all(evidence: EvidenceSet, data: np.ndarray, config: ExperimentConfig,
               seed: int) -> Tuple[EvidenceSet, List[ScreeningVerdict]]:
    """Screen every source; rejected ones are dropped, all rejected aborts."""
    params = config.transfer.screening_params.model_copy(update={"seed": seed})
    verdicts = [screen_evidence(v, data, params, name) for v, name in zip(evidence.sources, evidence.names)]
    kept = [v.source for v in verdicts if v.accepted]
    for v in verdicts:
        if not v.accepted:
            logger.warning("evidence %s rejected (entropy ratio %.3f >= %.2f); dropped",
                           v.source, v.entropy_ratio, v.threshold)
    if not kept:
        raise EvidenceRejectedError(f"screening rejected every evidence source: {evidence.names}")
    return evidence.select(kept), verdicts


def _evaluate(output: DetectorOutput, labels: np.ndarray, latents: np.ndarray, arm: str,
              config: ExperimentConfig, chash: str, detector: DetectorConfig,
              test_rows: Optional[np.ndarray]) -> Tuple[DetectionReport, Optional[DetectionReport]]:
    ev = config.evaluation
    meta = {"detector": detector.kind.value}
    full = evaluate_detection(
        output.assignments, labels, arm=arm, is_clustering=output.is_clustering,
        positive_class=ev.positive_class, latents=latents if ev.separability_probe else None,
        seed=config.seed, config_hash=chash, metadata=meta)
    if test_rows is None:
        return full, None
    # Held-out rows are scored with the mapping fitted on all rows.
    predictions = output.assignments
    if output.is_clustering:
        predictions = map_clusters_to_labels(output.assignments, labels).predictions
    test = evaluate_detection(
        predictions[test_rows], labels[test_rows], arm=arm, is_clustering=False,
        positive_class=ev.positive_class,
        latents=latents[test_rows] if ev.separability_probe else None,
        seed=config.seed, config_hash=chash, scope="test", metadata=meta)
    return full, test


# ============================================================================
# Single run
# ============================================================================

def run_pipeline(config: ExperimentConfig, spec: Optional[RotationSpec] = None,
                 detector: Optional[DetectorConfig] = None, emit: bool = True,
                 data: Optional[Tuple[FeatureMatrix, EventCatalog]] = None,
                 out_dir: Optional[Path] = None) -> PipelineResult:
    """
    Run baseline and evidence-transfer arms of one experiment.

    Any stage failure is raised as a StageError naming the stage; files this
    run already wrote are removed first.
    """
    chash = config_hash(config)
    seeds = stage_seeds(config.seed)
    out_dir = Path(out_dir or config.output_dir)
    written: List[Path] = []
    try:
        update_status(stage="load")
        fm, catalog = data if data is not None else run_stage("load", load_data, config)

        update_status(stage="dataset")
        experiment = run_stage("dataset", build_experiment, config, fm, catalog, spec, detector)

        update_status(stage="sampling")
        dataset, evidence = run_stage("sampling", balance, experiment, config.sampling, config, seeds["sampling"])
        x, y = dataset.features, dataset.labels
        logger.info("%s: %d samples after %s, classes %s", experiment.name, dataset.n_rows,
                    config.sampling.value, dataset.class_counts)

        train_rows = np.arange(dataset.n_rows)
        test_rows = None
        if config.evaluation.mode is EvaluationMode.SPLIT:
            train_rows, test_rows = run_stage(
                "split", train_test_split, train_rows, test_size=config.evaluation.test_fraction,
                stratify=y, random_state=seeds["split"] % (2**32))
            train_rows, test_rows = np.sort(train_rows), np.sort(test_rows)

        update_status(stage="init")
        model = build_autoencoder(x.shape[1], config.autoencoder, seeds["model"])
        init_cfg = config.init_training.model_copy(update={"seed": seeds["init"]})
        init_model, init_history = run_stage("init", train_init, model, x, init_cfg)

        lam = config.transfer.lam
        train_evidence = evidence.subset(train_rows)
        verdicts: List[ScreeningVerdict] = []
        if config.transfer.screening and lam > 0:
            update_status(stage="screening")
            train_evidence, verdicts = run_stage("screening", screen_all, train_evidence, x[train_rows],
                                                 config, seeds["screening"])

        update_status(stage="transfer")
        transfer_history = None
        if lam == 0:
            transfer_model = init_model
        else:
            heads = attach_evidence_heads(init_model, train_evidence, seeds["heads"])
            transfer_cfg = config.transfer_training.model_copy(update={"seed": seeds["transfer"]})
            transfer_model, transfer_history = run_stage(
                "transfer", train_transfer, heads, x[train_rows], train_evidence,
                TransferConfig(lam=lam, evidence_count=train_evidence.k), transfer_cfg)

        update_status(stage="detect")
        latents = {"baseline": encode(init_model, x), "transfer": encode(transfer_model, x)}
        outputs = {arm: run_stage("detect", run_detector, z, experiment.detector, seeds["detector"])
                   for arm, z in latents.items()}

        update_status(stage="evaluate")
        reports, test_reports = {}, {}
        for arm in ("baseline", "transfer"):
            reports[arm], test_reports[arm] = run_stage(
                "evaluate", _evaluate, outputs[arm], y, latents[arm], arm, config, chash,
                experiment.detector, test_rows)

        document = run_document(
            experiment.name, config.seed, chash, reports,
            test_reports=test_reports if test_rows is not None else None,
            screening=[vars(v) for v in verdicts],
            ground_truth_as_evidence=experiment.ground_truth_as_evidence,
            extra={"composition": experiment.composition,
                   "sampling": config.sampling.value,
                   "class_counts": {str(c): n for c, n in dataset.class_counts.items()},
                   "evidence_sources": train_evidence.names if lam > 0 else [],
                   "lambda": lam})

        if emit:
            update_status(stage="emit")
            report_path = out_dir / "report.json"
            written += [report_path, report_path.with_suffix(".txt")]
            run_stage("emit", emit_report, document, report_path, render_run_table(reports))
            if config.projections:
                for arm, z in latents.items():
                    path = out_dir / f"projection_{arm}.csv"
                    written.append(path)
                    run_stage("emit", export_latent_projection, z, y, path)
            if config.checkpoints:
                for arm, m in (("init", init_model), ("transfer", transfer_model)):
                    path = out_dir / f"model_{arm}.npz"
                    written.append(path)
                    run_stage("emit", save_model, m, path, config.model_dump(mode="json", by_alias=True),
                              config.seed)
    except BaseException:
        for path in written:
            if path.exists():
                path.unlink()
        raise

    return PipelineResult(
        name=experiment.name, seed=config.seed, config_hash=chash, reports=reports,
        test_reports=test_reports if test_rows is not None else None, screening=verdicts,
        labels=y, latents=latents, models={"init": init_model, "transfer": transfer_model},
        histories={"init": init_history, "transfer": transfer_history},
        document=document, outputs=written)


# ============================================================================
# Suites
# ============================================================================

def _run_cell(config: ExperimentConfig, spec: Optional[RotationSpec], detector: DetectorConfig,
              data: Tuple[FeatureMatrix, EventCatalog]) -> PipelineResult:
    return run_pipeline(config, spec=spec, detector=detector, emit=False, data=data)


def _execute(cells: Sequence[Tuple[str, tuple]], n_jobs: int) -> List[CellResult]:
    update_status(cell=cells[0][0] if cells else None, total=len(cells))
    if n_jobs > 1:
        results = Parallel(n_jobs=n_jobs)(delayed(safe_cell)(name, _run_cell, *args) for name, args in cells)
        for r in results:
            mark_complete(r.success)
        return results
    results = []
    for name, args in cells:
        update_status(cell=name)
        result = safe_cell(name, _run_cell, *args)
        mark_complete(result.success)
        results.append(result)
    return results


def _cell_entry(result: CellResult, **fields) -> Dict[str, Any]:
    entry = dict(fields, name=result.name, success=result.success, error=result.error)
    entry["reports"] = result.value.reports if result.success else None
    return entry


def _serialize_cells(entries: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    out = []
    for e in entries:
        e = dict(e)
        if e["reports"] is not None:
            e["reports"] = {arm: r.to_dict() for arm, r in e["reports"].items()}
        out.append(e)
    return out


def _emit_suite(kind: str, document: Dict[str, Any], table: str, out_dir: Path) -> List[Path]:
    return emit_report(document, out_dir / f"{kind}.json", table)


def rotation_cells(config: ExperimentConfig) -> List[RotationSpec]:
    """Every ordered (ground truth, evidence) pair, plus all-evidence cells when enabled."""
    rot = config.rotation
    if rot is None:
        raise ConfigurationError("rotation suite needs a rotation section")
    types = list(dict.fromkeys(rot.event_types))
    if len(types) < 2:
        raise ConfigurationError("rotation suite needs at least two event types to supply evidence")
    specs = []
    for truth in types:
        others = [t for t in types if t != truth]
        for ev in others:
            specs.append(RotationSpec(ground_truth_type=truth, evidence_types=[ev],
                                      nonsevere_sample_target=rot.nonsevere_sample_target, seed=config.seed))
        if rot.all_evidence_cells and len(others) > 1:
            specs.append(RotationSpec(ground_truth_type=truth, evidence_types=others,
                                      nonsevere_sample_target=rot.nonsevere_sample_target, seed=config.seed))
    return specs


def run_rotation_suite(config: ExperimentConfig, emit: bool = True,
                       data: Optional[Tuple[FeatureMatrix, EventCatalog]] = None) -> SuiteResult:
    """
    One run per ordered (ground truth, evidence) pair. The pool draw already
    balances a cell, so cells use no further resampling.
    """
    specs = rotation_cells(config)
    cell_config = config.model_copy(update={"ground_truth_as_evidence": False,
                                            "sampling": SamplingStrategy.NONE})
    data = data if data is not None else run_stage("load", load_data, config)
    overrides = config.rotation.detector_overrides

    cells, meta = [], []
    for spec in specs:
        label = "+".join(t.value for t in spec.evidence_types)
        kind = overrides.get(f"{spec.ground_truth_type.value}->{label}", config.detector.kind)
        detector = config.detector.model_copy(update={"kind": DetectorKind(kind)})
        name = f"{spec.ground_truth_type.value}<-{label}"
        cells.append((name, (cell_config, spec, detector, data)))
        meta.append({"ground_truth": spec.ground_truth_type.value, "evidence_label": label,
                     "evidence": [t.value for t in spec.evidence_types], "detector": detector.kind.value})

    results = _execute(cells, config.parallel_cells)
    entries = [_cell_entry(r, **m) for r, m in zip(results, meta)]
    improved = sum(1 for e in entries if e["reports"] is not None
                   and e["reports"]["transfer"].anomalous.f1 > e["reports"]["baseline"].anomalous.f1)
    table = render_rotation_table(entries)
    document = {"kind": "rotation", "seed": config.seed, "config_hash": config_hash(config),
                "cells": _serialize_cells(entries), "improved_cells": improved,
                "completed_cells": sum(r.success for r in results), "total_cells": len(results)}
    logger.info("rotation suite: F1 improved in %d of %d cells", improved, len(results))
    outputs = _emit_suite("rotation", document, table, Path(config.output_dir)) if emit else []
    return SuiteResult("rotation", results, document, table, outputs)


def run_sampling_comparison(config: ExperimentConfig, emit: bool = True,
                            data: Optional[Tuple[FeatureMatrix, EventCatalog]] = None) -> SuiteResult:
    """Baseline vs evidence transfer under each balancing strategy, ground truth as evidence."""
    if not config.ground_truth_as_evidence:
        raise ConfigurationError("sampling comparison runs with ground_truth_as_evidence enabled")
    data = data if data is not None else run_stage("load", load_data, config)
    cells, meta = [], []
    for strategy in COMPARED_STRATEGIES:
        cell_config = config.model_copy(update={"sampling": strategy})
        cells.append((strategy.value, (cell_config, None, config.detector, data)))
        meta.append({"strategy": strategy.value})

    results = _execute(cells, config.parallel_cells)
    entries = [_cell_entry(r, **m) for r, m in zip(results, meta)]
    table = render_sampling_table(entries)
    document = {"kind": "sampling", "seed": config.seed, "config_hash": config_hash(config),
                "cells": _serialize_cells(entries),
                "completed_cells": sum(r.success for r in results), "total_cells": len(results)}
    outputs = _emit_suite("sampling", document, table, Path(config.output_dir)) if emit else []
    return SuiteResult("sampling", results, document, table, outputs)


# ============================================================================
# Auxiliary verbs
# ============================================================================

def write_synthetic(config: ExperimentConfig, out_dir: Optional[Path] = None) -> List[Path]:
    """Write the configured synthetic benchmark as a feature file and a catalog."""
    out_dir = Path(out_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fm, catalog = synth_generate(config.data.synth or SynthConfig(), seed=config.seed)
    return [save_feature_matrix(fm, out_dir / "features.evtf"),
            write_event_catalog(catalog, out_dir / "catalog.csv")]


def run_screening(config: ExperimentConfig, out_dir: Optional[Path] = None) -> List[ScreeningVerdict]:
    """Screen every evidence source of the configured experiment and write the verdicts."""
    seeds = stage_seeds(config.seed)
    fm, catalog = run_stage("load", load_data, config)
    experiment = run_stage("dataset", build_experiment, config, fm, catalog)
    dataset, evidence = run_stage("sampling", balance, experiment, config.sampling, config, seeds["sampling"])
    params = config.transfer.screening_params.model_copy(update={"seed": seeds["screening"]})
    verdicts = [run_stage("screening", screen_evidence, v, dataset.features, params, name)
                for v, name in zip(evidence.sources, evidence.names)]
    out_dir = Path(out_dir or config.output_dir)
    atomic_write_text(out_dir / "screening.json", dumps({
        "kind": "screening", "seed": config.seed, "config_hash": config_hash(config),
        "verdicts": [vars(v) for v in verdicts]}))
    return verdicts
