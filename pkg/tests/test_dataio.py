from datetime import date, timedelta
import logging
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from dataio import (FEATURE_MAGIC, HEADER, SAMPLE_STEP_SECONDS, EventCatalog, EventRecord, EventType, FeatureMatrix,
                    RotationSpec, SynthConfig, build_rotation_experiment, day_number, expand_event_labels,
                    export_latent_projection, ingest_event_catalog, load_feature_matrix, save_feature_matrix,
                    severity_labels, synth_generate, write_event_catalog)
from detectors import kmeans_fit
from errors import CatalogParseError, ConfigurationError, CountError, DataLoadError, ShapeError
from evaluation import map_clusters_to_labels, micro_prf1

START = date(2010, 1, 1)
HEADER_ROW = "name,event_type,affected_countries,location,latitude,longitude,description,dates\n"


def _timestamps(n, start=START):
    return day_number(start) * 86400 + SAMPLE_STEP_SECONDS * np.arange(n, dtype=np.int64)


def _matrix(n_days=10, dim=3, seed=0):
    r = np.random.default_rng(seed)
    return FeatureMatrix(r.normal(size=(n_days * 4, dim)), _timestamps(n_days * 4))


def _record(event_type, *days, name="event"):
    return EventRecord(name=name, event_type=event_type, latitude=45.0, longitude=7.0,
                       dates=[START + timedelta(days=d) for d in days])


def _write_raw_file(path, timestamps, raw, magic=FEATURE_MAGIC, step=SAMPLE_STEP_SECONDS):
    n, d = raw.shape
    with open(path, "wb") as f:
        f.write(HEADER.pack(magic, 1, n, d, int(timestamps[0]), step))
        f.write(np.asarray(timestamps, dtype="<i8").tobytes())
        f.write(np.asarray(raw, dtype="<f8").tobytes())
    return path


# ============================================================================
# Feature files
# ============================================================================

def test_feature_file_round_trip_is_bitwise(tmp_path):
    fm = _matrix(n_days=2, dim=4)
    loaded = load_feature_matrix(save_feature_matrix(fm, tmp_path / "x.evtf"))
    assert loaded.raw.shape == (8, 4)
    assert np.array_equal(loaded.raw, fm.raw)
    assert np.array_equal(loaded.values, fm.values)
    assert_array_equal(loaded.timestamps, fm.timestamps)
    assert loaded.step == SAMPLE_STEP_SECONDS


def test_values_are_min_max_normalised():
    raw = np.array([[1.0, 5.0], [3.0, 5.0], [2.0, 5.0], [5.0, 5.0]])
    fm = FeatureMatrix(raw, _timestamps(4))
    assert_allclose(fm.values[:, 0], [0.0, 0.5, 0.25, 1.0])
    assert_array_equal(fm.values[:, 1], 0.0)
    assert_allclose(fm.denormalize(fm.values), raw)


def test_five_hour_gap_is_rejected(tmp_path):
    ts = _timestamps(4)
    ts[2:] -= 3600
    with pytest.raises(DataLoadError, match="row 2"):
        FeatureMatrix(np.zeros((4, 2)), ts)
    with pytest.raises(DataLoadError, match="row 2"):
        load_feature_matrix(_write_raw_file(tmp_path / "gap.evtf", ts, np.zeros((4, 2))))


def test_non_monotonic_timestamps_are_rejected():
    ts = _timestamps(4)[[0, 2, 1, 3]]
    with pytest.raises(DataLoadError):
        FeatureMatrix(np.zeros((4, 2)), ts)


def test_nan_row_is_reported(tmp_path):
    raw = np.zeros((8, 4))
    raw[5, 2] = np.nan
    with pytest.raises(DataLoadError, match="row 5"):
        load_feature_matrix(_write_raw_file(tmp_path / "nan.evtf", _timestamps(8), raw))


def test_malformed_files(tmp_path):
    with pytest.raises(DataLoadError, match="magic"):
        load_feature_matrix(_write_raw_file(tmp_path / "magic.evtf", _timestamps(4), np.zeros((4, 2)), magic=b"NOPE"))
    truncated = tmp_path / "short.evtf"
    truncated.write_bytes(_write_raw_file(tmp_path / "full.evtf", _timestamps(4), np.zeros((4, 2))).read_bytes()[:-8])
    with pytest.raises(DataLoadError):
        load_feature_matrix(truncated)
    with pytest.raises(DataLoadError):
        load_feature_matrix(tmp_path / "missing.evtf")
    with pytest.raises(DataLoadError):
        load_feature_matrix(_write_raw_file(tmp_path / "step.evtf", _timestamps(4), np.zeros((4, 2)), step=3600))


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        FeatureMatrix(np.zeros((4, 2)), _timestamps(3))


# ============================================================================
# Event catalog
# ============================================================================

def test_ingest_single_flood_record(tmp_path):
    path = tmp_path / "catalog.csv"
    path.write_text(HEADER_ROW + "Big Flood,Flood,Italy;France,,44.5,8.9,river overflow,2010-01-03\n")
    catalog = ingest_event_catalog(path)
    assert len(catalog) == 1
    record = catalog.records[0]
    assert record.event_type is EventType.FLOOD
    assert record.affected_countries == ["Italy", "France"]
    assert record.location is None
    assert record.dates == [date(2010, 1, 3)]


def test_latitude_out_of_bounds(tmp_path):
    path = tmp_path / "catalog.csv"
    path.write_text(HEADER_ROW + "Storm,windstorm,UK,London,120,0.1,,2010-01-03\n")
    with pytest.raises(CatalogParseError, match="line 2"):
        ingest_event_catalog(path)
    with pytest.raises(ValidationError):
        EventRecord(name="x", event_type="flood", latitude=120, longitude=0, dates=["2010-01-01"])


def test_unknown_event_type(tmp_path):
    path = tmp_path / "catalog.csv"
    path.write_text(HEADER_ROW + "Storm,blizzard,UK,London,51.5,0.1,,2010-01-03\n")
    with pytest.raises(CatalogParseError):
        ingest_event_catalog(path)


def test_missing_field_reports_line_number(tmp_path):
    path = tmp_path / "catalog.csv"
    path.write_text(HEADER_ROW
                    + "A,flood,IT,,44.5,8.9,,2010-01-03\n"
                    + "B,flood,IT,,44.5,8.9,,\n")
    with pytest.raises(CatalogParseError, match="line 3.*dates"):
        ingest_event_catalog(path)


def test_missing_column(tmp_path):
    path = tmp_path / "catalog.csv"
    path.write_text("name,event_type\nA,flood\n")
    with pytest.raises(CatalogParseError, match="line 1"):
        ingest_event_catalog(path)


def test_duplicate_records_are_kept(tmp_path):
    path = tmp_path / "catalog.csv"
    path.write_text(HEADER_ROW
                    + "A,flood,IT,,44.5,8.9,,2010-01-03\n"
                    + "B,flood,FR,,45.5,6.9,,2010-01-03\n")
    catalog = ingest_event_catalog(path)
    assert len(catalog) == 2
    assert catalog.event_days(EventType.FLOOD) == [date(2010, 1, 3)]


def test_catalog_write_then_ingest(tmp_path):
    catalog = EventCatalog([
        EventRecord(name="A", event_type="tornado", affected_countries=["US"], location="Kansas",
                    latitude=38.5, longitude=-98.25, description="EF3, long track",
                    dates=["2010-02-01", "2010-02-02"]),
        _record(EventType.HAILSTORM, 4, name="B"),
    ])
    assert ingest_event_catalog(write_event_catalog(catalog, tmp_path / "c.csv")).records == catalog.records


# ============================================================================
# Labels
# ============================================================================

def test_one_event_day_labels_four_samples():
    fm = _matrix(n_days=5)
    labels = expand_event_labels(EventCatalog([_record(EventType.FLOOD, 2)]), fm, EventType.FLOOD)
    assert labels.positives == 4
    assert_array_equal(np.flatnonzero(labels.labels), [8, 9, 10, 11])


def test_empty_catalog_labels_nothing():
    fm = _matrix(n_days=5)
    assert expand_event_labels(EventCatalog(), fm, EventType.FLOOD).positives == 0
    assert severity_labels(EventCatalog(), fm).sum() == 0


def test_shared_dates_are_deduplicated():
    fm = _matrix(n_days=5)
    catalog = EventCatalog([_record(EventType.FLOOD, 1, name="a"), _record(EventType.FLOOD, 1, name="b")])
    assert expand_event_labels(catalog, fm, EventType.FLOOD).positives == 4


def test_other_types_are_ignored():
    fm = _matrix(n_days=5)
    catalog = EventCatalog([_record(EventType.FLOOD, 1), _record(EventType.TORNADO, 3)])
    assert expand_event_labels(catalog, fm, EventType.TORNADO).positives == 4
    assert severity_labels(catalog, fm).sum() == 8


def test_out_of_coverage_dates_warn(caplog):
    fm = _matrix(n_days=5)
    catalog = EventCatalog([_record(EventType.FLOOD, -3, 2, 40)])
    with caplog.at_level(logging.WARNING):
        labels = expand_event_labels(catalog, fm, EventType.FLOOD)
    assert labels.positives == 4
    assert labels.out_of_coverage == [START - timedelta(days=3), START + timedelta(days=40)]
    assert "outside the feature coverage" in caplog.text


@pytest.mark.parametrize("seed", range(50))
def test_positive_count_is_four_per_covered_day(seed):
    r = np.random.default_rng(seed)
    fm = _matrix(n_days=20)
    records = [_record(EventType.WINDSTORM, *r.integers(-5, 25, size=int(r.integers(1, 4))).tolist(), name=str(i))
               for i in range(int(r.integers(0, 8)))]
    covered = {d for rec in records for d in rec.dates if 0 <= (d - START).days < 20}
    assert expand_event_labels(EventCatalog(records), fm, EventType.WINDSTORM).positives == 4 * len(covered)


# ============================================================================
# Rotation experiments
# ============================================================================

@pytest.fixture(scope="module")
def synth_data():
    return synth_generate(SynthConfig(n_days=200, events_per_type=20), seed=5)


def test_rotation_composition(synth_data):
    fm, catalog = synth_data
    spec = RotationSpec(ground_truth_type="windstorm", evidence_types=["flood"], nonsevere_sample_target=100)
    exp = build_rotation_experiment(fm, catalog, spec)
    assert exp.composition == {"ground_truth": 80, "nonsevere": 100, "evidence:flood": 80}
    assert exp.dataset.n_rows == 260

    truth = exp.dataset.labels.astype(bool)
    flood = exp.evidence.sources[0][:, 1].astype(bool)
    assert not np.any(truth & flood)
    nonsevere = ~(truth | flood)
    assert nonsevere.sum() == 100
    tornado = expand_event_labels(catalog, fm, EventType.TORNADO).labels
    assert not tornado[exp.rows].any()
    assert severity_labels(catalog, fm)[exp.rows[nonsevere]].sum() == 0
    assert np.array_equal(exp.dataset.features, fm.values[exp.rows])


def test_rotation_is_deterministic(synth_data):
    fm, catalog = synth_data
    spec = RotationSpec(ground_truth_type="flood", evidence_types=["tornado", "windstorm"],
                        nonsevere_sample_target=50, seed=9)
    a = build_rotation_experiment(fm, catalog, spec)
    b = build_rotation_experiment(fm, catalog, spec)
    assert_array_equal(a.rows, b.rows)
    assert a.evidence.names == ["tornado", "windstorm"]
    other = build_rotation_experiment(fm, catalog, spec.model_copy(update={"seed": 10}))
    assert not np.array_equal(a.rows, other.rows)


def test_rotation_errors(synth_data):
    fm, catalog = synth_data
    with pytest.raises(ConfigurationError):
        build_rotation_experiment(fm, catalog, RotationSpec(ground_truth_type="hailstorm", evidence_types=["flood"]))
    with pytest.raises(CountError):
        build_rotation_experiment(fm, catalog, RotationSpec(ground_truth_type="flood", evidence_types=["tornado"],
                                                            nonsevere_sample_target=10_000))


def test_rotation_spec_validation():
    with pytest.raises(ValidationError):
        RotationSpec(ground_truth_type="flood", evidence_types=["flood"])
    with pytest.raises(ValidationError):
        RotationSpec(ground_truth_type="flood", evidence_types=["tornado", "tornado"])
    with pytest.raises(ValidationError):
        RotationSpec(ground_truth_type="flood", evidence_types=[])


# ============================================================================
# Synthetic benchmark
# ============================================================================

def _baseline_micro_f1(fm, catalog):
    labels = severity_labels(catalog, fm)
    clusters = kmeans_fit(fm.values, k=2, seed=0, n_init=5).labels
    return micro_prf1(map_clusters_to_labels(clusters, labels).predictions, labels).f1


def test_synth_is_deterministic():
    cfg = SynthConfig(n_days=50, events_per_type=5)
    (a, ca), (b, cb) = synth_generate(cfg, seed=1), synth_generate(cfg, seed=1)
    assert np.array_equal(a.raw, b.raw)
    assert ca.records == cb.records
    assert len(ca) == 15 and a.raw.shape == (200, 32)


def test_synth_rejects_inconsistent_counts():
    with pytest.raises(ConfigurationError):
        synth_generate(SynthConfig(n_days=10, events_per_type=5))
    with pytest.raises(ConfigurationError):
        synth_generate(SynthConfig(severity_dims=2))


def test_synth_without_overlap_is_easy():
    fm, catalog = synth_generate(SynthConfig(overlap=0.0), seed=0)
    assert _baseline_micro_f1(fm, catalog) >= 0.95


def test_synth_default_overlap_mixes_the_clusters():
    fm, catalog = synth_generate(SynthConfig(), seed=0)
    assert 0.45 <= _baseline_micro_f1(fm, catalog) <= 0.65


# ============================================================================
# Projection export
# ============================================================================

def test_projection_export(tmp_path, rng):
    latents = rng.normal(size=(50, 10)) * np.linspace(3.0, 0.1, 10)
    labels = rng.integers(0, 2, 50)
    coords = export_latent_projection(latents, labels, tmp_path / "a.csv")
    assert coords.shape == (50, 2)
    assert coords[:, 0].var() >= coords[:, 1].var()
    export_latent_projection(latents, labels, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "pc1,pc2,label" and len(lines) == 51


def test_projection_rejects_empty_latents(tmp_path):
    with pytest.raises(CountError):
        export_latent_projection(np.zeros((0, 3)), [], tmp_path / "p.csv")


def test_reference_catalog_parses():
    path = Path(__file__).resolve().parent.parent / "references" / "catalog-example.csv"
    catalog = ingest_event_catalog(path)
    assert len(catalog) == 3
    xaver = catalog.records[0]
    assert xaver.event_type is EventType.WINDSTORM
    assert xaver.affected_countries == ["United Kingdom", "Germany", "Denmark"]
    assert xaver.location is None
    assert len(catalog.event_days(EventType.FLOOD)) == 3
