import json
from dataclasses import replace

import numpy as np
import pytest

import generate_report
from evaluation import ClassMetrics, MicroMetrics, evaluate_detection
from generate_report import (GROUND_TRUTH_BANNER, atomic_write_text, cleanup_partial_files, emit_report,
                             format_delta, metric_deltas, read_report, render_rotation_table, render_run_table,
                             render_sampling_table, run_document)

TRUE = np.array([0, 0, 0, 0, 1, 1, 1, 1, 0, 1])


@pytest.fixture
def reports():
    baseline = evaluate_detection([0, 1, 0, 1, 1, 0, 1, 0, 0, 1], TRUE, arm="baseline", config_hash="h")
    transfer = evaluate_detection(TRUE, TRUE, arm="transfer", config_hash="h")
    return {"baseline": baseline, "transfer": transfer}


def test_format_delta():
    assert format_delta(0.53, 0.82) == "0.82 (+0.29)"
    assert format_delta(0.9, 0.7) == "0.70 (-0.20)"
    assert format_delta(0.5, 0.5) == "0.50 (+0.00)"


def test_metric_deltas(reports):
    deltas = metric_deltas(reports["baseline"], reports["transfer"])
    expected = round(1.0 - reports["baseline"].micro.f1, 6)
    assert deltas["micro_f1"] == expected
    assert set(deltas) == {f"{s}_{m}" for s in ("anomalous", "micro") for m in ("precision", "recall", "f1")}


def _with_f1(report, value):
    per_class = dict(report.per_class)
    per_class[report.positive_class] = ClassMetrics(value, value, value, support=4)
    return replace(report, per_class=per_class, micro=MicroMetrics(value, value, value))


def test_deltas_match_the_rounded_metrics(reports):
    baseline = _with_f1(reports["baseline"], 1 / 3)
    transfer = _with_f1(reports["transfer"], 2 / 3)
    doc = json.loads(generate_report.dumps(run_document("demo", 0, "h", {"baseline": baseline, "transfer": transfer})))
    base, trans = doc["reports"]["baseline"], doc["reports"]["transfer"]
    assert (trans["micro"]["f1"], base["micro"]["f1"]) == (0.666667, 0.333333)
    assert doc["deltas"]["micro_f1"] == round(trans["micro"]["f1"] - base["micro"]["f1"], 6) == 0.333334
    assert doc["deltas"]["anomalous_f1"] == round(trans["per_class"]["1"]["f1"] - base["per_class"]["1"]["f1"], 6)


def test_run_document_banner_and_rounding(reports):
    doc = run_document("demo", 3, "h", reports, ground_truth_as_evidence=True,
                       screening=[{"source": "flood", "entropy_ratio": 0.123456789}])
    assert doc["warning"] == GROUND_TRUTH_BANNER
    assert "test_reports" not in doc
    assert json.loads(generate_report.dumps(doc))["screening"][0]["entropy_ratio"] == 0.123457
    assert "warning" not in run_document("demo", 3, "h", reports)


def test_emit_then_read_round_trip(tmp_path, reports):
    doc = run_document("demo", 3, "h", reports, test_reports=reports)
    paths = emit_report(doc, tmp_path / "out" / "report.json", table=render_run_table(reports))
    assert [p.name for p in paths] == ["report.json", "report.txt"]
    loaded = read_report(paths[0])
    assert loaded["reports"]["transfer"] == reports["transfer"]
    assert loaded["test_reports"]["baseline"] == reports["baseline"]
    assert loaded["deltas"] == doc["deltas"]
    assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["report.json", "report.txt"]


def test_emit_is_byte_stable(tmp_path, reports):
    doc = run_document("demo", 3, "h", reports)
    emit_report(doc, tmp_path / "a.json")
    emit_report(doc, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_emit_refuses_empty_document(tmp_path):
    with pytest.raises(ValueError):
        emit_report({}, tmp_path / "r.json")
    assert not list(tmp_path.iterdir())


def test_failed_write_leaves_no_temporary(tmp_path, monkeypatch):
    def broken_replace(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(generate_report.os, "replace", broken_replace)
    with pytest.raises(OSError):
        atomic_write_text(tmp_path / "r.json", "{}")
    assert not list(tmp_path.iterdir())


def test_cleanup_partial_files(tmp_path):
    partial = tmp_path / ".report.json.tmp"
    partial.write_text("half")
    with generate_report._pending_lock:
        generate_report._pending.add(partial)
    assert cleanup_partial_files() == [partial]
    assert not partial.exists()
    assert cleanup_partial_files() == []


def test_run_table(reports):
    table = render_run_table(reports)
    assert table.splitlines()[0].split() == ["metric", "baseline", "evidence", "transfer"]
    assert "micro f1" in table
    assert format_delta(reports["baseline"].micro.f1, 1.0) in table


def test_rotation_table(reports):
    cells = [
        {"ground_truth": "windstorm", "evidence_label": "flood", "detector": "kmeans", "reports": reports},
        {"ground_truth": "windstorm", "evidence_label": "tornado", "detector": "agglo", "reports": None},
        {"ground_truth": "flood", "evidence_label": "tornado", "detector": "kmeans", "reports": reports},
    ]
    table = render_rotation_table(cells)
    blocks = table.strip().split("\n\n")
    assert len(blocks) == 2
    assert blocks[0].startswith("ground truth: windstorm")
    assert "failed" in blocks[0] and "failed" not in blocks[1]
    assert "agglo" in blocks[0]


def test_sampling_table(reports):
    cells = [{"strategy": s, "reports": reports} for s in ("oversample", "undersample", "combine")]
    table = render_sampling_table(cells)
    assert table.splitlines()[0].split() == ["micro", "average", "oversample", "undersample", "combine"]
    assert table.count(format_delta(reports["baseline"].micro.f1, 1.0)) == 9


def test_main_rerenders_a_saved_report(tmp_path, reports, monkeypatch, capsys):
    path = emit_report(run_document("demo", 3, "h", reports), tmp_path / "report.json")[0]
    monkeypatch.setattr(generate_report.sys, "argv", ["generate_report.py", str(path)])
    generate_report.main()
    assert capsys.readouterr().out == render_run_table(reports)
    monkeypatch.setattr(generate_report.sys, "argv", ["generate_report.py"])
    with pytest.raises(SystemExit):
        generate_report.main()


def test_failed_table_write_removes_the_json(tmp_path, monkeypatch, reports):
    real_write = generate_report.atomic_write_text

    def fail_on_table(path, text):
        if str(path).endswith(".txt"):
            raise OSError("disk full")
        return real_write(path, text)

    monkeypatch.setattr(generate_report, "atomic_write_text", fail_on_table)
    with pytest.raises(OSError):
        emit_report(run_document("demo", 3, "h", reports), tmp_path / "report.json",
                    table=render_run_table(reports))
    assert not list(tmp_path.iterdir())
