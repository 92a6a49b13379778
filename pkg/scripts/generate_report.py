#!/usr/bin/env python3
"""
Write experiment reports.

Each run produces a JSON document (sorted keys, metrics rounded to six
decimals, no timestamps, so equal inputs give equal bytes) and a text table
in which evidence-transfer values carry their change against the baseline,
e.g. ``0.82 (+0.29)``.
"""

import json
import logging
import os
import sys
import tempfile
import threading
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Union

from evaluation import DetectionReport, round_floats

logger = logging.getLogger(__name__)

GROUND_TRUTH_BANNER = (
    "ground truth used as evidence: the transfer arm saw the labels it is scored against; "
    "this measures the attainable effect, not a realistic deployment"
)
METRICS = ("precision", "recall", "f1")

_pending: Set[Path] = set()
_pending_lock = threading.Lock()


# ============================================================================
# Atomic output
# ============================================================================

def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    """Write through a temporary file in the same directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    tmp = Path(tmp)
    with _pending_lock:
        _pending.add(tmp)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    finally:
        with _pending_lock:
            _pending.discard(tmp)
        if tmp.exists():
            tmp.unlink()
    return path


def cleanup_partial_files() -> List[Path]:
    """Remove temporary files of writes still in flight (signal handler hook)."""
    with _pending_lock:
        pending = list(_pending)
        _pending.clear()
    for p in pending:
        try:
            p.unlink()
        except FileNotFoundError:
            pass
    return pending


def dumps(document: Mapping[str, Any]) -> str:
    return json.dumps(round_floats(dict(document)), sort_keys=True, indent=2) + "\n"


# ============================================================================
# Documents
# ============================================================================

def _delta(transfer: float, baseline: float) -> float:
    # Taken between the rounded values the document reports
    return round(round(transfer, 6) - round(baseline, 6), 6)


def metric_deltas(baseline: DetectionReport, transfer: DetectionReport) -> Dict[str, float]:
    """transfer - baseline for the anomalous-class and micro metrics."""
    deltas = {}
    for m in METRICS:
        deltas[f"anomalous_{m}"] = _delta(getattr(transfer.anomalous, m), getattr(baseline.anomalous, m))
        deltas[f"micro_{m}"] = _delta(getattr(transfer.micro, m), getattr(baseline.micro, m))
    if baseline.separability is not None and transfer.separability is not None:
        deltas["separability"] = _delta(transfer.separability, baseline.separability)
    return deltas


def run_document(name: str, seed: int, config_hash: str, reports: Mapping[str, DetectionReport],
                 test_reports: Optional[Mapping[str, DetectionReport]] = None,
                 screening: Sequence[Mapping[str, Any]] = (),
                 ground_truth_as_evidence: bool = False,
                 extra: Optional[Mapping[str, Any]] = None) -> Dict[str, Any]:
    doc: Dict[str, Any] = {
        "kind": "run",
        "name": name,
        "seed": seed,
        "config_hash": config_hash,
        "reports": {arm: r.to_dict() for arm, r in reports.items()},
        "deltas": metric_deltas(reports["baseline"], reports["transfer"]),
        "screening": [dict(s) for s in screening],
    }
    if test_reports:
        doc["test_reports"] = {arm: r.to_dict() for arm, r in test_reports.items()}
        doc["test_deltas"] = metric_deltas(test_reports["baseline"], test_reports["transfer"])
    if ground_truth_as_evidence:
        doc["warning"] = GROUND_TRUTH_BANNER
    if extra:
        doc.update(extra)
    return doc


def emit_report(document: Mapping[str, Any], path: Union[str, Path], table: Optional[str] = None) -> List[Path]:
    """
    Write the JSON document and, when given, its text table next to it
    (same stem, ``.txt``).

    Returns:
        Paths written
    """
    if not document:
        raise ValueError("refusing to write an empty report")
    path = Path(path)
    written: List[Path] = []
    try:
        written.append(atomic_write_text(path, dumps(document)))
        if table is not None:
            written.append(atomic_write_text(path.with_suffix(".txt"), table))
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    logger.info("report written: %s", path)
    return written


def read_report(path: Union[str, Path]) -> Dict[str, Any]:
    """Load a report; ``reports``/``test_reports`` come back as DetectionReport objects."""
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    for key in ("reports", "test_reports"):
        if key in doc:
            doc[key] = {arm: DetectionReport.from_dict(r) for arm, r in doc[key].items()}
    if "cells" in doc:
        for cell in doc["cells"]:
            if cell.get("reports"):
                cell["reports"] = {arm: DetectionReport.from_dict(r) for arm, r in cell["reports"].items()}
    return doc


# ============================================================================
# Tables
# ============================================================================

def format_delta(baseline: float, transfer: float) -> str:
    return f"{transfer:.2f} ({transfer - baseline:+.2f})"


def _grid(header: List[str], rows: Iterable[List[str]]) -> str:
    rows = [header] + list(rows)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def render_run_table(reports: Mapping[str, DetectionReport]) -> str:
    base, trans = reports["baseline"], reports["transfer"]
    rows = []
    for scope, b, t in (("anomalous", base.anomalous, trans.anomalous), ("micro", base.micro, trans.micro)):
        for m in METRICS:
            rows.append([f"{scope} {m}", f"{getattr(b, m):.2f}", format_delta(getattr(b, m), getattr(t, m))])
    if base.separability is not None and trans.separability is not None:
        rows.append(["linear separability", f"{base.separability:.2f}",
                     format_delta(base.separability, trans.separability)])
    return _grid(["metric", "baseline", "evidence transfer"], rows) + "\n"


def render_rotation_table(cells: Sequence[Mapping[str, Any]]) -> str:
    """
    One block per ground truth: anomalous-class metrics by evidence type,
    baseline rows followed by evidence-transfer rows. Failed cells show
    ``failed``.
    """
    blocks = []
    truths = list(dict.fromkeys(c["ground_truth"] for c in cells))
    for truth in truths:
        row_cells = [c for c in cells if c["ground_truth"] == truth]
        header = [f"ground truth: {truth}"] + [c["evidence_label"] for c in row_cells]
        rows = [["baseline"] + [""] * len(row_cells)]
        for m in METRICS:
            rows.append([f"  {m}"] + [
                f"{getattr(c['reports']['baseline'].anomalous, m):.2f}" if c.get("reports") else "failed"
                for c in row_cells
            ])
        rows.append(["evidence transfer"] + [""] * len(row_cells))
        for m in METRICS:
            rows.append([f"  {m}"] + [
                format_delta(getattr(c["reports"]["baseline"].anomalous, m),
                             getattr(c["reports"]["transfer"].anomalous, m)) if c.get("reports") else "failed"
                for c in row_cells
            ])
        rows.append(["detector"] + [c.get("detector", "") for c in row_cells])
        blocks.append(_grid(header, rows))
    return "\n\n".join(blocks) + "\n"


def render_sampling_table(cells: Sequence[Mapping[str, Any]]) -> str:
    """Micro metrics by sampling strategy, baseline rows then evidence-transfer rows."""
    header = ["micro average"] + [c["strategy"] for c in cells]
    rows = []
    for arm, label in (("baseline", "baseline"), ("transfer", "evidence transfer")):
        rows.append([label] + [""] * len(cells))
        for m in METRICS:
            row = [f"  {m}"]
            for c in cells:
                if not c.get("reports"):
                    row.append("failed")
                elif arm == "baseline":
                    row.append(f"{getattr(c['reports']['baseline'].micro, m):.2f}")
                else:
                    row.append(format_delta(getattr(c["reports"]["baseline"].micro, m),
                                            getattr(c["reports"]["transfer"].micro, m)))
            rows.append(row)
    return _grid(header, rows) + "\n"


def main():
    if len(sys.argv) < 2:
        print("Usage: generate_report.py <report_json>")
        sys.exit(1)
    doc = read_report(sys.argv[1])
    if doc.get("kind") == "rotation":
        print(render_rotation_table(doc["cells"]), end="")
    elif doc.get("kind") == "sampling":
        print(render_sampling_table(doc["cells"]), end="")
    else:
        print(render_run_table(doc["reports"]), end="")


if __name__ == "__main__":
    main()
