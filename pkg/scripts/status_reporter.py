#!/usr/bin/env python3
"""
Status reporter for periodic progress updates during long experiment runs.
"""

import logging
import threading
import time
from typing import Callable, Optional

logger = logging.getLogger(__name__)


class StatusReporter:
    """
    Reports pipeline progress every ``update_interval`` seconds in a background thread.
    """

    def __init__(self, update_interval: int = 60, output_func: Optional[Callable[[str], None]] = None):
        """
        Initialize status reporter.

        Args:
            update_interval: Seconds between status updates (default 60)
            output_func: Function to call with status messages (default: logger.info)
        """
        self.update_interval = update_interval
        self.output = output_func or logger.info
        self.running = False
        self.thread = None
        self.start_time = None
        self._lock = threading.Lock()

        # Status tracking
        self.current_stage = "initializing"
        self.current_cell = None
        self.cells_completed = 0
        self.cells_total = 0
        self.cells_passed = 0
        self.cells_failed = 0

    def start(self):
        """Start background status reporting."""
        if self.running:
            return

        self.running = True
        self.start_time = time.time()
        self.thread = threading.Thread(target=self._report_loop, daemon=True)
        self.thread.start()

    def stop(self):
        """Stop background status reporting."""
        self.running = False
        if self.thread:
            self.thread.join(timeout=2)

    def update_stage(self, stage: str):
        with self._lock:
            self.current_stage = stage

    def update_cell(self, cell: str, total: Optional[int] = None):
        """Update the suite cell being executed."""
        with self._lock:
            self.current_cell = cell
            if total is not None:
                self.cells_total = total

    def mark_cell_complete(self, success: bool):
        with self._lock:
            self.cells_completed += 1
            if success:
                self.cells_passed += 1
            else:
                self.cells_failed += 1
            self.current_cell = None

    def _report_loop(self):
        last_report = time.time()

        while self.running:
            time.sleep(1)

            if time.time() - last_report >= self.update_interval:
                self._emit_status()
                last_report = time.time()

    def _elapsed(self) -> str:
        elapsed = time.time() - self.start_time if self.start_time else 0
        return f"{int(elapsed // 60)}m {int(elapsed % 60)}s"

    def status_lines(self):
        with self._lock:
            lines = [
                "=" * 60,
                "STATUS UPDATE",
                f"elapsed: {self._elapsed()}",
                f"stage: {self.current_stage}",
            ]
            if self.current_cell:
                lines.append(f"cell: {self.current_cell}")
            if self.cells_total > 0:
                pct = self.cells_completed / self.cells_total * 100
                lines.append(f"progress: {self.cells_completed}/{self.cells_total} cells ({pct:.0f}%)")
                lines.append(f"passed: {self.cells_passed} | failed: {self.cells_failed}")
            lines.append("=" * 60)
        return lines

    def _emit_status(self):
        self.output("\n".join(self.status_lines()))

    def emit_final_report(self):
        """Emit final status when the run completes."""
        success_rate = (self.cells_passed / self.cells_total * 100) if self.cells_total > 0 else 0
        report_lines = [
            "=" * 60,
            "RUN COMPLETE",
            f"total time: {self._elapsed()}",
            f"cells run: {self.cells_completed}/{self.cells_total}",
            f"passed: {self.cells_passed}",
            f"failed: {self.cells_failed}",
            f"success rate: {success_rate:.1f}%",
            "=" * 60,
        ]
        self.output("\n".join(report_lines))


# Convenience functions for easy integration
_global_reporter: Optional[StatusReporter] = None


def start_status_reporter(update_interval: int = 60) -> StatusReporter:
    """Start global status reporter (call at run start)."""
    global _global_reporter
    if _global_reporter is None:
        _global_reporter = StatusReporter(update_interval=update_interval)
    _global_reporter.start()
    return _global_reporter


def stop_status_reporter():
    global _global_reporter
    if _global_reporter:
        _global_reporter.stop()
        _global_reporter = None


def get_reporter() -> Optional[StatusReporter]:
    return _global_reporter


def update_status(stage: Optional[str] = None, cell: Optional[str] = None, total: Optional[int] = None):
    """Update current run status; a no-op when no reporter is running."""
    reporter = get_reporter()
    if reporter:
        if stage:
            reporter.update_stage(stage)
        if cell or total is not None:
            reporter.update_cell(cell, total)


def mark_complete(success: bool):
    reporter = get_reporter()
    if reporter:
        reporter.mark_cell_complete(success)


def emit_final():
    reporter = get_reporter()
    if reporter:
        reporter.emit_final_report()
