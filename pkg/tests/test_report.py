"""Tests for the metrics workbook and the evaluation figures."""

import numpy as np
import pytest
from openpyxl import load_workbook

from src.metrics import ViewMetrics, report, sparsification
from src.plots import plot_selection, plot_sparsification
from src.regression import SelectionStep, SelectionTrace, summarize_traces
from src.report import write_report_workbook


@pytest.fixture
def metrics_report():
    return report([
        ViewMetrics("a0", "alpha", "rgb", "gbdt", 0.75, 0.01),
        ViewMetrics("a1", "alpha", "depth", "gbdt"),
    ])


class TestWorkbook:

    def test_sheets_and_rows(self, metrics_report, tmp_path):
        path = write_report_workbook(metrics_report, str(tmp_path / "out" / "metrics.xlsx"), title="Run 1")
        wb = load_workbook(path)
        assert wb.sheetnames == ["Views", "Summary"]
        views = wb["Views"]
        assert views["A1"].value == "Run 1"
        assert [c.value for c in views[4]] == ["View", "Scene", "Target", "Method", "Pearson", "AUSE"]
        assert views["A5"].value == "a0"
        assert views["E5"].value == pytest.approx(0.75)
        assert views["E6"].value == "excluded"

    def test_summary_has_scene_and_dataset_rows(self, metrics_report, tmp_path):
        path = write_report_workbook(metrics_report, str(tmp_path / "metrics.xlsx"))
        summary = load_workbook(path)["Summary"]
        assert summary["A2"].value == "alpha"
        assert summary["A3"].value == "ALL"
        assert summary["D3"].value == 1
        assert "excluded" in summary["A5"].value


class TestFigures:

    def test_sparsification_png(self, rng, tmp_path):
        err = rng.uniform(size=(12, 12))
        result = sparsification(err, err + rng.normal(scale=0.1, size=(12, 12)))
        path = plot_sparsification(result, str(tmp_path / "plots" / "v0.png"), title="v0")
        with open(path, "rb") as f:
            assert f.read(8) == b"\x89PNG\r\n\x1a\n"

    def test_selection_png(self, tmp_path):
        trace = SelectionTrace(("a", "b"), 0.9, [SelectionStep("b", ("a",), 0.8)])
        path = plot_selection(summarize_traces([trace]), str(tmp_path / "selection.png"))
        assert np.fromfile(path, dtype=np.uint8).size > 0
