"""Metrics workbook generation.

Generates an Excel file per evaluation run with:
    Sheet "Views": View, Scene, Target, Method, Pearson, AUSE (one row per view).
    Sheet "Summary": per-scene means followed by dataset means, plus a
    footnote counting views excluded for missing ground truth.
"""

import logging
import os
from datetime import datetime

from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side

from src.metrics import MetricsReport

logger = logging.getLogger(__name__)

# Styles
HEADER_FONT = Font(name="Calibri", size=12, bold=True, color="FFFFFF")
HEADER_FILL = PatternFill(start_color="2F4F4F", end_color="2F4F4F", fill_type="solid")
BODY_FONT = Font(name="Calibri", size=11)
TOTAL_FONT = Font(name="Calibri", size=12, bold=True)
TOTAL_FILL = PatternFill(start_color="D3D3D3", end_color="D3D3D3", fill_type="solid")
THIN_BORDER = Border(
    left=Side(style="thin"),
    right=Side(style="thin"),
    top=Side(style="thin"),
    bottom=Side(style="thin"),
)
SCORE_FORMAT = "0.0000"


def _header(ws, row: int, headers: list) -> None:
    for col, header in enumerate(headers, 1):
        cell = ws.cell(row=row, column=col, value=header)
        cell.font = HEADER_FONT
        cell.fill = HEADER_FILL
        cell.border = THIN_BORDER
        cell.alignment = Alignment(horizontal="center", vertical="center")


def _row(ws, row: int, values: list, font=BODY_FONT, fill=None) -> None:
    for col, value in enumerate(values, 1):
        cell = ws.cell(row=row, column=col, value=value)
        cell.font = font
        cell.border = THIN_BORDER
        if fill is not None:
            cell.fill = fill
        if isinstance(value, float):
            cell.number_format = SCORE_FORMAT
            cell.alignment = Alignment(horizontal="right")


def write_report_workbook(metrics_report: MetricsReport, path: str, title: str = "Uncertainty evaluation") -> str:
    """Write the metrics report as a styled workbook.

    Args:
        metrics_report: Aggregated metrics.
        path: Destination .xlsx path.
        title: Title shown above the view table.

    Returns:
        Path to the generated file.
    """
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)

    wb = Workbook()
    ws = wb.active
    ws.title = "Views"

    ws.merge_cells("A1:F1")
    title_cell = ws["A1"]
    title_cell.value = title
    title_cell.font = Font(name="Calibri", size=16, bold=True)
    title_cell.alignment = Alignment(horizontal="center")

    ws.merge_cells("A2:F2")
    date_cell = ws["A2"]
    date_cell.value = f"Generated: {datetime.now().strftime('%Y-%m-%d %H:%M')}"
    date_cell.font = Font(name="Calibri", size=10, italic=True)
    date_cell.alignment = Alignment(horizontal="center")

    header_row = 4
    _header(ws, header_row, ["View", "Scene", "Target", "Method", "Pearson", "AUSE"])
    row = header_row + 1
    for m in metrics_report.views:
        _row(ws, row, [m.view_id, m.scene, m.target, m.method,
                       "excluded" if m.pearson is None else m.pearson,
                       "excluded" if m.ause is None else m.ause])
        row += 1

    for col, width in zip("ABCDEF", (22, 18, 10, 12, 12, 12)):
        ws.column_dimensions[col].width = width
    ws.freeze_panes = f"A{header_row + 1}"

    summary = wb.create_sheet("Summary")
    _header(summary, 1, ["Scene", "Target", "Method", "Views", "Mean Pearson", "Mean AUSE"])
    row = 2
    for agg in metrics_report.per_scene:
        _row(summary, row, [agg.scene, agg.target, agg.method, agg.views, agg.pearson, agg.ause])
        row += 1
    for agg in metrics_report.per_dataset:
        _row(summary, row, ["ALL", agg.target, agg.method, agg.views, agg.pearson, agg.ause],
             font=TOTAL_FONT, fill=TOTAL_FILL)
        row += 1
    if metrics_report.footnote:
        note = summary.cell(row=row + 1, column=1, value=f"Note: {metrics_report.footnote}")
        note.font = Font(name="Calibri", size=10, italic=True)

    for col, width in zip("ABCDEF", (18, 10, 12, 8, 14, 14)):
        summary.column_dimensions[col].width = width
    summary.freeze_panes = "A2"

    wb.save(path)
    logger.info("Report saved: %s (%d views, %d scene rows)", path, len(metrics_report.views),
                len(metrics_report.per_scene))
    return path
