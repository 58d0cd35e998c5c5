"""
promptpan report writer: group tables as CSV, a JSON summary and an Excel
workbook with one sheet per table plus a run summary sheet.
"""

import os
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from openpyxl import Workbook
from openpyxl.styles import Font, PatternFill, Alignment, Border, Side
from openpyxl.utils import get_column_letter

from utils import read_csv, write_csv, write_json

logger = logging.getLogger(__name__)

NAVY   = "1F3864"
BLUE   = "2E74B5"
LTBLUE = "D9E2F3"
GRAY   = "F2F2F2"
WHITE  = "FFFFFF"

_thin = Side(style="thin")
_med  = Side(style="medium")
_border_thin = Border(left=_thin, right=_thin, top=_thin, bottom=_thin)
_border_top  = Border(top=_med, bottom=_thin, left=_thin, right=_thin)

STAMP_COLUMNS = ['config_hash', 'build_id']


@dataclass
class Table:
    name: str
    columns: List[str]
    rows: List[list]
    title: str = ''


@dataclass
class ReportBundle:
    """Tables and artifact paths of one harness operation."""
    run_dir: str
    config_hash: str
    build_id: str
    tables: Dict[str, Table] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    files: List[str] = field(default_factory=list)

    def add_table(self, name: str, columns: Sequence[str], rows: Sequence[Sequence], title: str = '') -> Table:
        table = Table(name, list(columns), [list(r) for r in rows], title or name)
        self.tables[name] = table
        return table

    def table_rows(self, name: str) -> List[Dict[str, str]]:
        table = self.tables[name]
        return [dict(zip(table.columns, [str(v) for v in r])) for r in table.rows]

    def group_value(self, table: str, group: str, column: str) -> Optional[float]:
        """Numeric value of a group table cell; None for '-' or a missing row."""
        for row in self.table_rows(table):
            if row.get('group') == group:
                value = row.get(column)
                return None if value in (None, '-') else float(value)
        return None


def dict_rows(rows: Sequence[Dict[str, str]], columns: Sequence[str]) -> List[list]:
    return [[r.get(c, '') for c in columns] for r in rows]


def write_table(path: str, table: Table, config_hash: str, build: str) -> str:
    """CSV with the config hash and build id stamped on every row."""
    write_csv(path, table.columns + STAMP_COLUMNS,
              [list(r) + [config_hash, build] for r in table.rows])
    return path


def read_table(path: str) -> Table:
    rows = read_csv(path)
    name = os.path.splitext(os.path.basename(path))[0]
    if not rows:
        return Table(name, [], [])
    columns = [c for c in rows[0] if c not in STAMP_COLUMNS]
    return Table(name, columns, [[r[c] for c in columns] for r in rows])


def _hdr(ws, row, col, text, bold=True, bg=NAVY, fg=WHITE, size=10, wrap=False, align="center"):
    cell = ws.cell(row=row, column=col, value=text)
    cell.font = Font(name="Calibri", bold=bold, color=fg, size=size)
    cell.fill = PatternFill("solid", fgColor=bg)
    cell.alignment = Alignment(horizontal=align, vertical="center", wrap_text=wrap)
    cell.border = _border_top
    return cell


def _row(ws, row, col, value, bold=False, bg=WHITE, fmt=None, align="left", indent=0):
    cell = ws.cell(row=row, column=col, value=value)
    cell.font = Font(name="Calibri", bold=bold, size=10)
    cell.fill = PatternFill("solid", fgColor=bg)
    cell.alignment = Alignment(horizontal=align, vertical="center", indent=indent)
    cell.border = _border_thin
    if fmt:
        cell.number_format = fmt
    return cell


def _band(ws, row, width, text, bg, size=10, bold=False, height=18):
    ws.merge_cells(f"A{row}:{get_column_letter(width)}{row}")
    c = ws.cell(row=row, column=1, value=text)
    c.font = Font(name="Calibri", bold=bold, size=size, color=WHITE)
    c.fill = PatternFill("solid", fgColor=bg)
    c.alignment = Alignment(horizontal="center", vertical="center")
    ws.row_dimensions[row].height = height


def _cell_value(value):
    """Numbers stay numbers in the sheet; '-' and labels stay text."""
    if isinstance(value, (int, float)):
        return value
    try:
        return float(value) if '.' in str(value) else int(value)
    except (TypeError, ValueError):
        return value


def write_workbook(path: str, bundle: ReportBundle, title: str = "PROMPTPAN REPORT") -> str:
    """
    One sheet per table (title band, stamp band, header row, striped rows)
    and a closing Summary sheet with the bundle's key/value summary.
    """
    wb = Workbook()
    wb.remove(wb.active)
    stamp = f"config {bundle.config_hash}  |  build {bundle.build_id}"

    for table in bundle.tables.values():
        ws = wb.create_sheet(table.name[:31])
        ws.sheet_view.showGridLines = False
        width = max(1, len(table.columns))
        for col in range(1, width + 1):
            ws.column_dimensions[get_column_letter(col)].width = 14
        _band(ws, 1, width, table.title.upper(), NAVY, size=13, bold=True, height=26)
        _band(ws, 2, width, stamp, BLUE)
        for col, label in enumerate(table.columns, 1):
            _hdr(ws, 3, col, label)
        for i, values in enumerate(table.rows, 1):
            bg = GRAY if i % 2 == 0 else WHITE
            for col, value in enumerate(values, 1):
                value = _cell_value(value)
                numeric = isinstance(value, (int, float))
                _row(ws, 3 + i, col, value, bg=bg, align="right" if numeric else "left",
                     bold=(col == 1))
            ws.row_dimensions[3 + i].height = 15

    ws = wb.create_sheet("Summary")
    ws.sheet_view.showGridLines = False
    ws.column_dimensions["A"].width = 35
    ws.column_dimensions["B"].width = 24
    _band(ws, 1, 2, f"{title} SUMMARY", NAVY, size=13, bold=True, height=26)
    _band(ws, 2, 2, stamp, BLUE)
    r = 4
    for key, value in sorted(bundle.summary.items()):
        _row(ws, r, 1, key, bold=True, bg=LTBLUE, indent=1)
        _row(ws, r, 2, value if isinstance(value, (int, float, str)) else str(value), bg=LTBLUE, align="right")
        r += 1

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    wb.save(path)
    logger.info(f"Workbook written to {path}")
    return path


def write_bundle(bundle: ReportBundle, workbook: bool = True) -> ReportBundle:
    """Write every table as CSV, the summary as JSON and (optionally) the workbook."""
    os.makedirs(bundle.run_dir, exist_ok=True)
    for table in bundle.tables.values():
        path = write_table(os.path.join(bundle.run_dir, f"{table.name}.csv"), table,
                           bundle.config_hash, bundle.build_id)
        if path not in bundle.files:
            bundle.files.append(path)
    summary_path = os.path.join(bundle.run_dir, 'summary.json')
    write_json(summary_path, dict(bundle.summary, config_hash=bundle.config_hash, build_id=bundle.build_id,
                                  tables=sorted(bundle.tables)))
    for path in [summary_path] + ([os.path.join(bundle.run_dir, 'report.xlsx')] if workbook else []):
        if path.endswith('.xlsx'):
            write_workbook(path, bundle)
        if path not in bundle.files:
            bundle.files.append(path)
    return bundle
