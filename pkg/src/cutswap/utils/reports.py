"""CSV and Excel writers for manifests, curves, metrics and experiment reports."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from openpyxl import Workbook

LOGGER = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"
SHEET_TITLE_LIMIT = 31  # Excel rejects longer sheet names

Cell = str | int | float | bool | None


def format_cell(value: Cell) -> str:
    """Render a cell with a fixed float format so reruns are byte-identical."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return FLOAT_FORMAT % value
    return str(value)


def write_csv(destination: Path, header: Sequence[str], rows: Iterable[Sequence[Cell]]) -> int:
    """Write a CSV file with ``\\n`` line endings and return the data row count."""
    destination = Path(destination)
    destination.parent.mkdir(parents=True, exist_ok=True)
    written = 0
    with destination.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            if len(row) != len(header):
                raise ValueError(
                    f"Row has {len(row)} cells but the header declares {len(header)} columns."
                )
            writer.writerow([format_cell(cell) for cell in row])
            written += 1
    return written


def read_csv(source: Path) -> list[dict[str, str]]:
    """Read a CSV written by :func:`write_csv` into a list of dicts."""
    with Path(source).open("r", encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


def write_workbook(
    destination: Path, sheets: Mapping[str, tuple[Sequence[str], Sequence[Sequence[Cell]]]]
) -> None:
    """Write one sheet per entry using OpenPyXL in write-only mode."""
    destination = Path(destination)
    destination.parent.mkdir(parents=True, exist_ok=True)
    workbook = Workbook(write_only=True)
    for title, (header, rows) in sheets.items():
        sheet = workbook.create_sheet(title=title[:SHEET_TITLE_LIMIT])
        sheet.append(list(header))
        for row in rows:
            sheet.append(["" if cell is None else cell for cell in row])
    workbook.save(destination)
    LOGGER.debug("Workbook saved to %s (%d sheets)", destination, len(sheets))
