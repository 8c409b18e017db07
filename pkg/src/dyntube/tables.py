"""Delimiter-separated result tables with a format-version comment line.

Floats are written with ``repr`` so a table parses back to the exact values.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path

TABLE_FORMAT_VERSION = 1


class TableFormatError(ValueError):
    pass


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if hasattr(x, "item"):  # numpy scalar, including np.float64 (a float subclass)
        return _fmt(x.item())
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _parse(s: str):
    if s in ("true", "false"):
        return s == "true"
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def format_table(columns: list[str], rows: list) -> str:
    buf = io.StringIO()
    buf.write(f"# format-version: {TABLE_FORMAT_VERSION}\n")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    for r in rows:
        vals = [r[c] for c in columns] if isinstance(r, dict) else list(r)
        if len(vals) != len(columns):
            raise TableFormatError(f"row has {len(vals)} cells, header has {len(columns)}")
        wr.writerow([_fmt(v) for v in vals])
    return buf.getvalue()


def write_table(path, columns: list[str], rows: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_table(columns, rows))
    return path


def parse_table(text: str) -> tuple[list[str], list[dict]]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# format-version:"):
        raise TableFormatError("missing format-version line")
    version = int(lines[0].split(":", 1)[1])
    if version != TABLE_FORMAT_VERSION:
        raise TableFormatError(f"unsupported table version {version}")
    reader = csv.reader(lines[1:])
    try:
        columns = next(reader)
    except StopIteration:
        raise TableFormatError("missing header row") from None
    rows = []
    for cells in reader:
        if len(cells) != len(columns):
            raise TableFormatError(f"row has {len(cells)} cells, header has {len(columns)}")
        rows.append({c: _parse(v) for c, v in zip(columns, cells)})
    return columns, rows


def read_table(path) -> tuple[list[str], list[dict]]:
    return parse_table(Path(path).read_text())
