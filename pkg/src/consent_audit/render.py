"""Byte-deterministic rendering of report tables to CSV, JSON lines and Markdown."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable

from .audit import Marked, Percent, Table
from .stats import Marker

FORMATS = {"csv": ".csv", "jsonl": ".jsonl", "markdown": ".md"}

GLYPHS = {
    Marker.Up: "^",
    Marker.UpBeyondStd: "^!",
    Marker.Down: "v",
    Marker.DownBeyondStd: "v!",
}
ARROWS = {
    Marker.Up: "↑",
    Marker.UpBeyondStd: "⇑",
    Marker.Down: "↓",
    Marker.DownBeyondStd: "⇓",
}
_MARKER_BY_GLYPH = {g: m for m, g in GLYPHS.items()}


class ReportWriteError(OSError):
    pass


def fmt_number(x) -> str:
    if x is None:
        return "--"
    if isinstance(x, int) and not isinstance(x, bool):
        return str(x)
    if x == 0:
        return "0.00"
    if abs(x) < 0.005:
        return f"{x:.1E}"
    return f"{x:.2f}"


def fmt_cell(cell, arrows: bool = False) -> str:
    if cell is None:
        return "--"
    if isinstance(cell, Marked):
        text = fmt_number(cell.value)
        if cell.marker is not None and cell.value is not None:
            text += (" " + ARROWS[cell.marker]) if arrows else GLYPHS[cell.marker]
        return text
    if isinstance(cell, Percent):
        return "--" if cell.value is None else f"{cell.value:.{cell.decimals}f}%"
    if isinstance(cell, str):
        return cell
    return fmt_number(cell)


def _encode(cell):
    if isinstance(cell, Marked):
        return {"value": cell.value, "marker": None if cell.marker is None else GLYPHS[cell.marker]}
    if isinstance(cell, Percent):
        return {"pct": cell.value, "decimals": cell.decimals}
    return cell


def _decode(obj):
    if isinstance(obj, dict):
        if "pct" in obj:
            return Percent(obj["pct"], obj.get("decimals", 1))
        marker = obj.get("marker")
        return Marked(obj.get("value"), None if marker is None else _MARKER_BY_GLYPH[marker])
    return obj


def to_csv(table: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.columns)
    for row in table.rows:
        w.writerow([fmt_cell(c) for c in row])
    return buf.getvalue()


def to_jsonl(table: Table) -> str:
    lines = [json.dumps({"table": table.name, "title": table.title, "columns": table.columns},
                        ensure_ascii=False, separators=(",", ":"))]
    lines += [json.dumps([_encode(c) for c in row], ensure_ascii=False, separators=(",", ":"))
              for row in table.rows]
    return "\n".join(lines) + "\n"


def from_jsonl(text: str) -> Table:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty table file")
    head = json.loads(lines[0])
    table = Table(name=head["table"], title=head.get("title", ""), columns=list(head["columns"]))
    table.rows = [[_decode(c) for c in json.loads(ln)] for ln in lines[1:]]
    return table


def to_markdown(table: Table) -> str:
    out = [f"### {table.title}", ""]
    out.append("| " + " | ".join(table.columns) + " |")
    out.append("|" + "|".join("---" for _ in table.columns) + "|")
    for row in table.rows:
        out.append("| " + " | ".join(fmt_cell(c, arrows=True) for c in row) + " |")
    return "\n".join(out) + "\n"


RENDERERS = {"csv": to_csv, "jsonl": to_jsonl, "markdown": to_markdown}


def render_report(tables: Iterable[Table], fmt: str, out_dir) -> list[Path]:
    """Write each table to ``out_dir/<name><ext>``; returns the written paths in order."""
    if fmt not in RENDERERS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {sorted(RENDERERS)}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportWriteError(f"cannot create {out_dir}: {exc.strerror}") from exc
    paths = []
    for table in tables:
        path = out_dir / f"{table.name}{FORMATS[fmt]}"
        try:
            path.write_bytes(RENDERERS[fmt](table).encode("utf-8"))
        except OSError as exc:
            raise ReportWriteError(f"cannot write {path}: {exc.strerror}") from exc
        paths.append(path)
    return paths
