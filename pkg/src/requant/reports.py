"""Tab-separated report files with deterministic bytes.

Layout: ``# key value`` header lines (config hash first), one column-name
row, then data rows.  Floats print via %.10g so reruns of the same
experiment produce identical files.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.10g}"
    return str(value)


def write_report(path, columns, rows, cfg_hash: str | None = None,
                 meta: dict | None = None) -> None:
    lines = []
    if cfg_hash is not None:
        lines.append(f"# config {cfg_hash}")
    for key, value in (meta or {}).items():
        lines.append(f"# {key} {format_cell(value)}")
    lines.append("\t".join(columns))
    for row in rows:
        if len(row) != len(columns):
            raise FormatError(f"row width {len(row)} != {len(columns)} columns")
        lines.append("\t".join(format_cell(v) for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_report(path):
    """(meta dict, column names, rows of strings).  Inverse of write_report."""
    meta, columns, rows = {}, None, []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh.read().splitlines():
            if line.startswith("# "):
                key, _, value = line[2:].partition(" ")
                meta[key] = value
            elif columns is None:
                columns = line.split("\t")
            elif line:
                row = line.split("\t")
                if len(row) != len(columns):
                    raise FormatError(f"ragged report row in {path}")
                rows.append(row)
    if columns is None:
        raise FormatError(f"no header row in {path}")
    return meta, columns, rows
