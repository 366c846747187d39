"""Atomic file writes and dual-format (table + delimited) report emission."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from collections.abc import Sequence


def atomic_write_bytes(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_csv(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    columns = list(columns or _columns(rows))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row.get(c, "")) for c in columns])
    return buf.getvalue()


def to_table(rows: Sequence[dict], columns: Sequence[str] | None = None, digits: int = 4) -> str:
    columns = list(columns or _columns(rows))

    def cell(v):
        if isinstance(v, float):
            return f"{v:.{digits}g}" if abs(v) < 1e-3 and v != 0 else f"{v:.{digits}f}"
        return str(v)

    body = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(b[i]) for b in body]) for i, c in enumerate(columns)]
    line = "  ".join(c.ljust(w) for c, w in zip(columns, widths))
    sep = "  ".join("-" * w for w in widths)
    out = [line, sep] + ["  ".join(v.rjust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(out) + "\n"


def _columns(rows):
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    return cols


def write_report(out_dir: str, name: str, rows: Sequence[dict], config: dict, extra: dict | None = None) -> dict:
    """Write ``<name>.csv``, ``<name>.txt`` and ``<name>.json`` under ``out_dir``.

    Every file carries the resolved config: the CSV as a leading
    ``# config=`` comment line, the text table in its header, the JSON as a field.
    """
    cfg_line = json.dumps(config, sort_keys=True)
    csv_text = f"# config={cfg_line}\n" + to_csv(rows)
    table = f"config: {cfg_line}\n\n" + to_table(rows)
    payload = {"config": config, "rows": rows, **(extra or {})}
    paths = {}
    for ext, text in (("csv", csv_text), ("txt", table), ("json", json.dumps(payload, sort_keys=True, indent=1))):
        path = os.path.join(out_dir, f"{name}.{ext}")
        atomic_write_text(path, text)
        paths[ext] = path
    return paths
