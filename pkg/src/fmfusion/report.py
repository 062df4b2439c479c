"""Tabular reports with deterministic CSV/JSON serialization."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _plain(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.ndarray):
        return [_plain(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    return v


def dumps(obj) -> str:
    """Canonical JSON (sorted keys, NaN mapped to null) so reruns hash identically."""
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


@dataclass
class MetricReport:
    columns: list
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, **row):
        self.rows.append(row)

    def column(self, name) -> list:
        return [r.get(name) for r in self.rows]

    def __len__(self):
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            out = []
            for c in self.columns:
                v = _plain(r.get(c))
                out.append("" if v is None else repr(v) if isinstance(v, float) else v)
            w.writerow(out)
        return buf.getvalue()

    def to_json(self) -> str:
        return dumps({"columns": self.columns, "rows": [{c: r.get(c) for c in self.columns} for r in self.rows],
                      "meta": self.meta})

    def write(self, stem) -> list:
        """Write ``stem.csv`` and ``stem.json``; return both paths."""
        stem = Path(stem)
        csv_path, json_path = (stem.parent / (stem.name + ext) for ext in (".csv", ".json"))
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json())
        return [csv_path, json_path]

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        doc = json.loads(text)
        return cls(doc["columns"], doc["rows"], doc.get("meta", {}))
