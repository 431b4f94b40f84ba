"""Trace persistence: row-flushed CSV files with a JSON sidecar."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

BASE_COLUMNS = ("iter", "objective", "dist_to_opt", "step_size", "fwd_evals", "wall_ms",
                "fwd_examples", "fwd_examples_fb")
CLASSIFICATION_COLUMNS = ("train_loss", "test_loss", "train_acc", "test_acc")


def format_value(value) -> str:
    """Shortest round-trip text for numbers; blank for NaN/None."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return ""
    return repr(value)


class TraceWriter:
    """Append-only CSV trace; every row is flushed so a killed run leaves a valid prefix.

    ``wall_ms`` is written only when ``record_wall_time`` is set, which keeps
    trace files byte-identical across re-runs by default.
    """

    def __init__(self, path, columns=BASE_COLUMNS, record_wall_time: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.columns = tuple(columns)
        self.record_wall_time = record_wall_time
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(self.columns)
        self._fh.flush()
        self.rows = 0

    def write(self, record) -> None:
        row = []
        for col in self.columns:
            value = getattr(record, col, None)
            if col == "wall_ms" and not self.record_wall_time:
                value = None
            row.append(format_value(value))
        self._writer.writerow(row)
        self._fh.flush()
        self.rows += 1

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_sidecar(path, meta: dict) -> None:
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def sidecar_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".json")


def read_trace(path) -> dict[str, np.ndarray]:
    """Load a trace CSV into float columns (blank cells become NaN)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty trace file")
        rows = [r for r in reader if r]
    data = {}
    for i, col in enumerate(header):
        data[col] = np.array([float(r[i]) if r[i] != "" else np.nan for r in rows], dtype=float)
    return data


def read_sidecar(csv_path) -> dict:
    p = sidecar_path(csv_path)
    return json.loads(p.read_text()) if p.exists() else {}


def find_traces(directory) -> list[Path]:
    """All ``rep_*.csv`` trace files under ``directory``, sorted."""
    return sorted(Path(directory).rglob("rep_*.csv"))
