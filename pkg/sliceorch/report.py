"""
CSV reports and run manifests.

Reports are streamed row by row and flushed after every row, so a failed run
leaves every completed iteration on disk. Floats are written with repr() so
two identical runs produce byte-identical files.
"""
import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from sliceorch.errors import SchemaMismatchError

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("iteration", "mean_reward", "mean_cost", "violation_rate", "lambda", "switch_rate")
AGENT_COLUMNS = ("mean_reward", "mean_cost", "lambda", "switch_rate")
BC_LOSS_COLUMNS = ("epoch", "loss")


def report_columns(n_agents: int = 1) -> List[str]:
    columns = list(REPORT_COLUMNS)
    if n_agents > 1:
        for i in range(1, n_agents + 1):
            columns.extend(f"agent_{i}_{name}" for name in AGENT_COLUMNS)
    return columns


def format_value(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


@dataclass
class TrainingReport:
    columns: List[str]
    rows: List[Dict[str, float]] = field(default_factory=list)
    path: Optional[str] = None
    # learners at the end of training, not serialized
    agents: list = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        if name not in self.columns:
            raise SchemaMismatchError(f"report has no column '{name}'")
        return np.array([row[name] for row in self.rows], dtype=np.float64)

    @property
    def lambda_trace(self) -> np.ndarray:
        return self.column("lambda")


class ReportWriter:
    """Streams report rows to a CSV file; usable as a context manager."""

    def __init__(self, path: str, columns: Sequence[str]):
        self.path = path
        self.columns = list(columns)
        self._file = open(path, "w", newline="")
        self._writer = csv.writer(self._file, lineterminator="\n")
        self._writer.writerow(self.columns)
        self._file.flush()

    def write(self, row: Dict[str, float]):
        self._writer.writerow([format_value(row[c]) for c in self.columns])
        self._file.flush()

    def close(self):
        if not self._file.closed:
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_csv(path: str, columns: Sequence[str], rows: Sequence[Dict[str, float]]):
    with ReportWriter(path, columns) as writer:
        for row in rows:
            writer.write(row)


def read_report(path: str):
    """Returns (header, rows) with every value parsed as float."""
    with open(path, "r", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaMismatchError(f"{path} is empty, expected a CSV header")
        rows = []
        for lineno, values in enumerate(reader, start=2):
            if len(values) != len(header):
                raise SchemaMismatchError(f"line {lineno}: {path} has {len(values)} values for {len(header)} columns")
            rows.append({c: float(v) for c, v in zip(header, values)})
    return header, rows


def write_manifest(path: str, manifest: dict):
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"manifest written to {path}")


def read_manifest(path: str) -> dict:
    with open(path, "r") as f:
        return json.load(f)
