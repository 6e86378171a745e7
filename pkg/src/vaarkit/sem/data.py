"""Group datasets, sample moments and the delimited-text interchange format."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..instruments import OBSERVED_ORDER


class InsufficientData(ValueError):
    pass


@dataclass
class GroupDataset:
    label: str
    rows: np.ndarray
    columns: tuple[str, ...] = OBSERVED_ORDER
    record_ids: tuple[str, ...] = ()

    def __post_init__(self):
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        if self.rows.shape[1] != len(self.columns):
            raise ValueError(f"expected {len(self.columns)} columns, got {self.rows.shape[1]}")
        if len(self.rows) < 1:
            raise InsufficientData(f"group {self.label!r} has no rows")

    @property
    def n(self) -> int:
        return len(self.rows)

    def scaled(self, factors) -> "GroupDataset":
        return GroupDataset(self.label, self.rows * np.asarray(factors, dtype=float), self.columns, self.record_ids)

    def resample(self, idx) -> "GroupDataset":
        return GroupDataset(self.label, self.rows[idx], self.columns)


@dataclass(frozen=True)
class SampleMoments:
    S: np.ndarray
    mean: np.ndarray
    n: int

    @property
    def rcond(self) -> float:
        """Reciprocal condition number of S (0 for a zero matrix)."""
        eig = np.linalg.eigvalsh(self.S)
        top = eig[-1]
        if top <= 0:
            return 0.0
        return max(eig[0], 0.0) / top


def moments(rows) -> SampleMoments:
    """Sample covariance with denominator n, and the mean vector."""
    X = np.atleast_2d(np.asarray(rows, dtype=float))
    n = len(X)
    if n < 2:
        raise InsufficientData(f"need at least 2 rows, got {n}")
    mean = X.mean(axis=0)
    Xc = X - mean
    S = Xc.T @ Xc / n
    return SampleMoments((S + S.T) / 2, mean, n)


def write_datasets(datasets: Iterable[GroupDataset], path: str | Path | None = None) -> str:
    """Serialize datasets as CSV: a ``group`` column followed by the observed columns."""
    datasets = list(datasets)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    columns = datasets[0].columns if datasets else OBSERVED_ORDER
    w.writerow(("group",) + tuple(columns))
    for ds in datasets:
        for row in ds.rows:
            w.writerow([ds.label] + [repr(float(v)) for v in row])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def read_datasets(path: str | Path, columns: Sequence[str] = OBSERVED_ORDER) -> list[GroupDataset]:
    return parse_datasets(Path(path).read_text(encoding="utf-8"), columns)


def parse_datasets(text: str, columns: Sequence[str] = OBSERVED_ORDER) -> list[GroupDataset]:
    """Parse the CSV written by :func:`write_datasets`; groups keep first-seen order."""
    reader = csv.DictReader(io.StringIO(text))
    missing = [c for c in ("group",) + tuple(columns) if c not in (reader.fieldnames or ())]
    if missing:
        raise ValueError(f"dataset file lacks column(s): {', '.join(missing)}")
    groups: dict[str, list] = {}
    for lineno, row in enumerate(reader, start=2):
        try:
            values = [float(row[c]) for c in columns]
        except (TypeError, ValueError):
            raise ValueError(f"non-numeric value on line {lineno}") from None
        groups.setdefault(row["group"], []).append(values)
    return [GroupDataset(label, np.array(rows), tuple(columns)) for label, rows in groups.items()]
