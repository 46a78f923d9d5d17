"""Longitudinal dataset representation, validation, and CSV ingestion.

A dataset is a collection of subjects, each carrying an ordered vector of
observation times, a response vector, and fixed/random-effect design
matrices. Subjects and datasets are immutable after construction and safe
to share across parallel workers.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Subject",
    "Dataset",
    "DataRules",
    "SchemaConfig",
    "Violation",
    "IngestReport",
    "DataError",
    "validate",
    "read_csv",
    "ingest_csv",
    "write_csv",
]

_MISSING_TOKENS = {"", "na", "nan", "null", "none"}


class DataError(ValueError):
    """Raised when a file cannot be turned into a Dataset."""


def _frozen_array(values, dtype=float, ndim=1) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    if arr.ndim != ndim:
        arr = arr.reshape(arr.shape[0], -1) if ndim == 2 else arr.ravel()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Subject:
    """One individual's observations.

    times: strictly increasing observation times, shape (n,)
    y: responses, shape (n,)
    x_design: fixed-effect covariates, shape (n, p_beta)
    z_design: random-effect covariates, shape (n, p_b)
    """

    id: str
    times: np.ndarray
    y: np.ndarray
    x_design: np.ndarray
    z_design: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen_array(self.times))
        object.__setattr__(self, "y", _frozen_array(self.y))
        object.__setattr__(self, "x_design", _frozen_array(self.x_design, ndim=2))
        object.__setattr__(self, "z_design", _frozen_array(self.z_design, ndim=2))

    @property
    def n_obs(self) -> int:
        return self.times.shape[0]


@dataclass(frozen=True)
class Dataset:
    """A collection of subjects observed on a common horizon (0, T]."""

    subjects: tuple[Subject, ...]
    horizon: float
    p_beta: int
    p_b: int

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_obs_total(self) -> int:
        return sum(s.n_obs for s in self.subjects)


@dataclass(frozen=True)
class DataRules:
    """Structural limits enforced by validate() and ingestion.

    allow_time_zero permits observations at t=0 (zero system-noise
    variance; the measurement-error term keeps the covariance positive
    definite). allow_ties permits duplicate times within a subject.
    """

    max_abs_covariate: float = 1e6
    max_points_per_subject: int = 10_000
    allow_time_zero: bool = False
    allow_ties: bool = False


@dataclass(frozen=True)
class Violation:
    subject_id: str | None
    field: str
    message: str

    def __str__(self) -> str:
        who = f"subject {self.subject_id}: " if self.subject_id is not None else ""
        return f"{who}{self.field}: {self.message}"


@dataclass(frozen=True)
class IngestReport:
    n_rows_read: int
    n_rows_dropped_missing_y: int


@dataclass(frozen=True)
class SchemaConfig:
    """Column mapping for CSV ingestion.

    The JSON sidecar uses keys id_col, time_col, y_col, x_cols, z_cols.
    """

    id_col: str
    time_col: str
    y_col: str
    x_cols: tuple[str, ...] = field(default_factory=tuple)
    z_cols: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "x_cols", tuple(self.x_cols))
        object.__setattr__(self, "z_cols", tuple(self.z_cols))

    @classmethod
    def from_json(cls, path) -> "SchemaConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"cannot read schema file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"schema file {path} is not valid JSON: {exc}") from exc
        for key in ("id_col", "time_col", "y_col"):
            if key not in raw:
                raise DataError(f"schema file {path}: missing required key '{key}'")
        return cls(
            id_col=str(raw["id_col"]),
            time_col=str(raw["time_col"]),
            y_col=str(raw["y_col"]),
            x_cols=tuple(str(c) for c in raw.get("x_cols", [])),
            z_cols=tuple(str(c) for c in raw.get("z_cols", [])),
        )

    def to_dict(self) -> dict:
        return {
            "id_col": self.id_col,
            "time_col": self.time_col,
            "y_col": self.y_col,
            "x_cols": list(self.x_cols),
            "z_cols": list(self.z_cols),
        }


def validate(dataset: Dataset, rules: DataRules = DataRules()) -> list[Violation]:
    """Check every structural invariant; returns all violations found.

    An empty list means the dataset is well-formed. Violations are data,
    not failures: callers decide whether to proceed.
    """
    out: list[Violation] = []
    if dataset.n_subjects < 1:
        out.append(Violation(None, "subjects", "dataset has no subjects"))
        return out
    if not math.isfinite(dataset.horizon) or dataset.horizon <= 0:
        out.append(Violation(None, "horizon", f"horizon must be positive and finite, got {dataset.horizon}"))

    for s in dataset.subjects:
        n = s.n_obs
        if n < 1:
            out.append(Violation(s.id, "times", "subject has no observations"))
            continue
        if n > rules.max_points_per_subject:
            out.append(Violation(s.id, "times", f"{n} observations exceeds cap {rules.max_points_per_subject}"))
        if not np.all(np.isfinite(s.times)):
            out.append(Violation(s.id, "times", "non-finite time"))
        else:
            diffs = np.diff(s.times)
            if rules.allow_ties:
                if np.any(diffs < 0):
                    out.append(Violation(s.id, "times", "times not sorted"))
            elif np.any(diffs <= 0):
                out.append(Violation(s.id, "times", "times not strictly increasing"))
            t_min_ok = s.times[0] >= 0.0 if rules.allow_time_zero else s.times[0] > 0.0
            if not t_min_ok:
                out.append(Violation(s.id, "times", "times must be positive"))
            if np.any(s.times > dataset.horizon):
                out.append(Violation(s.id, "times", f"time beyond horizon {dataset.horizon}"))
        if s.y.shape[0] != n:
            out.append(Violation(s.id, "y", f"row count mismatch: {s.y.shape[0]} responses for {n} times"))
        if not np.all(np.isfinite(s.y)):
            out.append(Violation(s.id, "y", "non-finite response"))
        for name, mat, width in (("x_design", s.x_design, dataset.p_beta), ("z_design", s.z_design, dataset.p_b)):
            if mat.shape[0] != n:
                out.append(Violation(s.id, name, f"row count mismatch: {mat.shape[0]} rows for {n} times"))
            if mat.shape[1] != width:
                out.append(Violation(s.id, name, f"has {mat.shape[1]} columns, dataset declares {width}"))
            if not np.all(np.isfinite(mat)):
                out.append(Violation(s.id, name, "non-finite covariate"))
            elif mat.size and np.max(np.abs(mat)) > rules.max_abs_covariate:
                out.append(Violation(s.id, name, f"covariate magnitude exceeds {rules.max_abs_covariate:g}"))
    return out


def _parse_cell(text: str, path, line_no: int, col: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"{path}, line {line_no}, column '{col}': non-numeric cell {text!r}") from None
    if not math.isfinite(value):
        raise DataError(f"{path}, line {line_no}, column '{col}': non-finite cell {text!r}")
    return value


def ingest_csv(path, schema: SchemaConfig, rules: DataRules = DataRules()) -> tuple[Dataset, IngestReport]:
    """Parse a CSV file into a Dataset, reporting dropped rows.

    Rows are grouped by subject id and sorted by time within subject.
    Rows with a missing response are dropped and counted. Duplicate
    (subject, time) pairs are an error unless rules.allow_ties.
    """
    path = Path(path)
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    with handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames
        if header is None:
            raise DataError(f"{path}: empty file, header required")
        needed = [schema.id_col, schema.time_col, schema.y_col, *schema.x_cols, *schema.z_cols]
        for col in needed:
            if col not in header:
                raise DataError(f"{path}: missing named column '{col}'")

        per_subject: dict[str, list[tuple[float, float, list[float], list[float]]]] = {}
        order: list[str] = []
        n_read = 0
        n_dropped = 0
        for line_no, row in enumerate(reader, start=2):
            n_read += 1
            sid = row[schema.id_col]
            raw_y = (row[schema.y_col] or "").strip()
            if raw_y.lower() in _MISSING_TOKENS:
                n_dropped += 1
                continue
            t = _parse_cell(row[schema.time_col], path, line_no, schema.time_col)
            y = _parse_cell(raw_y, path, line_no, schema.y_col)
            xs = [_parse_cell(row[c], path, line_no, c) for c in schema.x_cols]
            zs = [_parse_cell(row[c], path, line_no, c) for c in schema.z_cols]
            if sid not in per_subject:
                per_subject[sid] = []
                order.append(sid)
            per_subject[sid].append((t, y, xs, zs))

    if not order:
        raise DataError(f"{path}: no usable observation rows")

    subjects = []
    horizon = 0.0
    for sid in order:
        rows = sorted(per_subject[sid], key=lambda r: r[0])
        times = [r[0] for r in rows]
        if not rules.allow_ties:
            for a, b in zip(times, times[1:]):
                if a == b:
                    raise DataError(f"{path}: duplicate (subject, time) pair ({sid!r}, {a:g})")
        subjects.append(
            Subject(
                id=sid,
                times=times,
                y=[r[1] for r in rows],
                x_design=np.array([r[2] for r in rows], dtype=float).reshape(len(rows), len(schema.x_cols)),
                z_design=np.array([r[3] for r in rows], dtype=float).reshape(len(rows), len(schema.z_cols)),
            )
        )
        horizon = max(horizon, times[-1])

    dataset = Dataset(
        subjects=tuple(subjects),
        horizon=horizon,
        p_beta=len(schema.x_cols),
        p_b=len(schema.z_cols),
    )
    return dataset, IngestReport(n_rows_read=n_read, n_rows_dropped_missing_y=n_dropped)


def read_csv(path, schema: SchemaConfig, rules: DataRules = DataRules()) -> Dataset:
    """Parse a CSV file into a Dataset (see ingest_csv for the report)."""
    dataset, _ = ingest_csv(path, schema, rules)
    return dataset


def write_csv(dataset: Dataset, path, schema: SchemaConfig) -> None:
    """Write a Dataset as one observation row per line, full precision."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow([schema.id_col, schema.time_col, schema.y_col, *schema.x_cols, *schema.z_cols])
        for s in dataset.subjects:
            for j in range(s.n_obs):
                writer.writerow(
                    [s.id, repr(float(s.times[j])), repr(float(s.y[j]))]
                    + [repr(float(v)) for v in s.x_design[j]]
                    + [repr(float(v)) for v in s.z_design[j]]
                )
