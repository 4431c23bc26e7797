"""Dataset container and CSV ingestion/emission.

Two input files define a dataset:

  observations.csv  header: subject_id,group,time,value
  covariates.csv    header: subject_id,x1,x2,...   (x columns optional)

Times must be strictly positive and unique within a subject; every subject
needs at least two observations and a covariate row.  An intercept column is
prepended to the covariates automatically.  Floats are written with their
shortest round-trip representation so outputs are byte-identical across runs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

OBS_HEADER = ["subject_id", "group", "time", "value"]


@dataclass(frozen=True)
class Subject:
    """One subject's series: label, group, sorted times, values, covariates."""

    id: str
    group: int
    times: np.ndarray
    values: np.ndarray
    covariates: np.ndarray


@dataclass(frozen=True)
class Dataset:
    """Validated multi-subject dataset plus the merged observation grid."""

    subjects: list
    n_groups: int
    merged_grid: np.ndarray

    @staticmethod
    def build(subjects: Sequence[Subject]) -> "Dataset":
        if not subjects:
            raise ValueError("dataset has no subjects")
        groups = sorted({s.group for s in subjects})
        g = max(groups)
        if groups != list(range(1, g + 1)):
            missing = sorted(set(range(1, g + 1)) - set(groups))
            raise ValueError(f"groups must be 1..{g} with none empty; missing {missing}")
        width = {len(s.covariates) for s in subjects}
        if len(width) != 1:
            raise ValueError("covariate vectors must all have the same length")
        for s in subjects:
            if len(s.times) < 2:
                raise ValueError(f"subject {s.id} has fewer than 2 observations")
            if np.any(s.times <= 0):
                raise ValueError(f"subject {s.id} has a nonpositive observation time")
            if np.any(np.diff(s.times) <= 0):
                raise ValueError(f"subject {s.id} times are not strictly increasing")
            if s.covariates[0] != 1.0:
                raise ValueError(f"subject {s.id} covariates must lead with the intercept 1")
        merged = np.unique(np.concatenate([s.times for s in subjects]))
        return Dataset(subjects=list(subjects), n_groups=g, merged_grid=merged)


def _parse_float(text: str, row_num: int, column: str, path) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        raise ValueError(f"{path}: row {row_num}: non-numeric {column} {text!r}") from None


def ingest(observations_path, covariates_path) -> Dataset:
    """Read and validate the two CSV files into a Dataset."""
    obs_path = Path(observations_path)
    cov_path = Path(covariates_path)

    records: dict[str, list] = {}
    group_of: dict[str, int] = {}
    with open(obs_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != OBS_HEADER:
            raise ValueError(f"{obs_path}: header must be {','.join(OBS_HEADER)}")
        for row_num, row in enumerate(reader, start=2):
            sid = (row["subject_id"] or "").strip()
            if not sid:
                raise ValueError(f"{obs_path}: row {row_num}: empty subject_id")
            grp_text = (row["group"] or "").strip()
            try:
                group = int(grp_text)
            except ValueError:
                raise ValueError(f"{obs_path}: row {row_num}: non-integer group {grp_text!r}") from None
            if group < 1:
                raise ValueError(f"{obs_path}: row {row_num}: group must be >= 1")
            prev = group_of.setdefault(sid, group)
            if prev != group:
                raise ValueError(f"{obs_path}: row {row_num}: subject {sid} listed in groups {prev} and {group}")
            t = _parse_float(row["time"], row_num, "time", obs_path)
            y = _parse_float(row["value"], row_num, "value", obs_path)
            records.setdefault(sid, []).append((t, y, row_num))
    if not records:
        raise ValueError(f"{obs_path}: no observation rows")

    covs: dict[str, np.ndarray] = {}
    with open(cov_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "subject_id":
            raise ValueError(f"{cov_path}: header must start with subject_id")
        x_names = [c.strip() for c in header[1:]]
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            sid = row[0].strip()
            if sid in covs:
                raise ValueError(f"{cov_path}: row {row_num}: duplicate covariate row for {sid}")
            if len(row) != 1 + len(x_names):
                raise ValueError(f"{cov_path}: row {row_num}: expected {1 + len(x_names)} fields")
            vals = [_parse_float(v, row_num, name, cov_path) for v, name in zip(row[1:], x_names)]
            covs[sid] = np.array([1.0] + vals)
    unknown = sorted(set(covs) - set(records))
    if unknown:
        raise ValueError(f"{cov_path}: covariate rows for unknown subjects {unknown}")

    subjects = []
    for sid in records:  # dict preserves first-appearance order
        if sid not in covs:
            raise ValueError(f"subject {sid} is missing a covariate row")
        rows = sorted(records[sid], key=lambda r: r[0])
        for (t0, _, _), (t1, _, rn) in zip(rows, rows[1:]):
            if t1 == t0:
                raise ValueError(f"{obs_path}: row {rn}: duplicate time {t1} for subject {sid}")
        times = np.array([r[0] for r in rows])
        values = np.array([r[1] for r in rows])
        subjects.append(Subject(id=sid, group=group_of[sid], times=times,
                                values=values, covariates=covs[sid]))
    return Dataset.build(subjects)


def _fmt(x) -> str:
    """Shortest round-trip float representation (deterministic output)."""
    return repr(float(x))


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([x if isinstance(x, str) else _fmt(x) for x in row])


def write_dataset(dataset: Dataset, out_dir) -> None:
    """Emit observations.csv and covariates.csv for a dataset."""
    out = Path(out_dir)
    obs_rows = []
    for s in dataset.subjects:
        for t, y in zip(s.times, s.values):
            obs_rows.append([s.id, str(s.group), t, y])
    write_csv(out / "observations.csv", OBS_HEADER, obs_rows)

    n_x = len(dataset.subjects[0].covariates) - 1
    header = ["subject_id"] + [f"x{j + 1}" for j in range(n_x)]
    cov_rows = [[s.id, *s.covariates[1:]] for s in dataset.subjects]
    write_csv(out / "covariates.csv", header, cov_rows)


def read_csv_columns(path) -> dict[str, list]:
    """Read a CSV into column lists keyed by header name (strings kept raw)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols: dict[str, list] = {name: [] for name in reader.fieldnames or []}
        for row in reader:
            for name in cols:
                cols[name].append(row[name])
    return cols
