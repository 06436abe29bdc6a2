"""Tabular dataset loading, validation, standardization, and shuffling.

File convention: labels are stored as 1 = anomaly, 0 = normal. Internally a
dataset carries an int8 label vector with the same coding; the query-state
coding (-1/0/+1) lives in :mod:`anoquery.features` and is independent of it.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

SIGMA_FLOOR = 1e-8

ANOMALY = 1
NORMAL = 0


class Label(Enum):
    """Analyst verdict / ground-truth label for a single instance."""

    NORMAL = 0
    ANOMALY = 1


class DataError(ValueError):
    """Malformed dataset file, manifest, or inconsistent dataset fields."""


@dataclass(frozen=True)
class RawDataset:
    """Instance matrix with optional ground-truth labels.

    X is (n, d) float64; y, when present, is (n,) int8 with 1 = anomaly,
    0 = normal. All values must be finite.
    """

    name: str
    X: np.ndarray
    y: np.ndarray | None = None
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape[0] < 1 or self.X.shape[1] < 1:
            raise DataError(f"dataset {self.name!r}: X must be (n>=1, d>=1), got {self.X.shape}")
        if not np.isfinite(self.X).all():
            i, j = np.argwhere(~np.isfinite(self.X))[0]
            raise DataError(f"dataset {self.name!r}: non-finite value at row {i + 1}, column {j}")
        if self.y is not None:
            if len(self.y) != self.X.shape[0]:
                raise DataError(
                    f"dataset {self.name!r}: {len(self.y)} labels for {self.X.shape[0]} rows"
                )
            if not np.isin(self.y, (NORMAL, ANOMALY)).all():
                raise DataError(f"dataset {self.name!r}: labels must be 0 or 1")
        if not self.feature_names:
            object.__setattr__(
                self, "feature_names", tuple(f"f{k + 1}" for k in range(self.X.shape[1]))
            )
        elif len(self.feature_names) != self.X.shape[1]:
            raise DataError(f"dataset {self.name!r}: feature_names/width mismatch")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class StandardizedDataset:
    """Per-column standardized view of a dataset.

    X_std[i, j] = (X[i, j] - mu[j]) / max(sigma[j], SIGMA_FLOOR), where sigma
    is the population (1/n) standard deviation. Labels are carried through
    unchanged.
    """

    name: str
    X_std: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    y: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.X_std.shape[0]

    @property
    def d(self) -> int:
        return self.X_std.shape[1]


def load_csv(path: str | Path, label_column: str | None = None) -> RawDataset:
    """Load a dataset from a headered CSV file.

    Every non-label column must parse as a finite real number. When
    label_column is given, its values must be 0 (normal) or 1 (anomaly);
    without it, all columns (including any label-like one) become features.

    Raises:
        DataError: missing file, ragged row, non-numeric or non-finite cell
            (named by row and column), or out-of-range label value.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        return _parse_csv(fh, str(path), path.stem, label_column)


def load_csv_text(text: str, name: str, label_column: str | None = None) -> RawDataset:
    """Parse CSV content already in memory (e.g. an HTTP upload)."""
    import io

    return _parse_csv(io.StringIO(text), name, name, label_column)


def _parse_csv(fh, origin: str, name: str, label_column: str | None) -> RawDataset:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{origin}: empty file, header row required") from None
    header = [h.strip() for h in header]
    label_idx: int | None = None
    if label_column is not None:
        if label_column not in header:
            raise DataError(f"{origin}: label column {label_column!r} not in header {header}")
        label_idx = header.index(label_column)
    feat_cols = [k for k in range(len(header)) if k != label_idx]
    feat_names = tuple(header[k] for k in feat_cols)

    rows: list[list[float]] = []
    labels: list[int] = []
    for r, rec in enumerate(reader, start=1):
        if not rec:
            continue  # tolerate a trailing blank line
        if len(rec) != len(header):
            raise DataError(f"{origin}: row {r} has {len(rec)} cells, expected {len(header)}")
        vals = []
        for k in feat_cols:
            cell = rec[k].strip()
            try:
                v = float(cell)
            except ValueError:
                raise DataError(
                    f"{origin}: non-numeric value {cell!r} at row {r}, column {header[k]}"
                ) from None
            if not math.isfinite(v):
                raise DataError(
                    f"{origin}: non-finite value {cell!r} at row {r}, column {header[k]}"
                )
            vals.append(v)
        rows.append(vals)
        if label_idx is not None:
            cell = rec[label_idx].strip()
            try:
                lv = float(cell)
            except ValueError:
                lv = math.nan
            if lv not in (0.0, 1.0):
                raise DataError(f"{origin}: label value {cell!r} at row {r} is outside {{0, 1}}")
            labels.append(int(lv))
    if not rows:
        raise DataError(f"{origin}: no data rows")
    X = np.asarray(rows, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int8) if label_idx is not None else None
    return RawDataset(name=name, X=X, y=y, feature_names=feat_names)


def write_csv(ds: RawDataset, path: str | Path, label_column: str = "label") -> None:
    """Write a dataset as CSV at full precision (repr round-trip exact)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = list(ds.feature_names)
        if ds.y is not None:
            header.append(label_column)
        writer.writerow(header)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.X[i]]
            if ds.y is not None:
                row.append(str(int(ds.y[i])))
            writer.writerow(row)


def standardize(raw: RawDataset) -> StandardizedDataset:
    """Standardize columns to zero mean, unit population std (floored)."""
    mu = raw.X.mean(axis=0)
    sigma = np.sqrt(np.mean((raw.X - mu) ** 2, axis=0))
    X_std = (raw.X - mu) / np.maximum(sigma, SIGMA_FLOOR)
    return StandardizedDataset(name=raw.name, X_std=X_std, mu=mu, sigma=sigma, y=raw.y)


def shuffle(ds, seed: int):
    """Co-permute rows and labels with a seeded PCG64 generator.

    Deterministic for a given seed on every platform (PCG64 stream is part
    of numpy's stability guarantee). Accepts RawDataset or
    StandardizedDataset and returns the same type.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(ds.n)
    y = None if ds.y is None else ds.y[perm]
    if isinstance(ds, RawDataset):
        return RawDataset(name=ds.name, X=ds.X[perm], y=y, feature_names=ds.feature_names)
    if isinstance(ds, StandardizedDataset):
        return StandardizedDataset(
            name=ds.name, X_std=ds.X_std[perm], mu=ds.mu, sigma=ds.sigma, y=y
        )
    raise TypeError(f"cannot shuffle {type(ds).__name__}")


def load_manifest(path: str | Path) -> list[dict]:
    """Read a JSON manifest listing dataset CSVs.

    Format: {"datasets": [{"name": ..., "path": ..., "label_column": ...}]}.
    Paths are resolved relative to the manifest's directory. Returns the
    entry dicts with resolved absolute paths.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("datasets"), list):
        raise DataError(f"{path}: expected object with a 'datasets' list")
    entries = []
    for k, entry in enumerate(doc["datasets"]):
        if not isinstance(entry, dict) or "path" not in entry:
            raise DataError(f"{path}: datasets[{k}] must be an object with a 'path'")
        resolved = (path.parent / entry["path"]).resolve()
        entries.append(
            {
                "name": entry.get("name", Path(entry["path"]).stem),
                "path": resolved,
                "label_column": entry.get("label_column"),
            }
        )
    return entries


def load_datasets(manifest_path: str | Path, names: list[str] | None = None) -> list[RawDataset]:
    """Load (optionally a named subset of) the manifest's datasets."""
    entries = load_manifest(manifest_path)
    if names is not None:
        by_name = {e["name"]: e for e in entries}
        missing = [n for n in names if n not in by_name]
        if missing:
            raise DataError(f"manifest {manifest_path}: unknown dataset names {missing}")
        entries = [by_name[n] for n in names]
    out = []
    for e in entries:
        ds = load_csv(e["path"], label_column=e["label_column"])
        out.append(RawDataset(name=e["name"], X=ds.X, y=ds.y, feature_names=ds.feature_names))
    return out
