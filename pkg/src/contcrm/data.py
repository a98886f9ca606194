"""Logged bandit feedback: the dataset type, CSV I/O and splitting."""

from __future__ import annotations

import csv
import gzip
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np


class DataValidationError(ValueError):
    """Raised when a dataset violates its invariants."""


class ParseError(ValueError):
    """Raised when a CSV file cannot be parsed; carries the line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LoggedDataset:
    """Rows of (context, action, logging propensity, cost).

    ``propensities`` are densities of the logging policy at the logged action,
    ``costs`` follow the minimization convention (reward is ``-cost``). The
    arrays are copied on construction and made read-only, so a dataset can be
    shared freely between threads and processes.
    """

    contexts: np.ndarray
    actions: np.ndarray
    propensities: np.ndarray
    costs: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.contexts, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise DataValidationError("contexts must be a 2-D array")
        a = np.asarray(self.actions, dtype=np.float64).reshape(-1)
        p = np.asarray(self.propensities, dtype=np.float64).reshape(-1)
        y = np.asarray(self.costs, dtype=np.float64).reshape(-1)
        n = X.shape[0]
        if n < 1:
            raise DataValidationError("a dataset needs at least one row")
        if not (a.shape[0] == p.shape[0] == y.shape[0] == n):
            raise DataValidationError(
                f"length mismatch: contexts {n}, actions {a.shape[0]}, "
                f"propensities {p.shape[0]}, costs {y.shape[0]}"
            )
        bad = np.flatnonzero(~(np.isfinite(p) & (p > 0)))
        if bad.size:
            raise DataValidationError(
                f"propensities must be positive and finite (row {bad[0]}: {p[bad[0]]!r})"
            )
        for name, arr in (("contexts", X), ("actions", a), ("costs", y)):
            if not np.all(np.isfinite(arr)):
                raise DataValidationError(f"{name} contain non-finite values")
        object.__setattr__(self, "contexts", _frozen(X))
        object.__setattr__(self, "actions", _frozen(a))
        object.__setattr__(self, "propensities", _frozen(p))
        object.__setattr__(self, "costs", _frozen(y))

    @property
    def n(self) -> int:
        return self.contexts.shape[0]

    @property
    def d(self) -> int:
        return self.contexts.shape[1]

    def __len__(self) -> int:
        return self.n

    def subset(self, idx) -> "LoggedDataset":
        idx = np.asarray(idx)
        return LoggedDataset(
            self.contexts[idx], self.actions[idx], self.propensities[idx], self.costs[idx]
        )

    def with_costs(self, costs) -> "LoggedDataset":
        return LoggedDataset(self.contexts, self.actions, self.propensities, costs)


def header_for(d: int) -> list[str]:
    return [f"x{j}" for j in range(d)] + ["action", "propensity", "cost"]


def _open_text(path: Path, mode: str):
    if path.name.endswith(".gz"):
        return io.TextIOWrapper(gzip.open(path, mode + "b"), encoding="utf-8", newline="")
    return open(path, mode, encoding="utf-8", newline="")


def _rows(reader) -> Iterator[tuple[int, list[str]]]:
    for row in reader:
        if not row or all(not cell.strip() for cell in row):
            continue
        yield reader.line_num, row


def load_csv(path) -> LoggedDataset:
    """Read a dataset with header ``x0..x{d-1},action,propensity,cost``.

    Files ending in ``.gz`` are decompressed transparently.
    """
    path = Path(path)
    with _open_text(path, "r") as fh:
        reader = csv.reader(fh)
        rows = _rows(reader)
        try:
            line, header = next(rows)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        header = [h.strip() for h in header]
        d = len(header) - 3
        if d < 0 or header != header_for(d):
            raise ParseError(
                f"expected header x0..x{{d-1}},action,propensity,cost, got {','.join(header)}",
                line,
            )
        values = []
        for line, row in rows:
            if len(row) != d + 3:
                raise ParseError(f"expected {d + 3} fields, found {len(row)}", line)
            try:
                values.append([float(cell) for cell in row])
            except ValueError as exc:
                raise ParseError(str(exc), line) from None
            if not values[-1][d + 1] > 0:
                raise DataValidationError(
                    f"line {line}: propensity must be positive, got {row[d + 1].strip()}"
                )
    if not values:
        raise DataValidationError(f"{path}: no data rows")
    arr = np.asarray(values, dtype=np.float64)
    return LoggedDataset(arr[:, :d], arr[:, d], arr[:, d + 1], arr[:, d + 2])


def save_csv(ds: LoggedDataset, path) -> None:
    """Write ``ds`` with full double precision (``%.17g``)."""
    path = Path(path)
    table = np.column_stack([ds.contexts, ds.actions, ds.propensities, ds.costs])
    with _open_text(path, "w") as fh:
        fh.write(",".join(header_for(ds.d)) + "\n")
        np.savetxt(fh, table, delimiter=",", fmt="%.17g")


@dataclass(frozen=True)
class DataSplit:
    train: LoggedDataset
    valid: LoggedDataset
    test: LoggedDataset
    seed: int
    indices: tuple[np.ndarray, np.ndarray, np.ndarray]


def _split_sizes(n: int, fractions) -> list[int]:
    """Largest-remainder apportionment of ``n`` rows."""
    raw = np.asarray(fractions, dtype=np.float64) * n
    sizes = np.floor(raw).astype(int)
    short = n - sizes.sum()
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[:short]] += 1
    return sizes.tolist()


def split(ds: LoggedDataset, fractions=(0.5, 0.25, 0.25), seed: int = 0) -> DataSplit:
    """Shuffle rows with a seeded permutation and cut train/valid/test."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    sizes = _split_sizes(ds.n, fr)
    if min(sizes) < 1:
        raise ValueError(f"{ds.n} rows are too few for fractions {tuple(fr)}")
    perm = np.random.default_rng(seed).permutation(ds.n)
    cut1, cut2 = sizes[0], sizes[0] + sizes[1]
    parts = (perm[:cut1], perm[cut1:cut2], perm[cut2:])
    return DataSplit(
        train=ds.subset(parts[0]),
        valid=ds.subset(parts[1]),
        test=ds.subset(parts[2]),
        seed=seed,
        indices=parts,
    )


def kfold_indices(n: int, k: int, seed: int = 0) -> list[np.ndarray]:
    """Seeded assignment of ``n`` rows to ``k`` folds of near-equal size."""
    if k < 2:
        raise ValueError("k_folds must be at least 2")
    if n < k:
        raise ValueError(f"cannot make {k} folds from {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]
