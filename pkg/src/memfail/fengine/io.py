"""Feature matrix CSV files.

Layout: a ``# catalog_version=<version>`` comment line, then a header
``dimm,ts,label,<feature names in catalog order>``, then one row per CE.
``label`` is empty for unlabeled feature files.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO

import numpy as np

from memfail.fengine.catalog import CATALOG_VERSION, FEATURE_NAMES, INTEGER_MASK, N_FEATURES

VERSION_PREFIX = "# catalog_version="
UNLABELED = -1


class CatalogVersionError(ValueError):
    pass


@dataclass
class FeatureTable:
    dimms: list[str]
    ts: np.ndarray
    labels: np.ndarray
    X: np.ndarray
    version: str = CATALOG_VERSION

    def __len__(self) -> int:
        return len(self.dimms)

    @classmethod
    def empty(cls) -> "FeatureTable":
        return cls([], np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int8), np.zeros((0, N_FEATURES)))

    def groups(self) -> dict[str, np.ndarray]:
        """Row indices per DIMM in first-appearance order."""
        out: dict[str, list[int]] = {}
        for i, d in enumerate(self.dimms):
            out.setdefault(d, []).append(i)
        return {d: np.array(ix, dtype=np.int64) for d, ix in out.items()}

    @property
    def labeled(self) -> bool:
        return len(self.labels) > 0 and bool(np.all(self.labels != UNLABELED))


def _fmt(value: float, integer: bool) -> str:
    if integer:
        return str(int(value))
    return repr(float(value))


def write_feature_csv(table: FeatureTable, fh: IO[str]) -> None:
    fh.write(f"{VERSION_PREFIX}{table.version}\n")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["dimm", "ts", "label", *FEATURE_NAMES])
    for i, dimm in enumerate(table.dimms):
        label = "" if table.labels[i] == UNLABELED else str(int(table.labels[i]))
        row = [dimm, str(int(table.ts[i])), label]
        row += [_fmt(v, isint) for v, isint in zip(table.X[i], INTEGER_MASK)]
        writer.writerow(row)


def read_feature_csv(path, expect_version: str | None = CATALOG_VERSION) -> FeatureTable:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        first = fh.readline()
        if not first.startswith(VERSION_PREFIX):
            raise CatalogVersionError(f"{path}: missing '{VERSION_PREFIX}' line")
        version = first[len(VERSION_PREFIX):].strip()
        if expect_version is not None and version != expect_version:
            raise CatalogVersionError(
                f"{path}: catalog version mismatch: file has {version!r}, expected {expect_version!r}"
            )
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["dimm", "ts", "label"]:
            raise ValueError(f"{path}: bad header {header!r}")
        if expect_version is not None and tuple(header[3:]) != FEATURE_NAMES:
            raise CatalogVersionError(f"{path}: feature columns do not match catalog {expect_version!r}")
        dimms, ts, labels, rows = [], [], [], []
        for lineno, row in enumerate(reader, start=3):
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            dimms.append(row[0])
            ts.append(int(row[1]))
            labels.append(int(row[2]) if row[2] != "" else UNLABELED)
            rows.append([float(v) for v in row[3:]])
    d = len(header) - 3
    X = np.array(rows, dtype=float).reshape(len(rows), d)
    return FeatureTable(dimms, np.array(ts, dtype=np.int64), np.array(labels, dtype=np.int8), X, version)
