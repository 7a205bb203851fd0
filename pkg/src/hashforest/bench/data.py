"""Dataset ingestion, export and synthetic generators."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from ..vectors import InvalidVector, SparseVector

FORMATS = ("csv", "sparse")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class Dataset:
    vectors: list[SparseVector]
    dim: int

    def __post_init__(self) -> None:
        self.by_id = {}
        for v in self.vectors:
            if v.dim != self.dim:
                raise DataError(f"vector {v.id} has dim {v.dim}, dataset dim is {self.dim}")
            if v.id in self.by_id:
                raise DataError(f"duplicate id {v.id}")
            self.by_id[v.id] = v

    def __len__(self) -> int:
        return len(self.vectors)

    def __iter__(self) -> Iterator[SparseVector]:
        return iter(self.vectors)

    def __getitem__(self, i: int) -> SparseVector:
        return self.vectors[i]


def _parse_id(text: str) -> int:
    value = int(text)
    if not 0 <= value < 1 << 64:
        raise ValueError(f"id {value} outside u64")
    return value


def _dense_rows(path) -> Iterator[tuple[int, SparseVector]]:
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) < 2:
                    raise ValueError("need an id and at least one component")
                values = np.array([float(c) for c in row[1:]])
                yield lineno, SparseVector.from_dense(_parse_id(row[0].strip()), values)
            except (ValueError, InvalidVector) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None


def _sparse_rows(path) -> Iterator[tuple[int, SparseVector]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields or fields[0].startswith("#"):
                continue
            try:
                if len(fields) < 2:
                    raise ValueError("need id and dim")
                id, dim = _parse_id(fields[0]), int(fields[1])
                pairs = []
                for item in fields[2:]:
                    idx, sep, val = item.partition(":")
                    if not sep:
                        raise ValueError(f"expected idx:val, got {item!r}")
                    pairs.append((int(idx), float(val)))
                pairs.sort()
                yield lineno, SparseVector(id, dim, [p[0] for p in pairs], [p[1] for p in pairs])
            except (ValueError, InvalidVector) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None


def ingest(path: str | os.PathLike, fmt: str = "csv") -> Dataset:
    """Parse ``id,v1,...,vd`` rows (csv) or ``id dim idx:val ...`` lines (sparse)."""
    if fmt not in FORMATS:
        raise DataError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    rows = _dense_rows(path) if fmt == "csv" else _sparse_rows(path)
    vectors: list[SparseVector] = []
    seen: dict[int, int] = {}
    dim = None
    for lineno, v in rows:
        if v.id in seen:
            raise DataError(f"{path}:{lineno}: duplicate id {v.id} (first on line {seen[v.id]})")
        if dim is None:
            dim = v.dim
        elif v.dim != dim:
            raise DataError(f"{path}:{lineno}: dim {v.dim} differs from {dim}")
        seen[v.id] = lineno
        vectors.append(v)
    if dim is None:
        raise DataError(f"{path}: no vectors")
    return Dataset(vectors, dim)


def export(vectors: Sequence[SparseVector], path: str | os.PathLike, fmt: str = "csv") -> None:
    if fmt not in FORMATS:
        raise DataError(f"unknown format {fmt!r}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if fmt == "csv":
            w = csv.writer(fh)
            for v in vectors:
                w.writerow([v.id, *(repr(float(x)) for x in v.to_dense())])
        else:
            for v in vectors:
                pairs = " ".join(f"{i}:{float(x)!r}" for i, x in zip(v.indices, v.values))
                fh.write(f"{v.id} {v.dim} {pairs}".rstrip() + "\n")


def unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def clustered(n: int, dim: int, clusters: int, spread: float = 0.3, seed: int = 0,
              first_id: int = 0) -> Dataset:
    """Gaussian clusters around random centres on the unit sphere; points are normalised."""
    rng = np.random.default_rng(seed)
    centres = unit_rows(rng.standard_normal((clusters, dim)))
    labels = rng.integers(clusters, size=n)
    points = unit_rows(centres[labels] + rng.standard_normal((n, dim)) * (spread / np.sqrt(dim)))
    return Dataset([SparseVector.from_dense(first_id + i, p) for i, p in enumerate(points)], dim)


def uniform(n: int, dim: int, seed: int = 0, first_id: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    return Dataset([SparseVector.from_dense(first_id + i, rng.standard_normal(dim)) for i in range(n)], dim)
