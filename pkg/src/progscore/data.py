"""Longitudinal multi-voxel datasets: voxel grid, visits, CSV ingestion.

Measurements are held as one dense ``(N, K)`` array with visits grouped by
subject and sorted by age inside each subject, so the numerical code never
has to walk Python objects.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    voxel_ids: tuple[str, ...]
    positions: np.ndarray  # (K, 3) mm
    roi_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "voxel_ids", tuple(str(v) for v in self.voxel_ids))
        if self.roi_labels is not None:
            object.__setattr__(self, "roi_labels", tuple(str(r) for r in self.roi_labels))

    @property
    def K(self) -> int:
        return len(self.voxel_ids)

    @cached_property
    def distances(self) -> np.ndarray:
        """Pairwise Euclidean distances in mm, shape (K, K)."""
        diff = self.positions[:, None, :] - self.positions[None, :, :]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        d = 0.5 * (d + d.T)
        np.fill_diagonal(d, 0.0)
        d.setflags(write=False)
        return d

    def rois(self) -> dict[str, np.ndarray]:
        """Map ROI label -> voxel indices, in order of first appearance."""
        if self.roi_labels is None:
            raise DataError("grid has no ROI labels")
        out: dict[str, list[int]] = {}
        for k, r in enumerate(self.roi_labels):
            out.setdefault(r, []).append(k)
        return {r: np.asarray(ix) for r, ix in out.items()}

    @classmethod
    def regular(cls, shape=(5, 5, 5), spacing=4.0, roi_axis: int | None = 0):
        """Regular lattice; optional ROI label per slab along ``roi_axis``."""
        idx = np.array(list(np.ndindex(*shape)), dtype=float)
        ids = [f"v{i:05d}" for i in range(len(idx))]
        rois = None
        if roi_axis is not None:
            rois = [f"roi{int(r)}" for r in idx[:, roi_axis]]
        return cls(tuple(ids), idx * float(spacing), None if rois is None else tuple(rois))


@dataclass(frozen=True)
class Visit:
    subject_id: str
    visit_index: int
    age: float
    measurements: np.ndarray


@dataclass(frozen=True, eq=False)
class Dataset:
    """Visits grouped by subject (first-appearance order), age-sorted within subject.

    ``Y[r]`` is the measurement vector of row ``r``; ``subject[r]`` indexes
    into ``subject_ids``.
    """

    grid: VoxelGrid
    subject_ids: tuple[str, ...]
    subject: np.ndarray  # (N,) int
    visit_index: np.ndarray  # (N,) int
    ages: np.ndarray  # (N,)
    Y: np.ndarray  # (N, K)
    _starts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        subject = np.asarray(self.subject, dtype=np.int64)
        ages = np.asarray(self.ages, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim != 2:
            raise DataError("measurement array must be 2-D")
        if not (len(subject) == len(ages) == len(Y) == len(self.visit_index)):
            raise DataError("row count mismatch between visit table and measurements")
        if Y.shape[1] != self.grid.K:
            raise DataError(f"measurement length {Y.shape[1]} != grid size K={self.grid.K}")
        # group by subject, stable, then by age inside subject
        order = np.lexsort((ages, subject))
        subject, ages, Y = subject[order], ages[order], Y[order]
        vidx = np.asarray(self.visit_index, dtype=np.int64)[order]
        for name, arr in (("subject", subject), ("visit_index", vidx), ("ages", ages), ("Y", Y)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "subject_ids", tuple(str(s) for s in self.subject_ids))
        counts = np.bincount(subject, minlength=len(self.subject_ids))
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        object.__setattr__(self, "_starts", starts)

    @classmethod
    def from_visits(cls, grid: VoxelGrid, visits: Sequence[Visit]) -> "Dataset":
        ids: dict[str, int] = {}
        for v in visits:
            ids.setdefault(v.subject_id, len(ids))
        return cls(
            grid,
            tuple(ids),
            np.array([ids[v.subject_id] for v in visits], dtype=np.int64),
            np.array([v.visit_index for v in visits], dtype=np.int64),
            np.array([v.age for v in visits], dtype=float),
            np.array([np.asarray(v.measurements, dtype=float) for v in visits]).reshape(len(visits), grid.K),
        )

    @property
    def n(self) -> int:
        return len(self.subject_ids)

    @property
    def K(self) -> int:
        return self.grid.K

    @property
    def N(self) -> int:
        """Total number of visits."""
        return len(self.ages)

    @cached_property
    def visits_per_subject(self) -> np.ndarray:
        return np.bincount(self.subject, minlength=self.n)

    @property
    def baseline_rows(self) -> np.ndarray:
        """Row index of each subject's first (youngest) visit."""
        return self._starts

    @cached_property
    def Q(self) -> np.ndarray:
        """Design rows q = [age, 1], shape (N, 2)."""
        q = np.column_stack([self.ages, np.ones(self.N)])
        q.setflags(write=False)
        return q

    def rows_of(self, i: int) -> slice:
        start = int(self._starts[i])
        return slice(start, start + int(self.visits_per_subject[i]))

    @property
    def visits(self) -> list[Visit]:
        return [
            Visit(self.subject_ids[s], int(vi), float(t), self.Y[r])
            for r, (s, vi, t) in enumerate(zip(self.subject, self.visit_index, self.ages))
        ]

    def resample(self, indices: Sequence[int]) -> "Dataset":
        """Dataset made of the given subjects; repeats become distinct subjects."""
        rows, subj, ids = [], [], []
        seen: dict[int, int] = {}
        for new, i in enumerate(indices):
            i = int(i)
            copy = seen.get(i, 0)
            seen[i] = copy + 1
            ids.append(self.subject_ids[i] if copy == 0 else f"{self.subject_ids[i]}#{copy}")
            r = np.arange(self.N)[self.rows_of(i)]
            rows.append(r)
            subj.append(np.full(len(r), new))
        rows = np.concatenate(rows)
        return Dataset(self.grid, tuple(ids), np.concatenate(subj), self.visit_index[rows],
                       self.ages[rows], self.Y[rows])

    def with_columns(self, grid: VoxelGrid, Y: np.ndarray) -> "Dataset":
        return Dataset(grid, self.subject_ids, self.subject, self.visit_index, self.ages, Y)


def validate_dataset(d: Dataset, min_subjects: int = 2) -> list[str]:
    """Describe every invariant violation; empty list means the dataset is valid.

    ``min_subjects=1`` relaxes the cohort-size rule for scoring new subjects.
    """
    problems = []
    seen = set()
    for vid in d.grid.voxel_ids:
        if vid in seen:
            problems.append(f"grid: duplicate voxel_id {vid!r}")
        seen.add(vid)
    bad = ~np.isfinite(d.grid.positions).all(axis=1)
    for k in np.flatnonzero(bad):
        problems.append(f"grid: voxel {d.grid.voxel_ids[k]!r} has non-finite position")
    if d.n < min_subjects:
        problems.append(f"dataset: need at least {min_subjects} subjects, got {d.n}")
    for i in np.flatnonzero(d.visits_per_subject == 0):
        problems.append(f"subject {d.subject_ids[i]!r}: no visits")
    if not np.isfinite(d.ages).all():
        for r in np.flatnonzero(~np.isfinite(d.ages)):
            problems.append(f"subject {d.subject_ids[d.subject[r]]!r} visit {d.visit_index[r]}: non-finite age")
    rows, cols = np.nonzero(~np.isfinite(d.Y))
    for r, k in zip(rows, cols):
        problems.append(
            f"subject {d.subject_ids[d.subject[r]]!r} visit {d.visit_index[r]}: "
            f"non-finite value at voxel {d.grid.voxel_ids[k]!r}"
        )
    for i in range(d.n):
        sl = d.rows_of(i)
        t, vi = d.ages[sl], d.visit_index[sl]
        sid = d.subject_ids[i]
        for j in range(1, len(t)):
            if t[j] == t[j - 1]:
                problems.append(f"subject {sid!r}: visits {vi[j - 1]} and {vi[j]} share age {t[j]}")
            elif vi[j] <= vi[j - 1]:
                problems.append(f"subject {sid!r}: visit_index {vi[j]} not increasing with age")
        if len(set(vi.tolist())) != len(vi):
            problems.append(f"subject {sid!r}: duplicate visit_index")
        if (vi < 1).any():
            problems.append(f"subject {sid!r}: visit_index must be >= 1")
    return problems


def _float(text: str, where: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise DataError(f"{where}: cannot parse {text!r} as a number") from None
    if not math.isfinite(x):
        raise DataError(f"{where}: non-finite value {text!r}")
    return x


def _read_rows(path: Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [(reader.line_num, row) for row in reader if row]
    return header, rows


def load_grid(path) -> VoxelGrid:
    path = Path(path)
    header, rows = _read_rows(path)
    if header[:4] != ["voxel_id", "x_mm", "y_mm", "z_mm"] or len(header) > 5:
        raise DataError(f"{path}:1: expected header voxel_id,x_mm,y_mm,z_mm[,roi_label]")
    has_roi = len(header) == 5
    if has_roi and header[4] != "roi_label":
        raise DataError(f"{path}:1: fifth column must be roi_label")
    ids, pos, rois = [], [], []
    for line, row in rows:
        if len(row) != len(header):
            raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
        ids.append(row[0].strip())
        pos.append([_float(x, f"{path}:{line}") for x in row[1:4]])
        if has_roi:
            rois.append(row[4].strip())
    grid = VoxelGrid(tuple(ids), np.array(pos).reshape(-1, 3), tuple(rois) if has_roi else None)
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate voxel_id")
    return grid


def load_dataset(visits_path, matrix_path, grid_path, min_subjects: int = 2) -> Dataset:
    """Read the three CSV files and return a validated Dataset.

    ``grid_path`` may also be an already loaded VoxelGrid.
    """
    grid = grid_path if isinstance(grid_path, VoxelGrid) else load_grid(grid_path)
    visits_path, matrix_path = Path(visits_path), Path(matrix_path)

    header, vrows = _read_rows(visits_path)
    if header != ["subject_id", "visit_index", "age"]:
        raise DataError(f"{visits_path}:1: expected header subject_id,visit_index,age")
    sids, vidx, ages = [], [], []
    keys = set()
    for line, row in vrows:
        where = f"{visits_path}:{line}"
        if len(row) != 3:
            raise DataError(f"{where}: expected 3 fields, got {len(row)}")
        sid = row[0].strip()
        try:
            vi = int(row[1])
        except ValueError:
            raise DataError(f"{where}: visit_index {row[1]!r} is not an integer") from None
        if (sid, vi) in keys:
            raise DataError(f"{where}: duplicate (subject_id, visit_index) = ({sid}, {vi})")
        keys.add((sid, vi))
        sids.append(sid)
        vidx.append(vi)
        ages.append(_float(row[2], where))

    mheader, mrows = _read_rows(matrix_path)
    if [h for h in mheader] != list(grid.voxel_ids):
        if len(mheader) != grid.K:
            raise DataError(f"{matrix_path}:1: K mismatch, {len(mheader)} columns vs {grid.K} grid voxels")
        raise DataError(f"{matrix_path}:1: column voxel_ids do not match grid order")
    if len(mrows) != len(vrows):
        raise DataError(
            f"{matrix_path}: row count mismatch, {len(mrows)} measurement rows vs {len(vrows)} visits"
        )
    Y = np.empty((len(mrows), grid.K))
    for r, (line, row) in enumerate(mrows):
        if len(row) != grid.K:
            raise DataError(f"{matrix_path}:{line}: K mismatch, {len(row)} values vs K={grid.K}")
        Y[r] = [_float(x, f"{matrix_path}:{line} (row {r + 1})") for x in row]

    ids: dict[str, int] = {}
    for s in sids:
        ids.setdefault(s, len(ids))
    d = Dataset(grid, tuple(ids), np.array([ids[s] for s in sids], dtype=np.int64),
                np.array(vidx, dtype=np.int64), np.array(ages), Y)
    problems = validate_dataset(d, min_subjects)
    if problems:
        raise DataError("; ".join(problems))
    return d


def save_grid(grid: VoxelGrid, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["voxel_id", "x_mm", "y_mm", "z_mm"]
        if grid.roi_labels is not None:
            header.append("roi_label")
        w.writerow(header)
        for k, vid in enumerate(grid.voxel_ids):
            row = [vid] + [repr(float(x)) for x in grid.positions[k]]
            if grid.roi_labels is not None:
                row.append(grid.roi_labels[k])
            w.writerow(row)


def save_dataset(d: Dataset, visits_path, matrix_path, grid_path) -> None:
    """Write the three CSV files; floats use shortest round-trip repr."""
    save_grid(d.grid, grid_path)
    with open(visits_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "visit_index", "age"])
        for s, vi, t in zip(d.subject, d.visit_index, d.ages):
            w.writerow([d.subject_ids[s], int(vi), repr(float(t))])
    with open(matrix_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(d.grid.voxel_ids)
        for row in d.Y:
            w.writerow([repr(float(x)) for x in row])
