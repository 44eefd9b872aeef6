"""Grid of per-cell Gaussian latent distributions.

Cells that were never observed hold no distribution at all ("zero
knowledge"); sampling them yields the literal zero vector.  One writer
updates cells while any number of readers work from immutable snapshots.
The writer publishes a fresh copy of the arrays on every update, so a reader
holding a snapshot never needs a lock and can never see a half-written cell.
"""
from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

LOGVAR_MIN = -10.0
LOGVAR_MAX = 4.0


@dataclass(frozen=True)
class GridSpec:
    origin_x: float = 0.0
    origin_y: float = 0.0
    cell_size: float = 0.5
    n_cols: int = 1
    n_rows: int = 1

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if self.n_cols < 1 or self.n_rows < 1:
            raise ValueError("grid needs at least one row and one column")

    @property
    def n_cells(self):
        return self.n_cols * self.n_rows

    @property
    def extent(self):
        """(xmin, xmax, ymin, ymax) in meters."""
        return (
            self.origin_x,
            self.origin_x + self.n_cols * self.cell_size,
            self.origin_y,
            self.origin_y + self.n_rows * self.cell_size,
        )

    def contains(self, col, row):
        col, row = np.asarray(col), np.asarray(row)
        return (col >= 0) & (col < self.n_cols) & (row >= 0) & (row < self.n_rows)

    def cell_center(self, c):
        return (
            self.origin_x + (c[0] + 0.5) * self.cell_size,
            self.origin_y + (c[1] + 0.5) * self.cell_size,
        )

    def cells_of(self, x, y):
        """Vectorized world_to_cell; returns integer (cols, rows) arrays."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("cell lookup on non-finite coordinates")
        cols = np.floor((x - self.origin_x) / self.cell_size).astype(np.int64)
        rows = np.floor((y - self.origin_y) / self.cell_size).astype(np.int64)
        return cols, rows

    def to_dict(self):
        return {
            "origin_x": self.origin_x,
            "origin_y": self.origin_y,
            "cell_size": self.cell_size,
            "n_cols": self.n_cols,
            "n_rows": self.n_rows,
        }


class CellIndex(NamedTuple):
    col: int
    row: int


def world_to_cell(x, y, spec: GridSpec) -> CellIndex:
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError(f"non-finite position ({x}, {y})")
    return CellIndex(
        math.floor((x - spec.origin_x) / spec.cell_size),
        math.floor((y - spec.origin_y) / spec.cell_size),
    )


@dataclass(frozen=True)
class LatentDistribution:
    mean: np.ndarray | None
    log_var: np.ndarray | None

    @property
    def known(self):
        return self.mean is not None


ZERO_KNOWLEDGE = LatentDistribution(None, None)


def sample_latent(dist: LatentDistribution, noise) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if not dist.known:
        return np.zeros_like(noise)
    return dist.mean + np.exp(0.5 * dist.log_var) * noise


def sample_latents(mean, log_var, known, noise):
    """Row-wise version of :func:`sample_latent` for (n, k) arrays."""
    out = mean + np.exp(0.5 * log_var) * noise
    out[~np.asarray(known, dtype=bool)] = 0.0
    return out


class MapSnapshot:
    """Immutable read view of a :class:`LatentMap` at one global version."""

    def __init__(self, spec, k_l, mean, log_var, visited, versions, version):
        self.spec = spec
        self.k_l = k_l
        self.mean = mean
        self.log_var = log_var
        self.visited = visited
        self.versions = versions
        self.version = version

    def get_latent(self, c) -> LatentDistribution:
        col, row = c
        if not bool(self.spec.contains(col, row)) or not self.visited[row, col]:
            return ZERO_KNOWLEDGE
        return LatentDistribution(self.mean[row, col].copy(), self.log_var[row, col].copy())

    def lookup(self, cols, rows):
        """Vectorized query -> (mean (n,k), log_var (n,k), known (n,))."""
        cols = np.asarray(cols, dtype=np.int64)
        rows = np.asarray(rows, dtype=np.int64)
        inside = self.spec.contains(cols, rows)
        cc = np.where(inside, cols, 0)
        rr = np.where(inside, rows, 0)
        known = inside & self.visited[rr, cc]
        mean = np.where(known[:, None], self.mean[rr, cc], 0.0)
        log_var = np.where(known[:, None], self.log_var[rr, cc], 0.0)
        return mean, log_var, known

    def content_equal(self, other):
        return (
            np.array_equal(self.visited, other.visited)
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.log_var, other.log_var)
            and np.array_equal(self.versions, other.versions)
        )


class LatentMap:
    def __init__(self, spec: GridSpec, k_l: int = 10):
        if k_l < 1:
            raise ValueError("latent dimension must be >= 1")
        self.spec = spec
        self.k_l = k_l
        shape = (spec.n_rows, spec.n_cols)
        self._lock = threading.Lock()
        self._state = self._freeze(
            np.zeros(shape + (k_l,)),
            np.zeros(shape + (k_l,)),
            np.zeros(shape, dtype=bool),
            np.zeros(shape, dtype=np.int64),
            0,
        )

    def _freeze(self, mean, log_var, visited, versions, version):
        for a in (mean, log_var, visited, versions):
            a.flags.writeable = False
        return MapSnapshot(self.spec, self.k_l, mean, log_var, visited, versions, version)

    @property
    def version(self):
        return self._state.version

    def snapshot(self) -> MapSnapshot:
        # attribute read is atomic; the published arrays are never mutated
        return self._state

    def get_latent(self, c) -> LatentDistribution:
        return self._state.get_latent(c)

    def cell_version(self, c):
        col, row = c
        if not bool(self.spec.contains(col, row)):
            return 0
        return int(self._state.versions[row, col])

    def apply_update(self, c, mean, log_var) -> int:
        """Write one cell; returns the cell's new version."""
        col, row = int(c[0]), int(c[1])
        if not bool(self.spec.contains(col, row)):
            raise IndexError(f"cell ({col}, {row}) is outside the grid")
        mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        log_var = np.asarray(log_var, dtype=np.float64).reshape(-1)
        if mean.shape != (self.k_l,) or log_var.shape != (self.k_l,):
            raise ValueError(f"expected latent vectors of length {self.k_l}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_var))):
            raise ValueError("rejecting non-finite latent update")
        log_var = np.clip(log_var, LOGVAR_MIN, LOGVAR_MAX)
        with self._lock:
            cur = self._state
            m, lv = cur.mean.copy(), cur.log_var.copy()
            vis, ver = cur.visited.copy(), cur.versions.copy()
            m[row, col] = mean
            lv[row, col] = log_var
            vis[row, col] = True
            ver[row, col] += 1
            self._state = self._freeze(m, lv, vis, ver, cur.version + 1)
            return int(ver[row, col])

    def copy(self):
        out = LatentMap(self.spec, self.k_l)
        out._state = self._state  # snapshots are immutable, so sharing is safe
        return out

    def load_arrays(self, mean, log_var, visited):
        """Bulk replace (import); every visited cell gets version 1."""
        mean = np.array(mean, dtype=np.float64)
        log_var = np.clip(np.array(log_var, dtype=np.float64), LOGVAR_MIN, LOGVAR_MAX)
        visited = np.array(visited, dtype=bool)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_var))):
            raise ValueError("rejecting non-finite latent map")
        mean[~visited] = 0.0
        log_var[~visited] = 0.0
        with self._lock:
            self._state = self._freeze(
                mean, log_var, visited, visited.astype(np.int64), self._state.version + 1
            )


def smoothness_loss(latents) -> float:
    """Mean squared difference of 4-neighbour latent vectors on a (rows, cols, k) grid."""
    lat = np.asarray(latents, dtype=np.float64)
    if lat.ndim == 2:
        lat = lat[..., None]
    n_rows, n_cols = lat.shape[:2]
    n_pairs = n_rows * (n_cols - 1) + (n_rows - 1) * n_cols
    if n_pairs == 0:
        return 0.0
    dx = lat[:, 1:] - lat[:, :-1]
    dy = lat[1:, :] - lat[:-1, :]
    return float((np.sum(dx * dx) + np.sum(dy * dy)) / n_pairs)


def export_csv(snapshot: MapSnapshot, path, extra_columns=None):
    """One row per cell, row-major.  ``extra_columns`` maps name -> (rows, cols) array."""
    k = snapshot.k_l
    extra_columns = extra_columns or {}
    header = ["col", "row", "visited"]
    header += [f"mean_{i}" for i in range(k)] + [f"logvar_{i}" for i in range(k)]
    header += list(extra_columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in range(snapshot.spec.n_rows):
            for col in range(snapshot.spec.n_cols):
                vis = bool(snapshot.visited[row, col])
                rec = [col, row, int(vis)]
                rec += [repr(float(v)) for v in snapshot.mean[row, col]]
                rec += [repr(float(v)) for v in snapshot.log_var[row, col]]
                rec += [repr(float(a[row, col])) for a in extra_columns.values()]
                w.writerow(rec)


def import_csv(path, spec: GridSpec) -> LatentMap:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        k = sum(1 for h in header if h.startswith("mean_"))
        mean_idx = [header.index(f"mean_{i}") for i in range(k)]
        lv_idx = [header.index(f"logvar_{i}") for i in range(k)]
        shape = (spec.n_rows, spec.n_cols)
        mean = np.zeros(shape + (k,))
        log_var = np.zeros(shape + (k,))
        visited = np.zeros(shape, dtype=bool)
        for rec in reader:
            col, row = int(rec[0]), int(rec[1])
            visited[row, col] = rec[2] == "1"
            mean[row, col] = [float(rec[i]) for i in mean_idx]
            log_var[row, col] = [float(rec[i]) for i in lv_idx]
    lmap = LatentMap(spec, k)
    lmap.load_arrays(mean, log_var, visited)
    return lmap
