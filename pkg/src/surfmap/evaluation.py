"""Evaluation: rollout L2 with chronological mapping, lap metrics, map PCA and cluster purity."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .control import control_loop
from .dynamics import DynamicsEnsemble, rollout_batch
from .geometry import compose
from .gridmap import GridSpec, LatentMap, MapSnapshot, export_csv
from .mapper import GroundTruthMapper, LatentMapper, MapperInput
from .sim.dataset import Dataset
from .sim.sensors import SensorBundle


@dataclass
class L2Config:
    n_steps: tuple = (10, 20, 30)
    n_hypotheses: int = 100
    chronological: bool = True
    chunk_rows: int = 8192

    def __post_init__(self):
        self.n_steps = tuple(int(n) for n in np.atleast_1d(self.n_steps))
        if any(n < 1 for n in self.n_steps) or self.n_hypotheses < 1:
            raise ValueError("N_s and N_H must be >= 1")


# --- map history --------------------------------------------------------------


class MapHistory:
    """Every cell write with the dataset index from which it becomes visible.

    ``lookup_at`` answers "what did the map hold at time t" for many (cell, t)
    pairs at once, which lets chronological evaluation batch all start states.
    """

    def __init__(self, spec: GridSpec, k_l, times, cells, mean, log_var):
        self.spec = spec
        self.k_l = k_l
        order = np.lexsort((np.arange(len(times)), times, cells))
        self.times = np.asarray(times, dtype=np.int64)[order]
        self.cells = np.asarray(cells, dtype=np.int64)[order]
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1, k_l)[order]
        self.log_var = np.asarray(log_var, dtype=np.float64).reshape(-1, k_l)[order]
        self._horizon = int(self.times.max()) + 2 if len(self.times) else 1

    def __len__(self):
        return len(self.times)

    def lookup_at(self, cols, rows, t):
        cols = np.asarray(cols, dtype=np.int64)
        rows = np.asarray(rows, dtype=np.int64)
        t = np.minimum(np.broadcast_to(np.asarray(t, dtype=np.int64), cols.shape), self._horizon - 1)
        n = len(cols)
        mean = np.zeros((n, self.k_l))
        log_var = np.zeros((n, self.k_l))
        known = np.zeros(n, dtype=bool)
        if len(self.times) == 0:
            return mean, log_var, known
        inside = self.spec.contains(cols, rows)
        flat = rows * self.spec.n_cols + cols
        keys = self.cells * self._horizon + self.times
        q = flat * self._horizon + t
        idx = np.searchsorted(keys, q, side="right") - 1
        ok = inside & (idx >= 0)
        ok[ok] &= self.cells[idx[ok]] == flat[ok]
        mean[ok] = self.mean[idx[ok]]
        log_var[ok] = self.log_var[idx[ok]]
        known[ok] = True
        return mean, log_var, known

    def view_at(self, t):
        return _TimedView(self, t)

    def to_map(self, t=None) -> LatentMap:
        """Map state at time t (default: after every recorded write)."""
        lmap = LatentMap(self.spec, self.k_l)
        for i in np.argsort(self.times, kind="stable"):
            if t is not None and self.times[i] > t:
                continue
            c = int(self.cells[i])
            lmap.apply_update((c % self.spec.n_cols, c // self.spec.n_cols), self.mean[i], self.log_var[i])
        return lmap


class _TimedView:
    """Map view whose lookups use a per-row query time."""

    def __init__(self, history: MapHistory, t):
        self.history = history
        self.spec = history.spec
        self.t = np.asarray(t, dtype=np.int64)

    def lookup(self, cols, rows):
        return self.history.lookup_at(cols, rows, self.t)


class StaticView:
    """Adapter giving a fixed snapshot the same interface as a timed view."""

    def __init__(self, snapshot: MapSnapshot):
        self.snapshot = snapshot
        self.spec = snapshot.spec

    def lookup(self, cols, rows):
        return self.snapshot.lookup(cols, rows)


def build_map_history(mapper: LatentMapper, data: Dataset, grid: GridSpec, until=None, initial: LatentMap | None = None):
    """Replay the mapper over the traversals of ``data`` in order.

    A traversal ending at row j becomes visible to start states at j + 1 and
    later.  Traversals that end at or after ``until`` are ignored (frozen map).
    """
    k = mapper.spec.k_l
    lmap = initial.copy() if initial is not None else LatentMap(grid, k)
    times, cells, means, lvs = [], [], [], []
    snap = lmap.snapshot()
    for (col, row) in zip(*np.nonzero(snap.visited.T)):
        times.append(0)
        cells.append(row * grid.n_cols + col)
        means.append(snap.mean[row, col])
        lvs.append(snap.log_var[row, col])
    for _, cell, idx in data.traversal_groups():
        j = int(idx[-1])
        if until is not None and j >= until:
            break
        if not bool(grid.contains(*cell)):
            continue
        dist = lmap.get_latent(cell)
        prev_m = dist.mean if dist.known else np.zeros(k)
        prev_lv = dist.log_var if dist.known else np.zeros(k)
        sensors = SensorBundle(data.img[j], data.aud[j], data.hist_s[j], data.hist_a[j])
        out = mapper.map_update(MapperInput(sensors, prev_m, prev_lv, float(dist.known)))
        lmap.apply_update(cell, out.mean, out.log_var)
        stored = lmap.get_latent(cell)
        times.append(j + 1)
        cells.append(cell[1] * grid.n_cols + cell[0])
        means.append(stored.mean)
        lvs.append(stored.log_var)
    hist = MapHistory(grid, k, times, cells, np.reshape(means, (-1, k)), np.reshape(lvs, (-1, k)))
    return hist, lmap


# --- rollout L2 -----------------------------------------------------------------


def start_indices(data: Dataset, n_steps):
    """Rows with n_steps contiguous recorded transitions starting there."""
    n = len(data)
    if n < n_steps:
        return np.zeros(0, dtype=np.int64)
    cont = np.concatenate([data.continues(), [False]]).astype(np.int64)
    # run[i] = number of consecutive contiguous links starting at i
    run = np.zeros(n + 1, dtype=np.int64)
    for i in range(n - 1, -1, -1):
        run[i] = run[i + 1] + 1 if cont[i] else 0
    return np.flatnonzero(run[:n] >= n_steps - 1)


def ground_truth_paths(data: Dataset, starts, n_steps):
    """(N_D, n_steps, 2) recorded positions after steps 1..n_steps."""
    j = starts[:, None] + np.arange(n_steps)[None]
    end = compose(data.pose[j.reshape(-1)], data.s_out[j.reshape(-1), :3])
    return end[:, :2].reshape(len(starts), n_steps, 2)


def l2_from_points(hyp, gt):
    """Mean Euclidean distance; hyp (N_D, N_H, N_s, 2), gt (N_D, N_s, 2).

    Equals the triple sum over start states, hypotheses and steps divided by
    N_D * N_H * N_s (the step-0 term is identically zero and is omitted).
    """
    d = np.linalg.norm(hyp - gt[:, None], axis=-1)
    return float(d.mean())


def _map_source(mapper, data, grid, cfg, k):
    if k == 0 or mapper is None:
        return None, None
    if isinstance(mapper, GroundTruthMapper):
        lmap = LatentMap(mapper.world.grid, 1)
        mapper.fill(lmap)
        return StaticView(lmap.snapshot()), None
    if isinstance(mapper, (LatentMap, MapSnapshot)):
        snap = mapper.snapshot() if isinstance(mapper, LatentMap) else mapper
        return StaticView(snap), None
    if isinstance(mapper, MapHistory):
        return None, mapper
    if not cfg.chronological:
        return StaticView(LatentMap(grid, k).snapshot()), None
    hist, _ = build_map_history(mapper, data, grid)
    return None, hist


def l2_metric(ensemble: DynamicsEnsemble, mapper, data: Dataset, cfg: L2Config, seed=0, grid=None):
    """Rollout L2 error per horizon N_s.

    ``mapper`` is None (latent-blind), a LatentMapper (map rebuilt in dataset
    order while evaluating), a GroundTruthMapper, a fixed LatentMap/snapshot,
    or a precomputed MapHistory.  Returns {N_s: value}.
    """
    k = ensemble.spec.latent_dim
    if k and mapper is None:
        raise ValueError("a latent-conditioned ensemble needs a map source")
    static, hist = _map_source(mapper, data, grid, cfg, k)
    out = {}
    ss = np.random.SeedSequence(seed)
    for n_steps, child in zip(cfg.n_steps, ss.spawn(len(cfg.n_steps))):
        starts = start_indices(data, n_steps)
        if len(starts) == 0:
            out[n_steps] = float("nan")
            continue
        gt = ground_truth_paths(data, starts, n_steps)
        n_h = cfg.n_hypotheses
        per_chunk = max(1, cfg.chunk_rows // n_h)
        total = 0.0
        chunks = range(0, len(starts), per_chunk)
        for c0, cs in zip(chunks, child.spawn(len(chunks))):
            st = starts[c0 : c0 + per_chunk]
            rows = np.repeat(st, n_h)
            act = data.action[rows[:, None] + np.arange(n_steps)[None]]
            view = static
            if hist is not None:
                view = hist.view_at(rows)
            traj = rollout_batch(ensemble, data.s_in[rows], data.pose[rows], act, view, np.random.default_rng(cs))
            hyp = traj.poses[:, 1:, :2].reshape(len(st), n_h, n_steps, 2)
            d = np.linalg.norm(hyp - gt[c0 : c0 + per_chunk, None], axis=-1)
            # diverged rollouts count as infinitely wrong
            total += float(np.sum(np.where(np.isfinite(d), d, np.inf)))
        out[n_steps] = total / (len(starts) * n_h * n_steps)
    return out


# --- closed-loop lap metrics ------------------------------------------------------


@dataclass
class LapMetrics:
    lap_times: np.ndarray
    cte: np.ndarray  # mean cross-track error per lap
    violations: np.ndarray  # samples beyond d_b per lap
    interventions: int

    @property
    def n_laps(self):
        return len(self.lap_times)

    def summary(self):
        out = {"laps": self.n_laps, "interventions": self.interventions}
        for name in ("lap_times", "cte", "violations"):
            v = getattr(self, name)
            out[f"{name}_mean"] = float(np.mean(v))
            out[f"{name}_std"] = float(np.std(v))
        return out


def lap_metrics(runlog, path, d_b, t0=0.0, s0=0.0) -> LapMetrics:
    """Per-lap time, CTE and boundary violations of a run that starts at arc length ``s0`` at ``t0``.

    Lap completion times are interpolated between samples on the unwrapped
    path progress; teleports flagged as interventions contribute no progress.
    """
    a = runlog.array() if hasattr(runlog, "array") else np.asarray(runlog, dtype=np.float64)
    if len(a) == 0:
        raise ValueError("empty run log")
    t = np.concatenate([[t0], a[:, 0]])
    xy = a[:, 1:3]
    inter = a[:, 12].astype(bool)
    s, dist, _, _ = path.project(xy)
    s_all = np.concatenate([[s0], s])
    step = path.progress(s_all[:-1], s_all[1:])
    step[inter] = 0.0
    prog = np.concatenate([[0.0], np.cumsum(step)])
    L = path.length
    n_laps = int(np.floor(prog.max() / L + 1e-9))
    if n_laps < 1:
        raise ValueError("run log contains no completed lap")
    ends = []
    for m in range(1, n_laps + 1):
        i = int(np.argmax(prog >= m * L - 1e-9))
        p0, p1 = prog[i - 1], prog[i]
        frac = 1.0 if p1 == p0 else (m * L - p0) / (p1 - p0)
        ends.append(t[i - 1] + frac * (t[i] - t[i - 1]))
    ends = np.array(ends)
    starts = np.concatenate([[t0], ends[:-1]])
    sample_t = a[:, 0]
    cte = np.empty(n_laps)
    viol = np.empty(n_laps)
    for m in range(n_laps):
        sel = (sample_t > starts[m]) & (sample_t <= ends[m] + 1e-9)
        cte[m] = dist[sel].mean() if sel.any() else 0.0
        viol[m] = np.sum(dist[sel] > d_b)
    return LapMetrics(ends - starts, cte, viol, int(inter.sum()))


# --- progressive map building -----------------------------------------------------


@dataclass
class ProgressiveResult:
    lap_times: np.ndarray
    l2: np.ndarray  # L2_{N_s} over all driven transitions with the map frozen after lap m
    runlog: object
    maps: list


def progressive_experiment(controller, mapper, world, laps=10, seed=0, l2_cfg: L2Config | None = None):
    """Race ``laps`` laps with online mapping, then score maps frozen after each lap."""
    l2_cfg = l2_cfg or L2Config(n_steps=(10,), n_hypotheses=20)
    lmap = LatentMap(world.grid, mapper.spec.k_l)
    run = control_loop(world, controller, mapper, lmap, laps, seed=seed, synchronous=True)
    metrics = lap_metrics(run, world.path, world.track.half_width)
    data = run.dataset
    l2 = np.empty(laps)
    maps = []
    for m in range(1, laps + 1):
        hist, frozen = build_map_history(mapper, data, world.grid, until=run.lap_end_index[m - 1])
        maps.append(frozen)
        l2[m - 1] = l2_metric(controller.ensemble, frozen, data, l2_cfg, seed=seed)[l2_cfg.n_steps[0]]
    return ProgressiveResult(metrics.lap_times[:laps], l2, run, maps)


# --- latent map structure ---------------------------------------------------------


@dataclass
class PCAResult:
    pc1: np.ndarray  # (rows, cols) projection, NaN where unvisited
    variance: np.ndarray  # (rows, cols) mean predicted latent variance, NaN where unvisited
    component: np.ndarray
    eigenvalue: float


def first_component(x):
    """Leading covariance eigenvector of the rows of x, sign fixed so its largest-magnitude entry is positive."""
    x = np.asarray(x, dtype=np.float64)
    c = x - x.mean(axis=0)
    cov = c.T @ c / max(len(x) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    v = vecs[:, -1]
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return v, float(max(vals[-1], 0.0))


def pca_export(snapshot, path=None) -> PCAResult:
    if isinstance(snapshot, LatentMap):
        snapshot = snapshot.snapshot()
    vis = snapshot.visited
    if vis.sum() < 2:
        raise ValueError("PCA needs at least two visited cells")
    means = snapshot.mean[vis]
    v, lam = first_component(means)
    proj = (means - means.mean(axis=0)) @ v
    if lam <= 1e-300:
        proj = np.zeros(len(means))
    pc1 = np.full(vis.shape, np.nan)
    var = np.full(vis.shape, np.nan)
    pc1[vis] = proj
    var[vis] = np.exp(snapshot.log_var[vis]).mean(axis=1)
    if path is not None:
        export_csv(snapshot, path, {"pc1": pc1, "var": var})
    return PCAResult(pc1, var, v, lam)


def boundary_cells(layout):
    """Cells with a differently-labelled neighbour in their 3x3 neighbourhood."""
    layout = np.asarray(layout)
    out = np.zeros(layout.shape, dtype=bool)
    n_rows, n_cols = layout.shape
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            shifted = np.full(layout.shape, -1)
            r0, r1 = max(dr, 0), n_rows + min(dr, 0)
            c0, c1 = max(dc, 0), n_cols + min(dc, 0)
            shifted[r0 - dr : r1 - dr, c0 - dc : c1 - dc] = layout[r0:r1, c0:c1]
            out |= (shifted != -1) & (shifted != layout)
    return out


def cluster_purity(snapshot, layout, mask=None, seed=0):
    """k-means (k = number of materials present) on visited latent means; majority-label purity."""
    from sklearn.cluster import KMeans

    if isinstance(snapshot, LatentMap):
        snapshot = snapshot.snapshot()
    sel = np.array(snapshot.visited, dtype=bool)
    if mask is not None:
        sel &= np.asarray(mask, dtype=bool)
    labels = np.asarray(layout)[sel]
    if len(labels) == 0:
        raise ValueError("no cells to cluster")
    x = snapshot.mean[sel]
    k = len(np.unique(labels))
    if k == 1:
        return 1.0
    assign = KMeans(n_clusters=k, n_init=10, random_state=seed).fit_predict(x)
    hits = 0
    for c in np.unique(assign):
        hits += np.bincount(labels[assign == c]).max()
    return hits / len(labels)


# --- metrics file -----------------------------------------------------------------


METRICS_HEADER = ("metric", "config", "seed", "value")


def append_metrics(path, rows):
    """Append (metric, config, seed, value) rows, writing the header for a new file."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRICS_HEADER)
        for metric, config, seed, value in rows:
            w.writerow([metric, config, int(seed), repr(float(value))])


def read_metrics(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [(r["metric"], r["config"], int(r["seed"]), float(r["value"])) for r in reader]
