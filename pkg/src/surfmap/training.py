"""Cell-grouped data handling and the three-stage optimization.

Stage 1 fits the dynamics ensemble jointly with one free latent vector per
map cell (plus a smoothness penalty on that latent grid).  Stage 2 freezes
both and teaches the mapper to reproduce the stage-1 latents from sensor
observations, chaining its own previous estimate through N traversals.
Stage 3 freezes the mapper and refines the dynamics on mapper latents, with
the first traversal of every chain seeing the zero (unknown-cell) latent.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dynamics import DynamicsEnsemble, Normalizer
from .mapper import HistoryScaler, LatentMapper
from .nn import Adam, gaussian_nll
from .sim.dataset import Dataset

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class StageConfig:
    epochs: int = 200
    batch_cells: int = 96
    lr_dynamics: float = 1e-3
    lr_mapper: float = 1e-4
    smoothness_weight: float = 0.1
    n_traversals: int = 3
    steps_per_epoch: int | None = None
    lr_schedule: str = "constant"  # or "cosine": decay to lr_floor * lr over the stage
    lr_floor: float = 0.05

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.n_traversals < 1:
            raise ValueError("n_traversals must be >= 1")
        if self.smoothness_weight < 0:
            raise ValueError("smoothness weight must be >= 0")
        if self.epochs < 0 or self.batch_cells < 1:
            raise ValueError("epochs must be >= 0 and batch_cells >= 1")


@dataclass
class CellGroup:
    key: tuple  # (world index, col, row)
    traversals: list  # arrays of row indices into the merged dataset


@dataclass
class CellGroupedDataset:
    data: Dataset  # all worlds merged
    world_index: np.ndarray  # (n,) which source dataset each row came from
    groups: list
    grid_shape: tuple  # (n_rows, n_cols) shared by every world
    n_worlds: int

    def flat_cell(self, key):
        w, col, row = key
        n_rows, n_cols = self.grid_shape
        return (w * n_rows + row) * n_cols + col

    @property
    def n_transitions(self):
        return sum(len(t) for g in self.groups for t in g.traversals)


def group_by_cell(datasets, grid_shape) -> CellGroupedDataset:
    """Partition transitions by (world, cell); each contiguous pass is one traversal."""
    if isinstance(datasets, Dataset):
        datasets = [datasets]
    datasets = list(datasets)
    if not datasets or sum(len(d) for d in datasets) == 0:
        raise ValueError("cannot group an empty dataset")
    merged = Dataset.concat(datasets)
    world_index = np.concatenate([np.full(len(d), i) for i, d in enumerate(datasets)])
    by_key = {}
    offset = 0
    for w, d in enumerate(datasets):
        for _, cell, idx in d.traversal_groups():
            col, row = cell
            if not (0 <= col < grid_shape[1] and 0 <= row < grid_shape[0]):
                continue
            by_key.setdefault((w, col, row), []).append(idx + offset)
        offset += len(d)
    groups = [CellGroup(k, v) for k, v in sorted(by_key.items())]
    return CellGroupedDataset(merged, world_index, groups, tuple(grid_shape), len(datasets))


def sample_traversals(group, n, rng):
    """n distinct traversals when available, otherwise with replacement; random order."""
    trav = group.traversals if isinstance(group, CellGroup) else group
    m = len(trav)
    if m == 0:
        raise ValueError("cannot sample from a cell without traversals")
    if m >= n:
        pick = rng.choice(m, size=n, replace=False)
    else:
        pick = np.concatenate([rng.permutation(m), rng.integers(0, m, size=n - m)])
        pick = rng.permutation(pick)
    return [trav[i] for i in pick]


class LearnedLatentMap:
    """Directly optimized per-cell latent vectors for every training world."""

    def __init__(self, n_worlds, grid_shape, k_l, rng=None, init_std=0.1):
        self.n_worlds = n_worlds
        self.grid_shape = tuple(grid_shape)
        self.k_l = k_l
        n = n_worlds * grid_shape[0] * grid_shape[1]
        init = rng.normal(0.0, init_std, size=(n, k_l)) if rng is not None else np.zeros((n, k_l))
        self.param = ad.Tensor(init, requires_grad=True, name="lbar")

    @property
    def values(self):
        return self.param.data

    def grid(self, world=0):
        n_rows, n_cols = self.grid_shape
        return self.param.data.reshape(self.n_worlds, n_rows, n_cols, self.k_l)[world]

    def smoothness(self):
        n_rows, n_cols = self.grid_shape
        lat = self.param.reshape(self.n_worlds, n_rows, n_cols, self.k_l)
        n_pairs = self.n_worlds * (n_rows * (n_cols - 1) + (n_rows - 1) * n_cols)
        if n_pairs == 0:
            return ad.Tensor(0.0)
        dx = lat[:, :, 1:] - lat[:, :, :-1]
        dy = lat[:, 1:, :] - lat[:, :-1, :]
        return (ad.square(dx).sum() + ad.square(dy).sum()) * (1.0 / n_pairs)

    def copy(self):
        out = LearnedLatentMap(self.n_worlds, self.grid_shape, self.k_l)
        out.param = ad.Tensor(self.param.data.copy(), requires_grad=True, name="lbar")
        return out


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def add(self, epoch, stage, loss_dyn=float("nan"), loss_smooth=float("nan"), loss_mapper=float("nan")):
        self.rows.append((epoch, stage, loss_dyn, loss_smooth, loss_mapper))

    def extend(self, other):
        self.rows.extend(other.rows)

    def column(self, stage, name):
        i = {"loss_dyn": 2, "loss_smooth": 3, "loss_mapper": 4}[name]
        return np.array([r[i] for r in self.rows if r[1] == stage])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "stage", "loss_dyn", "loss_smooth", "loss_mapper"])
            for r in self.rows:
                w.writerow([r[0], r[1]] + [repr(float(v)) for v in r[2:]])


class _Scheduled(Adam):
    """Adam whose step size follows the stage's learning-rate schedule."""

    def __init__(self, params, lr, cfg: StageConfig, total_steps):
        super().__init__(params, lr=lr)
        self.base_lr = lr
        self.cfg = cfg
        self.total = max(1, total_steps)
        self.t = 0

    def step(self):
        if self.cfg.lr_schedule == "cosine":
            frac = min(1.0, self.t / self.total)
            floor = self.cfg.lr_floor
            self.lr = self.base_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))
        self.t += 1
        super().step()


def _steps_per_epoch(grouped, cfg):
    if cfg.steps_per_epoch:
        return cfg.steps_per_epoch
    return max(1, math.ceil(len(grouped.groups) / cfg.batch_cells))


def _sample_cells(grouped, cfg, rng):
    n = len(grouped.groups)
    return rng.choice(n, size=min(cfg.batch_cells, n), replace=False)


def _pick_rows(traversals, rng):
    """One random transition per traversal, plus that traversal's representative (last) row."""
    rows = [int(t[rng.integers(0, len(t))]) for t in traversals]
    reps = [int(t[-1]) for t in traversals]
    return rows, reps


def _sample_chain_batch(grouped, cfg, rng, n_trav):
    cells = _sample_cells(grouped, cfg, rng)
    rows = np.empty((len(cells), n_trav), dtype=np.int64)
    reps = np.empty((len(cells), n_trav), dtype=np.int64)
    flat = np.empty(len(cells), dtype=np.int64)
    for i, g in enumerate(cells):
        group = grouped.groups[g]
        r, p = _pick_rows(sample_traversals(group, n_trav, rng), rng)
        rows[i], reps[i] = r, p
        flat[i] = grouped.flat_cell(group.key)
    return rows, reps, flat


def _guard(fn, stage):
    try:
        return fn()
    except ad.NonFiniteError as exc:
        raise TrainingDivergence(f"stage {stage}: loss became non-finite ({exc})") from exc


def dynamics_nll(ensemble: DynamicsEnsemble, rows, latent, rng, bootstrap=True):
    """Mean Gaussian NLL over members; each member sees its own bootstrap resample.

    ``latent`` is None, an (R, k) array, or a callable mapping row positions
    to a latent tensor (used to keep gradients flowing into stage-1 latents).
    """
    x_all, y_all = rows
    n = len(x_all)
    total = None
    for b in range(ensemble.spec.members):
        idx = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        if latent is None:
            lat = None
        elif callable(latent):
            lat = latent(idx)
        else:
            lat = latent[idx]
        mean, lv = ensemble.forward_tensor(b, x_all[idx], lat)
        nll = gaussian_nll(mean, lv, y_all[idx])
        total = nll if total is None else total + nll
    return total * (1.0 / ensemble.spec.members)


def _prepare(ensemble, data, rows_flat):
    nz = ensemble.normalizer
    return nz.inputs(data.s_in[rows_flat], data.action[rows_flat]), nz.targets(data.s_out[rows_flat], data.s_in[rows_flat])


def fit_normalizers(grouped: CellGroupedDataset):
    d = grouped.data
    return Normalizer.fit(d.s_in, d.action, d.s_out), HistoryScaler.fit(d.s_in)


def stage1_train(ensemble: DynamicsEnsemble, lbar: LearnedLatentMap, grouped, cfg: StageConfig, rng, log_=None):
    """Joint dynamics + direct latent optimization; returns the training log."""
    if not grouped.groups:
        raise ValueError("stage 1 needs at least one cell group")
    tlog = log_ or TrainLog()
    n_terms = cfg.n_traversals + 1
    spe = _steps_per_epoch(grouped, cfg)
    opt = _Scheduled(ensemble.parameters() + [lbar.param], cfg.lr_dynamics, cfg, spe * cfg.epochs)
    for epoch in range(cfg.epochs):
        acc_d = acc_s = 0.0
        for _ in range(spe):
            rows, _, flat = _sample_chain_batch(grouped, cfg, rng, n_terms)
            x, y = _prepare(ensemble, grouped.data, rows.reshape(-1))
            lat_rows = np.repeat(flat, n_terms)

            def step():
                opt.zero_grad()
                nll = dynamics_nll(ensemble, (x, y), lambda idx: ad.take_rows(lbar.param, lat_rows[idx]), rng)
                loss_d = nll * n_terms
                loss_s = lbar.smoothness()
                loss = loss_d + loss_s * cfg.smoothness_weight if cfg.smoothness_weight else loss_d
                loss.backward()
                opt.step()
                return float(loss_d.data), float(loss_s.data)

            d, s = _guard(step, 1)
            acc_d += d
            acc_s += s
        tlog.add(epoch, 1, loss_dyn=acc_d / spe, loss_smooth=acc_s / spe)
    return tlog


def stage1_loss(ensemble, lbar, grouped, cfg, rng):
    """Loss of one stage-1 batch without updating anything (for inspection/tests)."""
    n_terms = cfg.n_traversals + 1
    rows, _, flat = _sample_chain_batch(grouped, cfg, rng, n_terms)
    x, y = _prepare(ensemble, grouped.data, rows.reshape(-1))
    lat_rows = np.repeat(flat, n_terms)
    brng = np.random.default_rng(rng.integers(1 << 32))
    nll = dynamics_nll(ensemble, (x, y), lambda idx: ad.take_rows(lbar.param, lat_rows[idx]), brng)
    loss_d = float(nll.data) * n_terms
    loss_s = float(lbar.smoothness().data)
    return loss_d + cfg.smoothness_weight * loss_s, loss_d, loss_s


def mapper_chain(mapper: LatentMapper, data: Dataset, reps, differentiable=True, counter=None):
    """Run the mapper autoregressively over traversal representatives (n_cells, N).

    Returns a list of N (mean, log_var) pairs; entry n was computed from
    traversal n, starting from the zero-knowledge previous estimate.
    """
    n_cells, n_chain = reps.shape
    k = mapper.spec.k_l
    prev_m = np.zeros((n_cells, k))
    prev_lv = np.zeros((n_cells, k))
    flag = np.zeros(n_cells)
    outs = []
    fwd = mapper.forward_tensor if differentiable else mapper.forward_numpy
    for n in range(n_chain):
        r = reps[:, n]
        enc = mapper.encoder_inputs(data.img[r], data.aud[r], data.hist_s[r], data.hist_a[r])
        m, lv = fwd(enc, prev_m, prev_lv, flag)
        if counter is not None:
            counter["mapper_calls"] = counter.get("mapper_calls", 0) + 1
        outs.append((m, lv))
        prev_m, prev_lv, flag = m, lv, np.ones(n_cells)
    return outs


def stage2_train(mapper: LatentMapper, lbar: LearnedLatentMap, grouped, cfg: StageConfig, rng, log_=None, counter=None):
    """Regress mapper outputs onto the frozen stage-1 latents (N chained calls per cell)."""
    tlog = log_ or TrainLog()
    spe = _steps_per_epoch(grouped, cfg)
    opt = _Scheduled(mapper.parameters(), cfg.lr_mapper, cfg, spe * cfg.epochs)
    targets_all = lbar.values.copy()
    for epoch in range(cfg.epochs):
        acc = 0.0
        for _ in range(spe):
            _, reps, flat = _sample_chain_batch(grouped, cfg, rng, cfg.n_traversals)
            target = targets_all[flat]

            def step():
                opt.zero_grad()
                loss = None
                for m, lv in mapper_chain(mapper, grouped.data, reps, counter=counter):
                    term = gaussian_nll(m, lv, target)
                    loss = term if loss is None else loss + term
                    if counter is not None:
                        counter["mapper_terms"] = counter.get("mapper_terms", 0) + len(flat)
                loss.backward()
                opt.step()
                return float(loss.data)

            acc += _guard(step, 2)
        tlog.add(epoch, 2, loss_mapper=acc / spe)
    return tlog


def stage3_latents(mapper: LatentMapper, data: Dataset, reps, noise):
    """Latents fed to the dynamics for traversals 0..N of each cell sample.

    reps: (n_cells, N+1) representative rows; noise: (n_cells, N, k).
    Slot 0 is the zero vector; slot n>0 is a reparameterized sample of the
    mapper output computed from traversals 0..n-1 only.
    """
    n_cells, n_slots = reps.shape
    k = mapper.spec.k_l
    lat = np.zeros((n_cells, n_slots, k))
    outs = mapper_chain(mapper, data, reps[:, :-1], differentiable=False)
    for n, (m, lv) in enumerate(outs, start=1):
        lat[:, n] = m + np.exp(0.5 * lv) * noise[:, n - 1]
    return lat


def stage3_train(ensemble: DynamicsEnsemble, mapper: LatentMapper, grouped, cfg: StageConfig, rng, log_=None, counter=None):
    """Refine the dynamics on mapper latents with zero-latent injection at n = 0."""
    tlog = log_ or TrainLog()
    n_terms = cfg.n_traversals + 1
    spe = _steps_per_epoch(grouped, cfg)
    opt = _Scheduled(ensemble.parameters(), cfg.lr_dynamics, cfg, spe * cfg.epochs)
    k = mapper.spec.k_l
    for epoch in range(cfg.epochs):
        acc = 0.0
        for _ in range(spe):
            rows, reps, _ = _sample_chain_batch(grouped, cfg, rng, n_terms)
            noise = rng.standard_normal((len(rows), cfg.n_traversals, k))
            lat = stage3_latents(mapper, grouped.data, reps, noise).reshape(-1, k)
            x, y = _prepare(ensemble, grouped.data, rows.reshape(-1))
            if counter is not None:
                counter["dyn_terms"] = counter.get("dyn_terms", 0) + rows.size

            def step():
                opt.zero_grad()
                loss = dynamics_nll(ensemble, (x, y), lat, rng) * n_terms
                loss.backward()
                opt.step()
                return float(loss.data)

            acc += _guard(step, 3)
        tlog.add(epoch, 3, loss_dyn=acc / spe)
    return tlog


def train_direct(ensemble: DynamicsEnsemble, grouped, cfg: StageConfig, rng, latent_of_rows=None, stage="direct", log_=None):
    """Plain dynamics fit with a fixed latent per row (none for the map-free baseline)."""
    tlog = log_ or TrainLog()
    n_terms = cfg.n_traversals + 1
    spe = _steps_per_epoch(grouped, cfg)
    opt = _Scheduled(ensemble.parameters(), cfg.lr_dynamics, cfg, spe * cfg.epochs)
    for epoch in range(cfg.epochs):
        acc = 0.0
        for _ in range(spe):
            rows, _, _ = _sample_chain_batch(grouped, cfg, rng, n_terms)
            flat_rows = rows.reshape(-1)
            x, y = _prepare(ensemble, grouped.data, flat_rows)
            lat = None if latent_of_rows is None else latent_of_rows(flat_rows)

            def step():
                opt.zero_grad()
                loss = dynamics_nll(ensemble, (x, y), lat, rng) * n_terms
                loss.backward()
                opt.step()
                return float(loss.data)

            acc += _guard(step, stage)
        tlog.add(epoch, stage, loss_dyn=acc / spe)
    return tlog
