"""Experiment pipeline: data collection, staged training, evaluation and racing.

Everything here is deterministic given the config seed.  The command line
is a thin wrapper around these functions; the acceptance suite calls them
directly.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import MAPPED_VARIANTS, VARIANTS, ConfigError, ExperimentConfig
from .control import Controller, control_loop
from .dynamics import DynamicsEnsemble
from .evaluation import (
    append_metrics,
    boundary_cells,
    build_map_history,
    cluster_purity,
    l2_metric,
    lap_metrics,
    pca_export,
    progressive_experiment,
)
from .gridmap import LatentMap
from .mapper import VARIANT_MODALITIES, GroundTruthMapper, HistoryScaler, LatentMapper
from .nn import ParamStore, load_params, save_params
from .sim.dataset import Dataset, collect_dataset
from .training import (
    LearnedLatentMap,
    TrainLog,
    fit_normalizers,
    group_by_cell,
    stage1_train,
    stage2_train,
    stage3_train,
    train_direct,
)

log = logging.getLogger(__name__)

STAGE_IDS = {"stage1": 1, "stage2": 2, "stage3": 3, "baseline": 4, "collect": 5, "race": 6, "eval": 7}


class DataError(RuntimeError):
    """Missing, empty or inconsistent input artifacts."""


class PrerequisiteError(DataError):
    pass


def stage_rng(seed, what, index=0):
    """Independent stream per (seed, step, variant) so stages can run separately or together."""
    return np.random.default_rng([int(seed), STAGE_IDS[what], int(index)])


def _sub_seed(seed, what, index):
    return int(np.random.SeedSequence([int(seed), STAGE_IDS[what], int(index)]).generate_state(1)[0])


# --- data ---------------------------------------------------------------------------


@dataclass
class ExperimentData:
    train: list
    test: Dataset
    summary: dict = field(default_factory=dict)


def collect(cfg: ExperimentConfig, minutes: float, out_dir=None, seed=None) -> ExperimentData:
    """Expert driving: ``minutes`` split evenly over the training worlds, plus held-out test driving."""
    if not minutes > 0:
        raise ConfigError("--minutes must be positive")
    seed = cfg.seed if seed is None else seed
    worlds = cfg.train_worlds()
    per_world = 60.0 * minutes / len(worlds)
    driver = {"speed_range": cfg.collect.expert_speed_range}
    train, stats = [], []
    for i, w in enumerate(worlds):
        ds, st = collect_dataset(w, per_world, _sub_seed(seed, "collect", i), cfg.collect.sensor_noise,
                                 driver_kwargs=driver, return_stats=True)
        train.append(ds)
        stats.append(st)
    test_world = cfg.test_world()
    test, test_stats = collect_dataset(test_world, 60.0 * cfg.collect.test_minutes, _sub_seed(seed, "collect", 999),
                                       cfg.collect.sensor_noise, driver_kwargs=driver, return_stats=True)
    summary = {k: sum(s[k] for s in stats) for k in ("transitions", "cells", "traversals", "slip_events")}
    summary["test_transitions"] = test_stats["transitions"]
    if out_dir is not None:
        out = Path(out_dir)
        (out / "worlds").mkdir(parents=True, exist_ok=True)
        for i, (ds, w) in enumerate(zip(train, worlds)):
            ds.to_csv(out / f"train_{i}.csv")
            w.save(out / "worlds" / f"train_{i}.json")
        test.to_csv(out / "test.csv")
        test_world.save(out / "worlds" / "test.json")
    return ExperimentData(train, test, summary)


def load_data(data_dir, cfg: ExperimentConfig, need_test=True) -> ExperimentData:
    d = Path(data_dir)
    if not d.is_dir():
        raise DataError(f"data directory not found: {d}")
    n = len(cfg.worlds.train)
    train = []
    for i in range(n):
        train.append(_read_dataset(d / f"train_{i}.csv"))
    test = _read_dataset(d / "test.csv") if need_test or (d / "test.csv").exists() else None
    return ExperimentData(train, test)


def _read_dataset(path):
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    try:
        return Dataset.from_csv(path)
    except (ValueError, KeyError, IndexError) as exc:
        raise DataError(f"{path}: {exc}") from exc


# --- models ---------------------------------------------------------------------------


@dataclass
class Models:
    """Trained artifacts of one run; any entry may be missing if its stage was not run."""

    stage1: DynamicsEnsemble | None = None
    lbar: LearnedLatentMap | None = None
    scaler: HistoryScaler | None = None
    baselines: dict = field(default_factory=dict)  # "no-map" / "GT" -> ensemble
    mappers: dict = field(default_factory=dict)  # variant -> LatentMapper
    dynamics: dict = field(default_factory=dict)  # variant -> stage-3 ensemble
    logs: dict = field(default_factory=dict)  # stage -> TrainLog

    def variant(self, name):
        """(ensemble, mapper) for a variant; the mapper is None for no-map and the marker "GT" for GT."""
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; valid variants: {', '.join(VARIANTS)}")
        if name == "no-map":
            if "no-map" not in self.baselines:
                raise PrerequisiteError("variant no-map needs stage 1 (baseline) artifacts")
            return self.baselines["no-map"], None
        if name == "GT":
            if "GT" not in self.baselines:
                raise PrerequisiteError("variant GT needs stage 1 (baseline) artifacts")
            return self.baselines["GT"], "GT"
        if name not in self.mappers:
            raise PrerequisiteError(f"variant {name} needs stage 2 artifacts")
        if name not in self.dynamics:
            raise PrerequisiteError(f"variant {name} needs stage 3 artifacts")
        return self.dynamics[name], self.mappers[name]


def _grouped(cfg, data: ExperimentData):
    if not data.train or sum(len(d) for d in data.train) == 0:
        raise DataError("training dataset is empty")
    return group_by_cell(data.train, (cfg.grid.n_rows, cfg.grid.n_cols))


def _mapped(cfg):
    return [v for v in cfg.eval.variants if v in MAPPED_VARIANTS]


def train_stage1(cfg: ExperimentConfig, data: ExperimentData, models: Models | None = None) -> Models:
    """Joint dynamics + per-cell latents, and the map-free / ground-truth baselines."""
    models = models or Models()
    grouped = _grouped(cfg, data)
    norm, scaler = fit_normalizers(grouped)
    rng = stage_rng(cfg.seed, "stage1")
    ens = DynamicsEnsemble(cfg.ensemble_spec(), norm, rng)
    lbar = LearnedLatentMap(grouped.n_worlds, grouped.grid_shape, cfg.k_l, rng)
    logs = TrainLog()
    if _mapped(cfg):
        stage1_train(ens, lbar, grouped, cfg.stages.stage1, rng, logs)
    models.stage1, models.lbar, models.scaler = ens, lbar, scaler
    base_cfg = cfg.stages.baseline()
    if "no-map" in cfg.eval.variants:
        brng = stage_rng(cfg.seed, "baseline", 0)
        e0 = DynamicsEnsemble(cfg.ensemble_spec(0), norm, brng)
        train_direct(e0, grouped, base_cfg, brng, stage="no-map", log_=logs)
        models.baselines["no-map"] = e0
    if "GT" in cfg.eval.variants:
        worlds = cfg.train_worlds()
        mats = np.concatenate([d.materials(w) for d, w in zip(data.train, worlds)])
        gt = GroundTruthMapper(worlds[0])
        brng = stage_rng(cfg.seed, "baseline", 1)
        eg = DynamicsEnsemble(cfg.ensemble_spec(gt.k_l), norm, brng)
        train_direct(eg, grouped, base_cfg, brng, latent_of_rows=lambda r: gt.latent_for_material(mats[r]),
                     stage="GT", log_=logs)
        models.baselines["GT"] = eg
    models.logs[1] = logs
    return models


def train_stage2(cfg: ExperimentConfig, data: ExperimentData, models: Models) -> Models:
    if models.lbar is None or models.stage1 is None:
        raise PrerequisiteError("stage 2 needs stage 1 artifacts (run train --stage 1 first)")
    grouped = _grouped(cfg, data)
    logs = TrainLog()
    for i, v in enumerate(MAPPED_VARIANTS):
        if v not in cfg.eval.variants:
            continue
        rng = stage_rng(cfg.seed, "stage2", i)
        mapper = LatentMapper(cfg.mapper_spec(VARIANT_MODALITIES[v]), models.scaler, rng)
        vlog = stage2_train(mapper, models.lbar, grouped, cfg.stages.stage2, rng)
        logs.rows.extend((e, f"2:{v}", *rest) for e, _, *rest in vlog.rows)
        models.mappers[v] = mapper
    models.logs[2] = logs
    return models


def train_stage3(cfg: ExperimentConfig, data: ExperimentData, models: Models) -> Models:
    if models.stage1 is None:
        raise PrerequisiteError("stage 3 needs stage 1 artifacts (run train --stage 1 first)")
    grouped = _grouped(cfg, data)
    logs = TrainLog()
    for i, v in enumerate(MAPPED_VARIANTS):
        if v not in cfg.eval.variants:
            continue
        if v not in models.mappers:
            raise PrerequisiteError(f"stage 3 needs stage 2 artifacts for variant {v} (run train --stage 2 first)")
        rng = stage_rng(cfg.seed, "stage3", i)
        ens = models.stage1.copy()
        vlog = stage3_train(ens, models.mappers[v], grouped, cfg.stages.stage3, rng)
        logs.rows.extend((e, f"3:{v}", *rest) for e, _, *rest in vlog.rows)
        models.dynamics[v] = ens
    models.logs[3] = logs
    return models


def train_all(cfg: ExperimentConfig, data: ExperimentData) -> Models:
    models = train_stage1(cfg, data)
    train_stage2(cfg, data, models)
    return train_stage3(cfg, data, models)


# --- persistence ----------------------------------------------------------------------


def save_models(models: Models, out_dir, stages=(1, 2, 3)):
    """Write the artifacts of the given stages; returns the written paths."""
    out = Path(out_dir)
    if 1 in stages and models.stage1 is not None:
        d = out / "stage1"
        models.stage1.save(d)
        store = ParamStore("lbar")
        store.add("lbar", models.lbar.values)
        save_params(store, d / "lbar.bin")
        meta = {"n_worlds": models.lbar.n_worlds, "grid_shape": list(models.lbar.grid_shape), "k_l": models.lbar.k_l,
                "scaler": models.scaler.to_dict()}
        (d / "lbar.json").write_text(json.dumps(meta, indent=1))
        for name, ens in models.baselines.items():
            ens.save(out / "baselines" / name)
    if 2 in stages:
        for v, m in models.mappers.items():
            m.save(out / "stage2" / v)
    if 3 in stages:
        for v, e in models.dynamics.items():
            e.save(out / "stage3" / v)
    for stage in stages:
        if stage in models.logs:
            models.logs[stage].to_csv(out / f"train_log_stage{stage}.csv")
    return sorted(p for p in out.rglob("*") if p.is_file())


def load_models(models_dir) -> Models:
    d = Path(models_dir)
    if not d.is_dir():
        raise DataError(f"models directory not found: {d}")
    models = Models()
    s1 = d / "stage1"
    if (s1 / "dynamics.json").is_file():
        models.stage1 = DynamicsEnsemble.load(s1)
        meta = json.loads((s1 / "lbar.json").read_text())
        lbar = LearnedLatentMap(meta["n_worlds"], tuple(meta["grid_shape"]), meta["k_l"])
        lbar.param.data = load_params(s1 / "lbar.bin")["lbar"].data.copy()
        models.lbar = lbar
        models.scaler = HistoryScaler.from_dict(meta["scaler"])
    for name in ("no-map", "GT"):
        if (d / "baselines" / name / "dynamics.json").is_file():
            models.baselines[name] = DynamicsEnsemble.load(d / "baselines" / name)
    for v in MAPPED_VARIANTS:
        if (d / "stage2" / v / "mapper.json").is_file():
            models.mappers[v] = LatentMapper.load(d / "stage2" / v)
        if (d / "stage3" / v / "dynamics.json").is_file():
            models.dynamics[v] = DynamicsEnsemble.load(d / "stage3" / v)
    return models


# --- evaluation -------------------------------------------------------------------------


def _check_variants(variants):
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variant(s) {bad}; valid variants: {', '.join(VARIANTS)}")


def eval_l2(cfg: ExperimentConfig, models: Models, test: Dataset, variants=None, seed=None):
    """Chronological rollout error per variant; returns {variant: {N_s: value}}."""
    variants = variants or cfg.eval.variants
    _check_variants(variants)
    if test is None or len(test) == 0:
        raise DataError("test dataset is empty")
    seed = cfg.seed if seed is None else seed
    world = cfg.test_world()
    out = {}
    for v in variants:
        ens, mapper = models.variant(v)
        src = GroundTruthMapper(world) if mapper == "GT" else mapper
        out[v] = l2_metric(ens, src, test, cfg.eval.l2(), seed=seed, grid=world.grid)
    return out


def _race_setup(cfg, models, variant, world):
    ens, mapper = models.variant(variant)
    lmap = None
    if mapper == "GT":
        lmap = GroundTruthMapper(world).fill(LatentMap(world.grid, 1))
        mapper = None
    elif mapper is not None:
        lmap = LatentMap(world.grid, mapper.spec.k_l)
    return Controller(ens, cfg.icem, cfg.reward), mapper, lmap


def race(cfg: ExperimentConfig, models: Models, variant="AIS", laps=None, seed=None, synchronous=False, world=None):
    """Closed-loop laps with online mapping; returns (RunLog, LapMetrics, final map or None)."""
    world = world or cfg.race_world()
    laps = laps or cfg.eval.laps
    seed = cfg.seed if seed is None else seed
    ctrl, mapper, lmap = _race_setup(cfg, models, variant, world)
    run = control_loop(world, ctrl, mapper, lmap, laps, seed=_sub_seed(seed, "race", VARIANTS.index(variant)),
                       synchronous=synchronous, max_interventions=cfg.eval.max_interventions)
    return run, lap_metrics(run, world.path, world.track.half_width), lmap


def eval_progressive(cfg: ExperimentConfig, models: Models, variant="AIS", laps=None, seed=None):
    world = cfg.race_world()
    seed = cfg.seed if seed is None else seed
    ens, mapper = models.variant(variant)
    if mapper is None or mapper == "GT":
        raise ConfigError("progressive mapping needs a learned-mapper variant")
    ctrl = Controller(ens, cfg.icem, cfg.reward)
    return progressive_experiment(ctrl, mapper, world, laps or cfg.eval.laps,
                                  seed=_sub_seed(seed, "race", VARIANTS.index(variant)))


@dataclass
class MapStructure:
    snapshot: object
    purity: float
    var_boundary: float
    var_interior: float


def map_structure(cfg: ExperimentConfig, models: Models, data: Dataset, variant="AIS", world=None, seed=None):
    """Build the map over ``data`` in order and score it against the world's material layout."""
    world = world or cfg.test_world()
    _, mapper = models.variant(variant)
    if mapper is None or mapper == "GT":
        raise ConfigError("map structure needs a learned-mapper variant")
    _, lmap = build_map_history(mapper, data, world.grid)
    snap = lmap.snapshot()
    layout = world.track.material_layout
    edge = boundary_cells(layout)
    purity = cluster_purity(snap, layout, mask=~edge, seed=cfg.seed if seed is None else seed)
    var = np.exp(snap.log_var).mean(axis=-1)
    vis = snap.visited
    vb = float(np.median(var[vis & edge])) if np.any(vis & edge) else float("nan")
    vi = float(np.median(var[vis & ~edge])) if np.any(vis & ~edge) else float("nan")
    return MapStructure(snap, purity, vb, vi)


def evaluate(cfg: ExperimentConfig, models: Models, data: ExperimentData, metric, out_dir, seed=None,
             synchronous=True):
    """Run one metric family over the config's variant matrix; returns the metrics rows written."""
    seed = cfg.seed if seed is None else seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variants = cfg.eval.variants
    _check_variants(variants)
    rows = []
    if metric == "l2":
        for v, res in eval_l2(cfg, models, data.test, variants, seed).items():
            rows += [(f"l2_{n}", v, seed, val) for n, val in res.items()]
    elif metric == "laps":
        for v in variants:
            _, m, _ = race(cfg, models, v, seed=seed, synchronous=synchronous)
            s = m.summary()
            rows += [(f"laps_{k}", v, seed, val) for k, val in s.items()]
    elif metric == "progressive":
        for v in _mapped(cfg):
            res = eval_progressive(cfg, models, v, seed=seed)
            for lap, (t, l2) in enumerate(zip(res.lap_times, res.l2), start=1):
                rows += [(f"progressive_lap{lap}_time", v, seed, t), (f"progressive_lap{lap}_l2_10", v, seed, l2)]
    elif metric == "map":
        if data.test is None or len(data.test) == 0:
            raise DataError("test dataset is empty")
        for v in _mapped(cfg):
            ms = map_structure(cfg, models, data.test, v, seed=seed)
            pca_export(ms.snapshot, out / f"map_{v}.csv")
            rows += [("map_purity_interior", v, seed, ms.purity), ("map_var_boundary", v, seed, ms.var_boundary),
                     ("map_var_interior", v, seed, ms.var_interior)]
    else:
        raise ConfigError(f"unknown metric {metric!r}")
    append_metrics(out / "metrics.csv", rows)
    return rows
