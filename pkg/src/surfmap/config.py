"""Experiment configuration: one JSON document, strictly validated."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dynamics import EnsembleSpec
from .evaluation import L2Config
from .gridmap import GridSpec
from .mapper import MapperSpec
from .planner import ICEMConfig, RewardWeights
from .sim.world import DEFAULT_GRID, TEST_LAYOUT_SEED, TRAIN_LAYOUT_SEEDS, World, make_world
from .training import StageConfig

VARIANTS = ("no-map", "S", "A", "I", "AS", "AIS", "GT")
MAPPED_VARIANTS = ("S", "A", "I", "AS", "AIS")


class ConfigError(ValueError):
    pass


@dataclass
class WorldRef:
    """A world given either as a preset (track name + material layout seed) or a JSON file."""

    preset: str | None = "oval"
    layout_seed: int = 0
    path: str | None = None

    def __post_init__(self):
        if (self.preset is None) == (self.path is None):
            raise ConfigError("a world needs exactly one of 'preset' or 'path'")

    def build(self, grid: GridSpec) -> World:
        if self.path is not None:
            return World.load(self.path)
        return make_world(self.preset, self.layout_seed, grid=grid)


@dataclass
class WorldsConfig:
    train: list = field(default_factory=lambda: [WorldRef("oval", s) for s in TRAIN_LAYOUT_SEEDS])
    test: WorldRef = field(default_factory=lambda: WorldRef("oval", TEST_LAYOUT_SEED))
    race: WorldRef = field(default_factory=lambda: WorldRef("oval", TEST_LAYOUT_SEED))


@dataclass
class CollectConfig:
    test_minutes: float = 3.0
    sensor_noise: float = 0.1
    # expert target speeds (m/s); the top end reaches the grip limit on every material
    expert_speed_range: tuple = (1.5, 4.0)

    def __post_init__(self):
        self.expert_speed_range = tuple(self.expert_speed_range)
        lo, hi = self.expert_speed_range
        if not 0 < lo <= hi:
            raise ConfigError("collect.expert_speed_range must be 0 < low <= high")


@dataclass
class EvalConfig:
    n_steps: tuple = (10, 20, 30)
    n_hypotheses: int = 20
    variants: tuple = VARIANTS
    laps: int = 10
    max_interventions: int = 10

    def __post_init__(self):
        self.n_steps = tuple(self.n_steps)
        self.variants = tuple(self.variants)
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown variant(s) {bad}; valid variants: {', '.join(VARIANTS)}")
        if self.laps < 1:
            raise ConfigError("eval.laps must be >= 1")

    def l2(self) -> L2Config:
        return L2Config(n_steps=self.n_steps, n_hypotheses=self.n_hypotheses)


@dataclass
class StagesConfig:
    stage1: StageConfig = field(default_factory=StageConfig)
    stage2: StageConfig = field(default_factory=StageConfig)
    stage3: StageConfig = field(default_factory=StageConfig)

    def baseline(self) -> StageConfig:
        """Map-free and ground-truth baselines get the dynamics budget of stages 1 and 3 combined."""
        return dataclasses.replace(self.stage1, epochs=self.stage1.epochs + self.stage3.epochs)


@dataclass
class ExperimentConfig:
    seed: int = 0
    worlds: WorldsConfig = field(default_factory=WorldsConfig)
    grid: GridSpec = DEFAULT_GRID
    k_l: int = 10
    ensemble: EnsembleSpec = field(default_factory=EnsembleSpec)
    mapper: MapperSpec = field(default_factory=MapperSpec)
    stages: StagesConfig = field(default_factory=StagesConfig)
    icem: ICEMConfig = field(default_factory=ICEMConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)
    collect: CollectConfig = field(default_factory=CollectConfig)
    output_dir: str = "runs"

    def __post_init__(self):
        if self.k_l < 1:
            raise ConfigError("k_l must be >= 1")
        if not self.worlds.train:
            raise ConfigError("at least one training world is required")

    # derived model specs; k_l is authoritative for both networks
    def ensemble_spec(self, latent_dim=None) -> EnsembleSpec:
        lat = self.k_l if latent_dim is None else latent_dim
        return EnsembleSpec(self.ensemble.members, self.ensemble.hidden_dims, lat)

    def mapper_spec(self, modalities) -> MapperSpec:
        return MapperSpec(self.mapper.encoder_hidden, self.mapper.feature_dim, self.mapper.fusion_hidden, self.k_l,
                          tuple(modalities))

    def train_worlds(self):
        return [w.build(self.grid) for w in self.worlds.train]

    def test_world(self):
        return self.worlds.test.build(self.grid)

    def race_world(self):
        return self.worlds.race.build(self.grid)

    def to_dict(self):
        d = _plain(dataclasses.asdict(self))
        d["ensemble"].pop("latent_dim")
        for k in ("k_l", "modalities"):
            d["mapper"].pop(k)
        return d

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, d, base_dir="."):
        try:
            cfg = _build(cls, d, "config", Path(base_dir))
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d, base_dir=path.parent)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


# field name -> element type for list-valued fields holding dataclasses
_LIST_OF = {(WorldsConfig, "train"): WorldRef}
# JSON keys that differ from attribute names
_ALIASES = {StagesConfig: {"1": "stage1", "2": "stage2", "3": "stage3"}}
# ensemble.latent_dim and mapper.k_l are derived from the top-level k_l
_DERIVED = {EnsembleSpec: {"latent_dim"}, MapperSpec: {"k_l", "modalities"}}


def _build(cls, d, where, base_dir):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    aliases = _ALIASES.get(cls, {})
    d = {aliases.get(k, k): v for k, v in d.items()}
    names = {f.name for f in dataclasses.fields(cls)} - _DERIVED.get(cls, set())
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    kwargs = {}
    types = _field_types(cls)
    for key, value in d.items():
        sub = f"{where}.{key}"
        elem = _LIST_OF.get((cls, key))
        ftype = types.get(key)
        if elem is not None:
            if not isinstance(value, list):
                raise ConfigError(f"{sub}: expected a list")
            kwargs[key] = [_build(elem, v, f"{sub}[{i}]", base_dir) for i, v in enumerate(value)]
        elif dataclasses.is_dataclass(ftype):
            kwargs[key] = _build(ftype, value, sub, base_dir)
        else:
            kwargs[key] = tuple(value) if isinstance(value, list) else value
    if cls is WorldRef and kwargs.get("path") is not None:
        p = Path(kwargs["path"])
        p = p if p.is_absolute() else base_dir / p
        if not p.is_file():
            raise ConfigError(f"{where}.path: file not found: {p}")
        kwargs["path"] = str(p)
        kwargs.setdefault("preset", None)
    return cls(**kwargs)


def _field_types(cls):
    resolved = {
        "WorldsConfig": WorldsConfig, "WorldRef": WorldRef, "GridSpec": GridSpec, "EnsembleSpec": EnsembleSpec,
        "MapperSpec": MapperSpec, "StagesConfig": StagesConfig, "StageConfig": StageConfig,
        "ICEMConfig": ICEMConfig, "RewardWeights": RewardWeights, "EvalConfig": EvalConfig,
        "CollectConfig": CollectConfig,
    }
    return {f.name: resolved.get(f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")) for f in
            dataclasses.fields(cls)}


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x
