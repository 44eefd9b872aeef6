"""Multimodal latent mapper: per-modality encoders fused into a Gaussian latent update."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .nn import MLPSpec, ParamStore, forward_mlp, init_mlp, load_params, mlp_numpy, save_params, soft_clamp_logvar
from .sim.sensors import HISTORY_LEN, STATE_DIM, SensorBundle
from .sim.world import FEATURE_DIM

MODALITIES = ("image", "audio", "state")
# encoder name -> (modality, flattened input size)
ENCODERS = {
    "image": ("image", FEATURE_DIM),
    "audio": ("audio", FEATURE_DIM),
    "state_hist": ("state", HISTORY_LEN * STATE_DIM),
    "action_hist": ("state", HISTORY_LEN * 2),
}

VARIANT_MODALITIES = {
    "AIS": ("image", "audio", "state"),
    "AS": ("audio", "state"),
    "I": ("image",),
    "A": ("audio",),
    "S": ("state",),
}


@dataclass(frozen=True)
class MapperSpec:
    encoder_hidden: tuple = (64, 64)
    feature_dim: int = 32
    fusion_hidden: tuple = (128,)
    k_l: int = 10
    modalities: tuple = MODALITIES

    def __post_init__(self):
        object.__setattr__(self, "encoder_hidden", tuple(self.encoder_hidden))
        object.__setattr__(self, "fusion_hidden", tuple(self.fusion_hidden))
        mods = tuple(m for m in MODALITIES if m in set(self.modalities))
        if set(self.modalities) - set(MODALITIES):
            raise ValueError(f"unknown modalities {sorted(set(self.modalities) - set(MODALITIES))}")
        if not mods:
            raise ValueError("at least one modality must be enabled")
        object.__setattr__(self, "modalities", mods)
        if self.feature_dim < 1 or self.k_l < 1 or any(h < 1 for h in self.encoder_hidden + self.fusion_hidden):
            raise ValueError("all mapper dimensions must be >= 1")

    @property
    def encoders(self):
        return [name for name, (mod, _) in ENCODERS.items() if mod in self.modalities]

    @property
    def prev_dim(self):
        return 2 * self.k_l + 1

    @property
    def fusion_input_dim(self):
        return len(self.encoders) * self.feature_dim + self.prev_dim

    def encoder_mlp(self, name):
        return MLPSpec(ENCODERS[name][1], self.encoder_hidden, self.feature_dim)

    def fusion_mlp(self):
        return MLPSpec(self.fusion_input_dim, self.fusion_hidden, 2 * self.k_l)

    def to_dict(self):
        return {
            "encoder_hidden": list(self.encoder_hidden),
            "feature_dim": self.feature_dim,
            "fusion_hidden": list(self.fusion_hidden),
            "k_l": self.k_l,
            "modalities": list(self.modalities),
        }


def modality_mask(spec: MapperSpec, enabled) -> MapperSpec:
    """Same spec restricted to ``enabled`` modalities; disabled encoders disappear."""
    enabled = tuple(enabled)
    if not enabled:
        raise ValueError("at least one modality must be enabled")
    return MapperSpec(spec.encoder_hidden, spec.feature_dim, spec.fusion_hidden, spec.k_l, enabled)


@dataclass
class MapperInput:
    sensors: SensorBundle
    prev_mean: np.ndarray
    prev_log_var: np.ndarray
    prev_visited: float = 0.0


@dataclass
class MapperOutput:
    mean: np.ndarray
    log_var: np.ndarray


def zero_knowledge_input(sensors: SensorBundle, k_l: int) -> MapperInput:
    return MapperInput(sensors, np.zeros(k_l), np.zeros(k_l), 0.0)


def aggregate_traversal(transitions) -> SensorBundle:
    """Representative observation of a traversal: the sensors of its last transition."""
    transitions = list(transitions)
    if not transitions:
        raise ValueError("cannot aggregate an empty traversal")
    return transitions[-1].sensors


@dataclass
class HistoryScaler:
    """Per-channel standardization of the state/action histories."""

    state_mean: np.ndarray = field(default_factory=lambda: np.zeros(STATE_DIM))
    state_std: np.ndarray = field(default_factory=lambda: np.ones(STATE_DIM))

    @classmethod
    def fit(cls, s_in):
        return cls(s_in.mean(0), np.maximum(s_in.std(0), 1e-8))

    def to_dict(self):
        return {"state_mean": self.state_mean.tolist(), "state_std": self.state_std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["state_mean"]), np.array(d["state_std"]))


class LatentMapper:
    def __init__(self, spec: MapperSpec, scaler: HistoryScaler | None = None, rng=None, params=None):
        self.spec = spec
        self.scaler = scaler or HistoryScaler()
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = ParamStore("phi")
            for name in spec.encoders:
                enc = init_mlp(spec.encoder_mlp(name), rng, prefix=f"{name}.")
                for pname, t in enc.items():
                    params.add(pname, t.data)
            fus = init_mlp(spec.fusion_mlp(), rng, prefix="fusion.")
            for pname, t in fus.items():
                params.add(pname, t.data)
        self.params = params

    def parameters(self):
        return self.params.tensors()

    def copy(self):
        return LatentMapper(self.spec, HistoryScaler.from_dict(self.scaler.to_dict()), params=self.params.copy())

    def encoder_inputs(self, img, aud, hist_s, hist_a):
        """Batched raw modality arrays -> dict of flattened, scaled encoder inputs."""
        n = len(img)
        hs = (np.asarray(hist_s) - self.scaler.state_mean) / self.scaler.state_std
        return {
            "image": np.asarray(img).reshape(n, -1),
            "audio": np.asarray(aud).reshape(n, -1),
            "state_hist": hs.reshape(n, -1),
            "action_hist": np.asarray(hist_a).reshape(n, -1),
        }

    def forward_tensor(self, enc_inputs, prev_mean, prev_log_var, prev_flag):
        """Differentiable batched update; previous latent block may be a tensor (chained calls)."""
        feats = [
            forward_mlp(self.spec.encoder_mlp(name), self.params, enc_inputs[name], prefix=f"{name}.")
            for name in self.spec.encoders
        ]
        flag = ad.as_tensor(np.asarray(prev_flag, dtype=np.float64).reshape(-1, 1))
        x = ad.concat(feats + [ad.as_tensor(prev_mean), ad.as_tensor(prev_log_var), flag], axis=1)
        out = forward_mlp(self.spec.fusion_mlp(), self.params, x, prefix="fusion.")
        k = self.spec.k_l
        return out[:, :k], soft_clamp_logvar(out[:, k:])

    def forward_numpy(self, enc_inputs, prev_mean, prev_log_var, prev_flag):
        feats = [
            mlp_numpy(self.spec.encoder_mlp(name), self.params, enc_inputs[name], prefix=f"{name}.")
            for name in self.spec.encoders
        ]
        flag = np.asarray(prev_flag, dtype=np.float64).reshape(-1, 1)
        x = np.concatenate(feats + [prev_mean, prev_log_var, flag], axis=1)
        if x.shape[1] != self.spec.fusion_input_dim:
            raise ValueError("fusion input has the wrong width")
        out = mlp_numpy(self.spec.fusion_mlp(), self.params, x, prefix="fusion.")
        k = self.spec.k_l
        return out[:, :k], soft_clamp_logvar(out[:, k:])

    def map_update(self, inp: MapperInput) -> MapperOutput:
        s = inp.sensors
        for arr, shape in (
            (s.image_feat, (FEATURE_DIM,)),
            (s.audio_feat, (FEATURE_DIM,)),
            (s.state_hist, (HISTORY_LEN, STATE_DIM)),
            (s.action_hist, (HISTORY_LEN, 2)),
            (inp.prev_mean, (self.spec.k_l,)),
            (inp.prev_log_var, (self.spec.k_l,)),
        ):
            if np.shape(arr) != shape:
                raise ValueError(f"mapper input of shape {np.shape(arr)} where {shape} expected")
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite mapper input")
        enc = self.encoder_inputs(s.image_feat[None], s.audio_feat[None], s.state_hist[None], s.action_hist[None])
        m, lv = self.forward_numpy(enc, inp.prev_mean[None], inp.prev_log_var[None], [inp.prev_visited])
        return MapperOutput(m[0], lv[0])

    def save(self, directory, prefix="mapper"):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_params(self.params, d / f"{prefix}.bin")
        manifest = {"spec": self.spec.to_dict(), "scaler": self.scaler.to_dict(), "file": f"{prefix}.bin"}
        (d / f"{prefix}.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, directory, prefix="mapper"):
        d = Path(directory)
        manifest = json.loads((d / f"{prefix}.json").read_text())
        sd = manifest["spec"]
        spec = MapperSpec(
            tuple(sd["encoder_hidden"]), sd["feature_dim"], tuple(sd["fusion_hidden"]), sd["k_l"], tuple(sd["modalities"])
        )
        return cls(spec, HistoryScaler.from_dict(manifest["scaler"]), params=load_params(d / manifest["file"], tag="phi"))


class GroundTruthMapper:
    """Stand-in mapper that knows the surface: latent = material id + 1 (a scalar)."""

    k_l = 1

    def __init__(self, world):
        self.world = world

    def latent_for_material(self, mat_ids):
        return np.asarray(mat_ids, dtype=np.float64).reshape(-1, 1) + 1.0

    def fill(self, latent_map):
        grid = self.world.grid
        layout = self.world.track.material_layout
        mean = self.latent_for_material(layout.reshape(-1)).reshape(grid.n_rows, grid.n_cols, 1)
        latent_map.load_arrays(mean, np.full_like(mean, -10.0), np.ones((grid.n_rows, grid.n_cols), dtype=bool))
        return latent_map
