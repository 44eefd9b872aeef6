"""Probabilistic dynamics ensemble conditioned on a latent surface vector, and TS1 rollouts."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .geometry import compose
from .gridmap import sample_latents
from .nn import MLPSpec, ParamStore, forward_mlp, init_mlp, load_params, mlp_numpy, save_params, soft_clamp_logvar

STATE_DIM = 7
ACTION_DIM = 2
OUT_DIM = 10


@dataclass(frozen=True)
class EnsembleSpec:
    members: int = 5
    hidden_dims: tuple = (128, 128)
    latent_dim: int = 10  # 0 gives a latent-blind model

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if self.members < 1:
            raise ValueError("ensemble needs at least one member")
        if self.latent_dim < 0:
            raise ValueError("latent_dim must be >= 0")

    @property
    def input_dim(self):
        return STATE_DIM + ACTION_DIM + self.latent_dim

    def mlp(self):
        return MLPSpec(self.input_dim, self.hidden_dims, 2 * OUT_DIM)


@dataclass
class Normalizer:
    """Input/target standardization.

    With ``residual`` set, the state part of the target is the change from
    the input state; the ensemble still reports absolute next states.
    """

    in_mean: np.ndarray = field(default_factory=lambda: np.zeros(STATE_DIM + ACTION_DIM))
    in_std: np.ndarray = field(default_factory=lambda: np.ones(STATE_DIM + ACTION_DIM))
    out_mean: np.ndarray = field(default_factory=lambda: np.zeros(OUT_DIM))
    out_std: np.ndarray = field(default_factory=lambda: np.ones(OUT_DIM))
    residual: bool = True

    @classmethod
    def fit(cls, s_in, actions, s_out, residual=True):
        x = np.concatenate([s_in, actions], axis=1)
        y = s_out - _offset(s_in) if residual else s_out
        return cls(x.mean(0), np.maximum(x.std(0), 1e-8), y.mean(0), np.maximum(y.std(0), 1e-8), residual)

    def inputs(self, s_in, actions):
        return (np.concatenate([s_in, actions], axis=-1) - self.in_mean) / self.in_std

    def targets(self, s_out, s_in):
        y = s_out - _offset(s_in) if self.residual else s_out
        return (y - self.out_mean) / self.out_std

    def denormalize(self, mean_n, log_var_n, s_in):
        mean = mean_n * self.out_std + self.out_mean
        if self.residual:
            mean = mean + _offset(s_in)
        return mean, log_var_n + 2.0 * np.log(self.out_std)

    def to_dict(self):
        d = {k: getattr(self, k).tolist() for k in ("in_mean", "in_std", "out_mean", "out_std")}
        d["residual"] = self.residual
        return d

    @classmethod
    def from_dict(cls, d):
        arrays = {k: np.array(d[k], dtype=np.float64) for k in ("in_mean", "in_std", "out_mean", "out_std")}
        return cls(**arrays, residual=bool(d.get("residual", False)))


def _offset(s_in):
    s_in = np.asarray(s_in, dtype=np.float64)
    return np.concatenate([np.zeros(s_in.shape[:-1] + (3,)), s_in], axis=-1)


@dataclass
class GaussianPrediction:
    mean: np.ndarray
    log_var: np.ndarray


class DynamicsEnsemble:
    def __init__(self, spec: EnsembleSpec, normalizer: Normalizer | None = None, rng=None, members=None):
        self.spec = spec
        self.mlp_spec = spec.mlp()
        self.normalizer = normalizer or Normalizer()
        if members is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            members = [init_mlp(self.mlp_spec, rng, tag="psi") for _ in range(spec.members)]
        if len(members) != spec.members:
            raise ValueError("member count does not match spec")
        self.members = members

    def parameters(self):
        return [t for m in self.members for t in m.tensors()]

    def copy(self):
        return DynamicsEnsemble(self.spec, Normalizer.from_dict(self.normalizer.to_dict()), members=[m.copy() for m in self.members])

    def equal(self, other):
        return all(a.equal(b) for a, b in zip(self.members, other.members))

    # --- differentiable path (training) -----------------------------------

    def forward_tensor(self, member, x_norm, latent=None):
        """Normalized inputs (n, 9) plus optional latent tensor -> (mean_n, log_var_n) tensors."""
        if self.spec.latent_dim:
            if latent is None:
                raise ValueError("this ensemble expects a latent input")
            x = ad.concat([ad.as_tensor(x_norm), ad.as_tensor(latent)], axis=1)
        else:
            x = ad.as_tensor(x_norm)
        out = forward_mlp(self.mlp_spec, self.members[member], x)
        return out[:, :OUT_DIM], soft_clamp_logvar(out[:, OUT_DIM:])

    # --- numpy path (inference) --------------------------------------------

    def _raw(self, member, s_in, actions, latents):
        x = self.normalizer.inputs(s_in, actions)
        if self.spec.latent_dim:
            x = np.concatenate([x, latents], axis=-1)
        elif latents is not None and np.size(latents):
            raise ValueError("latent-blind ensemble given a latent")
        out = mlp_numpy(self.mlp_spec, self.members[member], x)
        return out[:, :OUT_DIM], soft_clamp_logvar(out[:, OUT_DIM:])

    def predict_normalized(self, member_idx, s_in, actions, latents=None):
        """Rows may use different members; returns normalized (mean, log_var)."""
        s_in = np.atleast_2d(s_in)
        actions = np.atleast_2d(actions)
        n = len(s_in)
        member_idx = np.broadcast_to(np.asarray(member_idx, dtype=np.int64), (n,))
        if latents is not None:
            latents = np.atleast_2d(latents)
            if latents.shape[1] != self.spec.latent_dim and self.spec.latent_dim:
                raise ValueError(f"expected latent dim {self.spec.latent_dim}, got {latents.shape[1]}")
        mean = np.empty((n, OUT_DIM))
        log_var = np.empty((n, OUT_DIM))
        for b in range(self.spec.members):
            rows = np.flatnonzero(member_idx == b)
            if len(rows) == 0:
                continue
            lat = latents[rows] if (latents is not None and self.spec.latent_dim) else None
            mean[rows], log_var[rows] = self._raw(b, s_in[rows], actions[rows], lat)
        return mean, log_var

    def predict_batch(self, member_idx, s_in, actions, latents=None):
        mean_n, lv_n = self.predict_normalized(member_idx, s_in, actions, latents)
        return self.normalizer.denormalize(mean_n, lv_n, np.atleast_2d(s_in))

    def predict(self, member, s_in, action, latent=None) -> GaussianPrediction:
        if not 0 <= member < self.spec.members:
            raise IndexError(f"member {member} out of range")
        s_in = np.asarray(s_in, dtype=np.float64)
        if s_in.shape != (STATE_DIM,):
            raise ValueError(f"s_in must have shape ({STATE_DIM},)")
        a = action.as_array() if hasattr(action, "as_array") else np.asarray(action, dtype=np.float64)
        if a.shape != (ACTION_DIM,):
            raise ValueError("action must have 2 components")
        lat = None
        if self.spec.latent_dim:
            lat = np.zeros(self.spec.latent_dim) if latent is None else np.asarray(latent, dtype=np.float64)
            if lat.shape != (self.spec.latent_dim,):
                raise ValueError(f"latent must have shape ({self.spec.latent_dim},)")
            lat = lat[None]
        if not (np.all(np.isfinite(s_in)) and np.all(np.isfinite(a))):
            raise ValueError("non-finite model input")
        m, lv = self.predict_batch(np.array([member]), s_in[None], a[None], lat)
        return GaussianPrediction(m[0], lv[0])

    # --- persistence --------------------------------------------------------

    def save(self, directory, prefix="dynamics"):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for i, m in enumerate(self.members):
            f = f"{prefix}_member{i}.bin"
            save_params(m, d / f)
            files.append(f)
        manifest = {
            "members": self.spec.members,
            "hidden_dims": list(self.spec.hidden_dims),
            "latent_dim": self.spec.latent_dim,
            "input_dim": self.spec.input_dim,
            "output_dim": 2 * OUT_DIM,
            "normalizer": self.normalizer.to_dict(),
            "files": files,
        }
        (d / f"{prefix}.json").write_text(json.dumps(manifest, indent=1))
        return d / f"{prefix}.json"

    @classmethod
    def load(cls, directory, prefix="dynamics"):
        d = Path(directory)
        manifest = json.loads((d / f"{prefix}.json").read_text())
        spec = EnsembleSpec(manifest["members"], tuple(manifest["hidden_dims"]), manifest["latent_dim"])
        members = [load_params(d / f, tag="psi") for f in manifest["files"]]
        return cls(spec, Normalizer.from_dict(manifest["normalizer"]), members=members)


def sample_next(pred: GaussianPrediction, noise) -> np.ndarray:
    return pred.mean + np.exp(0.5 * pred.log_var) * np.asarray(noise)


@dataclass
class Trajectory:
    poses: np.ndarray  # (n, h+1, 3) global poses, index 0 is the start
    states: np.ndarray  # (n, h+1, 7) input states
    valid: np.ndarray  # (n,) bool
    members: np.ndarray  # (n, h) member used at each step
    known: np.ndarray  # (n, h) latent came from a visited cell
    actions: np.ndarray | None = None  # (n, h, 2)


def rollout_batch(ensemble: DynamicsEnsemble, s_in0, pose0, actions, map_view, rng, latent_noise=True) -> Trajectory:
    """TS1 unrolling of n action sequences (n, h, 2) from start states (n, 7) and poses (n, 3).

    Every step: draw a member uniformly per row, look up the map at the row's
    current global position, sample that cell's latent (zero when unknown),
    predict, sample the next output state, and chain the body-frame pose
    increment onto the global pose.  ``map_view`` needs ``spec`` and
    ``lookup(cols, rows) -> (mean, log_var, known)``; it may be None for a
    latent-blind ensemble.
    """
    actions = np.asarray(actions, dtype=np.float64)
    n, h = actions.shape[:2]
    if h < 1:
        raise ValueError("horizon must be >= 1")
    k = ensemble.spec.latent_dim
    poses = np.empty((n, h + 1, 3))
    states = np.empty((n, h + 1, STATE_DIM))
    poses[:, 0] = pose0
    states[:, 0] = s_in0
    valid = np.ones(n, dtype=bool)
    members = np.empty((n, h), dtype=np.int64)
    known_log = np.zeros((n, h), dtype=bool)
    for t in range(h):
        members[:, t] = rng.integers(0, ensemble.spec.members, size=n)
        lat = None
        if k:
            cur = poses[:, t]
            safe = np.where(np.isfinite(cur[:, :2]), cur[:, :2], 0.0)
            cols, rows = map_view.spec.cells_of(safe[:, 0], safe[:, 1])
            mean, log_var, known = map_view.lookup(cols, rows)
            z = rng.standard_normal((n, k)) if latent_noise else np.zeros((n, k))
            lat = sample_latents(mean, log_var, known, z)
            known_log[:, t] = known
        s_cur = np.where(valid[:, None], states[:, t], 0.0)
        mean, log_var = ensemble.predict_batch(members[:, t], s_cur, actions[:, t], lat)
        out = mean + np.exp(0.5 * log_var) * rng.standard_normal((n, OUT_DIM))
        ok = np.all(np.isfinite(out), axis=1) & valid
        nxt = compose(poses[:, t], out[:, :3])
        ok &= np.all(np.isfinite(nxt), axis=1)
        poses[:, t + 1] = np.where(ok[:, None], nxt, np.nan)
        states[:, t + 1] = np.where(ok[:, None], out[:, 3:], np.nan)
        valid = ok
    return Trajectory(poses, states, valid, members, known_log, actions)


def ts1_rollout(ensemble, s_in0, pose0, actions, map_view, rng) -> Trajectory:
    """Single-trajectory convenience wrapper around :func:`rollout_batch`."""
    a = np.asarray(actions, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    return rollout_batch(ensemble, np.atleast_2d(s_in0), np.atleast_2d(pose0), a, map_view, rng)
