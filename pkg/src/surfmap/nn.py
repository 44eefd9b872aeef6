"""Dense networks, Gaussian heads, and the Adam optimizer on top of :mod:`surfmap.autodiff`."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOGVAR_MIN = -10.0
LOGVAR_MAX = 4.0


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden_dims: tuple = (128, 128)
    output_dim: int = 1
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer sizes must be >= 1, got {dims}")
        if self.activation not in ("tanh", "identity"):
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))


class ParamStore:
    """Ordered name -> leaf tensor mapping for one network.

    ``tag`` records ownership (``"psi"`` for dynamics members, ``"phi"`` for
    the mapper, ``"lbar"`` for stage-1 latents).
    """

    def __init__(self, tag=""):
        self.tag = tag
        self._params = {}

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def set(self, name, value):
        t = self._params[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != t.data.shape:
            raise ValueError(f"shape of {name!r} is fixed at {t.data.shape}, got {value.shape}")
        t.data = value.copy()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def copy(self):
        out = ParamStore(self.tag)
        for name, t in self._params.items():
            out.add(name, t.data)
        return out

    def state(self):
        return {name: t.data.copy() for name, t in self._params.items()}

    def equal(self, other):
        if list(self) != list(other):
            return False
        return all(np.array_equal(self[n].data, other[n].data) for n in self)


def init_mlp(spec: MLPSpec, rng: np.random.Generator, tag="", prefix="") -> ParamStore:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    store = ParamStore(tag)
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        bound = 1.0 / np.sqrt(fan_in)
        store.add(f"{prefix}W{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        store.add(f"{prefix}b{i}", np.zeros(fan_out))
    return store


def forward_mlp(spec: MLPSpec, params: ParamStore, x, prefix="") -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[-1] != spec.input_dim:
        raise ValueError(f"expected input dim {spec.input_dim}, got {x.shape[-1]}")
    n_layers = len(spec.layer_dims)
    for i in range(n_layers):
        x = x @ params[f"{prefix}W{i}"] + params[f"{prefix}b{i}"]
        if i < n_layers - 1 and spec.activation == "tanh":
            x = ad.tanh(x)
    return x


def mlp_numpy(spec: MLPSpec, params: ParamStore, x: np.ndarray, prefix="") -> np.ndarray:
    """Tape-free forward pass for inference."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.input_dim:
        raise ValueError(f"expected input dim {spec.input_dim}, got {x.shape[-1]}")
    n_layers = len(spec.layer_dims)
    for i in range(n_layers):
        x = x @ params[f"{prefix}W{i}"].data + params[f"{prefix}b{i}"].data
        if i < n_layers - 1 and spec.activation == "tanh":
            x = np.tanh(x)
    return x


def soft_clamp_logvar(x, lo=LOGVAR_MIN, hi=LOGVAR_MAX):
    """Smoothly bound a raw log-variance head into [lo, hi]."""
    if isinstance(x, Tensor):
        x = hi - ad.softplus(hi - x)
        return lo + ad.softplus(x - lo)
    x = hi - np.logaddexp(0.0, hi - x)
    return lo + np.logaddexp(0.0, x - lo)


def gaussian_nll(mean, log_var, target):
    """Mean over elements of 0.5 * (log var + (mean - target)^2 / var)."""
    mean, log_var, target = ad.as_tensor(mean), ad.as_tensor(log_var), ad.as_tensor(target)
    if not (mean.shape == log_var.shape == target.shape):
        raise ValueError(f"shape mismatch {mean.shape}, {log_var.shape}, {target.shape}")
    err = mean - target
    inv_var = ad.exp(-log_var)
    return ((log_var + ad.square(err) * inv_var) * 0.5).mean()


def gaussian_nll_numpy(mean, log_var, target):
    mean, log_var, target = (np.asarray(a, dtype=np.float64) for a in (mean, log_var, target))
    return float(np.mean(0.5 * (log_var + (mean - target) ** 2 * np.exp(-log_var))))


def reparam_sample(mean, log_var, noise):
    if isinstance(mean, Tensor) or isinstance(log_var, Tensor):
        return ad.as_tensor(mean) + ad.exp(ad.as_tensor(log_var) * 0.5) * noise
    return np.asarray(mean) + np.exp(0.5 * np.asarray(log_var)) * noise


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, state: AdamState, lr: float, grads=None):
    """Apply one Adam update in place; ``grads`` defaults to each tensor's ``.grad``."""
    params = list(params)
    if grads is None:
        grads = [p.grad for p in params]
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if m.shape != p.data.shape:
            raise ValueError("moment shape does not match parameter shape")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class Adam:
    def __init__(self, params, lr=1e-3):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, self.state, self.lr)


# --- checkpoint files -------------------------------------------------------
# text index (name dims byte_offset per line), NUL, little-endian float64 payload


def save_params(store: ParamStore, path):
    lines = []
    chunks = []
    offset = 0
    for name, t in store.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"parameter names may not contain whitespace: {name!r}")
        dims = ",".join(str(d) for d in t.data.shape) or "-"
        lines.append(f"{name} {dims} {offset}")
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = ("\n".join(lines) + "\n").encode("ascii")
    Path(path).write_bytes(header + b"\0" + b"".join(chunks))


def load_params(path, tag="") -> ParamStore:
    blob = Path(path).read_bytes()
    sep = blob.index(b"\0")
    payload = blob[sep + 1 :]
    store = ParamStore(tag)
    for line in blob[:sep].decode("ascii").splitlines():
        if not line.strip():
            continue
        name, dims, offset = line.split()
        shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
        count = int(np.prod(shape)) if shape else 1
        offset = int(offset)
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        store.add(name, arr.reshape(shape).astype(np.float64))
    return store
