"""iCEM model-predictive control over TS1 rollouts of the dynamics ensemble."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import DynamicsEnsemble, rollout_batch
from .geometry import ClosedPath

ACTION_DIM = 2


@dataclass
class ICEMConfig:
    horizon: int = 8
    samples: int = 32  # first-iteration population, decayed by ``decay`` afterwards
    iterations: int = 2
    beta: float = 4.0
    decay: float = 1.3
    hypotheses: int = 4
    elite_fraction: float = 0.1
    min_elites: int = 4
    momentum: float = 0.1
    init_std: float = 0.5
    action_low: float = -1.0
    action_high: float = 1.0

    def __post_init__(self):
        if self.horizon < 1 or self.iterations < 1 or self.hypotheses < 1:
            raise ValueError("horizon, iterations and hypotheses must be >= 1")
        if self.samples < self.min_elites:
            raise ValueError("population smaller than the elite set")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")

    def n_samples(self, iteration):
        return max(self.n_elites(self.samples), int(round(self.samples * self.decay ** (-iteration))))

    def n_elites(self, n):
        return min(n, max(self.min_elites, int(round(self.elite_fraction * n))))


@dataclass
class RewardWeights:
    w_p: float = 40.0
    w_cte: float = 10.0
    w_a: float = 20.0
    w_b: float = 20000.0
    d_b: float | None = None  # None: lane half-width

    def __post_init__(self):
        if min(self.w_p, self.w_cte, self.w_a, self.w_b) < 0:
            raise ValueError("reward weights must be non-negative")

    def scaled(self, factor):
        return RewardWeights(self.w_p * factor, self.w_cte * factor, self.w_a * factor, self.w_b * factor, self.d_b)


@dataclass
class PlanResult:
    action: np.ndarray  # (2,)
    sequence: np.ndarray  # (h, 2)
    trajectory: np.ndarray  # (h+1, 3) best mean-hypothesis poses
    elite_mean: np.ndarray
    elite_std: np.ndarray
    reward: float
    breakdown: dict
    best_rewards: list = field(default_factory=list)  # best elite score after each iteration
    valid: bool = True


def colored_noise(beta, h, dims, rng, n=None):
    """Gaussian noise with power spectrum ~ 1/f**beta along time, unit variance per step.

    Returns (h, dims) or (n, h, dims) when ``n`` is given.  Built in the
    frequency domain; frequencies below 1/h are clamped to 1/h.
    """
    if h < 1:
        raise ValueError("noise length must be >= 1")
    lead = () if n is None else (n,)
    f = np.fft.rfftfreq(h)
    f = np.maximum(f, 1.0 / h)
    scale = f ** (-beta / 2.0)
    # exact per-step variance of the irfft output below
    weights = np.full(len(f), 4.0)
    weights[0] = 2.0
    if h % 2 == 0:
        weights[-1] = 2.0
    sigma = np.sqrt(np.sum(weights * scale**2)) / h
    shape = lead + (dims, len(f))
    re = rng.standard_normal(shape) * scale
    im = rng.standard_normal(shape) * scale
    if h % 2 == 0:
        im[..., -1] = 0.0
        re[..., -1] *= np.sqrt(2.0)
    im[..., 0] = 0.0
    re[..., 0] *= np.sqrt(2.0)
    if h == 1:
        out = rng.standard_normal(lead + (dims, 1))
    else:
        out = np.fft.irfft(re + 1j * im, n=h, axis=-1) / sigma
    return np.swapaxes(out, -1, -2)


# --- reward -----------------------------------------------------------------


def reward_terms(poses, path: ClosedPath, d_b):
    """Per-trajectory (progress, cte, boundary) for poses (n, h+1, 3); index 0 is the start."""
    poses = np.asarray(poses, dtype=np.float64)
    n, hp1 = poses.shape[:2]
    finite = np.all(np.isfinite(poses[..., :2]), axis=(1, 2))
    xy = np.where(np.isfinite(poses[..., :2]), poses[..., :2], 0.0)
    s, dist, _, _ = path.project(xy.reshape(-1, 2))
    s = s.reshape(n, hp1)
    dist = dist.reshape(n, hp1)
    progress = np.sum(path.progress(s[:, :-1], s[:, 1:]), axis=1)
    cte = dist[:, 1:].mean(axis=1)
    boundary = np.any(dist[:, 1:] > d_b, axis=1).astype(np.float64)
    return progress, cte, boundary, finite


def combine(w: RewardWeights, progress, cte, throttle_change, boundary):
    return w.w_p * progress - w.w_cte * cte - w.w_a * throttle_change - w.w_b * boundary


def reward_batch(poses, first_throttle, path, w: RewardWeights, last_throttle, d_b):
    progress, cte, boundary, finite = reward_terms(poses, path, d_b)
    r_a = np.abs(last_throttle - np.asarray(first_throttle, dtype=np.float64))
    total = combine(w, progress, cte, r_a, boundary)
    total = np.where(finite, total, -np.inf)
    return total, {"progress": progress, "cte": cte, "throttle_change": r_a, "boundary": boundary}


def reward(traj, path, w: RewardWeights, last_throttle, d_b=None, first_throttle=None):
    """Scalar reward of one trajectory plus its unweighted terms.

    ``traj`` is a pose array (h+1, 3) or a Trajectory with a single row.
    """
    if hasattr(traj, "poses"):
        poses = traj.poses[0] if traj.poses.ndim == 3 else traj.poses
        if first_throttle is None and traj.actions is not None:
            first_throttle = np.asarray(traj.actions).reshape(-1, ACTION_DIM)[0, 0]
    else:
        poses = np.asarray(traj)
    if first_throttle is None:
        first_throttle = last_throttle
    if d_b is None:
        d_b = w.d_b
    if d_b is None:
        raise ValueError("boundary distance unknown")
    total, terms = reward_batch(poses[None], [first_throttle], path, w, last_throttle, d_b)
    r = float(total[0])
    return r, {k: float(v[0]) for k, v in terms.items()}


# --- optimizer ----------------------------------------------------------------


@dataclass
class ICEMOutcome:
    best_sequence: np.ndarray
    best_score: float
    mean: np.ndarray
    std: np.ndarray
    best_scores: list
    evaluations: int


def icem_optimize(cfg: ICEMConfig, score_fn, rng, init_mean=None, init_std=None, dims=ACTION_DIM):
    """Maximize ``score_fn(sequences (n, h, dims)) -> (n,)`` with colored-noise CEM.

    Elites keep their scores and compete again in later iterations, so the
    best elite score never decreases within one call.
    """
    h = cfg.horizon
    mean = np.zeros((h, dims)) if init_mean is None else np.array(init_mean, dtype=np.float64)
    std = np.full((h, dims), cfg.init_std) if init_std is None else np.array(init_std, dtype=np.float64)
    elite_x = np.zeros((0, h, dims))
    elite_s = np.zeros(0)
    best_scores = []
    evals = 0
    for it in range(cfg.iterations):
        n = cfg.n_samples(it)
        noise = colored_noise(cfg.beta, h, dims, rng, n)
        cand = np.clip(mean + std * noise, cfg.action_low, cfg.action_high)
        if it == cfg.iterations - 1:
            cand[-1] = np.clip(mean, cfg.action_low, cfg.action_high)
        scores = np.asarray(score_fn(cand), dtype=np.float64)
        evals += len(cand)
        scores = np.where(np.isnan(scores), -np.inf, scores)
        pool_x = np.concatenate([elite_x, cand])
        pool_s = np.concatenate([elite_s, scores])
        n_el = cfg.n_elites(n)
        top = np.argsort(-pool_s, kind="stable")[:n_el]
        elite_x, elite_s = pool_x[top], pool_s[top]
        best_scores.append(float(elite_s[0]))
        finite = np.isfinite(elite_s)
        if finite.any():
            fit = elite_x[finite]
            mean = cfg.momentum * mean + (1.0 - cfg.momentum) * fit.mean(axis=0)
            std = cfg.momentum * std + (1.0 - cfg.momentum) * fit.std(axis=0)
    return ICEMOutcome(elite_x[0], float(elite_s[0]), mean, std, best_scores, evals)


def shift_solution(seq):
    """Warm start for the next control step: drop the first action, repeat the last."""
    seq = np.asarray(seq)
    return np.concatenate([seq[1:], seq[-1:]], axis=0)


def plan(
    cfg: ICEMConfig,
    ensemble: DynamicsEnsemble,
    map_view,
    s_in,
    pose,
    path: ClosedPath,
    prev_solution,
    last_throttle,
    rng,
    weights: RewardWeights | None = None,
    d_b=None,
) -> PlanResult:
    """One MPC step: optimize an action sequence from the current state and pose."""
    weights = weights or RewardWeights()
    d_b = d_b if d_b is not None else weights.d_b
    if d_b is None:
        raise ValueError("boundary distance unknown")
    k = cfg.hypotheses
    s_in = np.asarray(s_in, dtype=np.float64)
    pose = np.asarray(pose, dtype=np.float64)

    def score(seqs):
        n = len(seqs)
        acts = np.repeat(seqs, k, axis=0)
        traj = rollout_batch(ensemble, np.tile(s_in, (n * k, 1)), np.tile(pose, (n * k, 1)), acts, map_view, rng)
        r, _ = reward_batch(traj.poses, acts[:, 0, 0], path, weights, last_throttle, d_b)
        return r.reshape(n, k).mean(axis=1)

    init = None if prev_solution is None else shift_solution(prev_solution)
    out = icem_optimize(cfg, score, rng, init_mean=init)
    if not np.isfinite(out.best_score):
        zero = np.zeros(ACTION_DIM)
        return PlanResult(zero, np.zeros((cfg.horizon, ACTION_DIM)), np.full((cfg.horizon + 1, 3), np.nan),
                          out.mean, out.std, -np.inf, {}, out.best_scores, valid=False)
    seq = out.best_sequence
    # report a representative rollout of the chosen sequence
    traj = rollout_batch(ensemble, np.tile(s_in, (k, 1)), np.tile(pose, (k, 1)), np.repeat(seq[None], k, axis=0), map_view, rng)
    r, terms = reward_batch(traj.poses, np.full(k, seq[0, 0]), path, weights, last_throttle, d_b)
    mean_pose = np.nanmean(traj.poses, axis=0)
    breakdown = {name: float(np.mean(v)) for name, v in terms.items()}
    return PlanResult(np.clip(seq[0], cfg.action_low, cfg.action_high), seq, mean_pose, out.mean, out.std,
                      out.best_score, breakdown, out.best_scores, True)
