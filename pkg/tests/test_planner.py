import numpy as np
import pytest

from surfmap.dynamics import OUT_DIM, DynamicsEnsemble, EnsembleSpec, Normalizer
from surfmap.geometry import ClosedPath
from surfmap.gridmap import GridSpec, LatentMap
from surfmap.planner import (
    ICEMConfig,
    RewardWeights,
    colored_noise,
    combine,
    icem_optimize,
    plan,
    reward,
    reward_batch,
    shift_solution,
)

SQUARE = ClosedPath([(0, 0), (10, 0), (10, 10), (0, 10)])
W = RewardWeights()


def line(x0, x1, h=8, y=0.0):
    xs = np.linspace(x0, x1, h + 1)
    return np.stack([xs, np.full_like(xs, y), np.zeros_like(xs)], axis=1)


# --- config -----------------------------------------------------------------------


def test_config_defaults_and_schedule():
    cfg = ICEMConfig()
    assert (cfg.horizon, cfg.samples, cfg.iterations, cfg.beta, cfg.decay, cfg.hypotheses) == (8, 32, 2, 4.0, 1.3, 4)
    assert cfg.n_samples(0) == 32
    assert cfg.n_samples(1) == round(32 / 1.3)
    assert cfg.n_elites(32) == 4
    assert cfg.n_elites(100) == 10
    with pytest.raises(ValueError):
        ICEMConfig(horizon=0)
    with pytest.raises(ValueError):
        ICEMConfig(samples=2)
    with pytest.raises(ValueError):
        RewardWeights(w_b=-1.0)


# --- colored noise -------------------------------------------------------------------


def psd(noise):
    spec = np.abs(np.fft.rfft(noise, axis=-2)) ** 2
    return spec.mean(axis=(0, 2))


def test_white_noise_psd_is_flat():
    x = colored_noise(0.0, 32, 2, np.random.default_rng(0), n=10_000)
    p = psd(x)[1:-1]
    # each bin averages 2e4 exponential-like terms: relative se ~ 1/sqrt(2e4)
    assert np.all(np.abs(p / p.mean() - 1.0) < 0.05)


@pytest.mark.parametrize("h", [8, 64])
def test_beta4_psd_slope(h):
    x = colored_noise(4.0, h, 2, np.random.default_rng(1), n=10_000)
    p = psd(x)
    f = np.fft.rfftfreq(h)
    sel = slice(1, len(f) - 1) if h > 8 else slice(1, len(f))
    slope = np.polyfit(np.log(f[sel]), np.log(p[sel]), 1)[0]
    assert abs(slope + 4.0) <= 1.0


@pytest.mark.parametrize("beta", [0.0, 1.0, 4.0])
@pytest.mark.parametrize("h", [1, 2, 7, 8])
def test_colored_noise_unit_variance(beta, h):
    x = colored_noise(beta, h, 3, np.random.default_rng(2), n=10_000)
    assert x.shape == (10_000, h, 3)
    var = x.var(axis=0)
    assert np.all(np.abs(var - 1.0) < 0.05)
    assert np.all(np.abs(x.mean(axis=0)) < 0.05)


def test_colored_noise_shapes():
    rng = np.random.default_rng(3)
    assert colored_noise(4.0, 8, 2, rng).shape == (8, 2)
    with pytest.raises(ValueError):
        colored_noise(4.0, 0, 2, rng)


# --- reward ------------------------------------------------------------------------


def test_reward_stationary_is_zero():
    r, terms = reward(line(3.0, 3.0), SQUARE, W, last_throttle=0.4, d_b=0.5, first_throttle=0.4)
    assert r == 0.0
    assert terms == {"progress": 0.0, "cte": 0.0, "throttle_change": 0.0, "boundary": 0.0}


def test_reward_one_meter_progress_is_40():
    r, _ = reward(line(2.0, 3.0), SQUARE, W, last_throttle=0.0, d_b=0.5, first_throttle=0.0)
    assert r == pytest.approx(40.0, abs=1e-12)


def test_reward_boundary_violation():
    poses = line(3.0, 3.0)
    poses[4, 1] = 2e-9
    r, terms = reward(poses, SQUARE, W, last_throttle=0.0, d_b=1e-9, first_throttle=0.0)
    assert terms["boundary"] == 1.0
    assert r == pytest.approx(-20000.0, abs=1e-6)


def test_reward_progress_across_corners_and_start_line():
    poses = np.stack([[9.5, 10.0, np.pi], [0.0, 10.0, np.pi], [0.0, 9.0, -np.pi / 2]])
    _, terms = reward(poses, SQUARE, W, 0.0, d_b=0.5, first_throttle=0.0)
    assert terms["progress"] == pytest.approx(10.5)
    poses = np.stack([[0.0, 1.0, -np.pi / 2], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    _, terms = reward(poses, SQUARE, W, 0.0, d_b=0.5, first_throttle=0.0)
    assert terms["progress"] == pytest.approx(2.0)


def test_reward_throttle_term():
    r, terms = reward(line(3.0, 3.0), SQUARE, W, last_throttle=-0.5, d_b=0.5, first_throttle=0.25)
    assert terms["throttle_change"] == 0.75
    assert r == pytest.approx(-15.0)


def test_invalid_trajectory_scores_minus_inf():
    poses = line(1.0, 2.0)
    poses[3, 0] = np.nan
    r, _ = reward(poses, SQUARE, W, 0.0, d_b=0.5)
    assert r == -np.inf


def test_reward_decomposition_and_scaling():
    rng = np.random.default_rng(4)
    poses = np.cumsum(rng.normal(0, 0.3, (50, 9, 3)), axis=1) + np.array([5.0, 0.5, 0.0])
    first = rng.uniform(-1, 1, 50)
    total, terms = reward_batch(poses, first, SQUARE, W, 0.2, 0.6)
    recombined = combine(W, terms["progress"], terms["cte"], terms["throttle_change"], terms["boundary"])
    np.testing.assert_array_equal(total, recombined)
    doubled, _ = reward_batch(poses, first, SQUARE, W.scaled(2.0), 0.2, 0.6)
    np.testing.assert_allclose(doubled, 2 * total, rtol=1e-12)


# --- optimizer -----------------------------------------------------------------------


def test_best_elite_never_decreases():
    rng = np.random.default_rng(5)
    target = rng.uniform(-1, 1, (8, 2))
    for it in (2, 4, 6):
        out = icem_optimize(ICEMConfig(iterations=it), lambda s: -np.sum((s - target) ** 2, axis=(1, 2)), rng)
        assert np.all(np.diff(out.best_scores) >= 0)
        assert len(out.best_scores) == it


def test_population_schedule_is_used():
    sizes = []

    def score(s):
        sizes.append(len(s))
        return np.zeros(len(s))

    icem_optimize(ICEMConfig(iterations=3), score, np.random.default_rng(0))
    assert sizes == [32, round(32 / 1.3), round(32 / 1.3**2)]


def test_shift_solution():
    seq = np.arange(8.0).reshape(4, 2)
    np.testing.assert_array_equal(shift_solution(seq), [[2, 3], [4, 5], [6, 7], [6, 7]])


def test_double_integrator_reaches_goal():
    dt = 0.2
    goal = np.array([1.5, -1.0])
    cfg = ICEMConfig(iterations=3)
    rng = np.random.default_rng(6)
    pos, vel = np.zeros(2), np.zeros(2)
    start = np.linalg.norm(goal - pos)
    prev = None

    def score_from(p0, v0):
        def score(seqs):
            p = np.repeat(p0[None], len(seqs), 0)
            v = np.repeat(v0[None], len(seqs), 0)
            cost = np.zeros(len(seqs))
            for t in range(seqs.shape[1]):
                v = v + dt * seqs[:, t]
                p = p + dt * v
                cost += np.linalg.norm(p - goal, axis=1) + 0.3 * np.linalg.norm(v, axis=1)
            return -cost

        return score

    for _ in range(20):
        out = icem_optimize(cfg, score_from(pos, vel), rng, init_mean=None if prev is None else shift_solution(prev))
        prev = out.best_sequence
        a = out.best_sequence[0]
        assert np.all(np.abs(a) <= 1)
        vel = vel + dt * a
        pos = pos + dt * vel
    assert np.linalg.norm(goal - pos) < 0.05 * start


# --- plan() ------------------------------------------------------------------------------


def forward_model(latent_dim=0):
    """Deterministic model: each step moves 0.1 m along the heading."""
    out_mean = np.zeros(OUT_DIM)
    out_mean[0] = 0.1
    nz = Normalizer(out_mean=out_mean, out_std=np.full(OUT_DIM, 1e-8), residual=False)
    ens = DynamicsEnsemble(EnsembleSpec(2, (8,), latent_dim), nz, np.random.default_rng(0))
    for m in ens.members:
        for name, t in m.items():
            m.set(name, np.zeros_like(t.data))
    return ens


def test_plan_with_unknown_map_runs_and_is_bounded():
    ens = forward_model(latent_dim=3)
    lmap = LatentMap(GridSpec(-2.0, -2.0, 0.5, 40, 40), 3)
    res = plan(ICEMConfig(), ens, lmap.snapshot(), np.zeros(7), np.array([2.0, 0.0, 0.0]), SQUARE, None, 0.0,
               np.random.default_rng(0), W, d_b=0.5)
    assert res.valid
    assert np.all(np.abs(res.action) <= 1) and res.sequence.shape == (8, 2)
    assert np.all(np.diff(res.best_rewards) >= 0)
    # the model always advances 0.8 m along the path regardless of action
    assert res.breakdown["progress"] == pytest.approx(0.8, abs=1e-6)
    expected = combine(W, res.breakdown["progress"], res.breakdown["cte"], res.breakdown["throttle_change"],
                       res.breakdown["boundary"])
    assert expected == pytest.approx(res.reward, abs=1e-6)


def test_plan_prefers_keeping_throttle():
    ens = forward_model()
    res = plan(ICEMConfig(iterations=4), ens, None, np.zeros(7), np.array([2.0, 0.0, 0.0]), SQUARE, None, 0.3,
               np.random.default_rng(1), W, d_b=0.5)
    assert abs(res.action[0] - 0.3) < 0.1


def test_plan_all_invalid_returns_flagged_zero_action():
    ens = forward_model()
    ens.normalizer.out_mean[0] = np.inf
    res = plan(ICEMConfig(), ens, None, np.zeros(7), np.array([2.0, 0.0, 0.0]), SQUARE, None, 0.0,
               np.random.default_rng(2), W, d_b=0.5)
    assert not res.valid
    np.testing.assert_array_equal(res.action, [0.0, 0.0])


def test_plan_needs_boundary_distance():
    with pytest.raises(ValueError):
        plan(ICEMConfig(), forward_model(), None, np.zeros(7), np.zeros(3), SQUARE, None, 0.0, np.random.default_rng(0), W)
