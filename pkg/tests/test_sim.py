import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surfmap.geometry import ClosedPath, compose, relative, wrap_angle
from surfmap.gridmap import world_to_cell
from surfmap.sim.dataset import Dataset, advance, collect_dataset, make_transition
from surfmap.sim.expert import ExpertDriver, expert_driver
from surfmap.sim.sensors import SensorHistory, audio_gain, render_sensors
from surfmap.sim.vehicle import G, Action, SimState, VehicleParams, sim_step, slip_angle
from surfmap.sim.world import (
    MaterialSpec,
    TrackSpec,
    World,
    make_world,
    test_world as make_test_world,
    training_worlds,
    uniform_world,
)

P = VehicleParams()


def drive(state, actions, mu, steps_each=1):
    out = [state]
    for a in actions:
        for _ in range(steps_each):
            out.append(sim_step(out[-1], a, mu, P))
    return out


# --- geometry -----------------------------------------------------------------


def test_compose_relative_inverse():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=(50, 3))
    p1 = rng.normal(size=(50, 3))
    back = compose(p0, relative(p0, p1))
    np.testing.assert_allclose(back, p1, atol=1e-12)


def test_compose_example():
    np.testing.assert_allclose(compose([1.0, 2.0, math.pi / 2], [1.0, 0.0, 0.1]), [1.0, 3.0, math.pi / 2 + 0.1], atol=1e-12)


def test_closed_path_projection_and_progress():
    square = ClosedPath([(0, 0), (2, 0), (2, 2), (0, 2)])
    assert square.length == 8.0
    s, d, lat, k = square.project(np.array([[1.0, 0.3], [1.0, -0.2]]))
    np.testing.assert_allclose(s, [1.0, 1.0])
    np.testing.assert_allclose(d, [0.3, 0.2])
    np.testing.assert_allclose(lat, [0.3, -0.2])
    assert square.progress(7.5, 0.5) == pytest.approx(1.0)
    assert square.progress(0.5, 7.5) == pytest.approx(-1.0)
    np.testing.assert_allclose(square.point_at(9.0), [1.0, 0.0])
    assert square.heading_at(3.0) == pytest.approx(math.pi / 2)


def test_closed_path_rejects_bad_input():
    with pytest.raises(ValueError):
        ClosedPath([(0, 0), (1, 0)])
    with pytest.raises(ValueError):
        ClosedPath([(0, 0), (0, 0), (1, 1)])


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50))
def test_wrap_angle_range(a):
    w = float(wrap_angle(a))
    assert -math.pi <= w < math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


# --- vehicle --------------------------------------------------------------------


def test_rest_stays_at_rest():
    s = sim_step(SimState(), Action(0.0, 0.0), 1.0, P)
    assert s.as_tuple() == SimState().as_tuple()


def test_action_is_clamped():
    a = Action(3.0, -7.0)
    assert (a.throttle, a.steering) == (1.0, -1.0)


def test_full_throttle_faster_on_high_friction():
    speeds = {}
    for mu in (1.0, 0.3):
        speeds[mu] = drive(SimState(), [Action(1.0, 0.0)] * 100, mu)[-1].speed
    assert speeds[1.0] > speeds[0.3]


@pytest.mark.parametrize("mu", [1.0, 0.6, 0.3])
def test_traction_circle_holds(mu):
    rng = np.random.default_rng(int(mu * 10))
    acts = [Action(*rng.uniform(-1, 1, 2)) for _ in range(60)]
    for s in drive(SimState(vx=2.0), acts, mu, steps_each=10):
        assert math.hypot(s.ax, s.ay) <= mu * G + 1e-6
        assert s.rpm >= 0


def test_coasting_speed_non_increasing():
    states = drive(SimState(vx=3.0, vy=0.4, yaw_rate=1.0), [Action(0.0, 0.3)] * 300, 0.6)
    speeds = np.array([s.speed for s in states])
    assert np.all(np.diff(speeds) <= 1e-9)


def test_material_changes_outcome():
    script = [Action(1.0, 0.0)] * 10 + [Action(0.8, 0.8)] * 10 + [Action(0.5, -0.6)] * 10
    ends = [drive(SimState(), script, mu, steps_each=10)[-1].pose() for mu in (0.3, 1.0)]
    assert np.hypot(*(ends[0][:2] - ends[1][:2])) > 0.1


def test_nan_guard():
    with pytest.raises(FloatingPointError):
        sim_step(SimState(vx=float("nan")), Action(), 1.0, P)


def test_vehicle_params_reject_unknown():
    with pytest.raises(ValueError):
        VehicleParams.from_dict({"mass": 2.0, "wings": 2})


# --- world ------------------------------------------------------------------------


def test_material_spec_invariants():
    with pytest.raises(ValueError):
        MaterialSpec(0, 0.0, 1)
    with pytest.raises(ValueError):
        MaterialSpec(0, 1.6, 1)
    w = make_world()
    with pytest.raises(ValueError):
        World(w.track, w.grid, (MaterialSpec(0, 1.0, 1), MaterialSpec(0, 0.5, 2)))


def test_track_spec_invariants():
    with pytest.raises(ValueError):
        TrackSpec([(0, 0), (1, 1)], 0.5, np.zeros((2, 2)))
    with pytest.raises(ValueError):
        TrackSpec([(0, 0), (1, 1), (2, 0)], 0.0, np.zeros((2, 2)))


def test_world_json_round_trip(tmp_path):
    w = make_world(layout_seed=5)
    w.save(tmp_path / "w.json")
    back = World.load(tmp_path / "w.json")
    np.testing.assert_array_equal(back.track.material_layout, w.track.material_layout)
    np.testing.assert_array_equal(back.image_signatures, w.image_signatures)
    assert back.vehicle == w.vehicle


def test_training_and_test_layouts_differ():
    layouts = [w.track.material_layout for w in training_worlds()] + [make_test_world().track.material_layout]
    for i in range(len(layouts)):
        for j in range(i + 1, len(layouts)):
            assert not np.array_equal(layouts[i], layouts[j])


# --- transitions ------------------------------------------------------------------


def test_stationary_transition():
    w = make_world()
    st0 = w.start_state(0.0)
    tr = make_transition(advance(SimState(st0.x, st0.y, st0.yaw), Action(), w), Action(), w)
    np.testing.assert_array_equal(tr.s_out_target[:3], 0.0)


def test_straight_forward_transition():
    w = make_world()
    states = [SimState(1.0 + 0.01 * i, 2.0, 0.0, vx=1.0) for i in range(11)]
    tr = make_transition(states, Action(), w)
    np.testing.assert_allclose(tr.s_out_target[:3], [0.1, 0.0, 0.0], atol=1e-12)


def test_transition_chain_recomposes_global_pose():
    w = make_world()
    rng = np.random.default_rng(4)
    state = w.start_state(0.0)
    start = state.pose()
    pose = start.copy()
    for _ in range(40):
        a = Action(*rng.uniform(-1, 1, 2))
        states = advance(state, a, w)
        tr = make_transition(states, a, w)
        pose = compose(pose, tr.s_out_target[:3])
        state = states[-1]
    np.testing.assert_allclose(pose, state.pose(), atol=1e-9)


def test_make_transition_needs_eleven_states():
    with pytest.raises(ValueError):
        make_transition([SimState()] * 5, Action(), make_world())


# --- sensors ------------------------------------------------------------------------


def _two_material_world():
    w = make_world()
    layout = np.zeros_like(w.track.material_layout)
    layout[:, 12:] = 2
    return World(TrackSpec(w.track.waypoints, w.track.half_width, layout, "split"), w.grid)


def test_camera_looks_ahead_microphone_listens_below():
    w = _two_material_world()
    state = SimState(x=5.8, y=3.0, yaw=0.0, vx=1.0)  # on material 0, 0.75 m ahead is material 2
    b = render_sensors(state, w, SensorHistory(), None, noise_std=0.0)
    np.testing.assert_array_equal(b.image_feat, w.image_signatures[w.material_index(2)])
    np.testing.assert_allclose(b.audio_feat, audio_gain(1.0) * w.audio_signatures[w.material_index(0)])


def test_audio_gain_at_rest():
    assert audio_gain(0.0) == pytest.approx(0.2)
    b = render_sensors(SimState(x=1.0, y=1.0), make_world(), SensorHistory(), None, noise_std=0.0)
    assert np.linalg.norm(b.audio_feat) > 0


def test_noise_free_render_is_deterministic():
    w = make_world()
    s = SimState(x=3.0, y=2.0, yaw=0.3, vx=2.0)
    a = render_sensors(s, w, SensorHistory(), None, 0.0)
    b = render_sensors(s, w, SensorHistory(), None, 0.0)
    np.testing.assert_array_equal(a.image_feat, b.image_feat)
    np.testing.assert_array_equal(a.audio_feat, b.audio_feat)


def test_history_zero_padded_and_ordered():
    h = SensorHistory()
    sh, ah = h.arrays()
    assert sh.shape == (10, 7) and ah.shape == (10, 2) and not sh.any()
    for i in range(12):
        h.push(np.full(7, float(i)), np.full(2, float(i)))
    sh, _ = h.arrays()
    np.testing.assert_array_equal(sh[:, 0], np.arange(2, 12))


def test_audio_linear_probe_identifies_material():
    w = make_world()
    rng = np.random.default_rng(7)

    def sample(n):
        feats, labels = [], []
        for _ in range(n):
            m = int(rng.integers(3))
            speed = rng.uniform(1.0, 4.0)
            audio = audio_gain(speed) * w.audio_signatures[m] + 0.1 * rng.standard_normal(16)
            feats.append(audio)
            labels.append(m)
        return np.array(feats), np.array(labels)

    x, y = sample(1000)
    xt, yt = sample(1000)
    design = np.hstack([x, np.ones((len(x), 1))])
    coef, *_ = np.linalg.lstsq(design, np.eye(3)[y], rcond=None)
    pred = np.argmax(np.hstack([xt, np.ones((len(xt), 1))]) @ coef, axis=1)
    assert np.mean(pred == yt) > 0.95


# --- expert and collection ---------------------------------------------------------------


def test_expert_straight_centered_steers_zero():
    path = ClosedPath([(0, 0), (20, 0), (20, 5), (0, 5)])
    a = expert_driver(SimState(x=5.0, y=0.0, yaw=0.0, vx=1.0), path, np.random.default_rng(0), offset_amplitude=0.0)
    assert abs(a.steering) < 1e-9


@settings(max_examples=30, deadline=None)
@given(x=st.floats(-5, 20), y=st.floats(-5, 10), yaw=st.floats(-4, 4), vx=st.floats(-2, 8), seed=st.integers(0, 100))
def test_expert_output_in_range(x, y, yaw, vx, seed):
    path = make_world().path
    drv = ExpertDriver(path, np.random.default_rng(seed))
    for _ in range(3):
        a = drv(SimState(x=x, y=y, yaw=yaw, vx=vx))
        assert -1 <= a.throttle <= 1 and -1 <= a.steering <= 1


def test_expert_provokes_slip_on_low_friction():
    w = uniform_world(material_id=2)
    _, stats = collect_dataset(w, 60.0, seed=0, return_stats=True)
    assert stats["bursts"] >= 1
    assert stats["slip_events"] >= 1


def test_collect_dataset_contract(tmp_path):
    w = make_world()
    ds = collect_dataset(w, 60.0, seed=3)
    assert len(ds) == 600
    for i in range(0, 600, 7):
        assert tuple(ds.cell[i]) == tuple(world_to_cell(ds.pose[i, 0], ds.pose[i, 1], w.grid))
    np.testing.assert_allclose(np.diff(ds.t), 0.1)
    # traversal ids change exactly when the cell changes (or an episode restarts)
    changed = np.any(ds.cell[1:] != ds.cell[:-1], axis=1)
    bumped = ds.traversal_id[1:] != ds.traversal_id[:-1]
    assert np.all(bumped[changed])
    again = collect_dataset(w, 60.0, seed=3)
    for name in ("s_in", "s_out", "action", "img", "aud", "traversal_id"):
        np.testing.assert_array_equal(getattr(ds, name), getattr(again, name))
    ds.to_csv(tmp_path / "d.csv")
    back = Dataset.from_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.s_out, ds.s_out)
    np.testing.assert_array_equal(back.traversal_id, ds.traversal_id)


def test_collect_rejects_non_positive_duration():
    with pytest.raises(ValueError):
        collect_dataset(make_world(), 0.0, seed=0)


def test_slip_angle_zero_when_slow():
    assert slip_angle(SimState(vx=0.1, vy=0.1)) == 0.0
