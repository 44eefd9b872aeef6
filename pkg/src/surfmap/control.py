"""Closed-loop racing: 10 Hz MPC in the simulator with a separate mapping thread."""
from __future__ import annotations

import csv
import hashlib
import math
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .gridmap import LatentMap, world_to_cell
from .mapper import MapperInput
from .planner import ICEMConfig, RewardWeights, plan
from .sim.dataset import TRANSITION_DT, DatasetBuilder, advance, make_transition
from .sim.sensors import SensorHistory, render_sensors
from .sim.vehicle import Action, SimState
from .sim.world import World

RUNLOG_COLUMNS = ("t", "x", "y", "yaw", "vx", "vy", "yaw_rate", "a_th", "a_st", "reward", "lap", "map_version", "intervention")


class TooManyInterventions(RuntimeError):
    """Raised when a run has to be abandoned; ``runlog`` holds what was driven so far."""

    def __init__(self, message, runlog=None):
        super().__init__(message)
        self.runlog = runlog


@dataclass
class RunLog:
    rows: list = field(default_factory=list)
    dataset: object = None  # transitions driven, with sensors
    step_latency: list = field(default_factory=list)
    lap_end_index: list = field(default_factory=list)  # dataset row at which each lap completed
    mapper_calls: int = 0

    def array(self):
        return np.array(self.rows, dtype=np.float64).reshape(-1, len(RUNLOG_COLUMNS))

    def column(self, name):
        return self.array()[:, RUNLOG_COLUMNS.index(name)]

    @property
    def laps(self):
        return int(self.column("lap")[-1]) if self.rows else 0

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RUNLOG_COLUMNS)
            for r in self.rows:
                w.writerow([repr(float(v)) if i not in (10, 11, 12) else str(int(v)) for i, v in enumerate(r)])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != RUNLOG_COLUMNS:
                raise ValueError(f"{path}: not a run log")
            return cls([tuple(float(v) for v in r) for r in reader])

    def digest(self):
        return hashlib.sha256(np.ascontiguousarray(self.array()).tobytes()).hexdigest()


class LapCounter:
    """Counts forward crossings of the start line (arc length 0) using unwrapped progress."""

    def __init__(self, path, s0=0.0):
        self.path = path
        self.s = float(s0)
        self.travelled = 0.0
        self.laps = 0

    def update(self, xy):
        s, _, _, _ = self.path.project(np.asarray(xy, dtype=np.float64))
        s = float(s)
        self.travelled += float(self.path.progress(self.s, s))
        self.s = s
        done = int(math.floor((self.travelled + 1e-9) / self.path.length))
        if done > self.laps:
            self.laps = done
            return True
        return False

    def relocate(self, xy):
        """Teleport (intervention) without counting progress."""
        s, _, _, _ = self.path.project(np.asarray(xy, dtype=np.float64))
        self.s = float(s)


class MappingWorker:
    """Applies mapper updates for completed traversals.

    Asynchronous mode runs a background thread fed through a queue, so the
    control loop only ever enqueues and never waits.  Synchronous mode applies
    every update inline, in order, for reproducible runs.
    """

    def __init__(self, mapper, latent_map: LatentMap, synchronous=False, enabled=True):
        self.mapper = mapper
        self.map = latent_map
        self.synchronous = synchronous
        self.enabled = enabled and mapper is not None and latent_map is not None
        self.calls = 0
        self.error = None
        self._q = queue.Queue()
        self._thread = None
        if self.enabled and not synchronous:
            self._thread = threading.Thread(target=self._run, name="mapping", daemon=True)
            self._thread.start()

    def _apply(self, cell, sensors):
        dist = self.map.get_latent(cell)
        k = self.map.k_l
        prev_m = dist.mean if dist.known else np.zeros(k)
        prev_lv = dist.log_var if dist.known else np.zeros(k)
        out = self.mapper.map_update(MapperInput(sensors, prev_m, prev_lv, float(dist.known)))
        self.map.apply_update(cell, out.mean, out.log_var)
        self.calls += 1

    def _run(self):
        while True:
            item = self._q.get()
            if item is None:
                return
            try:
                self._apply(*item)
            except Exception as exc:  # surfaced by close()
                self.error = exc

    def submit(self, cell, sensors):
        if not self.enabled or not bool(self.map.spec.contains(*cell)):
            return
        if self.synchronous:
            self._apply(cell, sensors)
        else:
            self._q.put((cell, sensors))

    def close(self):
        if self._thread is not None:
            self._q.put(None)
            self._thread.join()
            self._thread = None
        if self.error is not None:
            raise self.error


@dataclass
class Controller:
    """Planner settings plus the models it plans with."""

    ensemble: object
    icem: ICEMConfig = field(default_factory=ICEMConfig)
    weights: RewardWeights = field(default_factory=RewardWeights)


def _reset_state(world: World, state: SimState):
    s, _, _, _ = world.path.project(np.array([state.x, state.y]))
    return world.start_state(float(s))


def control_loop(
    world: World,
    controller: Controller,
    mapper,
    latent_map: LatentMap | None,
    laps: int,
    seed=0,
    synchronous=False,
    map_updates=True,
    max_interventions=10,
    max_steps=None,
    noise_std=0.1,
) -> RunLog:
    """Race ``laps`` laps from a standing start on the start line."""
    if laps < 1:
        raise ValueError("laps must be >= 1")
    plan_ss, sensor_ss = np.random.SeedSequence(seed).spawn(2)
    plan_rng = np.random.default_rng(plan_ss)
    sensor_rng = np.random.default_rng(sensor_ss)
    ens = controller.ensemble
    d_b = controller.weights.d_b if controller.weights.d_b is not None else world.track.half_width
    worker = MappingWorker(mapper, latent_map, synchronous, enabled=map_updates)
    log = RunLog()
    builder = DatasetBuilder(world.track.name)
    history = SensorHistory()
    state = world.start_state(0.0)
    counter = LapCounter(world.path, 0.0)
    prev_solution = None
    last_throttle = 0.0
    interventions = 0
    cur_cell = None
    last_sensors = None
    new_episode = True
    max_steps = max_steps or int(laps * world.path.length / 0.03) + 100
    k = 0
    try:
        while counter.laps < laps:
            if k >= max_steps:
                raise TooManyInterventions(f"no progress: {counter.laps}/{laps} laps after {k} steps", log)
            t0 = time.perf_counter()
            view = None
            version = 0
            if ens.spec.latent_dim and latent_map is not None:
                view = latent_map.snapshot()
                version = view.version
            res = plan(controller.icem, ens, view, state.s_in(), state.pose(), world.path, prev_solution,
                       last_throttle, plan_rng, controller.weights, d_b)
            log.step_latency.append(time.perf_counter() - t0)
            action = Action(*res.action)
            states = advance(state, action, world)
            history.push(states[-1].s_in(), action.as_array())
            sensors = render_sensors(state, world, history, sensor_rng, noise_std)
            cell = world_to_cell(state.x, state.y, world.grid)
            tid = builder.next_traversal_id(cell, new_episode)
            new_episode = False
            builder.add(make_transition(states, action, world, tid, sensors, k * TRANSITION_DT))
            # a traversal is complete once the car has left its cell
            if cur_cell is not None and cell != cur_cell and last_sensors is not None:
                worker.submit(cur_cell, last_sensors)
            cur_cell, last_sensors = cell, sensors
            prev_solution = res.sequence if res.valid else None
            last_throttle = float(action.throttle)
            state = states[-1]
            intervention = 0
            if not world.in_bounds(state.x, state.y):
                interventions += 1
                intervention = 1
                if interventions > max_interventions:
                    raise TooManyInterventions(
                        f"{interventions} interventions; last at t={k * TRANSITION_DT:.1f}s, "
                        f"pose=({state.x:.2f}, {state.y:.2f}), lap {counter.laps}",
                        log,
                    )
                state = _reset_state(world, state)
                counter.relocate([state.x, state.y])
                history.reset()
                builder.break_episode()
                new_episode = True
                cur_cell, last_sensors = None, None
                prev_solution = None
            elif counter.update([state.x, state.y]):
                log.lap_end_index.append(len(builder.rows))
            k += 1
            log.rows.append((
                k * TRANSITION_DT, state.x, state.y, state.yaw, state.vx, state.vy, state.yaw_rate,
                action.throttle, action.steering, res.reward if np.isfinite(res.reward) else -1e12,
                counter.laps, version, intervention,
            ))
    finally:
        worker.close()
        log.mapper_calls = worker.calls
        log.dataset = builder.build()
    return log
