"""0.1 s transitions, expert data collection, and the dataset CSV format."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from ..geometry import compose, relative
from ..gridmap import CellIndex, world_to_cell
from .expert import ExpertDriver
from .sensors import HISTORY_LEN, SensorBundle, SensorHistory, render_sensors
from .vehicle import Action, SimState, sim_step, slip_angle
from .world import FEATURE_DIM, World

SIM_DT = 0.01
STEPS_PER_TRANSITION = 10
TRANSITION_DT = SIM_DT * STEPS_PER_TRANSITION
S_IN_DIM = 7
S_OUT_DIM = 10


@dataclass
class Transition:
    s_in: np.ndarray
    action: Action
    s_out_target: np.ndarray
    cell: CellIndex
    traversal_id: int
    sensors: SensorBundle | None
    timestamp: float
    pose: np.ndarray  # global pose at transition start


def make_transition(states, action: Action, world: World, traversal_id=0, sensors=None, timestamp=0.0) -> Transition:
    """Summarize 11 states (10 sim steps under one action) as a model transition."""
    if len(states) != STEPS_PER_TRANSITION + 1:
        raise ValueError(f"expected {STEPS_PER_TRANSITION + 1} states, got {len(states)}")
    s0, s1 = states[0], states[-1]
    delta = relative(s0.pose(), s1.pose())
    s_out = np.concatenate([delta, s1.s_in()])
    cell = world_to_cell(s0.x, s0.y, world.grid)
    return Transition(s0.s_in(), action, s_out, cell, traversal_id, sensors, timestamp, s0.pose())


class Dataset:
    """Column-oriented store of transitions from one world."""

    FIELDS = ("t", "traversal_id", "cell", "s_in", "action", "s_out", "img", "aud", "hist_s", "hist_a", "pose")

    def __init__(self, t, traversal_id, cell, s_in, action, s_out, img, aud, hist_s, hist_a, pose, world_name=""):
        self.t = np.asarray(t, dtype=np.float64)
        self.traversal_id = np.asarray(traversal_id, dtype=np.int64)
        self.cell = np.asarray(cell, dtype=np.int64).reshape(-1, 2)
        self.s_in = np.asarray(s_in, dtype=np.float64).reshape(-1, S_IN_DIM)
        self.action = np.asarray(action, dtype=np.float64).reshape(-1, 2)
        self.s_out = np.asarray(s_out, dtype=np.float64).reshape(-1, S_OUT_DIM)
        self.img = np.asarray(img, dtype=np.float64).reshape(-1, FEATURE_DIM)
        self.aud = np.asarray(aud, dtype=np.float64).reshape(-1, FEATURE_DIM)
        self.hist_s = np.asarray(hist_s, dtype=np.float64).reshape(-1, HISTORY_LEN, S_IN_DIM)
        self.hist_a = np.asarray(hist_a, dtype=np.float64).reshape(-1, HISTORY_LEN, 2)
        self.pose = np.asarray(pose, dtype=np.float64).reshape(-1, 3)
        self.world_name = world_name
        n = len(self.t)
        for f in self.FIELDS:
            if len(getattr(self, f)) != n:
                raise ValueError(f"column {f} has inconsistent length")

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i) -> Transition:
        sensors = SensorBundle(self.img[i], self.aud[i], self.hist_s[i], self.hist_a[i])
        return Transition(
            self.s_in[i],
            Action(*self.action[i]),
            self.s_out[i],
            CellIndex(int(self.cell[i, 0]), int(self.cell[i, 1])),
            int(self.traversal_id[i]),
            sensors,
            float(self.t[i]),
            self.pose[i],
        )

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(*(getattr(self, f)[idx] for f in self.FIELDS), world_name=self.world_name)

    def continues(self):
        """Boolean (n-1,): transition i+1 starts where transition i ended."""
        if len(self) < 2:
            return np.zeros(0, dtype=bool)
        end = compose(self.pose[:-1], self.s_out[:-1, :3])
        gap = np.hypot(end[:, 0] - self.pose[1:, 0], end[:, 1] - self.pose[1:, 1])
        dyaw = np.abs(end[:, 2] - self.pose[1:, 2])
        return (gap < 1e-6) & (dyaw < 1e-6)

    def traversal_groups(self):
        """Ordered list of (traversal_id, cell, index array)."""
        out = []
        if len(self) == 0:
            return out
        change = np.flatnonzero(np.diff(self.traversal_id) != 0) + 1
        starts = np.concatenate([[0], change])
        ends = np.concatenate([change, [len(self)]])
        for a, b in zip(starts, ends):
            out.append((int(self.traversal_id[a]), (int(self.cell[a, 0]), int(self.cell[a, 1])), np.arange(a, b)))
        return out

    def materials(self, world: World):
        return np.asarray(world.material_at_cell(self.cell[:, 0], self.cell[:, 1]))

    @staticmethod
    def concat(parts):
        parts = list(parts)
        cols = [np.concatenate([getattr(p, f) for p in parts]) for f in Dataset.FIELDS]
        return Dataset(*cols, world_name=parts[0].world_name if parts else "")

    # --- CSV ---------------------------------------------------------------

    @staticmethod
    def header():
        h = ["t", "traversal_id", "cell_col", "cell_row"]
        h += [f"s_in_{i}" for i in range(S_IN_DIM)] + ["a_th", "a_st"]
        h += [f"s_out_{i}" for i in range(S_OUT_DIM)]
        h += [f"img_{i}" for i in range(FEATURE_DIM)] + [f"aud_{i}" for i in range(FEATURE_DIM)]
        h += [f"hist_s_{i}" for i in range(HISTORY_LEN * S_IN_DIM)]
        h += [f"hist_a_{i}" for i in range(HISTORY_LEN * 2)]
        # global start pose; trailing columns beyond the fixed layout
        h += ["x", "y", "yaw"]
        return h

    def to_csv(self, path):
        n = len(self)
        table = np.concatenate(
            [
                self.t[:, None],
                self.traversal_id[:, None],
                self.cell,
                self.s_in,
                self.action,
                self.s_out,
                self.img,
                self.aud,
                self.hist_s.reshape(n, -1),
                self.hist_a.reshape(n, -1),
                self.pose,
            ],
            axis=1,
        )
        int_cols = {1, 2, 3}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for row in table:
                w.writerow([str(int(v)) if j in int_cols else repr(float(v)) for j, v in enumerate(row)])

    @classmethod
    def from_csv(cls, path, world_name=""):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[: len(cls.header()) - 3] != cls.header()[:-3]:
                raise ValueError(f"{path}: unexpected dataset header")
            rows = [list(map(float, r)) for r in reader]
        if not rows:
            raise ValueError(f"{path}: dataset is empty")
        a = np.array(rows)
        n = len(a)
        col = {name: i for i, name in enumerate(header)}

        def block(prefix, count):
            i0 = col[f"{prefix}0"]
            return a[:, i0 : i0 + count]

        pose = a[:, [col["x"], col["y"], col["yaw"]]] if "x" in col else np.full((n, 3), np.nan)
        return cls(
            a[:, col["t"]],
            a[:, col["traversal_id"]].astype(np.int64),
            a[:, [col["cell_col"], col["cell_row"]]].astype(np.int64),
            block("s_in_", S_IN_DIM),
            a[:, [col["a_th"], col["a_st"]]],
            block("s_out_", S_OUT_DIM),
            block("img_", FEATURE_DIM),
            block("aud_", FEATURE_DIM),
            block("hist_s_", HISTORY_LEN * S_IN_DIM).reshape(n, HISTORY_LEN, S_IN_DIM),
            block("hist_a_", HISTORY_LEN * 2).reshape(n, HISTORY_LEN, 2),
            pose,
            world_name=world_name,
        )


class DatasetBuilder:
    """Accumulates transitions and assigns traversal ids (one per contiguous pass through a cell)."""

    def __init__(self, world_name=""):
        self.world_name = world_name
        self.rows = []
        self._traversal = -1
        self._last_cell = None

    def next_traversal_id(self, cell, new_episode=False):
        if new_episode or cell != self._last_cell:
            self._traversal += 1
            self._last_cell = cell
        return self._traversal

    def break_episode(self):
        self._last_cell = None

    def add(self, tr: Transition):
        self.rows.append(tr)

    def build(self) -> Dataset:
        rows = self.rows
        return Dataset(
            [r.timestamp for r in rows],
            [r.traversal_id for r in rows],
            [tuple(r.cell) for r in rows],
            [r.s_in for r in rows],
            [r.action.as_array() for r in rows],
            [r.s_out_target for r in rows],
            [r.sensors.image_feat for r in rows],
            [r.sensors.audio_feat for r in rows],
            [r.sensors.state_hist for r in rows],
            [r.sensors.action_hist for r in rows],
            [r.pose for r in rows],
            world_name=self.world_name,
        )


def advance(state: SimState, action: Action, world: World):
    """Run one 0.1 s control period; returns the 11 visited states."""
    states = [state]
    for _ in range(STEPS_PER_TRANSITION):
        s = states[-1]
        states.append(sim_step(s, action, world.friction_at(s.x, s.y), world.vehicle, SIM_DT))
    return states


def collect_dataset(world: World, duration: float, seed: int, noise_std=0.1, driver_kwargs=None, return_stats=False):
    """Expert driving for ``duration`` seconds at 10 Hz."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    driver_ss, sensor_ss, reset_ss = np.random.SeedSequence(seed).spawn(3)
    sensor_rng = np.random.default_rng(sensor_ss)
    reset_rng = np.random.default_rng(reset_ss)
    driver = ExpertDriver(
        world.path,
        np.random.default_rng(driver_ss),
        wheelbase=world.vehicle.wheelbase,
        max_steer=world.vehicle.max_steer,
        **(driver_kwargs or {}),
    )
    n = int(round(duration / TRANSITION_DT))
    builder = DatasetBuilder(world.track.name)
    history = SensorHistory()
    state = world.start_state(0.0)
    new_episode = True
    resets = slips = 0
    for k in range(n):
        action = driver(state)
        states = advance(state, action, world)
        history.push(states[-1].s_in(), action.as_array())
        sensors = render_sensors(state, world, history, sensor_rng, noise_std)
        cell = world_to_cell(state.x, state.y, world.grid)
        tid = builder.next_traversal_id(cell, new_episode)
        new_episode = False
        builder.add(make_transition(states, action, world, tid, sensors, k * TRANSITION_DT))
        slips += any(abs(slip_angle(s)) > math.radians(10.0) for s in states[1:])
        state = states[-1]
        _, dist, _, _ = world.path.project(np.array([state.x, state.y]))
        if not world.in_bounds(state.x, state.y) or float(dist) > 4 * world.track.half_width:
            state = world.start_state(float(reset_rng.uniform(0.0, world.path.length)))
            history.reset()
            builder.break_episode()
            new_episode = True
            resets += 1
    ds = builder.build()
    if return_stats:
        return ds, {
            "transitions": len(ds),
            "cells": len({tuple(c) for c in ds.cell}),
            "traversals": int(ds.traversal_id.max()) + 1 if len(ds) else 0,
            "slip_events": int(slips),
            "bursts": driver.bursts,
            "resets": resets,
        }
    return ds
