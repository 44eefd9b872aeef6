"""Pure-pursuit expert that occasionally floors the throttle to provoke slip."""
from __future__ import annotations

import math

import numpy as np

from .vehicle import Action, SimState


class ExpertDriver:
    """Stateful driver called once per 0.1 s control period.

    Steering: pure pursuit toward a point ``lookahead`` meters ahead on the
    path, shifted sideways by a slowly wandering offset so the whole lane
    gets covered.  Throttle: proportional speed tracking of a target speed
    that is redrawn every few seconds, overridden by 1 s full-throttle bursts
    started with probability ``burst_rate`` per second.
    """

    def __init__(
        self,
        path,
        rng: np.random.Generator,
        wheelbase=0.36,
        max_steer=0.45,
        lookahead=0.9,
        speed_range=(1.5, 4.0),
        speed_hold=3.0,
        burst_rate=0.1,
        burst_duration=1.0,
        offset_amplitude=0.3,
        period=0.1,
    ):
        self.path = path
        self.rng = rng
        self.wheelbase = wheelbase
        self.max_steer = max_steer
        self.lookahead = lookahead
        self.speed_range = speed_range
        self.speed_hold = speed_hold
        self.burst_rate = burst_rate
        self.burst_duration = burst_duration
        self.offset_amplitude = offset_amplitude
        self.period = period
        self.target_speed = float(rng.uniform(*speed_range))
        self._hold_left = speed_hold
        self._burst_left = 0.0
        self._offset = 0.0
        self.bursts = 0

    def steering(self, state: SimState, offset=0.0):
        s, _, _, _ = self.path.project(np.array([state.x, state.y]))
        s_t = float(s) + self.lookahead
        target = self.path.point_at(s_t)
        if offset:
            h = float(self.path.heading_at(s_t))
            target = target + offset * np.array([-math.sin(h), math.cos(h)])
        dx, dy = target[0] - state.x, target[1] - state.y
        alpha = math.atan2(dy, dx) - state.yaw
        alpha = (alpha + math.pi) % (2 * math.pi) - math.pi
        ld = max(math.hypot(dx, dy), 1e-6)
        delta = math.atan2(2.0 * self.wheelbase * math.sin(alpha), ld)
        return max(-1.0, min(1.0, delta / self.max_steer))

    def __call__(self, state: SimState) -> Action:
        rng = self.rng
        self._hold_left -= self.period
        if self._hold_left <= 0:
            self.target_speed = float(rng.uniform(*self.speed_range))
            self._hold_left = self.speed_hold
        if self.offset_amplitude > 0:
            # Ornstein-Uhlenbeck wander, stationary std = offset_amplitude
            theta = 0.3
            self._offset += -theta * self._offset * self.period + self.offset_amplitude * math.sqrt(
                2 * theta * self.period
            ) * rng.standard_normal()
        if self._burst_left <= 0 and rng.random() < self.burst_rate * self.period:
            self._burst_left = self.burst_duration
            self.bursts += 1
        steer = self.steering(state, self._offset)
        if self._burst_left > 0:
            self._burst_left -= self.period
            throttle = 1.0
        else:
            throttle = 0.8 * (self.target_speed - state.vx) + 0.15
        return Action(throttle, steer)


def expert_driver(state, track_path, rng, **kw) -> Action:
    """One-shot convenience wrapper; keeps no state between calls."""
    return ExpertDriver(track_path, rng, **kw)(state)
