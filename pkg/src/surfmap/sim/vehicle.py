"""Planar dynamic bicycle model with friction-limited tires.

Rear-wheel drive, linear lateral tire stiffness, per-axle friction circles
and a final clamp of the total horizontal force to the traction circle
``mu * m * g``.  Reported body accelerations are force / mass, so the clamp
bounds them directly.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

G = 9.81
RPM_PER_MPS_FACTOR = 60.0 / (2.0 * math.pi)


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 3.5
    wheelbase: float = 0.36
    cg_to_front: float = 0.18
    max_steer: float = 0.45  # rad at |a_st| = 1
    max_drive_accel: float = 8.0  # m/s^2 demanded at full throttle, standstill
    max_brake_accel: float = 5.0
    top_speed: float = 4.0  # drive force fades linearly to zero here
    cornering_stiffness: float = 8.0  # lateral force per unit load per rad
    rolling_resistance: float = 0.03
    drag: float = 0.05  # N s^2 / m^2
    wheel_radius: float = 0.05
    spin_gain: float = 0.3  # s; converts untransmitted drive force into wheel spin
    min_slip_speed: float = 0.3
    substeps: int = 5

    @property
    def cg_to_rear(self):
        return self.wheelbase - self.cg_to_front

    @property
    def inertia(self):
        return self.mass * self.cg_to_front * self.cg_to_rear

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown vehicle parameters: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SimState:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    yaw_rate: float = 0.0
    ax: float = 0.0
    ay: float = 0.0
    yaw_acc: float = 0.0
    rpm: float = 0.0

    def s_in(self):
        """Dynamics-model input state [vx, vy, yaw_rate, ax, ay, yaw_acc, rpm]."""
        return np.array(
            [self.vx, self.vy, self.yaw_rate, self.ax, self.ay, self.yaw_acc, self.rpm]
        )

    def pose(self):
        return np.array([self.x, self.y, self.yaw])

    @property
    def speed(self):
        return math.hypot(self.vx, self.vy)

    def as_tuple(self):
        return (
            self.x, self.y, self.yaw, self.vx, self.vy,
            self.yaw_rate, self.ax, self.ay, self.yaw_acc, self.rpm,
        )


@dataclass(frozen=True)
class Action:
    throttle: float = 0.0
    steering: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "throttle", min(1.0, max(-1.0, float(self.throttle))))
        object.__setattr__(self, "steering", min(1.0, max(-1.0, float(self.steering))))

    def as_array(self):
        return np.array([self.throttle, self.steering])


def _clamp_norm(fx, fy, limit):
    n = math.hypot(fx, fy)
    if n > limit:
        s = limit / n
        return fx * s, fy * s, s
    return fx, fy, 1.0


def sim_step(state: SimState, action: Action, mu: float, params: VehicleParams, dt=0.01) -> SimState:
    p = params
    m, lf, lr = p.mass, p.cg_to_front, p.cg_to_rear
    iz = p.inertia
    fz_f = m * G * lr / p.wheelbase
    fz_r = m * G * lf / p.wheelbase
    delta = action.steering * p.max_steer
    cd, sd = math.cos(delta), math.sin(delta)
    h = dt / p.substeps

    x, y, yaw = state.x, state.y, state.yaw
    vx, vy, r = state.vx, state.vy, state.yaw_rate
    ax = ay = r_dot = 0.0
    spin = 0.0
    for _ in range(p.substeps):
        # front tire: lateral only, slip from wheel-frame contact velocity
        vfx, vfy = vx, vy + lf * r
        long_f = vfx * cd + vfy * sd
        lat_f = -vfx * sd + vfy * cd
        fyf = -p.cornering_stiffness * fz_f * lat_f / max(abs(long_f), p.min_slip_speed)
        fyf = max(-mu * fz_f, min(mu * fz_f, fyf))

        # rear tire: drive/brake plus lateral, combined friction circle
        vry = vy - lr * r
        fyr = -p.cornering_stiffness * fz_r * vry / max(abs(vx), p.min_slip_speed)
        if action.throttle >= 0.0:
            fx_dem = action.throttle * m * p.max_drive_accel * max(0.0, 1.0 - vx / p.top_speed)
        else:
            # braking opposes motion and never reverses the car within a substep
            fx_dem = -math.copysign(min(-action.throttle * m * p.max_brake_accel, m * abs(vx) / h), vx)
        roll = p.rolling_resistance * m * G * math.tanh(vx / 0.05)
        roll = math.copysign(min(abs(roll), m * abs(vx) / h), vx) if vx != 0.0 else 0.0
        fxr, fyr_c, _ = _clamp_norm(fx_dem - roll, fyr, mu * fz_r)
        spin = max(0.0, fx_dem - roll - fxr) / m if action.throttle > 0 else 0.0

        speed = math.hypot(vx, vy)
        fx = fxr - fyf * sd - p.drag * speed * vx
        fy = fyr_c + fyf * cd - p.drag * speed * vy
        mz = lf * fyf * cd - lr * fyr_c
        fx, fy, s = _clamp_norm(fx, fy, mu * m * G)
        mz *= s

        ax, ay = fx / m, fy / m
        r_dot = mz / iz
        vx += h * (ax + r * vy)
        vy += h * (ay - r * vx)
        r += h * r_dot
        c, sn = math.cos(yaw), math.sin(yaw)
        x += h * (vx * c - vy * sn)
        y += h * (vx * sn + vy * c)
        yaw += h * r

    rpm = max(0.0, (vx + p.spin_gain * spin) / p.wheel_radius * RPM_PER_MPS_FACTOR)
    out = SimState(x, y, yaw, vx, vy, r, ax, ay, r_dot, rpm)
    if not all(math.isfinite(v) for v in out.as_tuple()):
        raise FloatingPointError("simulator produced a non-finite state")
    return out


def slip_angle(state: SimState) -> float:
    """Body slip angle in radians (0 when nearly stationary)."""
    if state.speed < 0.2:
        return 0.0
    return math.atan2(state.vy, abs(state.vx))
