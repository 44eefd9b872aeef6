"""Synthetic camera/microphone features and the 1 s state/action history buffers."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .world import World

HISTORY_LEN = 10
STATE_DIM = 7
ACTION_DIM = 2
CAMERA_LOOKAHEAD = 0.75


@dataclass
class SensorBundle:
    image_feat: np.ndarray  # (16,)
    audio_feat: np.ndarray  # (16,)
    state_hist: np.ndarray  # (10, 7), oldest first
    action_hist: np.ndarray  # (10, 2), oldest first


class SensorHistory:
    """Ring buffers of the last second of input states and actions, zero padded."""

    def __init__(self, length=HISTORY_LEN):
        self.length = length
        self.reset()

    def reset(self):
        self.states = deque([np.zeros(STATE_DIM)] * self.length, maxlen=self.length)
        self.actions = deque([np.zeros(ACTION_DIM)] * self.length, maxlen=self.length)

    def push(self, s_in, action):
        self.states.append(np.asarray(s_in, dtype=np.float64))
        self.actions.append(np.asarray(action, dtype=np.float64))

    def arrays(self):
        return np.stack(self.states), np.stack(self.actions)


def audio_gain(speed):
    return 0.2 + 0.8 * math.tanh(speed)


def render_sensors(state, world: World, history: SensorHistory, rng=None, noise_std=0.1) -> SensorBundle:
    """Camera sees the surface 0.75 m ahead; the microphone hears the surface underfoot."""
    lx = state.x + CAMERA_LOOKAHEAD * math.cos(state.yaw)
    ly = state.y + CAMERA_LOOKAHEAD * math.sin(state.yaw)
    img_mat = world.material_index(world.material_at(lx, ly))
    aud_mat = world.material_index(world.material_at(state.x, state.y))
    image = world.image_signatures[img_mat].copy()
    audio = audio_gain(state.speed) * world.audio_signatures[aud_mat]
    if noise_std > 0:
        if rng is None:
            raise ValueError("noisy rendering needs an rng")
        image = image + noise_std * rng.standard_normal(image.shape)
        audio = audio + noise_std * rng.standard_normal(audio.shape)
    sh, ah = history.arrays()
    return SensorBundle(image, audio, sh, ah)
