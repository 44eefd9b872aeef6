"""Colored action noise and the iCEM optimizer on a toy problem.

Run: python3 demos/planner_basics.py
"""
import numpy as np

from surfmap.planner import ICEMConfig, colored_noise, icem_optimize, shift_solution

rng = np.random.default_rng(0)

# Log-log slope of the noise power spectrum: about 0 for white noise, about -beta otherwise.
for beta in (0.0, 2.0, 4.0):
    x = colored_noise(beta, 256, 1, rng, n=400)[..., 0]
    psd = (np.abs(np.fft.rfft(x, axis=-1)) ** 2).mean(axis=0)[1:]
    f = np.fft.rfftfreq(256)[1:]
    slope = np.polyfit(np.log(f), np.log(psd), 1)[0]
    print(f"beta={beta:.0f}  fitted PSD slope {slope:+.2f}  per-step std {x.std():.3f}")

# Drive a 2-D double integrator to a goal with receding-horizon iCEM.
dt, goal = 0.2, np.array([1.5, -1.0])
pos, vel, prev = np.zeros(2), np.zeros(2), None
cfg = ICEMConfig(iterations=3)


def rollout_score(p0, v0):
    def score(seqs):
        p, v = np.repeat(p0[None], len(seqs), 0), np.repeat(v0[None], len(seqs), 0)
        cost = np.zeros(len(seqs))
        for t in range(seqs.shape[1]):
            v = v + dt * seqs[:, t]
            p = p + dt * v
            cost += np.linalg.norm(p - goal, axis=1) + 0.3 * np.linalg.norm(v, axis=1)
        return -cost
    return score


start = np.linalg.norm(goal)
for step in range(20):
    out = icem_optimize(cfg, rollout_score(pos, vel), rng, init_mean=None if prev is None else shift_solution(prev))
    prev = out.best_sequence
    vel = vel + dt * out.best_sequence[0]
    pos = pos + dt * vel
    if step % 5 == 4:
        print(f"step {step + 1:2d}  distance to goal {np.linalg.norm(goal - pos) / start:6.1%} of start")
