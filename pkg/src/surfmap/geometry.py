"""Closed polyline paths: projection, arc length, cross-track distance, pose composition."""
from __future__ import annotations

import numpy as np


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


def compose(pose, delta):
    """Chain body-frame increments (dx, dy, dyaw) onto global poses (..., 3)."""
    pose = np.asarray(pose, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    c, s = np.cos(pose[..., 2]), np.sin(pose[..., 2])
    out = np.empty(np.broadcast(pose, delta).shape)
    with np.errstate(invalid="ignore", over="ignore"):  # non-finite rows are flagged by callers
        out[..., 0] = pose[..., 0] + c * delta[..., 0] - s * delta[..., 1]
        out[..., 1] = pose[..., 1] + s * delta[..., 0] + c * delta[..., 1]
        out[..., 2] = pose[..., 2] + delta[..., 2]
    return out


def relative(pose0, pose1):
    """Increment that takes pose0 to pose1, expressed in pose0's body frame."""
    pose0 = np.asarray(pose0, dtype=np.float64)
    pose1 = np.asarray(pose1, dtype=np.float64)
    dx = pose1[..., 0] - pose0[..., 0]
    dy = pose1[..., 1] - pose0[..., 1]
    c, s = np.cos(pose0[..., 2]), np.sin(pose0[..., 2])
    return np.stack([c * dx + s * dy, -s * dx + c * dy, pose1[..., 2] - pose0[..., 2]], axis=-1)


class ClosedPath:
    """Closed loop through ``waypoints``; the last point connects back to the first."""

    def __init__(self, waypoints):
        pts = np.asarray(waypoints, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
            raise ValueError("a closed path needs at least 3 (x, y) waypoints")
        seg = np.roll(pts, -1, axis=0) - pts
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0):
            raise ValueError("consecutive waypoints must be distinct")
        self.points = pts
        self.seg = seg
        self.seg_len = seg_len
        self.cum = np.concatenate([[0.0], np.cumsum(seg_len)[:-1]])
        self.length = float(seg_len.sum())

    def project(self, xy):
        """Nearest point on the path for each (x, y).

        Returns (arc_length, distance, signed_lateral, segment_index); lateral
        offset is positive to the left of the direction of travel.
        """
        xy = np.asarray(xy, dtype=np.float64)
        flat = xy.reshape(-1, 2)
        rel = flat[:, None, :] - self.points[None, :, :]
        t = (rel * self.seg[None]).sum(-1) / (self.seg_len**2)[None]
        t = np.clip(t, 0.0, 1.0)
        near = self.points[None] + t[..., None] * self.seg[None]
        d2 = ((flat[:, None, :] - near) ** 2).sum(-1)
        k = np.argmin(d2, axis=1)
        idx = np.arange(len(flat))
        tk = t[idx, k]
        s = self.cum[k] + tk * self.seg_len[k]
        dist = np.sqrt(d2[idx, k])
        cross = self.seg[k, 0] * rel[idx, k, 1] - self.seg[k, 1] * rel[idx, k, 0]
        lateral = np.where(cross >= 0, dist, -dist)
        shape = xy.shape[:-1]
        return s.reshape(shape), dist.reshape(shape), lateral.reshape(shape), k.reshape(shape)

    def point_at(self, s):
        s = np.mod(np.asarray(s, dtype=np.float64), self.length)
        k = np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.cum) - 1)
        t = (s - self.cum[k]) / self.seg_len[k]
        return self.points[k] + t[..., None] * self.seg[k]

    def heading_at(self, s):
        s = np.mod(np.asarray(s, dtype=np.float64), self.length)
        k = np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.cum) - 1)
        return np.arctan2(self.seg[k, 1], self.seg[k, 0])

    def progress(self, s_from, s_to):
        """Signed arc-length advance from s_from to s_to, unwrapped to (-L/2, L/2]."""
        d = np.asarray(s_to) - np.asarray(s_from)
        return (d + 0.5 * self.length) % self.length - 0.5 * self.length
