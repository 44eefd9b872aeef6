"""Tracks, surface materials, and the world that ties them to a grid."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..geometry import ClosedPath
from ..gridmap import GridSpec
from .vehicle import SimState, VehicleParams

FEATURE_DIM = 16


@dataclass(frozen=True)
class MaterialSpec:
    id: int
    friction: float
    embed_seed: int

    def __post_init__(self):
        if not 0.0 < self.friction <= 1.5:
            raise ValueError(f"friction must lie in (0, 1.5], got {self.friction}")


DEFAULT_MATERIALS = (
    MaterialSpec(0, 1.0, 101),
    MaterialSpec(1, 0.6, 202),
    MaterialSpec(2, 0.3, 303),
)


@dataclass
class TrackSpec:
    waypoints: np.ndarray
    half_width: float
    material_layout: np.ndarray  # (n_rows, n_cols) material ids
    name: str = "track"

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64)
        self.material_layout = np.asarray(self.material_layout, dtype=np.int64)
        if len(self.waypoints) < 3:
            raise ValueError("a track needs at least 3 waypoints")
        if self.half_width <= 0:
            raise ValueError("lane half-width must be positive")


@dataclass
class World:
    track: TrackSpec
    grid: GridSpec
    materials: tuple = DEFAULT_MATERIALS
    vehicle: VehicleParams = field(default_factory=VehicleParams)

    def __post_init__(self):
        ids = [m.id for m in self.materials]
        if len(set(ids)) != len(ids):
            raise ValueError("material ids must be unique")
        if self.track.material_layout.shape != (self.grid.n_rows, self.grid.n_cols):
            raise ValueError("material layout must match the grid shape")
        unknown = set(np.unique(self.track.material_layout)) - set(ids)
        if unknown:
            raise ValueError(f"layout references unknown materials {sorted(unknown)}")
        self.path = ClosedPath(self.track.waypoints)
        self._friction = {m.id: m.friction for m in self.materials}
        self._material_index = {m.id: i for i, m in enumerate(self.materials)}
        # fixed per-material signatures, one table per modality
        self.image_signatures = np.stack(
            [np.random.default_rng([m.embed_seed, 1]).standard_normal(FEATURE_DIM) for m in self.materials]
        )
        self.audio_signatures = np.stack(
            [np.random.default_rng([m.embed_seed, 2]).standard_normal(FEATURE_DIM) for m in self.materials]
        )

    @property
    def n_materials(self):
        return len(self.materials)

    def material_at_cell(self, col, row):
        """Material id; positions off the grid take the nearest border cell."""
        col = np.clip(col, 0, self.grid.n_cols - 1)
        row = np.clip(row, 0, self.grid.n_rows - 1)
        return self.track.material_layout[row, col]

    def material_at(self, x, y):
        cols, rows = self.grid.cells_of(x, y)
        return self.material_at_cell(cols, rows)

    def friction_at(self, x, y):
        return self._friction[int(self.material_at(x, y))]

    def material_index(self, mat_id):
        return self._material_index[int(mat_id)]

    def in_bounds(self, x, y):
        xmin, xmax, ymin, ymax = self.grid.extent
        return xmin <= x < xmax and ymin <= y < ymax

    def start_state(self, s=0.0) -> SimState:
        p = self.path.point_at(s)
        yaw = float(self.path.heading_at(s))
        return SimState(x=float(p[0]), y=float(p[1]), yaw=yaw)

    def to_dict(self):
        return {
            "track": {
                "name": self.track.name,
                "waypoints": self.track.waypoints.tolist(),
                "half_width": self.track.half_width,
                "material_layout": self.track.material_layout.tolist(),
            },
            "grid": self.grid.to_dict(),
            "materials": [
                {"id": m.id, "friction": m.friction, "embed_seed": m.embed_seed} for m in self.materials
            ],
            "vehicle": self.vehicle.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"track", "grid", "materials", "vehicle"}
        if unknown:
            raise ValueError(f"unknown world keys: {sorted(unknown)}")
        t = d["track"]
        track = TrackSpec(
            np.array(t["waypoints"]), t["half_width"], np.array(t["material_layout"]), t.get("name", "track")
        )
        grid = GridSpec(**d["grid"])
        materials = tuple(MaterialSpec(**m) for m in d.get("materials", [])) or DEFAULT_MATERIALS
        vehicle = VehicleParams.from_dict(d.get("vehicle", {}))
        return cls(track, grid, materials, vehicle)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# --- presets ---------------------------------------------------------------


def oval_waypoints(center=(6.0, 4.0), straight=6.0, radius=1.75, spacing=0.25):
    cx, cy = center
    half = straight / 2.0
    pts = []
    n_straight = int(round(straight / spacing))
    n_arc = int(round(np.pi * radius / spacing))
    for i in range(n_straight):
        pts.append((cx - half + i * spacing, cy - radius))
    for i in range(n_arc):
        a = -np.pi / 2 + np.pi * i / n_arc
        pts.append((cx + half + radius * np.cos(a), cy + radius * np.sin(a)))
    for i in range(n_straight):
        pts.append((cx + half - i * spacing, cy + radius))
    for i in range(n_arc):
        a = np.pi / 2 + np.pi * i / n_arc
        pts.append((cx - half + radius * np.cos(a), cy + radius * np.sin(a)))
    return np.array(pts)


def kidney_waypoints(center=(6.0, 4.0), spacing=0.25):
    """Closed loop with one inward dent; tighter curvature than the oval."""
    n = 400
    t = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    rx, ry = 4.2, 2.4
    dent = 0.9 * np.exp(-((np.angle(np.exp(1j * (t - np.pi / 2)))) ** 2) / 0.25)
    x = center[0] + rx * np.cos(t)
    y = center[1] + (ry - dent) * np.sin(t)
    pts = np.stack([x, y], axis=1)
    # resample at roughly uniform spacing
    d = np.hypot(*np.diff(np.vstack([pts, pts[:1]]), axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(d)])
    m = int(s[-1] / spacing)
    si = np.linspace(0.0, s[-1], m, endpoint=False)
    closed = np.vstack([pts, pts[:1]])
    return np.stack([np.interp(si, s, closed[:, 0]), np.interp(si, s, closed[:, 1])], axis=1)


def block_layout(n_rows, n_cols, block, n_materials, seed):
    """Random blocky material layout; every material appears at least once."""
    rng = np.random.default_rng(seed)
    br, bc = -(-n_rows // block), -(-n_cols // block)
    while True:
        blocks = rng.integers(0, n_materials, size=(br, bc))
        if len(np.unique(blocks)) == n_materials:
            break
    return np.kron(blocks, np.ones((block, block), dtype=np.int64))[:n_rows, :n_cols]


DEFAULT_GRID = GridSpec(origin_x=0.0, origin_y=0.0, cell_size=0.5, n_cols=24, n_rows=16)


def make_world(name="oval", layout_seed=0, block=4, grid=DEFAULT_GRID, half_width=0.6, materials=DEFAULT_MATERIALS):
    if name == "oval":
        wps = oval_waypoints()
    elif name == "kidney":
        wps = kidney_waypoints()
    else:
        raise ValueError(f"unknown track preset {name!r}")
    layout = block_layout(grid.n_rows, grid.n_cols, block, len(materials), layout_seed)
    return World(TrackSpec(wps, half_width, layout, name=f"{name}-{layout_seed}"), grid, materials)


def uniform_world(name="oval", material_id=2, grid=DEFAULT_GRID, half_width=0.6, materials=DEFAULT_MATERIALS):
    """Whole track on a single surface (the all-slippery case)."""
    wps = oval_waypoints() if name == "oval" else kidney_waypoints()
    layout = np.full((grid.n_rows, grid.n_cols), material_id, dtype=np.int64)
    return World(TrackSpec(wps, half_width, layout, name=f"{name}-uniform{material_id}"), grid, materials)


TRAIN_LAYOUT_SEEDS = (11, 12, 13)
TEST_LAYOUT_SEED = 99


def training_worlds(name="oval"):
    return [make_world(name, s) for s in TRAIN_LAYOUT_SEEDS]


def test_world(name="oval"):
    return make_world(name, TEST_LAYOUT_SEED)
