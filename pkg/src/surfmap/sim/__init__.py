"""Ground-truth simulator: vehicle, world, sensors, expert driver, data collection."""
from .dataset import Dataset, Transition, collect_dataset, make_transition
from .expert import ExpertDriver, expert_driver
from .sensors import SensorBundle, SensorHistory, render_sensors
from .vehicle import Action, SimState, VehicleParams, sim_step
from .world import MaterialSpec, TrackSpec, World, make_world, test_world, training_worlds

__all__ = [
    "Action", "Dataset", "ExpertDriver", "MaterialSpec", "SensorBundle", "SensorHistory",
    "SimState", "TrackSpec", "Transition", "VehicleParams", "World", "collect_dataset",
    "expert_driver", "make_transition", "make_world", "render_sensors", "sim_step",
    "test_world", "training_worlds",
]
