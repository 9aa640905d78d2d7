"""Map matching for sparse GPS trajectories.

Two matchers over a shared road-network core: a classical HMM/Viterbi
baseline and a one-step conditional shortcut-diffusion model, plus a
synthetic-data harness for desk-scale verification.
"""

__version__ = "0.1.0"

from .geo import GeoPoint, Projection, haversine_distance, project_to_segment
from .network import RoadNetwork, RoadSegment, SpatialIndex, load_network
from .data import (GpsPoint, Trajectory, MatchedTrajectory, DatasetSplit,
                   generate_synthetic, sparsify, split_dataset)

__all__ = [
    "GeoPoint", "Projection", "haversine_distance", "project_to_segment",
    "RoadNetwork", "RoadSegment", "SpatialIndex", "load_network",
    "GpsPoint", "Trajectory", "MatchedTrajectory", "DatasetSplit",
    "generate_synthetic", "sparsify", "split_dataset",
]
