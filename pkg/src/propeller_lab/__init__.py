"""Desk-scale PROPELLER MRI reconstruction laboratory.

Simulation, gridding NUFFT, per-blade GRAPPA, coil-dimension MPPCA, blade
phase correction and a self-supervised unrolled reconstruction network.
"""
from .datamodel import (ContainerError, InvariantError, KSpaceDataset, NoisePrescan,
                        ReconConfig, read_dataset, write_dataset)
from .trajectory import BladeTrajectory, gen_propeller, subsample_blades

__version__ = "0.1.0"

__all__ = [
    "BladeTrajectory", "ContainerError", "InvariantError", "KSpaceDataset", "NoisePrescan",
    "ReconConfig", "gen_propeller", "read_dataset", "subsample_blades", "write_dataset",
]
