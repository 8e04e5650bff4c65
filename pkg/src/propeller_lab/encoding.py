"""Glue between blade-shaped datasets and flat NUFFT sample vectors."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import nufft
from .trajectory import BladeTrajectory, density_comp, pipe_menon


def flatten(samples) -> np.ndarray:
    """``(blade, coil, line, readout)`` -> ``(coil, blade*line*readout)``."""
    s = np.asarray(samples)
    return s.transpose(1, 0, 2, 3).reshape(s.shape[1], -1)


def unflatten(flat, shape) -> np.ndarray:
    nb, nc, nl, nr = shape
    return np.asarray(flat).reshape(nc, nb, nl, nr).transpose(1, 0, 2, 3)


@lru_cache(maxsize=32)
def _cached_plan(key, oversampling, width):
    traj = BladeTrajectory.from_params(dict(key))
    return nufft.plan(traj.kcoords, traj.matrix, oversampling, width)


def full_plan(traj: BladeTrajectory, oversampling: float = 2.0, width: int = 4) -> nufft.GridPlan:
    """Plan over every trajectory position (acquired or not), cached per geometry."""
    key = tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in traj.params().items()))
    return _cached_plan(key, float(oversampling), int(width))


class Encoding:
    """Multi-coil non-Cartesian encoding restricted to a sample subset.

    ``forward(x)`` maps an image to ``F(C x)`` on the selected samples and
    ``normal(x) = C^H F^H W F C x`` is the density-balanced Gram operator.
    """

    def __init__(self, plan: nufft.GridPlan, selection, weights, maps):
        self.selection = np.asarray(selection, dtype=bool).ravel()
        self.plan = plan.subset(self.selection)
        self.weights = np.asarray(weights, dtype=float)
        if self.weights.shape != (self.plan.nsamples,):
            raise ValueError("weights must match the selected sample count")
        self.maps = np.asarray(maps)

    @classmethod
    def build(cls, traj: BladeTrajectory, mask, maps, oversampling=2.0, width=4,
              dcf_width=6, dcf_iters=10) -> "Encoding":
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("empty sample selection")
        p = full_plan(traj, oversampling, width)
        pd = full_plan(traj, oversampling, dcf_width)
        sel = mask.ravel()
        w = pipe_menon(pd.subset(sel), dcf_iters)
        return cls(p, sel, w, maps)

    def gather(self, samples) -> np.ndarray:
        return flatten(samples)[:, self.selection]

    def forward(self, x) -> np.ndarray:
        return nufft.forward(self.plan, self.maps * x)

    def adjoint(self, y, weighted: bool = True) -> np.ndarray:
        img = nufft.adjoint(self.plan, y, self.weights if weighted else None)
        return np.sum(self.maps.conj() * img, axis=0)

    def normal(self, x) -> np.ndarray:
        return self.adjoint(self.forward(x))

    def coil_adjoint(self, y) -> np.ndarray:
        """Per-coil density-compensated adjoint images ``(coil, N, N)``."""
        return nufft.adjoint(self.plan, y, self.weights)


def dataset_weights(traj: BladeTrajectory, mask=None, oversampling=2.0, dcf_width=6, iters=10):
    return density_comp(traj, full_plan(traj, oversampling, dcf_width), iters, mask)
