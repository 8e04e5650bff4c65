"""PROPELLER blade trajectories and Pipe-Menon density compensation.

k-space coordinates are in cycles/pixel, i.e. cycles/FOV divided by the
matrix size, wrapped into ``[-0.5, 0.5)``. Blade 0 is a Cartesian strip with
readout along ``kx`` and phase-encode lines along ``ky``; blade ``b`` is blade
0 rotated by ``angles[b]``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


def wrap(k):
    """Wrap coordinates into ``[-0.5, 0.5)`` (exact for an integer-grid image)."""
    return np.mod(np.asarray(k) + 0.5, 1.0) - 0.5


@dataclass(frozen=True)
class BladeTrajectory:
    """Geometry of a PROPELLER acquisition.

    ``kcoords`` has shape ``(nblades, lines_per_blade, readout, 2)`` holding
    ``(kx, ky)``. ``inblade_pattern`` and ``acs`` are boolean per line.
    """

    matrix: int
    lines_per_blade: int
    readout: int
    inblade_R: int
    acs_lines: int
    blade_indices: tuple
    base_nblades: int

    def __post_init__(self):
        if self.lines_per_blade % 2:
            raise ValueError("lines_per_blade must be even")
        if not 0 <= self.acs_lines < self.lines_per_blade:
            raise ValueError("acs_lines must be in [0, lines_per_blade)")
        if self.inblade_R not in (1, 2, 3, 4):
            raise ValueError("inblade_R must be 1, 2, 3 or 4")
        if len(self.blade_indices) < 1:
            raise ValueError("trajectory needs at least one blade")

    @property
    def nblades(self) -> int:
        return len(self.blade_indices)

    @property
    def angles(self) -> np.ndarray:
        return np.asarray(self.blade_indices, dtype=float) * np.pi / self.base_nblades

    def blade0(self) -> np.ndarray:
        """Unrotated blade coordinates, shape ``(lines, readout, 2)``."""
        ky = (np.arange(self.lines_per_blade) - self.lines_per_blade // 2) / self.matrix
        kx = (np.arange(self.readout) - self.readout // 2) / self.matrix
        out = np.empty((self.lines_per_blade, self.readout, 2))
        out[..., 0] = kx[None, :]
        out[..., 1] = ky[:, None]
        return out

    @property
    def kcoords(self) -> np.ndarray:
        b0 = self.blade0()
        c, s = np.cos(self.angles), np.sin(self.angles)
        kx = c[:, None, None] * b0[None, ..., 0] - s[:, None, None] * b0[None, ..., 1]
        ky = s[:, None, None] * b0[None, ..., 0] + c[:, None, None] * b0[None, ..., 1]
        return wrap(np.stack([kx, ky], axis=-1))

    @property
    def acs(self) -> np.ndarray:
        acs = np.zeros(self.lines_per_blade, dtype=bool)
        if self.acs_lines:
            start = self.lines_per_blade // 2 - self.acs_lines // 2
            acs[start:start + self.acs_lines] = True
        return acs

    @property
    def inblade_pattern(self) -> np.ndarray:
        lines = np.arange(self.lines_per_blade)
        regular = (lines - self.lines_per_blade // 2) % self.inblade_R == 0
        return regular | self.acs

    def sample_mask(self) -> np.ndarray:
        """Acquired positions, shape ``(nblades, lines, readout)``."""
        m = np.broadcast_to(self.inblade_pattern[None, :, None],
                            (self.nblades, self.lines_per_blade, self.readout))
        return m.copy()

    def params(self) -> dict:
        return {
            "matrix": self.matrix,
            "lines_per_blade": self.lines_per_blade,
            "readout": self.readout,
            "inblade_R": self.inblade_R,
            "acs_lines": self.acs_lines,
            "blade_indices": list(self.blade_indices),
            "base_nblades": self.base_nblades,
        }

    @classmethod
    def from_params(cls, p: dict) -> "BladeTrajectory":
        p = dict(p)
        p["blade_indices"] = tuple(int(i) for i in p["blade_indices"])
        return cls(**p)


def gen_propeller(matrix: int, nblades: int, lines_per_blade: int, inblade_R: int = 1,
                  acs_lines: int = 0, readout: int | None = None) -> BladeTrajectory:
    """Uniformly rotated PROPELLER trajectory over 180 degrees.

    Every ``inblade_R``-th phase-encode line is kept (aligned so the central
    line is acquired) together with a centered block of ``acs_lines`` fully
    sampled lines.
    """
    if nblades < 1:
        raise ValueError("nblades must be >= 1")
    readout = matrix if readout is None else readout
    traj = BladeTrajectory(matrix=matrix, lines_per_blade=lines_per_blade, readout=readout,
                           inblade_R=inblade_R, acs_lines=acs_lines,
                           blade_indices=tuple(range(nblades)), base_nblades=nblades)
    # Rough coverage rule: blade width should reach pi/2 * N / nblades lines.
    if lines_per_blade * nblades < np.pi / 2 * matrix:
        warnings.warn(f"{nblades} blades x {lines_per_blade} lines undersamples the k-space periphery",
                      stacklevel=2)
    return traj


def subsample_blades(traj: BladeTrajectory, factor: int) -> BladeTrajectory:
    """Keep blades ``0, factor, 2*factor, ...`` (cross-blade undersampling)."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    keep = traj.blade_indices[::factor]
    return BladeTrajectory(matrix=traj.matrix, lines_per_blade=traj.lines_per_blade,
                           readout=traj.readout, inblade_R=traj.inblade_R,
                           acs_lines=traj.acs_lines, blade_indices=tuple(keep),
                           base_nblades=traj.base_nblades)


def pipe_menon(plan, iters: int = 10, eps: float = 1e-12) -> np.ndarray:
    """Pipe-Menon weights for every sample bound to ``plan``.

    Iterates ``w <- w / (G G^H w)`` with ``G`` the gridding interpolator, then
    rescales so a uniformly sampled Cartesian grid gets ``1 / N**2`` per
    sample, i.e. ``adjoint(w * forward(x)) ~= x``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    P = plan.interp
    if P.shape[0] == 0:
        raise ValueError("density compensation needs at least one sample")
    PH = plan.interp_h
    w = np.ones(P.shape[0])
    for _ in range(iters):
        d = P @ (PH @ w)
        w = w / np.maximum(np.abs(d), eps)
    return w * plan.density_scale


def density_comp(traj: BladeTrajectory, plan, iters: int = 10, mask=None) -> np.ndarray:
    """Density compensation weights, shape ``(nblades, lines, readout)``.

    ``plan`` must be bound to all trajectory positions in C order. Positions
    outside ``mask`` (default: the acquisition pattern) get weight 0.
    """
    mask = traj.sample_mask() if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("density compensation of an all-zero mask")
    flat = mask.ravel()
    w = np.zeros(flat.size)
    w[flat] = pipe_menon(plan.subset(flat), iters)
    return w.reshape(mask.shape)
