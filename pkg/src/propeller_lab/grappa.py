"""Per-blade Cartesian GRAPPA."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datamodel import KSpaceDataset


@dataclass(frozen=True)
class GrappaKernel:
    """Weights ``[target coil, gap offset, source coil, source line, tap]``.

    Gap offset ``o`` (0-based) synthesizes line ``t`` from source lines
    ``t - (o+1) + R*j`` for ``j`` in :attr:`line_offsets`.
    """

    R: int
    source_lines: int
    taps: int
    weights: np.ndarray
    edge: dict = field(default_factory=dict, repr=False)

    @property
    def line_offsets(self) -> np.ndarray:
        return np.arange(self.source_lines) - (self.source_lines - 1) // 2

    def __post_init__(self):
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("non-finite GRAPPA weights")
        if self.R > 1 and self.weights.shape[1] != self.R - 1:
            raise ValueError("kernel geometry inconsistent with R")


def _source_rows(R, source_lines):
    j = np.arange(source_lines) - (source_lines - 1) // 2
    return j * R


def _neighborhoods(data, line_idx, taps):
    """Source patches for each target position.

    ``data``: ``(C, L, N)``. ``line_idx``: ``(P, S)`` source line indices
    (``-1`` or out of range -> zero). Returns ``(P, N, C*S*taps)``.
    """
    C, L, N = data.shape
    h = taps // 2
    padded = np.zeros((C, L + 1, N + 2 * h), dtype=data.dtype)
    padded[:, :L, h:h + N] = data
    li = np.where((line_idx >= 0) & (line_idx < L), line_idx, L)    # L -> zero row
    rows = padded[:, li]                                             # (C, P, S, N+2h)
    win = np.lib.stride_tricks.sliding_window_view(rows, taps, axis=-1)  # (C,P,S,N,taps)
    return win.transpose(1, 3, 0, 2, 4).reshape(li.shape[0], N, -1)


def _fit(acs, R, o, rel, avail, T, lam):
    """Least-squares weights for gap offset ``o`` using source rows ``rel[avail]``."""
    C, L, N = acs.shape
    h = T // 2
    t = np.arange(L)
    t = t[(t - o + rel.min() >= 0) & (t - o + rel.max() < L)]
    idx = t[:, None] - o + rel[None, :]
    idx = np.where(avail[None, :], idx, -1)
    A = _neighborhoods(acs, idx, T)[:, h:N - h].reshape(len(t) * (N - 2 * h), C, len(rel), T)
    A = A[:, :, avail].reshape(A.shape[0], -1)
    B = acs[:, t, h:N - h].transpose(1, 2, 0).reshape(-1, C)
    if A.shape[0] < A.shape[1]:
        raise ValueError(f"underdetermined GRAPPA calibration: {A.shape[0]} equations, "
                         f"{A.shape[1]} unknowns")
    AhA = A.conj().T @ A
    scale = np.trace(AhA).real / AhA.shape[0]
    if scale == 0:
        raise ValueError("degenerate (all-zero) ACS data")
    X = np.linalg.solve(AhA + lam * scale * np.eye(AhA.shape[0]), A.conj().T @ B)
    w = np.zeros((C, C, len(rel), T), dtype=complex)
    w[:, :, avail] = X.T.reshape(C, C, int(avail.sum()), T)
    return w


def calibrate(acs, R: int, geometry=(2, 5), lam: float = 1e-4) -> GrappaKernel:
    """Fit GRAPPA weights on a fully sampled ACS block.

    Besides the full kernel, one variant is fitted for every way the source
    lines can be cut off by the blade edge; those positions are then filled
    from the remaining (zero-padded) neighborhood with weights calibrated for
    exactly that neighborhood.

    Parameters
    ----------
    acs : ndarray, shape ``(coils, lines, readout)``
    R : int
        In-blade acceleration.
    geometry : (source_lines, taps)
    lam : float
        Tikhonov damping relative to the mean eigenvalue of ``A^H A``.
    """
    acs = np.asarray(acs)
    S, T = geometry
    C, L, N = acs.shape
    if R == 1:
        return GrappaKernel(1, S, T, np.zeros((C, 0, C, S, T), dtype=complex))
    span = (S - 1) * R + 1
    if L < span:
        raise ValueError(f"need >= {span} ACS lines for R={R} with {S} source lines, got {L}")
    if T % 2 == 0:
        raise ValueError("taps must be odd")
    rel = _source_rows(R, S)
    weights = np.zeros((C, R - 1, C, S, T), dtype=complex)
    edge = {}
    for o in range(1, R):
        weights[:, o - 1] = _fit(acs, R, o, rel, np.ones(S, bool), T, lam)
        for bits in range(1, 2 ** S - 1):
            avail = np.array([(bits >> j) & 1 for j in range(S)], dtype=bool)
            # only contiguous truncations can occur at a blade edge
            if not (avail[0] or avail[-1]):
                continue
            try:
                edge[(o, tuple(avail))] = _fit(acs, R, o, rel, avail, T, lam)
            except ValueError:
                pass
    return GrappaKernel(R, S, T, weights, edge)


def synthesize(blade, pattern, kernel: GrappaKernel, center: int | None = None) -> np.ndarray:
    """Fill skipped lines of one blade.

    ``pattern`` marks acquired lines. Regular lines are those with
    ``(line - center) % R == 0`` (``center`` defaults to ``lines // 2``).
    Acquired lines are returned untouched.
    """
    blade = np.asarray(blade)
    pattern = np.asarray(pattern, dtype=bool)
    C, L, N = blade.shape
    if pattern.shape != (L,):
        raise ValueError("pattern length must equal the number of lines")
    R = kernel.R
    if R == 1:
        if not pattern.all():
            raise ValueError("R=1 kernel applied to an undersampled blade")
        return blade.copy()
    center = L // 2 if center is None else center
    lines = np.arange(L)
    regular = (lines - center) % R == 0
    if not np.all(pattern[regular]):
        raise ValueError(f"pattern does not contain the R={R} regular lattice")
    if kernel.weights.shape[0] != C:
        raise ValueError("kernel coil count does not match blade")
    out = blade.copy()
    missing = np.flatnonzero(~pattern)
    if missing.size == 0:
        return out
    rel = _source_rows(R, kernel.source_lines)
    off = (missing - center) % R                                      # 1..R-1
    # only regular-lattice lines act as sources, ACS extras are ignored
    lattice = blade * regular[None, :, None]
    for o in np.unique(off):
        tl = missing[off == o]
        idx = tl[:, None] - o + rel[None, :]
        avail = (idx >= 0) & (idx < L)
        for key in {tuple(a) for a in avail}:
            rows = np.all(avail == key, axis=1)
            if all(key):
                w = kernel.weights[:, o - 1]
            else:
                w = kernel.edge.get((o, key), kernel.weights[:, o - 1])
            nb = _neighborhoods(lattice, idx[rows], kernel.taps)     # (P, N, C*S*T)
            out[:, tl[rows], :] = np.einsum("pnk,ck->cpn", nb, w.reshape(C, -1))
    return out


def grappa_dataset(ds: KSpaceDataset, geometry=(2, 5), lam: float = 1e-4) -> KSpaceDataset:
    """Calibrate and synthesize every blade independently from its own ACS block."""
    traj = ds.trajectory
    R = traj.inblade_R
    out = ds.samples.astype(complex, copy=True)
    if R > 1:
        acs = traj.acs
        pattern = traj.inblade_pattern
        for b in range(ds.blades):
            kern = calibrate(ds.samples[b][:, acs, :], R, geometry, lam)
            out[b] = synthesize(ds.samples[b], pattern, kern, center=traj.lines_per_blade // 2)
    full = np.ones_like(ds.acquired_mask)
    return ds.replace(samples=out, acquired_mask=full)
