"""Noise covariance, whitening, Walsh combination and low-res sensitivity maps."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import nufft
from .datamodel import KSpaceDataset, NoisePrescan
from .encoding import flatten
from .trajectory import pipe_menon


def estimate_covariance(prescan: NoisePrescan) -> np.ndarray:
    """Sample coil covariance ``(1/n) sum n n^H``, Hermitian-symmetrized."""
    n = np.asarray(prescan.samples)
    psi = n @ n.conj().T / n.shape[1]
    psi = 0.5 * (psi + psi.conj().T)
    # eigvalsh is scale-aware; a tolerance relative to the largest eigenvalue
    ev = np.linalg.eigvalsh(psi)
    if ev[0] <= ev[-1] * 1e-10 or ev[-1] <= 0:
        raise np.linalg.LinAlgError("rank-deficient noise covariance estimate")
    return psi


def _chol(psi):
    try:
        return np.linalg.cholesky(np.asarray(psi))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("noise covariance is not positive definite") from exc


def whiten(data, psi, axis: int = 0) -> np.ndarray:
    """Apply ``L^{-1}`` along the coil axis where ``psi = L L^H``."""
    L = _chol(psi)
    d = np.moveaxis(np.asarray(data), axis, 0)
    shp = d.shape
    out = np.linalg.solve(L, d.reshape(shp[0], -1))
    return np.moveaxis(out.reshape(shp), 0, axis)


def unwhiten(data, psi, axis: int = 0) -> np.ndarray:
    """Inverse of :func:`whiten`: apply ``L`` along the coil axis."""
    L = _chol(psi)
    d = np.moveaxis(np.asarray(data), axis, 0)
    shp = d.shape
    out = L @ d.reshape(shp[0], -1)
    return np.moveaxis(out.reshape(shp), 0, axis)


def whiten_dataset(ds: KSpaceDataset, psi) -> KSpaceDataset:
    return ds.replace(samples=whiten(ds.samples, psi, axis=1))


def unwhiten_dataset(ds: KSpaceDataset, psi) -> KSpaceDataset:
    return ds.replace(samples=unwhiten(ds.samples, psi, axis=1))


def walsh_combine(coil_images, block: int = 7, return_weights: bool = False):
    """Adaptive (Walsh) coil combination.

    The combination weights at each pixel are the principal eigenvector of
    the ``block x block`` local coil correlation matrix, phase-referenced to
    coil 0.

    Parameters
    ----------
    coil_images : ndarray, shape ``(coils, H, W)``
    block : int
        Odd neighborhood size.
    """
    imgs = np.asarray(coil_images)
    if imgs.ndim != 3:
        raise ValueError("coil_images must be (coils, H, W)")
    if block < 1 or block % 2 == 0:
        raise ValueError("block must be odd and >= 1")
    C = imgs.shape[0]
    R = imgs[:, None] * imgs[None].conj()                      # (C, C, H, W)
    if block > 1:
        R = (ndimage.uniform_filter(R.real, size=(1, 1, block, block), mode="constant")
             + 1j * ndimage.uniform_filter(R.imag, size=(1, 1, block, block), mode="constant"))
    R = np.moveaxis(R, (0, 1), (-2, -1))                        # (H, W, C, C)
    _, vecs = np.linalg.eigh(R)
    v = vecs[..., :, -1]                                        # (H, W, C)
    ref = v[..., 0]
    v = v * np.exp(-1j * np.angle(ref))[..., None]
    v = np.moveaxis(v, -1, 0)
    out = np.sum(v.conj() * imgs, axis=0)
    # all-zero neighborhoods have an arbitrary eigenvector; force 0 output
    out = np.where(np.abs(R).sum(axis=(-2, -1)) > 0, out, 0)
    return (out, v) if return_weights else out


def rss(coil_images, axis: int = 0) -> np.ndarray:
    return np.sqrt(np.sum(np.abs(np.asarray(coil_images)) ** 2, axis=axis))


def central_selection(ds: KSpaceDataset, radius: float) -> np.ndarray:
    k = ds.trajectory.kcoords
    return (np.hypot(k[..., 0], k[..., 1]) < radius) & ds.acquired_mask


def default_radius(traj) -> float:
    """Half the blade half-width, in cycles/pixel."""
    return 0.5 * (traj.lines_per_blade / 2) / traj.matrix


def estimate_sens_lowres(ds: KSpaceDataset, plan: nufft.GridPlan, radius: float | None = None,
                         smoothing: float = 1.0, support_threshold: float = 0.05,
                         dcf_plan: nufft.GridPlan | None = None) -> np.ndarray:
    """Normalized coil maps from the fully sampled k-space center.

    Samples with ``|k| < radius`` are triangular-windowed, density
    compensated and gridded per coil; the low-res coil images are smoothed and
    divided by their root-sum-of-squares. Pixels whose RSS falls below
    ``support_threshold`` of its maximum are set to zero.

    ``plan`` must be bound to every trajectory position of ``ds``.
    """
    traj = ds.trajectory
    radius = default_radius(traj) if radius is None else radius
    if radius <= 0:
        raise ValueError("radius must be positive")
    sel = central_selection(ds, radius)
    if not sel.any():
        raise ValueError("no acquired samples inside the central radius")
    flat = sel.ravel()
    sub = plan.subset(flat)
    w = pipe_menon((dcf_plan or plan).subset(flat), 10)
    kr = np.hypot(*sub.coords.T)
    w = w * (1 - kr / radius)
    y = flatten(ds.samples)[:, flat]
    low = nufft.adjoint(sub, y, w)
    if smoothing > 0:
        low = (ndimage.gaussian_filter(low.real, (0, smoothing, smoothing))
               + 1j * ndimage.gaussian_filter(low.imag, (0, smoothing, smoothing)))
    r = rss(low)
    support = r > support_threshold * r.max()
    maps = np.where(support, low / np.where(support, r, 1.0), 0)
    return maps
