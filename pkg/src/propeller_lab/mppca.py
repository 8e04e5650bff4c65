"""Marchenko-Pastur PCA denoising across coils and the blade-wise pre-GRAPPA pipeline."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import coiltools
from .datamodel import KSpaceDataset


@dataclass(frozen=True)
class PatchSpec:
    """Sliding patch geometry. Overlapping patch outputs are averaged."""

    height: int = 7
    width: int = 7
    stride: int = 1
    aggregation: str = "average_overlaps"

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("patch dimensions must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.aggregation != "average_overlaps":
            raise ValueError(f"unknown aggregation {self.aggregation!r}")

    @property
    def area(self) -> int:
        return self.height * self.width


def _mp_batch(s, rows, cols):
    """Vectorized threshold search; ``s`` is ``(..., n)`` descending."""
    s = np.asarray(s, dtype=float)
    M, n = max(rows, cols), min(rows, cols)
    if s.shape[-1] != n:
        raise ValueError(f"expected {n} singular values, got {s.shape[-1]}")
    lam = s ** 2 / M
    # trailing means: tail[..., p] = mean(lam[..., p:])
    csum = np.cumsum(lam[..., ::-1], axis=-1)[..., ::-1]
    tail = csum / np.arange(n, 0, -1)
    edge = tail * (1 + np.sqrt(n / M)) ** 2
    ok = lam <= edge
    ok[..., -1] = True                       # a single trailing value is always "bulk"
    rank = np.argmax(ok, axis=-1)
    sigma2 = np.take_along_axis(tail, rank[..., None], axis=-1)[..., 0]
    return rank, np.sqrt(sigma2)


def mp_threshold(singular_values, rows: int, cols: int):
    """Noise rank cut and noise level from a Marchenko-Pastur fit.

    With ``lam = s**2 / max(rows, cols)``, the smallest ``p`` is returned
    for which ``lam[p]`` lies below the upper bulk edge
    ``sigma2 * (1 + sqrt(min/max))**2`` where ``sigma2`` is the mean of
    ``lam[p:]``.

    Parameters
    ----------
    singular_values : array_like
        Descending, nonnegative, length ``min(rows, cols)``.
    rows, cols : int
        Shape of the decomposed matrix.

    Returns
    -------
    rank : int
        Number of components above the noise bulk.
    sigma_hat : float
        Estimated per-entry noise standard deviation.
    """
    s = np.asarray(singular_values, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("singular_values must be a non-empty 1-D array")
    if np.any(s < 0) or np.any(np.diff(s) > 0):
        raise ValueError("singular values must be nonnegative and sorted descending")
    rank, sigma = _mp_batch(s, rows, cols)
    return int(rank), float(sigma)


def _starts(size, patch, stride):
    st = list(range(0, size - patch + 1, stride))
    if st[-1] != size - patch:
        st.append(size - patch)
    return np.asarray(st)


def denoise_coil_stack(coil_images, spec: PatchSpec = PatchSpec(), return_rank: bool = False):
    """Patch-wise MPPCA over the coil dimension.

    Each patch forms a ``(pixels, coils)`` Casorati matrix whose complex SVD
    is truncated at the :func:`mp_threshold` rank.

    Parameters
    ----------
    coil_images : ndarray, shape ``(coils, H, W)``
    spec : PatchSpec
    return_rank : bool
        Also return the per-patch ranks, shape ``(ny, nx)``.
    """
    x = np.asarray(coil_images)
    if x.ndim != 3:
        raise ValueError("coil_images must be (coils, H, W)")
    C, H, W = x.shape
    if C < 2:
        raise ValueError("MPPCA needs at least 2 coils")
    ph, pw = spec.height, spec.width
    if ph > H or pw > W:
        raise ValueError(f"patch {ph}x{pw} larger than image {H}x{W}")
    if spec.area < C:
        warnings.warn(f"patch area {spec.area} < {C} coils", RuntimeWarning, stacklevel=2)
    ys, xs = _starts(H, ph, spec.stride), _starts(W, pw, spec.stride)
    win = np.lib.stride_tricks.sliding_window_view(x, (ph, pw), axis=(1, 2))  # (C,H',W',ph,pw)
    cas = win[:, ys][:, :, xs]                                   # (C, ny, nx, ph, pw)
    cas = cas.transpose(1, 2, 3, 4, 0).reshape(len(ys), len(xs), ph * pw, C)
    u, s, vh = np.linalg.svd(cas, full_matrices=False)
    rank, _ = _mp_batch(s, ph * pw, C)
    keep = np.arange(s.shape[-1]) < rank[..., None]
    den = (u * np.where(keep, s, 0)[..., None, :]) @ vh          # (ny, nx, P, C)
    den = den.reshape(len(ys), len(xs), ph, pw, C)
    acc = np.zeros((C, H, W), dtype=np.result_type(x.dtype, np.complex128))
    cnt = np.zeros((H, W))
    for i, y0 in enumerate(ys):                                  # fixed raster order
        for j, x0 in enumerate(xs):
            acc[:, y0:y0 + ph, x0:x0 + pw] += np.moveaxis(den[i, j], -1, 0)
            cnt[y0:y0 + ph, x0:x0 + pw] += 1
    out = acc / cnt
    if not np.iscomplexobj(x):
        out = out.real
    return (out, rank) if return_rank else out


def _blade_to_image(kb):
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(kb, axes=(-2, -1)), norm="ortho"),
                           axes=(-2, -1))


def _image_to_blade(im):
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(im, axes=(-2, -1)), norm="ortho"),
                           axes=(-2, -1))


def figure2_pipeline(ds: KSpaceDataset, psi=None, spec: PatchSpec = PatchSpec()) -> KSpaceDataset:
    """Denoise each blade in its reduced-FOV coil image domain.

    Per blade: centered inverse FFT of the zero-filled blade, whitening with
    ``psi`` (identity if ``None``), :func:`denoise_coil_stack`, unwhitening,
    forward FFT, then every never-acquired position is zeroed again. ACS and
    regular lines carry the denoised values.
    """
    C = ds.coils
    psi = np.eye(C) if psi is None else np.asarray(psi)
    mask = ds.acquired_mask
    out = np.empty(ds.samples.shape, dtype=complex)
    for b in range(ds.blades):
        img = _blade_to_image(ds.samples[b])                    # (C, L, N)
        img = coiltools.whiten(img, psi, axis=0)
        img = denoise_coil_stack(img, spec)
        img = coiltools.unwhiten(img, psi, axis=0)
        out[b] = _image_to_blade(img) * mask[b][None]
    return ds.replace(samples=out)
