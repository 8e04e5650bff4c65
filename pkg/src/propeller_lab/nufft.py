"""Kaiser-Bessel gridding NUFFT and an exact direct-DFT oracle.

Images are ``N x N`` with pixel ``(y, x)`` at centered position
``(y - N//2, x - N//2)``. A sample at ``k = (kx, ky)`` (cycles/pixel) is

    s(k) = sum_r image[r] * exp(-2j*pi*(kx*x_r + ky*y_r))

so the forward transform is periodic in ``k`` with period 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy import integrate
from scipy.special import i0

LUT_PER_UNIT = 1024


def kb_beta(oversampling: float, width: int) -> float:
    """Beatty et al. (2005) near-optimal Kaiser-Bessel shape parameter."""
    a = (width / oversampling) ** 2 * (oversampling - 0.5) ** 2 - 0.8
    return float(np.pi * np.sqrt(a))


def _kb_exact(u, width, beta):
    u = np.abs(np.asarray(u, dtype=float))
    arg = 1.0 - (2.0 * u / width) ** 2
    out = i0(beta * np.sqrt(np.clip(arg, 0.0, None)))
    return np.where(arg >= 0, out, 0.0)


def _kb_hat(nu, width, beta):
    """Continuous Fourier transform of the (un-normalized) kernel."""
    z = np.sqrt((beta ** 2 - (np.pi * width * np.asarray(nu, dtype=float)) ** 2).astype(complex))
    small = np.abs(z) < 1e-8
    z = np.where(small, 1.0, z)
    val = np.where(small, 1.0, np.sinh(z) / z)
    return width * val.real


@dataclass(frozen=True, eq=False)
class GridPlan:
    """Precomputed gridding state bound to a set of sample coordinates."""

    matrix: int
    grid: int
    kernel_width: int
    beta: float
    oversampling: float
    apod: np.ndarray
    interp: sp.csr_matrix
    coords: np.ndarray

    @property
    def nsamples(self) -> int:
        return self.interp.shape[0]

    @cached_property
    def interp_h(self) -> sp.csr_matrix:
        return self.interp.T.tocsr()

    @cached_property
    def density_scale(self) -> float:
        """Factor mapping raw Pipe-Menon weights to ``1/N**2`` on a full grid."""
        s1, _ = integrate.quad(_kb_exact, -self.kernel_width / 2, self.kernel_width / 2,
                               args=(self.kernel_width, self.beta))
        return s1 ** 4 / self.grid ** 2

    def stencil(self, m: int):
        """Grid indices ``(iy, ix)`` and weights of sample ``m``."""
        row = self.interp.getrow(m)
        idx = row.indices
        return idx // self.grid, idx % self.grid, row.data

    def subset(self, keep) -> "GridPlan":
        """Plan restricted to the samples selected by a boolean mask or index array."""
        keep = np.asarray(keep)
        rows = np.flatnonzero(keep) if keep.dtype == bool else keep
        return GridPlan(self.matrix, self.grid, self.kernel_width, self.beta, self.oversampling,
                        self.apod, self.interp[rows], self.coords[rows])


def plan(coords, matrix: int, oversampling: float = 2.0, kernel_width: int = 4) -> GridPlan:
    """Build a gridding plan for sample coordinates of shape ``(..., 2)``."""
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    if np.any(coords < -0.5) or np.any(coords >= 0.5):
        raise ValueError("coordinates must lie in [-0.5, 0.5)")
    if oversampling < 1.25:
        raise ValueError("oversampling must be >= 1.25")
    if kernel_width < 2:
        raise ValueError("kernel_width must be >= 2")
    W = int(kernel_width)
    G = int(np.ceil(oversampling * matrix))
    G += G % 2
    beta = kb_beta(G / matrix, W)

    table = _kb_exact(np.arange(W * LUT_PER_UNIT // 2 + 2) / LUT_PER_UNIT, W, beta)

    def kernel(d):
        t = np.abs(d) * LUT_PER_UNIT
        j = np.floor(t).astype(np.int64)
        f = t - j
        j = np.minimum(j, table.size - 2)
        return table[j] * (1 - f) + table[j + 1] * f

    g = coords * G
    start = np.ceil(g - W / 2).astype(np.int64)            # (M, 2)
    offs = np.arange(W)
    nodes = start[:, :, None] + offs                        # (M, 2, W)
    wts = kernel(g[:, :, None] - nodes)
    ix = np.mod(nodes[:, 0], G)
    iy = np.mod(nodes[:, 1], G)
    cols = (iy[:, :, None] * G + ix[:, None, :]).reshape(len(g), -1)
    vals = (wts[:, 1, :, None] * wts[:, 0, None, :]).reshape(len(g), -1)
    M = len(g)
    indptr = np.arange(M + 1) * W * W
    interp = sp.csr_matrix((vals.ravel(), cols.ravel(), indptr), shape=(M, G * G))
    interp.sum_duplicates()  # only merges when W > G, harmless otherwise

    pos = (np.arange(matrix) - matrix // 2) / G
    c1 = _kb_hat(pos, W, beta)
    apod = 1.0 / np.outer(c1, c1)
    return GridPlan(matrix, G, W, beta, G / matrix, apod, interp, coords)


def _check_image(plan: GridPlan, image):
    image = np.asarray(image)
    if image.shape[-2:] != (plan.matrix, plan.matrix):
        raise ValueError(f"image shape {image.shape} does not match plan matrix {plan.matrix}")
    return image


def _embed(plan: GridPlan, image):
    N, G = plan.matrix, plan.grid
    idx = np.mod(np.arange(N) - N // 2, G)
    grid = np.zeros(image.shape[:-2] + (G, G), dtype=complex)
    grid[..., idx[:, None], idx[None, :]] = image * plan.apod
    return grid


def forward(plan: GridPlan, image) -> np.ndarray:
    """Image(s) ``(..., N, N)`` to samples ``(..., M)``."""
    image = _check_image(plan, image)
    lead = image.shape[:-2]
    kgrid = np.fft.fft2(_embed(plan, image)).reshape(-1, plan.grid ** 2)
    out = (plan.interp @ kgrid.T).T
    return out.reshape(lead + (plan.nsamples,))


def adjoint(plan: GridPlan, samples, weights=None) -> np.ndarray:
    """Samples ``(..., M)`` to image(s) ``(..., N, N)``; exact adjoint of :func:`forward`.

    ``weights`` (length ``M``) multiplies the samples before spreading.
    """
    samples = np.asarray(samples)
    if samples.shape[-1] != plan.nsamples:
        raise ValueError(f"expected {plan.nsamples} samples, got {samples.shape[-1]}")
    if weights is not None:
        samples = samples * np.asarray(weights)
    lead = samples.shape[:-1]
    G, N = plan.grid, plan.matrix
    flat = samples.reshape(-1, plan.nsamples)
    grid = (plan.interp_h @ flat.T).T.reshape(-1, G, G)
    img = np.fft.ifft2(grid, norm="forward")
    idx = np.mod(np.arange(N) - N // 2, G)
    img = img[..., idx[:, None], idx[None, :]] * plan.apod
    return img.reshape(lead + (N, N))


def _dft_matrices(coords, matrix):
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    r = np.arange(matrix) - matrix // 2
    ex = np.exp(-2j * np.pi * coords[:, 0:1] * r[None, :])
    ey = np.exp(-2j * np.pi * coords[:, 1:2] * r[None, :])
    return ex, ey


def direct_dft(coords, image) -> np.ndarray:
    """Exact non-uniform DFT of ``image`` (``(..., N, N)``) at ``coords``."""
    image = np.asarray(image)
    N = image.shape[-1]
    if image.shape[-2] != N:
        raise ValueError("direct_dft expects square images")
    ex, ey = _dft_matrices(coords, N)
    # s[m] = sum_y ey[m,y] * sum_x image[y,x] ex[m,x]
    t = np.einsum("...yx,mx->...my", image, ex)
    return np.einsum("...my,my->...m", t, ey)


def direct_dft_adjoint(coords, samples, matrix: int) -> np.ndarray:
    """Exact adjoint of :func:`direct_dft`."""
    ex, ey = _dft_matrices(coords, matrix)
    samples = np.asarray(samples)
    return np.einsum("...m,my,mx->...yx", samples, ey.conj(), ex.conj())


def opnorm(plan: GridPlan, weights=None, iters: int = 50, seed: int = 0) -> float:
    """Largest eigenvalue of ``adjoint(w * forward(.))`` by power iteration."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((plan.matrix, plan.matrix)) + 0j
    lam = 0.0
    for _ in range(iters):
        x = x / np.linalg.norm(x)
        y = adjoint(plan, forward(plan, x), weights)
        lam = float(np.vdot(x, y).real)
        x = y
    return lam
