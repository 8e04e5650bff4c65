"""Ground-truth phantoms, coil maps, exact k-space simulation and corruptions."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .datamodel import KSpaceDataset, NoisePrescan
from .nufft import direct_dft

# Modified Shepp-Logan (Toft): intensity, a, b, x0, y0, phi(deg)
SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


@dataclass(frozen=True)
class Ellipse:
    """Ellipse in normalized coordinates ``[-1, 1]^2`` with additive intensity."""

    center: tuple
    axes: tuple
    angle: float = 0.0  # degrees
    intensity: float = 1.0


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for a ground-truth image.

    ``texture`` adds seeded, smoothed structure inside the outermost ellipse;
    ``lesions`` are small low-contrast discs ``(x, y, radius, contrast)``.
    ``smoothing`` is a Gaussian blur (pixels) applied last so that the truth is
    nearly band-limited to the disk PROPELLER actually samples.
    """

    matrix: int = 64
    ellipses: tuple = ()
    texture_seed: int | None = None
    texture_amplitude: float = 0.0
    lesions: tuple = ()
    smoothing: float = 0.0
    supersample: int = 4

    @classmethod
    def shepp_logan(cls, matrix: int = 64, **kw) -> "PhantomSpec":
        ell = tuple(Ellipse((x, y), (a, b), phi, v) for v, a, b, x, y, phi in SHEPP_LOGAN)
        return cls(matrix=matrix, ellipses=ell, **kw)

    @classmethod
    def random(cls, matrix: int = 64, seed: int = 0, smoothing: float = 0.6) -> "PhantomSpec":
        """Seeded Shepp-Logan-like variant used for training/evaluation suites."""
        rng = np.random.default_rng(seed)
        ell = []
        for v, a, b, x, y, phi in SHEPP_LOGAN:
            # sizes stay <= nominal so the object fits the inscribed circle
            s = rng.uniform(0.8, 1.0)
            ell.append(Ellipse(
                (x + rng.uniform(-0.03, 0.03), y + rng.uniform(-0.03, 0.03)),
                (a * s, b * rng.uniform(0.8, 1.0)),
                phi + rng.uniform(-10, 10),
                v * (rng.uniform(0.7, 1.3) if abs(v) < 0.5 else 1.0)))
        lesions = tuple((rng.uniform(-0.4, 0.4), rng.uniform(-0.5, 0.5), rng.uniform(0.04, 0.09),
                         rng.uniform(0.05, 0.15)) for _ in range(rng.integers(1, 4)))
        return cls(matrix=matrix, ellipses=tuple(ell), texture_seed=int(rng.integers(2**31)),
                   texture_amplitude=0.05, lesions=lesions, smoothing=smoothing)


def _rasterize(spec: PhantomSpec) -> np.ndarray:
    N, ss = spec.matrix, max(1, spec.supersample)
    # pixel centers at (i - N//2) mapped so the phantom fills [-1, 1)
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    r = np.arange(N) - N // 2
    c = ((r[:, None] + offs[None, :]).ravel()) / (N / 2)
    X, Y = np.meshgrid(c, -c)  # image rows run top to bottom
    img = np.zeros_like(X)
    for e in spec.ellipses:
        th = np.deg2rad(e.angle)
        dx, dy = X - e.center[0], Y - e.center[1]
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        img += e.intensity * ((u / e.axes[0]) ** 2 + (v / e.axes[1]) ** 2 <= 1.0)
    for x0, y0, rad, con in spec.lesions:
        img += con * ((X - x0) ** 2 + (Y - y0) ** 2 <= rad ** 2) * (img > 0.05)
    return img.reshape(N, ss, N, ss).mean(axis=(1, 3))


def make_phantom(spec: PhantomSpec) -> np.ndarray:
    """Real-valued ground truth in ``[0, 1]``, deterministic given ``spec``."""
    from scipy import ndimage

    if spec.matrix < 2:
        raise ValueError("matrix must be >= 2")
    img = _rasterize(spec)
    if spec.texture_seed is not None and spec.texture_amplitude > 0 and spec.ellipses:
        rng = np.random.default_rng(spec.texture_seed)
        tex = ndimage.gaussian_filter(rng.standard_normal(img.shape), 2.0, mode="wrap")
        tex /= np.abs(tex).max() + 1e-12
        support = img > 0.05
        img = img + spec.texture_amplitude * tex * support
    if spec.smoothing > 0:
        img = ndimage.gaussian_filter(img, spec.smoothing, mode="constant")
    img = np.clip(img, 0.0, None)
    peak = img.max()
    return img / peak if peak > 0 else img


def make_coil_maps(coils: int, matrix: int, profile: str = "gaussian_ring",
                   width: float = 0.9, ring_radius: float = 1.2) -> np.ndarray:
    """Smooth complex sensitivities, shape ``(coils, matrix, matrix)``.

    Coil ``c`` sits at angle ``2*pi*c/coils`` on a ring outside the field of
    view with a Gaussian magnitude profile and a gentle linear phase. Maps are
    normalized to unit root-sum-of-squares so a perfect coil combination
    returns the object itself.
    """
    if coils < 1:
        raise ValueError("coils must be >= 1")
    if profile != "gaussian_ring":
        raise ValueError(f"unknown coil profile {profile!r}")
    r = (np.arange(matrix) - matrix // 2) / (matrix / 2)
    X, Y = np.meshgrid(r, -r)
    maps = np.empty((coils, matrix, matrix), dtype=complex)
    for c in range(coils):
        if coils == 1:
            mag = np.ones_like(X)
            ang = 0.0
        else:
            ang = 2 * np.pi * c / coils
            cx, cy = ring_radius * np.cos(ang), ring_radius * np.sin(ang)
            mag = np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * width ** 2))
        phase = 0.5 * (np.cos(ang) * Y - np.sin(ang) * X) + 0.3 * c
        maps[c] = mag * np.exp(1j * phase)
    rss = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return maps / rss


def simulate_kspace(image, maps, traj, meta: dict | None = None) -> KSpaceDataset:
    """Exact multi-coil k-space along ``traj`` by direct summation."""
    image = np.asarray(image)
    maps = np.asarray(maps)
    if maps.ndim != 3 or maps.shape[1:] != image.shape or image.shape != (traj.matrix, traj.matrix):
        raise ValueError(f"image {image.shape}, maps {maps.shape} and matrix {traj.matrix} disagree")
    coils = maps.shape[0]
    k = traj.kcoords
    nb, nl, nr = k.shape[:3]
    pattern = traj.inblade_pattern
    samples = np.zeros((nb, coils, nl, nr), dtype=complex)
    coil_imgs = maps * image[None]
    for b in range(nb):
        kb = k[b][pattern].reshape(-1, 2)
        s = direct_dft(kb, coil_imgs)
        samples[b][:, pattern, :] = s.reshape(coils, -1, nr)
    return KSpaceDataset(samples=samples, acquired_mask=traj.sample_mask(), trajectory=traj,
                         meta=dict(meta or {}))


def _check_psi(psi):
    psi = np.asarray(psi)
    if psi.ndim != 2 or psi.shape[0] != psi.shape[1]:
        raise ValueError("psi must be a square matrix")
    if not np.allclose(psi, psi.conj().T, atol=1e-12):
        raise ValueError("psi must be Hermitian")
    try:
        return np.linalg.cholesky(psi)
    except np.linalg.LinAlgError as exc:
        raise ValueError("psi must be positive definite") from exc


def make_psi(coils: int, correlation: float = 0.3, seed: int = 0) -> np.ndarray:
    """Hermitian positive-definite coil noise covariance with unit-ish diagonal.

    Off-diagonal entries decay as ``correlation**|i-j|`` with a seeded phase.
    """
    rng = np.random.default_rng(seed)
    idx = np.arange(coils)
    mag = correlation ** np.abs(idx[:, None] - idx[None, :])
    ph = rng.uniform(-np.pi, np.pi, (coils, coils))
    ph = np.triu(ph, 1)
    ph = ph - ph.T
    diag = rng.uniform(0.8, 1.2, coils)
    psi = mag * np.exp(1j * ph) * np.sqrt(np.outer(diag, diag))
    return 0.5 * (psi + psi.conj().T)


def _stream_seed(seed: int, *keys) -> int:
    h = hashlib.sha256(repr((int(seed),) + tuple(int(k) for k in keys)).encode()).digest()
    return int.from_bytes(h[:8], "little")


def complex_gaussian(L, n: int, rng) -> np.ndarray:
    """``n`` columns of circular complex Gaussian noise with covariance ``L L^H``."""
    c = L.shape[0]
    z = (rng.standard_normal((c, n)) + 1j * rng.standard_normal((c, n))) / np.sqrt(2)
    return L @ z


def add_noise(ds: KSpaceDataset, psi, sigma_scale: float, seed: int) -> KSpaceDataset:
    """Add coil-correlated complex Gaussian noise to acquired samples only.

    Each blade draws from its own stream seeded by ``hash(seed, blade)`` so
    the result does not depend on processing order.
    """
    L = _check_psi(psi)
    if L.shape[0] != ds.coils:
        raise ValueError("psi dimension must equal coil count")
    if sigma_scale == 0:
        return ds
    out = ds.samples.astype(complex, copy=True)
    for b in range(ds.blades):
        m = ds.acquired_mask[b]
        rng = np.random.default_rng(_stream_seed(seed, b))
        n = complex_gaussian(L, int(m.sum()), rng) * sigma_scale
        out[b][:, m] += n
    return ds.replace(samples=out)


def apply_blade_phase(ds: KSpaceDataset, offsets) -> KSpaceDataset:
    """Multiply every sample of blade ``b`` by ``exp(1j*offsets[b])``."""
    offsets = np.asarray(offsets, dtype=float)
    if offsets.shape != (ds.blades,):
        raise ValueError(f"need {ds.blades} offsets, got {offsets.shape}")
    return ds.replace(samples=ds.samples * np.exp(1j * offsets)[:, None, None, None])


def make_noise_prescan(psi, nsamples: int, seed: int) -> NoisePrescan:
    """Noise-only prescan rows with covariance ``psi``."""
    L = _check_psi(psi)
    if nsamples < 10 * L.shape[0]:
        raise ValueError(f"nsamples must be >= {10 * L.shape[0]}")
    rng = np.random.default_rng(_stream_seed(seed, -1))
    return NoisePrescan(complex_gaussian(L, nsamples, rng))


@dataclass
class SimulationSetup:
    """Everything needed to simulate one desk-scale noisy PROPELLER slice."""

    matrix: int = 64
    coils: int = 8
    nblades: int = 18
    lines_per_blade: int = 8
    inblade_R: int = 2
    acs_lines: int = 4
    noise_fraction: float = 0.15
    correlation: float = 0.3
    blade_phase_std: float = 0.0
    prescan_samples: int = 4000
    phantom: PhantomSpec | None = None
    meta: dict = field(default_factory=lambda: {"TE_ms": 65.0, "TR_ms": 2000.0,
                                                "flip_deg": 170.0, "fov_mm": 380.0})


def simulate(setup: SimulationSetup, seed: int, with_truth: bool = True) -> KSpaceDataset:
    """Phantom -> maps -> exact k-space -> blade phases -> noise, with prescan.

    Noise is scaled so the density-compensated adjoint image has noise
    standard deviation ``noise_fraction`` times the image peak.
    """
    from .trajectory import gen_propeller
    from .encoding import dataset_weights

    import warnings
    spec = setup.phantom or PhantomSpec.random(setup.matrix, seed=seed)
    truth = make_phantom(spec)
    maps = make_coil_maps(setup.coils, setup.matrix)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        traj = gen_propeller(setup.matrix, setup.nblades, setup.lines_per_blade,
                             setup.inblade_R, setup.acs_lines)
    ds = simulate_kspace(truth, maps, traj, meta=setup.meta)
    rng = np.random.default_rng(_stream_seed(seed, -2))
    if setup.blade_phase_std > 0:
        ds = apply_blade_phase(ds, rng.normal(0, setup.blade_phase_std, ds.blades))
    psi = make_psi(setup.coils, setup.correlation, seed=_stream_seed(seed, -3) % 2**31)
    w = dataset_weights(traj)
    sigma = noise_sigma_for_fraction(w, setup.noise_fraction, peak=float(np.abs(truth).max()))
    if sigma > 0:
        ds = add_noise(ds, psi, sigma, seed)
        prescan = make_noise_prescan(psi * sigma ** 2, setup.prescan_samples, seed)
    else:
        prescan = None        # a noiseless scan has no usable noise covariance
    extras = {"truth": truth.astype(complex), "maps": maps, "psi": psi * sigma ** 2} if with_truth else {}
    return ds.replace(prescan=prescan, extras=extras,
                      meta={**ds.meta, "sigma_scale": sigma, "seed": int(seed)})


def noise_sigma_for_fraction(weights, fraction: float, peak: float = 1.0) -> float:
    """Per-sample noise level giving adjoint-image noise std ``fraction * peak``.

    For white k-space noise of std ``s`` the density-compensated adjoint has
    per-pixel std ``s * sqrt(sum(w**2))``; coil combination with unit-RSS
    maps preserves that level.
    """
    return fraction * peak / np.sqrt(np.sum(np.asarray(weights) ** 2))
