import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from propeller_lab import phantom as ph
from propeller_lab.coiltools import estimate_covariance
from propeller_lab.datamodel import InvariantError

from conftest import quiet_traj

SHEPP_LOGAN_64_SUM = 506.65625     # recorded once, guards against silent drift


def test_empty_spec_is_zero():
    assert not ph.make_phantom(ph.PhantomSpec(matrix=16)).any()


def test_centered_ellipse_indicator():
    spec = ph.PhantomSpec(matrix=32, ellipses=(ph.Ellipse((0, 0), (0.5, 0.5)),), supersample=1)
    img = ph.make_phantom(spec)
    r = np.hypot(*np.meshgrid(np.arange(32) - 16, np.arange(32) - 16))
    assert np.all(img[r < 7] == 1.0)
    assert np.all(img[r > 9] == 0.0)


def test_shepp_logan_sum_frozen():
    img = ph.make_phantom(ph.PhantomSpec.shepp_logan(64))
    assert img.sum() == pytest.approx(SHEPP_LOGAN_64_SUM, abs=1e-9)
    assert img.max() == 1.0 and img.min() >= 0


@settings(max_examples=10)
@given(seed=st.integers(0, 10**6))
def test_random_phantom_range_and_fov(seed):
    img = ph.make_phantom(ph.PhantomSpec.random(64, seed=seed))
    assert img.min() >= 0 and img.max() == pytest.approx(1.0)
    r = np.hypot(*np.meshgrid(np.arange(64) - 32, np.arange(64) - 32))
    assert img[r >= 32].max() < 0.02


def test_single_coil_map_constant():
    m = ph.make_coil_maps(1, 16)
    assert np.ptp(np.abs(m)) == 0


def test_coil_maps_coverage_and_smoothness(desk_truth, desk_maps):
    rss = np.sqrt((np.abs(desk_maps) ** 2).sum(0))
    assert rss[desk_truth > 0.05].min() >= 0.05
    k = np.fft.fftshift(np.fft.fft2(desk_maps), axes=(-2, -1))
    e = np.abs(k) ** 2
    central = e[:, 16:48, 16:48].sum()
    assert 1 - central / e.sum() < 0.01


def test_simulate_zero_image():
    t = quiet_traj(16, 4, 4)
    ds = ph.simulate_kspace(np.zeros((16, 16)), ph.make_coil_maps(2, 16), t)
    assert not ds.samples.any()


def test_constant_image_is_sinc_at_dc():
    t = quiet_traj(16, 1, 4)
    ds = ph.simulate_kspace(np.ones((16, 16)), np.ones((1, 16, 16)), t)
    s = ds.samples[0, 0]
    assert s[2, 8] == pytest.approx(256)
    off = np.delete(s.ravel(), 2 * 16 + 8)
    assert np.abs(off).max() < 1e-9


def test_delta_image_flat_spectrum():
    t = quiet_traj(16, 3, 4)
    img = np.zeros((16, 16))
    img[8, 8] = 1
    ds = ph.simulate_kspace(img, np.ones((1, 16, 16)), t)
    assert np.allclose(np.abs(ds.samples), 1, atol=1e-12)


def test_simulate_shape_mismatch():
    with pytest.raises(ValueError):
        ph.simulate_kspace(np.zeros((8, 8)), np.ones((1, 16, 16)), quiet_traj(16, 2, 4))


def test_simulate_linear(rng):
    t = quiet_traj(16, 3, 4, inblade_R=2)
    maps = ph.make_coil_maps(3, 16)
    x1, x2 = rng.standard_normal((2, 16, 16))
    a = 0.7 - 1.3j
    k = lambda x: ph.simulate_kspace(x, maps, t).samples
    assert np.abs(k(a * x1 + x2) - (a * k(x1) + k(x2))).max() < 1e-10


def _noise_ds(coils, lines=32, readout=64, blades=50):
    t = quiet_traj(readout, blades, lines)
    return ph.simulate_kspace(np.zeros((readout, readout)), np.ones((coils, readout, readout)), t)


def test_add_noise_zero_scale_identity():
    ds = _noise_ds(2, 4, 8, 2)
    assert ph.add_noise(ds, np.eye(2), 0.0, 1) is ds


@pytest.mark.parametrize("off,tol", [(0.0, 0.03), (0.5, 0.05)])
def test_add_noise_covariance(off, tol):
    psi = np.array([[1, off], [off, 1]], complex)
    ds = ph.add_noise(_noise_ds(2), psi, 1.0, seed=5)   # 50*32*64 ~ 1e5 samples
    n = ds.samples.transpose(1, 0, 2, 3).reshape(2, -1)
    emp = n @ n.conj().T / n.shape[1]
    assert np.abs(emp - psi).max() < tol


def test_add_noise_preserves_zero_pattern():
    t = quiet_traj(16, 3, 8, inblade_R=2)
    ds = ph.simulate_kspace(np.zeros((16, 16)), np.ones((2, 16, 16)), t)
    noisy = ph.add_noise(ds, ph.make_psi(2), 1.0, 3)
    assert not noisy.samples[:, :, ~t.inblade_pattern].any()
    assert np.all(noisy.samples[:, :, t.inblade_pattern] != 0)


def test_add_noise_rejects_bad_psi():
    ds = _noise_ds(2, 4, 8, 2)
    with pytest.raises(ValueError):
        ph.add_noise(ds, np.array([[1, 2], [2, 1]], complex), 1.0, 0)


def test_make_psi_hermitian_pd():
    psi = ph.make_psi(8, 0.4, seed=2)
    assert np.abs(psi - psi.conj().T).max() < 1e-12
    assert np.linalg.eigvalsh(psi).min() > 0


def test_blade_phase(rng):
    t = quiet_traj(16, 4, 4)
    ds = ph.simulate_kspace(rng.standard_normal((16, 16)), ph.make_coil_maps(2, 16), t)
    assert np.array_equal(ph.apply_blade_phase(ds, np.zeros(4)).samples, ds.samples)
    neg = ph.apply_blade_phase(ds, [0, np.pi, 0, 0]).samples
    assert np.allclose(neg[1], -ds.samples[1], atol=1e-12)
    off = rng.uniform(-np.pi, np.pi, 4)
    back = ph.apply_blade_phase(ph.apply_blade_phase(ds, off), -off)
    assert np.abs(back.samples - ds.samples).max() < 1e-12


def test_prescan():
    p = ph.make_noise_prescan(np.eye(4, dtype=complex), 100_000, seed=0)
    assert np.abs(estimate_covariance(p) - np.eye(4)).max() < 0.03
    q = ph.make_noise_prescan(np.eye(4, dtype=complex), 100_000, seed=0)
    assert np.array_equal(p.samples, q.samples)
    with pytest.raises((ValueError, InvariantError)):
        ph.make_noise_prescan(np.eye(4, dtype=complex), 39, seed=0)


def test_simulate_setup_deterministic():
    setup = ph.SimulationSetup(matrix=32, coils=4, nblades=8)
    a, b = ph.simulate(setup, 7), ph.simulate(setup, 7)
    assert np.array_equal(a.samples, b.samples)
    assert np.array_equal(a.prescan.samples, b.prescan.samples)
    assert not np.array_equal(a.samples, ph.simulate(setup, 8).samples)


def test_noiseless_simulation_has_no_prescan():
    ds = ph.simulate(ph.SimulationSetup(matrix=32, coils=4, nblades=8, noise_fraction=0.0), 1)
    assert ds.prescan is None and ds.meta["sigma_scale"] == 0
