import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from propeller_lab import mppca, phantom
from propeller_lab.mppca import PatchSpec, denoise_coil_stack, mp_threshold

from conftest import quiet_traj


def _svals(x):
    return np.linalg.svd(x, compute_uv=False)


def test_all_zero_spectrum():
    assert mp_threshold(np.zeros(32), 200, 32) == (0, 0.0)


def test_empty_and_unsorted():
    with pytest.raises(ValueError):
        mp_threshold([], 3, 0)
    with pytest.raises(ValueError):
        mp_threshold([1.0, 2.0], 10, 2)


def test_pure_noise_monte_carlo():
    ranks, sig = [], []
    for seed in range(100):
        x = np.random.default_rng(seed).standard_normal((200, 32))
        r, s = mp_threshold(_svals(x), 200, 32)
        ranks.append(r)
        sig.append(s)
    assert sum(r <= 2 for r in ranks) >= 95
    assert abs(np.mean(sig) - 1) < 0.1


def test_rank3_signal_detected(rng):
    n = rng.standard_normal((200, 32))
    edge = np.sqrt(200) + np.sqrt(32)
    u, _ = np.linalg.qr(rng.standard_normal((200, 3)))
    v, _ = np.linalg.qr(rng.standard_normal((32, 3)))
    sig = u @ np.diag([100, 150, 200]) * edge @ v.T
    r, s = mp_threshold(_svals(sig + n), 200, 32)
    assert r >= 3
    assert s == pytest.approx(1, rel=0.15)


@given(seed=st.integers(0, 2**31), a=st.floats(1e-3, 1e3))
def test_threshold_scale_equivariant(seed, a):
    s = _svals(np.random.default_rng(seed).standard_normal((49, 8)))
    r1, s1 = mp_threshold(s, 49, 8)
    r2, s2 = mp_threshold(a * s, 49, 8)
    assert r1 == r2
    assert s2 == pytest.approx(a * s1, rel=1e-12)


def _coil_weights(c=8):
    return np.exp(1j * np.arange(c)) * np.linspace(0.5, 1.5, c)


@pytest.mark.parametrize("stride", [1, 7])
def test_rank1_passthrough(desk_truth, stride):
    x = _coil_weights()[:, None, None] * desk_truth[None]
    out = denoise_coil_stack(x, PatchSpec(7, 7, stride))
    assert np.linalg.norm(out - x) / np.linalg.norm(x) < 1e-8


def test_pure_noise_variance_reduced(rng):
    x = rng.standard_normal((8, 48, 48)) + 1j * rng.standard_normal((8, 48, 48))
    out, rank = denoise_coil_stack(x, PatchSpec(), return_rank=True)
    assert np.median(rank) <= 2
    assert out.var() <= 0.4 * x.var()


def test_patch_too_large(rng):
    with pytest.raises(ValueError):
        denoise_coil_stack(rng.standard_normal((4, 6, 6)), PatchSpec(7, 7))
    with pytest.raises(ValueError):
        denoise_coil_stack(rng.standard_normal((1, 16, 16)))
    with pytest.raises(ValueError):
        PatchSpec(stride=0)


def test_small_patch_warns(rng):
    with pytest.warns(RuntimeWarning):
        denoise_coil_stack(rng.standard_normal((8, 10, 10)), PatchSpec(2, 2))


@settings(max_examples=10)
@given(seed=st.integers(0, 2**31))
def test_unitary_coil_mixing_commutes(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 12, 12)) + 1j * rng.standard_normal((4, 12, 12))
    u, _ = np.linalg.qr(rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4)))
    mix = lambda a: np.einsum("ij,jyx->iyx", u, a)
    a = denoise_coil_stack(mix(x), PatchSpec(5, 5, 2))
    b = mix(denoise_coil_stack(x, PatchSpec(5, 5, 2)))
    assert np.abs(a - b).max() < 1e-8


def _blade_ds(noise, seed=4, R=2):
    setup = phantom.SimulationSetup(matrix=64, coils=8, nblades=6, lines_per_blade=16,
                                    inblade_R=R, acs_lines=4, noise_fraction=noise)
    return phantom.simulate(setup, seed)


def test_pipeline_noiseless_passthrough():
    # spatially uniform coil weights keep every blade image exactly rank 1
    truth = phantom.make_phantom(phantom.PhantomSpec.random(64, seed=4))
    maps = _coil_weights()[:, None, None] * np.ones((1, 64, 64))
    ds = phantom.simulate_kspace(truth, maps, quiet_traj(64, 6, 16, 2, 4))
    out = mppca.figure2_pipeline(ds, None)
    assert np.linalg.norm(out.samples - ds.samples) / np.linalg.norm(ds.samples) < 1e-6
    assert np.array_equal(out.acquired_mask, ds.acquired_mask)


def test_pipeline_reduces_blade_noise():
    clean = _blade_ds(0.0)
    noisy = _blade_ds(0.1)
    psi = noisy.extras["psi"]
    den = mppca.figure2_pipeline(noisy, psi)
    red = []
    for b in range(clean.blades):
        ref = mppca._blade_to_image(clean.samples[b])
        before = np.var(mppca._blade_to_image(noisy.samples[b]) - ref)
        after = np.var(mppca._blade_to_image(den.samples[b]) - ref)
        assert after < before
        red.append(1 - after / before)
    assert np.median(red) >= 0.3


def test_pipeline_keeps_skipped_lines_zero():
    noisy = _blade_ds(0.1)
    den = mppca.figure2_pipeline(noisy, noisy.extras["psi"])
    skipped = ~noisy.trajectory.inblade_pattern
    assert skipped.any()
    assert not den.samples[:, :, skipped].any()
