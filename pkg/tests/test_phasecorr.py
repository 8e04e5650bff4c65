import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from propeller_lab import coiltools, phantom
from propeller_lab.harness import gridded_coil_images
from propeller_lab.phasecorr import blade_phases, correct_blades

RADII = [None, 4 / 64]


@pytest.fixture(scope="module")
def clean():
    setup = phantom.SimulationSetup(matrix=64, coils=4, nblades=12, lines_per_blade=8,
                                    inblade_R=1, acs_lines=0, noise_fraction=0.0)
    return phantom.simulate(setup, seed=2)


def _combined(ds):
    return np.abs(coiltools.walsh_combine(gridded_coil_images(ds)))


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


@pytest.mark.parametrize("radius,tol", [(None, 1e-6), (4 / 64, 1e-3)])
def test_clean_data_passthrough(clean, radius, tol):
    # disk mode carries a small bias from each blade's different disk coverage
    out = correct_blades(clean, radius=radius)
    assert _rel(out.samples, clean.samples) < tol


@pytest.mark.parametrize("radius", RADII)
def test_dc_phase_agreement_after_correction(clean, radius, rng):
    bad = phantom.apply_blade_phase(clean, rng.uniform(-np.pi, np.pi, clean.blades))
    fixed = correct_blades(bad, radius=radius)
    dc = fixed.samples[:, :, 4, 32]
    disagreement = np.angle(dc @ dc[0].conj())
    assert np.abs(disagreement).max() < 1e-3


def test_single_blade_is_global_phase(clean):
    one = clean.replace(samples=clean.samples[:1] * np.exp(0.7j), acquired_mask=clean.acquired_mask[:1],
                        trajectory=type(clean.trajectory)(**{**clean.trajectory.params(),
                                                             "blade_indices": (0,)}))
    a, b = _combined(one), _combined(correct_blades(one))
    assert np.abs(a - b).max() <= 1e-10 * a.max()


@pytest.mark.parametrize("radius", RADII)
def test_idempotent(clean, radius, rng):
    bad = phantom.apply_blade_phase(clean, rng.uniform(-3, 3, clean.blades))
    once = correct_blades(bad, radius=radius)
    twice = correct_blades(once, radius=radius)
    assert _rel(twice.samples, once.samples) < 1e-6


def test_magnitude_preserved_per_blade(clean, rng):
    bad = phantom.apply_blade_phase(clean, rng.uniform(-3, 3, clean.blades))
    fixed = correct_blades(bad)
    assert np.allclose(np.abs(fixed.samples), np.abs(bad.samples), rtol=1e-12, atol=0)


@settings(max_examples=8)
@given(seed=st.integers(0, 2**31), radius=st.sampled_from(RADII))
def test_combined_magnitude_invariant(clean, seed, radius):
    offsets = np.random.default_rng(seed).uniform(-np.pi, np.pi, clean.blades)
    ref = _combined(correct_blades(clean, radius=radius))
    got = _combined(correct_blades(phantom.apply_blade_phase(clean, offsets), radius=radius))
    assert np.abs(got - ref).max() <= 1e-6 * ref.max()


def test_errors(clean):
    with pytest.raises(ValueError):
        blade_phases(clean, radius=-1.0)
    no_dc = clean.replace(samples=clean.samples * 0)
    assert not blade_phases(no_dc).any()
